//! Differentiable building blocks: affine maps, layer normalization, ReLU,
//! dropout, scaled dot-product attention, and fused softmax cross-entropy.
//! Each forward returns the cache its hand-written backward needs; backward
//! functions return gradients in the same shapes as their inputs.

use ndarray::{Array1, Array2, Axis, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::par::par_map_range;

pub fn linear<F: NdFloat>(x: &Array2<F>, w: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Returns (dx, dw, db).
pub fn linear_bwd<F: NdFloat>(
    x: &Array2<F>,
    w: &Array2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub fn layernorm<F: NdFloat>(
    x: &Array2<F>,
    g: &Array2<F>,
    b: &Array2<F>,
) -> (Array2<F>, LnCache<F>) {
    let eps = F::from(1e-5).unwrap();
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mu = row.sum() / F::from(row.len()).unwrap();
        row.mapv_inplace(|v| v - mu);
        let var = row.fold(F::zero(), |acc, &v| acc + v * v) / F::from(row.len()).unwrap();
        *s = (var + eps).sqrt().recip();
        let si = *s;
        row.mapv_inplace(|v| v * si);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

/// Returns (dx, dg, db).
pub fn layernorm_bwd<F: NdFloat>(
    cache: &LnCache<F>,
    g: &Array2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let dg = (dy * &cache.xhat)
        .sum_axis(Axis(0))
        .insert_axis(Axis(0));
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = F::from(dy.ncols()).unwrap();
    let mut dx = dxhat;
    for ((mut row, xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let m1 = row.sum() / d;
        let m2 = row
            .iter()
            .zip(xh.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            / d;
        for (v, &x) in row.iter_mut().zip(xh.iter()) {
            *v = s * (*v - m1 - x * m2);
        }
    }
    (dx, dg, db)
}

pub fn relu<F: NdFloat>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_bwd<F: NdFloat>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

/// Inverted dropout; the cached mask already carries the 1/(1-p) scale.
/// `None` rate or rng means identity (eval / correctness-check mode).
pub fn dropout<F: NdFloat>(
    x: Array2<F>,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<F>, Option<Array2<F>>) {
    let Some(rng) = rng else { return (x, None) };
    if rate == 0.0 {
        return (x, None);
    }
    let keep = F::from(1.0 / (1.0 - rate)).unwrap();
    let mask = Array2::from_shape_fn(x.dim(), |_| {
        if rng.gen::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    });
    let y = &x * &mask;
    (y, Some(mask))
}

pub fn dropout_bwd<F: NdFloat>(dy: Array2<F>, mask: &Option<Array2<F>>) -> Array2<F> {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

/// Per-(batch, head) softmax matrices saved for the backward pass.
pub struct AttnCache<F> {
    pub a: Vec<Vec<Array2<F>>>,
}

/// Multi-head scaled dot-product attention over projected Q, K, V laid out
/// as (batch * len, d_model) with heads in contiguous column blocks.
/// `key_mask[b][j]` marks usable key positions; `causal` additionally hides
/// keys after the query index. Returns the concatenated head outputs.
#[allow(clippy::too_many_arguments)]
pub fn attention<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    batch: usize,
    lq: usize,
    lk: usize,
    n_heads: usize,
    key_mask: &[Vec<bool>],
    causal: bool,
) -> (Array2<F>, AttnCache<F>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = F::from(1.0 / (dh as f64).sqrt()).unwrap();
    let neg = F::from(-1e30).unwrap();
    let per_batch = par_map_range(batch, |bi| {
        let qb = q.slice(ndarray::s![bi * lq..(bi + 1) * lq, ..]);
        let kb = k.slice(ndarray::s![bi * lk..(bi + 1) * lk, ..]);
        let vb = v.slice(ndarray::s![bi * lk..(bi + 1) * lk, ..]);
        let mut out = Array2::<F>::zeros((lq, d));
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let qh = qb.slice(cols);
            let kh = kb.slice(cols);
            let vh = vb.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            for i in 0..lq {
                for j in 0..lk {
                    let hidden = !key_mask[bi][j] || (causal && j > i);
                    if hidden {
                        scores[[i, j]] = neg;
                    }
                }
            }
            softmax_rows(&mut scores);
            let oh = scores.dot(&vh);
            out.slice_mut(cols).assign(&oh);
            heads.push(scores);
        }
        (out, heads)
    });
    let mut out = Array2::<F>::zeros((batch * lq, d));
    let mut a = Vec::with_capacity(batch);
    for (bi, (ob, heads)) in per_batch.into_iter().enumerate() {
        out.slice_mut(ndarray::s![bi * lq..(bi + 1) * lq, ..])
            .assign(&ob);
        a.push(heads);
    }
    (out, AttnCache { a })
}

/// Returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<F: NdFloat>(
    cache: &AttnCache<F>,
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    dout: &Array2<F>,
    batch: usize,
    lq: usize,
    lk: usize,
    n_heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = F::from(1.0 / (dh as f64).sqrt()).unwrap();
    let per_batch = par_map_range(batch, |bi| {
        let qb = q.slice(ndarray::s![bi * lq..(bi + 1) * lq, ..]);
        let kb = k.slice(ndarray::s![bi * lk..(bi + 1) * lk, ..]);
        let vb = v.slice(ndarray::s![bi * lk..(bi + 1) * lk, ..]);
        let dob = dout.slice(ndarray::s![bi * lq..(bi + 1) * lq, ..]);
        let mut dq = Array2::<F>::zeros((lq, d));
        let mut dk = Array2::<F>::zeros((lk, d));
        let mut dv = Array2::<F>::zeros((lk, d));
        for h in 0..n_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let qh = qb.slice(cols);
            let kh = kb.slice(cols);
            let vh = vb.slice(cols);
            let doh = dob.slice(cols);
            let a = &cache.a[bi][h];
            let da = doh.dot(&vh.t());
            // softmax backward: ds = a ⊙ (da − rowsum(da ⊙ a))
            let mut ds = da;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row
                    .iter()
                    .zip(arow.iter())
                    .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
                for (s, &av) in row.iter_mut().zip(arow.iter()) {
                    *s = av * (*s - dot);
                }
            }
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
        }
        (dq, dk, dv)
    });
    let mut dq = Array2::<F>::zeros((batch * lq, d));
    let mut dk = Array2::<F>::zeros((batch * lk, d));
    let mut dv = Array2::<F>::zeros((batch * lk, d));
    for (bi, (dqb, dkb, dvb)) in per_batch.into_iter().enumerate() {
        dq.slice_mut(ndarray::s![bi * lq..(bi + 1) * lq, ..])
            .assign(&dqb);
        dk.slice_mut(ndarray::s![bi * lk..(bi + 1) * lk, ..])
            .assign(&dkb);
        dv.slice_mut(ndarray::s![bi * lk..(bi + 1) * lk, ..])
            .assign(&dvb);
    }
    (dq, dk, dv)
}

pub fn softmax_rows<F: NdFloat>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Mean cross-entropy over rows whose label is Some; fused with softmax.
/// Returns (loss, dlogits); dlogits is already divided by the count.
pub fn softmax_xent<F: NdFloat>(
    logits: &Array2<F>,
    labels: &[Option<usize>],
) -> (F, Array2<F>) {
    assert_eq!(logits.nrows(), labels.len());
    let count = labels.iter().flatten().count();
    assert!(count > 0, "no supervised positions in batch");
    let inv = F::from(1.0 / count as f64).unwrap();
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss = F::zero();
    for (i, label) in labels.iter().enumerate() {
        let Some(t) = label else { continue };
        let row = logits.row(i);
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for &v in row.iter() {
            sum = sum + (v - max).exp();
        }
        let log_z = sum.ln() + max;
        loss = loss + (log_z - row[*t]);
        let mut drow = dlogits.row_mut(i);
        for (j, dv) in drow.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *dv = (p - if j == *t { F::one() } else { F::zero() }) * inv;
        }
    }
    (loss * inv, dlogits)
}
