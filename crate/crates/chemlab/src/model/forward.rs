//! Teacher-forced forward pass with caches and the matching hand-written
//! backward pass. One code path serves training (f32 with dropout) and
//! gradient checking (f64, dropout disabled).

use ndarray::{Array2, NdFloat};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    attention, attention_bwd, dropout, dropout_bwd, layernorm, layernorm_bwd, linear,
    linear_bwd, relu, relu_bwd, softmax_xent, AttnCache, LnCache,
};
use super::{ModelConfig, ModelError, NormPlacement, Params};

fn p<'a, F>(params: &'a Params<F>, name: &str) -> &'a Array2<F> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn add_grad<F: NdFloat>(grads: &mut Params<F>, name: &str, val: Array2<F>) {
    match grads.get_mut(name) {
        Some(g) => *g += &val,
        None => {
            grads.insert(name.to_string(), val);
        }
    }
}

/// Pad a batch of id sequences to a common length.
/// Returns (flat ids row-major, per-sequence key masks, padded length).
pub fn pad_batch(seqs: &[Vec<u32>], pad: u32) -> (Vec<u32>, Vec<Vec<bool>>, usize) {
    let l = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut flat = Vec::with_capacity(seqs.len() * l);
    let mut masks = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut mask = vec![false; l];
        for (t, &id) in s.iter().enumerate() {
            mask[t] = true;
            flat.push(id);
        }
        flat.extend(std::iter::repeat(pad).take(l - s.len()));
        masks.push(mask);
    }
    (flat, masks, l)
}

/// Scaled token embedding plus sinusoidal positional encoding.
fn embed<F: NdFloat>(emb: &Array2<F>, ids: &[u32], l: usize, pe: &Array2<F>) -> Array2<F> {
    let d = emb.ncols();
    let scale = F::from((d as f64).sqrt()).unwrap();
    let mut x = Array2::zeros((ids.len(), d));
    for (row, &id) in ids.iter().enumerate() {
        let t = row % l;
        for c in 0..d {
            x[[row, c]] = emb[[id as usize, c]] * scale + pe[[t, c]];
        }
    }
    x
}

fn embed_bwd<F: NdFloat>(demb: &mut Array2<F>, ids: &[u32], dx: &Array2<F>) {
    let d = demb.ncols();
    let scale = F::from((d as f64).sqrt()).unwrap();
    for (row, &id) in ids.iter().enumerate() {
        for c in 0..d {
            demb[[id as usize, c]] = demb[[id as usize, c]] + dx[[row, c]] * scale;
        }
    }
}

struct AttnSub<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: AttnCache<F>,
    concat: Array2<F>,
}

struct FfSub<F> {
    h: Array2<F>,
    r: Array2<F>,
}

/// Residual + LN wrapper record for one sublayer.
struct Resid<F, C> {
    ln: LnCache<F>,
    sub_in: Array2<F>,
    sub: C,
    drop: Option<Array2<F>>,
}

fn resid_fwd<F: NdFloat, C>(
    placement: NormPlacement,
    x: &Array2<F>,
    g: &Array2<F>,
    b: &Array2<F>,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
    sub: impl FnOnce(&Array2<F>) -> (Array2<F>, C),
) -> (Array2<F>, Resid<F, C>) {
    match placement {
        NormPlacement::PostLn => {
            let sub_in = x.clone();
            let (s, c) = sub(&sub_in);
            let (d, mask) = dropout(s, rate, rng);
            let sum = x + &d;
            let (y, lnc) = layernorm(&sum, g, b);
            (
                y,
                Resid {
                    ln: lnc,
                    sub_in,
                    sub: c,
                    drop: mask,
                },
            )
        }
        NormPlacement::PreLn => {
            let (sub_in, lnc) = layernorm(x, g, b);
            let (s, c) = sub(&sub_in);
            let (d, mask) = dropout(s, rate, rng);
            let y = x + &d;
            (
                y,
                Resid {
                    ln: lnc,
                    sub_in,
                    sub: c,
                    drop: mask,
                },
            )
        }
    }
}

/// Returns dx for the wrapper input; LN gradients go straight into `grads`.
fn resid_bwd<F: NdFloat, C>(
    placement: NormPlacement,
    r: &Resid<F, C>,
    g: &Array2<F>,
    ln_name: &str,
    grads: &mut Params<F>,
    dy: Array2<F>,
    sub_bwd: impl FnOnce(&Array2<F>, &C, Array2<F>, &mut Params<F>) -> Array2<F>,
) -> Array2<F> {
    match placement {
        NormPlacement::PostLn => {
            let (dsum, dg, db) = layernorm_bwd(&r.ln, g, &dy);
            add_grad(grads, &format!("{ln_name}.g"), dg);
            add_grad(grads, &format!("{ln_name}.b"), db);
            let ds = dropout_bwd(dsum.clone(), &r.drop);
            let dsub_in = sub_bwd(&r.sub_in, &r.sub, ds, grads);
            dsum + dsub_in
        }
        NormPlacement::PreLn => {
            let ds = dropout_bwd(dy.clone(), &r.drop);
            let dsub_in = sub_bwd(&r.sub_in, &r.sub, ds, grads);
            let (dln_in, dg, db) = layernorm_bwd(&r.ln, g, &dsub_in);
            add_grad(grads, &format!("{ln_name}.g"), dg);
            add_grad(grads, &format!("{ln_name}.b"), db);
            dy + dln_in
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_sub_fwd<F: NdFloat>(
    params: &Params<F>,
    prefix: &str,
    q_in: &Array2<F>,
    kv_in: &Array2<F>,
    batch: usize,
    lq: usize,
    lk: usize,
    n_heads: usize,
    key_mask: &[Vec<bool>],
    causal: bool,
) -> (Array2<F>, AttnSub<F>) {
    let q = linear(q_in, p(params, &format!("{prefix}.wq")), p(params, &format!("{prefix}.bq")));
    let k = linear(kv_in, p(params, &format!("{prefix}.wk")), p(params, &format!("{prefix}.bk")));
    let v = linear(kv_in, p(params, &format!("{prefix}.wv")), p(params, &format!("{prefix}.bv")));
    let (concat, attn) = attention(&q, &k, &v, batch, lq, lk, n_heads, key_mask, causal);
    let out = linear(&concat, p(params, &format!("{prefix}.wo")), p(params, &format!("{prefix}.bo")));
    (out, AttnSub { q, k, v, attn, concat })
}

/// Returns (d_q_in, d_kv_in).
#[allow(clippy::too_many_arguments)]
fn attn_sub_bwd<F: NdFloat>(
    params: &Params<F>,
    prefix: &str,
    q_in: &Array2<F>,
    kv_in: &Array2<F>,
    c: &AttnSub<F>,
    dout: Array2<F>,
    batch: usize,
    lq: usize,
    lk: usize,
    n_heads: usize,
    grads: &mut Params<F>,
) -> (Array2<F>, Array2<F>) {
    let (dconcat, dwo, dbo) = linear_bwd(&c.concat, p(params, &format!("{prefix}.wo")), &dout);
    add_grad(grads, &format!("{prefix}.wo"), dwo);
    add_grad(grads, &format!("{prefix}.bo"), dbo);
    let (dq, dk, dv) = attention_bwd(&c.attn, &c.q, &c.k, &c.v, &dconcat, batch, lq, lk, n_heads);
    let (dq_in, dwq, dbq) = linear_bwd(q_in, p(params, &format!("{prefix}.wq")), &dq);
    let (dkv1, dwk, dbk) = linear_bwd(kv_in, p(params, &format!("{prefix}.wk")), &dk);
    let (dkv2, dwv, dbv) = linear_bwd(kv_in, p(params, &format!("{prefix}.wv")), &dv);
    add_grad(grads, &format!("{prefix}.wq"), dwq);
    add_grad(grads, &format!("{prefix}.bq"), dbq);
    add_grad(grads, &format!("{prefix}.wk"), dwk);
    add_grad(grads, &format!("{prefix}.bk"), dbk);
    add_grad(grads, &format!("{prefix}.wv"), dwv);
    add_grad(grads, &format!("{prefix}.bv"), dbv);
    (dq_in, dkv1 + dkv2)
}

fn ff_sub_fwd<F: NdFloat>(
    params: &Params<F>,
    prefix: &str,
    x: &Array2<F>,
) -> (Array2<F>, FfSub<F>) {
    let h = linear(x, p(params, &format!("{prefix}.w1")), p(params, &format!("{prefix}.b1")));
    let r = relu(&h);
    let out = linear(&r, p(params, &format!("{prefix}.w2")), p(params, &format!("{prefix}.b2")));
    (out, FfSub { h, r })
}

fn ff_sub_bwd<F: NdFloat>(
    params: &Params<F>,
    prefix: &str,
    x: &Array2<F>,
    c: &FfSub<F>,
    dout: Array2<F>,
    grads: &mut Params<F>,
) -> Array2<F> {
    let (dr, dw2, db2) = linear_bwd(&c.r, p(params, &format!("{prefix}.w2")), &dout);
    let dh = relu_bwd(&c.h, &dr);
    let (dx, dw1, db1) = linear_bwd(x, p(params, &format!("{prefix}.w1")), &dh);
    add_grad(grads, &format!("{prefix}.w1"), dw1);
    add_grad(grads, &format!("{prefix}.b1"), db1);
    add_grad(grads, &format!("{prefix}.w2"), dw2);
    add_grad(grads, &format!("{prefix}.b2"), db2);
    dx
}

pub(crate) struct EncCache<F> {
    ids: Vec<u32>,
    mask: Vec<Vec<bool>>,
    l: usize,
    batch: usize,
    layers: Vec<(Resid<F, AttnSub<F>>, Resid<F, FfSub<F>>)>,
    pub memory: Array2<F>,
    emb_drop: Option<Array2<F>>,
}

pub(crate) fn encode_fwd<F: NdFloat>(
    params: &Params<F>,
    cfg: &ModelConfig,
    src: &[Vec<u32>],
    pad: u32,
    pe: &Array2<F>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> EncCache<F> {
    let (ids, mask, l) = pad_batch(src, pad);
    let batch = src.len();
    let x0 = embed(p(params, "src_emb"), &ids, l, pe);
    let (mut x, emb_drop) = dropout(x0, cfg.dropout, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for li in 0..cfg.n_layers {
        let (y, ra) = resid_fwd(
            cfg.norm_placement,
            &x,
            p(params, &format!("enc{li}.ln1.g")),
            p(params, &format!("enc{li}.ln1.b")),
            cfg.dropout,
            rng.as_deref_mut(),
            |xin| {
                attn_sub_fwd(
                    params,
                    &format!("enc{li}.attn"),
                    xin,
                    xin,
                    batch,
                    l,
                    l,
                    cfg.n_heads,
                    &mask,
                    false,
                )
            },
        );
        let (z, rf) = resid_fwd(
            cfg.norm_placement,
            &y,
            p(params, &format!("enc{li}.ln2.g")),
            p(params, &format!("enc{li}.ln2.b")),
            cfg.dropout,
            rng.as_deref_mut(),
            |xin| ff_sub_fwd(params, &format!("enc{li}.ff"), xin),
        );
        layers.push((ra, rf));
        x = z;
    }
    EncCache {
        ids,
        mask,
        l,
        batch,
        layers,
        memory: x,
        emb_drop,
    }
}

fn encode_bwd<F: NdFloat>(
    params: &Params<F>,
    cfg: &ModelConfig,
    cache: &EncCache<F>,
    mut dmem: Array2<F>,
    grads: &mut Params<F>,
) {
    let (batch, l) = (cache.batch, cache.l);
    for li in (0..cfg.n_layers).rev() {
        let (ra, rf) = &cache.layers[li];
        dmem = resid_bwd(
            cfg.norm_placement,
            rf,
            p(params, &format!("enc{li}.ln2.g")),
            &format!("enc{li}.ln2"),
            grads,
            dmem,
            |xin, c, ds, grads| ff_sub_bwd(params, &format!("enc{li}.ff"), xin, c, ds, grads),
        );
        dmem = resid_bwd(
            cfg.norm_placement,
            ra,
            p(params, &format!("enc{li}.ln1.g")),
            &format!("enc{li}.ln1"),
            grads,
            dmem,
            |xin, c, ds, grads| {
                let (dq_in, dkv_in) = attn_sub_bwd(
                    params,
                    &format!("enc{li}.attn"),
                    xin,
                    xin,
                    c,
                    ds,
                    batch,
                    l,
                    l,
                    cfg.n_heads,
                    grads,
                );
                dq_in + dkv_in
            },
        );
    }
    let dx0 = dropout_bwd(dmem, &cache.emb_drop);
    let mut demb = Array2::zeros(p(params, "src_emb").dim());
    embed_bwd(&mut demb, &cache.ids, &dx0);
    add_grad(grads, "src_emb", demb);
}

#[allow(clippy::type_complexity)]
pub(crate) struct DecCache<F> {
    ids: Vec<u32>,
    l: usize,
    batch: usize,
    layers: Vec<(
        Resid<F, AttnSub<F>>,
        Resid<F, AttnSub<F>>,
        Resid<F, FfSub<F>>,
    )>,
    pub out: Array2<F>,
    emb_drop: Option<Array2<F>>,
}

pub(crate) fn decode_fwd<F: NdFloat>(
    params: &Params<F>,
    cfg: &ModelConfig,
    dec_in: &[Vec<u32>],
    pad: u32,
    memory: &Array2<F>,
    src_mask: &[Vec<bool>],
    src_l: usize,
    pe: &Array2<F>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> DecCache<F> {
    let (ids, mask, l) = pad_batch(dec_in, pad);
    let batch = dec_in.len();
    let x0 = embed(p(params, "tgt_emb"), &ids, l, pe);
    let (mut x, emb_drop) = dropout(x0, cfg.dropout, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for li in 0..cfg.n_layers {
        let (y, rs) = resid_fwd(
            cfg.norm_placement,
            &x,
            p(params, &format!("dec{li}.ln1.g")),
            p(params, &format!("dec{li}.ln1.b")),
            cfg.dropout,
            rng.as_deref_mut(),
            |xin| {
                attn_sub_fwd(
                    params,
                    &format!("dec{li}.self"),
                    xin,
                    xin,
                    batch,
                    l,
                    l,
                    cfg.n_heads,
                    &mask,
                    true,
                )
            },
        );
        let (z, rc) = resid_fwd(
            cfg.norm_placement,
            &y,
            p(params, &format!("dec{li}.ln2.g")),
            p(params, &format!("dec{li}.ln2.b")),
            cfg.dropout,
            rng.as_deref_mut(),
            |xin| {
                attn_sub_fwd(
                    params,
                    &format!("dec{li}.cross"),
                    xin,
                    memory,
                    batch,
                    l,
                    src_l,
                    cfg.n_heads,
                    src_mask,
                    false,
                )
            },
        );
        let (w, rf) = resid_fwd(
            cfg.norm_placement,
            &z,
            p(params, &format!("dec{li}.ln3.g")),
            p(params, &format!("dec{li}.ln3.b")),
            cfg.dropout,
            rng.as_deref_mut(),
            |xin| ff_sub_fwd(params, &format!("dec{li}.ff"), xin),
        );
        layers.push((rs, rc, rf));
        x = w;
    }
    DecCache {
        ids,
        l,
        batch,
        layers,
        out: x,
        emb_drop,
    }
}

/// Returns the gradient flowing back into the encoder memory.
#[allow(clippy::too_many_arguments)]
fn decode_bwd<F: NdFloat>(
    params: &Params<F>,
    cfg: &ModelConfig,
    cache: &DecCache<F>,
    memory: &Array2<F>,
    src_l: usize,
    mut dx: Array2<F>,
    grads: &mut Params<F>,
) -> Array2<F> {
    let (batch, l) = (cache.batch, cache.l);
    let mut dmem = Array2::zeros(memory.dim());
    for li in (0..cfg.n_layers).rev() {
        let (rs, rc, rf) = &cache.layers[li];
        dx = resid_bwd(
            cfg.norm_placement,
            rf,
            p(params, &format!("dec{li}.ln3.g")),
            &format!("dec{li}.ln3"),
            grads,
            dx,
            |xin, c, ds, grads| ff_sub_bwd(params, &format!("dec{li}.ff"), xin, c, ds, grads),
        );
        let dmem_layer = std::cell::RefCell::new(Array2::zeros(memory.dim()));
        dx = resid_bwd(
            cfg.norm_placement,
            rc,
            p(params, &format!("dec{li}.ln2.g")),
            &format!("dec{li}.ln2"),
            grads,
            dx,
            |xin, c, ds, grads| {
                let (dq_in, dkv) = attn_sub_bwd(
                    params,
                    &format!("dec{li}.cross"),
                    xin,
                    memory,
                    c,
                    ds,
                    batch,
                    l,
                    src_l,
                    cfg.n_heads,
                    grads,
                );
                *dmem_layer.borrow_mut() += &dkv;
                dq_in
            },
        );
        dmem += &dmem_layer.into_inner();
        dx = resid_bwd(
            cfg.norm_placement,
            rs,
            p(params, &format!("dec{li}.ln1.g")),
            &format!("dec{li}.ln1"),
            grads,
            dx,
            |xin, c, ds, grads| {
                let (dq_in, dkv_in) = attn_sub_bwd(
                    params,
                    &format!("dec{li}.self"),
                    xin,
                    xin,
                    c,
                    ds,
                    batch,
                    l,
                    l,
                    cfg.n_heads,
                    grads,
                );
                dq_in + dkv_in
            },
        );
    }
    let dx0 = dropout_bwd(dx, &cache.emb_drop);
    let mut demb = Array2::zeros(p(params, "tgt_emb").dim());
    embed_bwd(&mut demb, &cache.ids, &dx0);
    add_grad(grads, "tgt_emb", demb);
    dmem
}

/// Teacher-forced loss and full parameter gradients for one batch.
/// Targets must carry BOS...EOS; position t is supervised by token t+1.
/// Returns (mean loss over supervised tokens, gradients, token count).
pub fn loss_and_grads<F: NdFloat>(
    params: &Params<F>,
    cfg: &ModelConfig,
    src: &[Vec<u32>],
    tgt: &[Vec<u32>],
    pad: u32,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(F, Params<F>, usize), ModelError> {
    if src.len() != tgt.len() || src.is_empty() {
        return Err(ModelError::ShapeError("batch lists must pair up".into()));
    }
    if tgt.iter().any(|t| t.len() < 2) {
        return Err(ModelError::ShapeError("target needs BOS and EOS".into()));
    }
    let pe = super::positional_encoding::<F>(cfg.max_len, cfg.d_model);
    let enc = encode_fwd(params, cfg, src, pad, &pe, rng.as_deref_mut());
    let dec_in: Vec<Vec<u32>> = tgt.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
    let dec = decode_fwd(
        params,
        cfg,
        &dec_in,
        pad,
        &enc.memory,
        &enc.mask,
        enc.l,
        &pe,
        rng.as_deref_mut(),
    );
    let logits = linear(&dec.out, p(params, "out.w"), p(params, "out.b"));
    let mut labels = Vec::with_capacity(dec.batch * dec.l);
    for t_seq in tgt {
        for t in 0..dec.l {
            labels.push((t + 1 < t_seq.len()).then(|| t_seq[t + 1] as usize));
        }
    }
    let count = labels.iter().flatten().count();
    let (loss, dlogits) = softmax_xent(&logits, &labels);

    let mut grads = Params::new();
    let (ddec, dow, dob) = linear_bwd(&dec.out, p(params, "out.w"), &dlogits);
    add_grad(&mut grads, "out.w", dow);
    add_grad(&mut grads, "out.b", dob);
    let dmem = decode_bwd(params, cfg, &dec, &enc.memory, enc.l, ddec, &mut grads);
    encode_bwd(params, cfg, &enc, dmem, &mut grads);
    // parameters untouched by this batch still need zero entries so the
    // optimizer sees a full gradient set
    for (name, val) in params {
        grads
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(val.dim()));
    }
    Ok((loss, grads, count))
}

/// Teacher-forced logits in eval mode (no dropout). Row b*Lt + t holds the
/// distribution over the token at target position t+1.
pub fn teacher_forced_logits<F: NdFloat>(
    params: &Params<F>,
    cfg: &ModelConfig,
    src: &[Vec<u32>],
    tgt: &[Vec<u32>],
    pad: u32,
) -> (Array2<F>, usize) {
    let pe = super::positional_encoding::<F>(cfg.max_len, cfg.d_model);
    let enc = encode_fwd(params, cfg, src, pad, &pe, None);
    let dec_in: Vec<Vec<u32>> = tgt.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
    let dec = decode_fwd(
        params, cfg, &dec_in, pad, &enc.memory, &enc.mask, enc.l, &pe, None,
    );
    let logits = linear(&dec.out, p(params, "out.w"), p(params, "out.b"));
    (logits, dec.l)
}
