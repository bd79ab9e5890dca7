//! Property-prediction probes: CSV ingestion, random/scaffold splitting,
//! descriptor featurization (pooled encoder states, ECFP, random uniform),
//! and ridge / logistic probes scored by RMSE / AUROC over folds.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprints::{ecfp, FingerprintConfig};
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::{pooled_descriptors, Pooling};
use crate::molgraph::{
    canonical_smiles, murcko_scaffold, parse_smiles, randomized_smiles, strip_fragments,
    validate_molecule,
};
use crate::par::par_map;
use crate::tokenizer::{tokenize, SeqKind, Vocabulary};

#[derive(Debug, Clone, Error)]
pub enum ProbeError {
    #[error("missing column {0:?} in CSV header")]
    MissingColumn(String),
    #[error("dataset empty after parsing and deduplication")]
    EmptyDataset,
    #[error("too few scaffold groups ({0}) for a 3-way split")]
    TooFewScaffolds(usize),
    #[error("fold contains a single class; AUROC undefined")]
    DegenerateLabels,
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Random,
    Scaffold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyDataset {
    /// (canonical SMILES, target) records, deduplicated by canonical form
    pub records: Vec<(String, f64)>,
    pub task_type: TaskType,
    pub split_strategy: SplitStrategy,
    pub name: String,
    /// rows dropped because the SMILES failed to parse or validate
    pub dropped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub dataset: String,
    pub descriptor: String,
    pub task_type: TaskType,
    /// "rmse" or "auroc"
    pub metric: String,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    /// unbiased (n-1) standard deviation over folds
    pub sd: f64,
    pub checkpoint_step: Option<u64>,
}

/// Load a CSV property dataset. Unparseable SMILES rows are dropped and
/// counted; molecules are deduplicated by canonical form. Length limits
/// from the corpus filter do NOT apply here.
pub fn ingest_csv(
    path: &Path,
    smiles_column: &str,
    target_column: &str,
    task_type: TaskType,
    split_strategy: SplitStrategy,
    name: &str,
) -> Result<PropertyDataset, ProbeError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ProbeError::Io(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| ProbeError::Io(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize, ProbeError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ProbeError::MissingColumn(name.to_string()))
    };
    let s_idx = col(smiles_column)?;
    let t_idx = col(target_column)?;
    let mut seen = BTreeMap::new();
    let mut dropped = 0usize;
    let mut order = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| ProbeError::Io(e.to_string()))?;
        let smiles = row.get(s_idx).unwrap_or("").trim();
        let target: f64 = match row.get(t_idx).unwrap_or("").trim().parse() {
            Ok(v) => v,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        if !target.is_finite()
            || (task_type == TaskType::Classification && target != 0.0 && target != 1.0)
        {
            dropped += 1;
            continue;
        }
        let canonical = match parse_smiles(smiles) {
            Ok(m) => {
                let m = strip_fragments(&m);
                if m.atoms.is_empty() || !validate_molecule(&m).is_valid() {
                    dropped += 1;
                    continue;
                }
                canonical_smiles(&m)
            }
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        if let std::collections::btree_map::Entry::Vacant(e) = seen.entry(canonical.clone()) {
            e.insert(target);
            order.push(canonical);
        }
    }
    if order.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let records = order
        .into_iter()
        .map(|c| {
            let t = seen[&c];
            (c, t)
        })
        .collect();
    Ok(PropertyDataset {
        records,
        task_type,
        split_strategy,
        name: name.to_string(),
        dropped,
    })
}

/// Index sets for one train/validation/test fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Produce `n_folds` 80/10/10 splits. Random: seeded shuffle per fold.
/// Scaffold: group by Murcko scaffold and assign groups greedily,
/// largest first, train then validation then test; the per-fold seed
/// shuffles ties between equal-sized groups.
pub fn split(
    ds: &PropertyDataset,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<Fold>, ProbeError> {
    assert!(n_folds >= 2, "need at least 2 folds");
    let n = ds.records.len();
    let mut folds = Vec::with_capacity(n_folds);
    match ds.split_strategy {
        SplitStrategy::Random => {
            for f in 0..n_folds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(f as u64));
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                let n_train = (n as f64 * 0.8).round() as usize;
                let n_val = (n as f64 * 0.1).round() as usize;
                folds.push(Fold {
                    train: idx[..n_train].to_vec(),
                    validation: idx[n_train..n_train + n_val].to_vec(),
                    test: idx[n_train + n_val..].to_vec(),
                });
            }
        }
        SplitStrategy::Scaffold => {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, (smiles, _)) in ds.records.iter().enumerate() {
                let m = parse_smiles(smiles).expect("canonical SMILES parses");
                let scaf = murcko_scaffold(&m);
                let key = if scaf.atoms.is_empty() {
                    String::new()
                } else {
                    canonical_smiles(&scaf)
                };
                groups.entry(key).or_default().push(i);
            }
            if groups.len() < 3 {
                return Err(ProbeError::TooFewScaffolds(groups.len()));
            }
            for f in 0..n_folds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(f as u64));
                let mut ordered: Vec<&Vec<usize>> = groups.values().collect();
                ordered.shuffle(&mut rng);
                ordered.sort_by_key(|g| std::cmp::Reverse(g.len()));
                let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
                let n_train = (n as f64 * 0.8).round() as usize;
                let n_val = (n as f64 * 0.1).round() as usize;
                for g in ordered {
                    if train.len() + g.len() <= n_train {
                        train.extend_from_slice(g);
                    } else if val.len() + g.len() <= n_val || val.is_empty() {
                        val.extend_from_slice(g);
                    } else {
                        test.extend_from_slice(g);
                    }
                }
                if val.is_empty() || test.is_empty() {
                    return Err(ProbeError::TooFewScaffolds(groups.len()));
                }
                folds.push(Fold {
                    train,
                    validation: val,
                    test,
                });
            }
        }
    }
    Ok(folds)
}

/// Where descriptor vectors come from.
pub enum FeatureSource<'a> {
    /// pooled encoder states over one randomized SMILES per molecule
    Model {
        ckpt: &'a Checkpoint,
        pooling: Pooling,
        vocab: &'a Vocabulary,
        seed: u64,
    },
    /// 2,048-bit ECFP with radius 2
    Ecfp,
    /// seeded uniform [0, 1) vectors of width 2,048
    RandomUniform { seed: u64 },
}

impl FeatureSource<'_> {
    pub fn label(&self) -> String {
        match self {
            FeatureSource::Model { pooling, ckpt, .. } => {
                format!("model_step{}_{:?}", ckpt.step, pooling).to_lowercase()
            }
            FeatureSource::Ecfp => "ecfp_r2_2048".to_string(),
            FeatureSource::RandomUniform { .. } => "random_uniform_2048".to_string(),
        }
    }

    pub fn checkpoint_step(&self) -> Option<u64> {
        match self {
            FeatureSource::Model { ckpt, .. } => Some(ckpt.step),
            _ => None,
        }
    }
}

/// One descriptor row per dataset record, in record order.
pub fn featurize(ds: &PropertyDataset, source: &FeatureSource) -> Array2<f64> {
    let n = ds.records.len();
    match source {
        FeatureSource::Model {
            ckpt,
            pooling,
            vocab,
            seed,
        } => {
            let src: Vec<Vec<u32>> = ds
                .records
                .iter()
                .enumerate()
                .map(|(i, (smiles, _))| {
                    let m = parse_smiles(smiles).expect("canonical SMILES parses");
                    let rand = randomized_smiles(&m, seed.wrapping_add(i as u64));
                    // fall back to the canonical string if the randomized
                    // form contains tokens outside the vocabulary
                    let toks = tokenize(&rand, vocab, SeqKind::Source)
                        .or_else(|_| tokenize(smiles, vocab, SeqKind::Source));
                    toks.expect("dataset tokens in vocabulary").ids
                })
                .collect();
            let rows = pooled_descriptors(&ckpt.params, &ckpt.cfg, &src, vocab.pad(), *pooling);
            let d = rows[0].len();
            let mut out = Array2::zeros((n, d));
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    out[[i, j]] = v as f64;
                }
            }
            out
        }
        FeatureSource::Ecfp => {
            let cfg = FingerprintConfig::ecfp_default();
            let rows = par_map(&ds.records, |(smiles, _)| {
                let m = parse_smiles(smiles).expect("canonical SMILES parses");
                ecfp(&m, cfg)
            });
            let mut out = Array2::zeros((n, cfg.width));
            for (i, fp) in rows.iter().enumerate() {
                for j in fp.set_bits() {
                    out[[i, j]] = 1.0;
                }
            }
            out
        }
        FeatureSource::RandomUniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Array2::from_shape_simple_fn((n, 2048), || rng.gen::<f64>())
        }
    }
}

/// Standardize columns by train-part mean/SD; constant columns pass
/// through unchanged.
fn standardize(x: &Array2<f64>, train: &[usize]) -> Array2<f64> {
    let d = x.ncols();
    let nt = train.len() as f64;
    let mut mean = Array1::zeros(d);
    for &i in train {
        mean += &x.row(i);
    }
    mean /= nt;
    let mut var = Array1::<f64>::zeros(d);
    for &i in train {
        let diff = &x.row(i) - &mean;
        var += &diff.mapv(|v| v * v);
    }
    var /= nt;
    let sd = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        row -= &mean;
        row /= &sd;
    }
    out
}

fn take_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Solve (A + λI) w = b with A = Xᵀ X via Cholesky. When samples are
/// fewer than features, solve the n×n dual system instead.
fn ridge_fit(x: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> (Array1<f64>, f64) {
    let y_mean = y.mean().unwrap();
    let yc = y - y_mean;
    let (n, d) = x.dim();
    let x_mean = x.mean_axis(Axis(0)).unwrap();
    let xc = x - &x_mean.view().insert_axis(Axis(0));
    let w = if n <= d {
        // dual: α = (X Xᵀ + λI)^{-1} y, w = Xᵀ α
        let mut k = xc.dot(&xc.t());
        for i in 0..n {
            k[[i, i]] += lambda;
        }
        let alpha = cholesky_solve(&k, &yc);
        xc.t().dot(&alpha)
    } else {
        let mut a = xc.t().dot(&xc);
        for i in 0..d {
            a[[i, i]] += lambda;
        }
        let b = xc.t().dot(&yc);
        cholesky_solve(&a, &b)
    };
    let intercept = y_mean - x_mean.dot(&w);
    (w, intercept)
}

/// Cholesky factorization then forward/back substitution. The matrix must
/// be symmetric positive definite (ridge term guarantees it).
fn cholesky_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                l[[i, i]] = s.max(1e-12).sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // L z = b
    let mut z = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * z[k];
        }
        z[i] = s / l[[i, i]];
    }
    // Lᵀ w = z
    let mut w = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[[k, i]] * w[k];
        }
        w[i] = s / l[[i, i]];
    }
    w
}

pub fn rmse(pred: &Array1<f64>, truth: &Array1<f64>) -> f64 {
    let d = pred - truth;
    (d.mapv(|v| v * v).mean().unwrap()).sqrt()
}

/// Rank-based AUROC (Mann-Whitney U with midranks for ties).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64, ProbeError> {
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ProbeError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1.0)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// L2-regularized logistic regression trained by full-batch gradient
/// descent on standardized features.
fn logistic_fit(x: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> (Array1<f64>, f64) {
    let (n, d) = x.dim();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0f64;
    // the L2 term contributes curvature λ, so the step size must shrink
    // with λ for gradient descent to stay stable
    let rate = 0.5 / (1.0 + lambda);
    for _ in 0..300 {
        let z = x.dot(&w) + b;
        let p = z.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let err = &p - y;
        let gw = x.t().dot(&err) / n as f64 + lambda * &w;
        let gb = err.sum() / n as f64;
        w -= &(gw * rate);
        b -= rate * gb;
    }
    (w, b)
}

const LAMBDA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];

/// Fit a probe per fold, choosing the penalty on the validation part from
/// a fixed log grid, and score the test part.
pub fn fit_score(
    features: &Array2<f64>,
    ds: &PropertyDataset,
    folds: &[Fold],
    descriptor: &str,
    checkpoint_step: Option<u64>,
) -> Result<ProbeResult, ProbeError> {
    let y_all: Array1<f64> = ds.records.iter().map(|(_, t)| *t).collect();
    let fold_scores: Vec<Result<f64, ProbeError>> = par_map(folds, |fold| {
        let xs = standardize(features, &fold.train);
        let xtr = take_rows(&xs, &fold.train);
        let xva = take_rows(&xs, &fold.validation);
        let xte = take_rows(&xs, &fold.test);
        let pick = |idx: &[usize]| -> Array1<f64> { idx.iter().map(|&i| y_all[i]).collect() };
        let (ytr, yva, yte) = (pick(&fold.train), pick(&fold.validation), pick(&fold.test));
        match ds.task_type {
            TaskType::Regression => {
                let best = LAMBDA_GRID
                    .iter()
                    .map(|&lam| {
                        let (w, b) = ridge_fit(&xtr, &ytr, lam);
                        let val_rmse = rmse(&(xva.dot(&w) + b), &yva);
                        (lam, val_rmse)
                    })
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap()
                    .0;
                let (w, b) = ridge_fit(&xtr, &ytr, best);
                Ok(rmse(&(xte.dot(&w) + b), &yte))
            }
            TaskType::Classification => {
                if ytr.iter().all(|&v| v == ytr[0]) {
                    return Err(ProbeError::DegenerateLabels);
                }
                let best = LAMBDA_GRID
                    .iter()
                    .map(|&lam| {
                        let (w, b) = logistic_fit(&xtr, &ytr, lam);
                        let scores: Vec<f64> = (xva.dot(&w) + b).to_vec();
                        let a = auroc(&scores, yva.as_slice().unwrap()).unwrap_or(0.5);
                        (lam, a)
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap()
                    .0;
                let (w, b) = logistic_fit(&xtr, &ytr, best);
                let scores: Vec<f64> = (xte.dot(&w) + b).to_vec();
                auroc(&scores, yte.as_slice().unwrap())
            }
        }
    });
    let fold_scores: Vec<f64> = fold_scores.into_iter().collect::<Result<_, _>>()?;
    let k = fold_scores.len() as f64;
    let mean = fold_scores.iter().sum::<f64>() / k;
    let sd = if fold_scores.len() > 1 {
        (fold_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ProbeResult {
        dataset: ds.name.clone(),
        descriptor: descriptor.to_string(),
        task_type: ds.task_type,
        metric: match ds.task_type {
            TaskType::Regression => "rmse".to_string(),
            TaskType::Classification => "auroc".to_string(),
        },
        fold_scores,
        mean,
        sd,
        checkpoint_step,
    })
}

/// Table-style CSV summary over several probe results.
pub fn results_to_csv(results: &[ProbeResult]) -> String {
    let mut out = String::from("dataset,descriptor,metric,mean,sd,folds,checkpoint_step\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{}\n",
            r.dataset,
            r.descriptor,
            r.metric,
            r.mean,
            r.sd,
            r.fold_scores.len(),
            r.checkpoint_step.map_or(String::new(), |s| s.to_string()),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(rows: &[(&str, f64)]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "smiles,target").unwrap();
        for (s, t) in rows {
            writeln!(f, "{s},{t}").unwrap();
        }
        f
    }

    fn regression_ds(n: usize) -> PropertyDataset {
        // synthetic molecules with a simple computable target
        let corpus = crate::synth::random_corpus(&crate::synth::SynthConfig::default(), n, 11);
        let records = corpus
            .into_iter()
            .map(|c| {
                let m = parse_smiles(&c).unwrap();
                let target = m.atoms.len() as f64;
                (canonical_smiles(&m), target)
            })
            .collect();
        PropertyDataset {
            records,
            task_type: TaskType::Regression,
            split_strategy: SplitStrategy::Random,
            name: "synthetic".into(),
            dropped: 0,
        }
    }

    #[test]
    fn ingest_dedups_and_drops() {
        let f = write_csv(&[("CCO", 1.0), ("OCC", 2.0), ("C(", 3.0), ("CCN", 0.5)]);
        let ds = ingest_csv(
            f.path(),
            "smiles",
            "target",
            TaskType::Regression,
            SplitStrategy::Random,
            "t",
        )
        .unwrap();
        // OCC canonicalizes to the same molecule as CCO; C( fails to parse
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.dropped, 1);
        // first occurrence's target wins
        assert_eq!(ds.records[0].1, 1.0);

        let err = ingest_csv(
            f.path(),
            "nope",
            "target",
            TaskType::Regression,
            SplitStrategy::Random,
            "t",
        );
        assert!(matches!(err, Err(ProbeError::MissingColumn(_))));

        let empty = write_csv(&[("C(", 1.0)]);
        let err = ingest_csv(
            empty.path(),
            "smiles",
            "target",
            TaskType::Regression,
            SplitStrategy::Random,
            "t",
        );
        assert!(matches!(err, Err(ProbeError::EmptyDataset)));
    }

    #[test]
    fn random_split_is_partition() {
        let ds = regression_ds(100);
        let folds = split(&ds, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            let mut all: Vec<usize> = f
                .train
                .iter()
                .chain(&f.validation)
                .chain(&f.test)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
            assert_eq!(f.train.len(), 80);
            assert_eq!(f.validation.len(), 10);
        }
        assert_ne!(folds[0].train, folds[1].train, "folds differ by seed offset");
    }

    #[test]
    fn scaffold_split_groups_and_errors() {
        // twelve ring scaffolds with three chain variants each, plus acyclics
        let mut records = Vec::new();
        for ring in 3..9usize {
            for core in [
                format!("C1{}1", "C".repeat(ring - 1)),
                format!("C1{}N1", "C".repeat(ring - 2)),
            ] {
                for i in 0..3 {
                    records.push((format!("{}{}", core, "C".repeat(i + 1)), (ring % 2) as f64));
                }
            }
        }
        for i in 0..4 {
            records.push((format!("CC{}", "C".repeat(i)), 0.0));
        }
        let records: Vec<(String, f64)> = records
            .into_iter()
            .map(|(s, t)| (canonical_smiles(&parse_smiles(&s).unwrap()), t))
            .collect();
        let mut seen = std::collections::HashSet::new();
        let records: Vec<_> = records.into_iter().filter(|(s, _)| seen.insert(s.clone())).collect();
        let n = records.len();
        let ds = PropertyDataset {
            records,
            task_type: TaskType::Classification,
            split_strategy: SplitStrategy::Scaffold,
            name: "scaf".into(),
            dropped: 0,
        };
        let folds = split(&ds, 5, 0).unwrap();
        for f in &folds {
            let mut all: Vec<usize> =
                f.train.iter().chain(&f.validation).chain(&f.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            // no scaffold group spans two parts: groups were assigned whole
            let scaf_of = |i: usize| {
                let m = parse_smiles(&ds.records[i].0).unwrap();
                let s = murcko_scaffold(&m);
                if s.atoms.is_empty() { String::new() } else { canonical_smiles(&s) }
            };
            let train_scafs: std::collections::HashSet<String> =
                f.train.iter().map(|&i| scaf_of(i)).collect();
            for &i in f.validation.iter().chain(&f.test) {
                assert!(!train_scafs.contains(&scaf_of(i)));
            }
        }

        // single scaffold: degenerate
        let one = PropertyDataset {
            records: vec![
                ("Cc1ccccc1".into(), 1.0),
                ("CCc1ccccc1".into(), 0.0),
            ],
            task_type: TaskType::Classification,
            split_strategy: SplitStrategy::Scaffold,
            name: "one".into(),
            dropped: 0,
        };
        assert!(matches!(split(&one, 2, 0), Err(ProbeError::TooFewScaffolds(_))));
    }

    #[test]
    fn featurize_widths_and_determinism() {
        let ds = regression_ds(8);
        let r1 = featurize(&ds, &FeatureSource::RandomUniform { seed: 5 });
        let r2 = featurize(&ds, &FeatureSource::RandomUniform { seed: 5 });
        assert_eq!(r1, r2);
        assert_eq!(r1.dim(), (8, 2048));
        assert!(r1.iter().all(|&v| (0.0..1.0).contains(&v)));
        let e = featurize(&ds, &FeatureSource::Ecfp);
        assert_eq!(e.dim(), (8, 2048));
        assert!(e.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(e.sum() > 0.0);
    }

    #[test]
    fn auroc_hand_computed_and_tied() {
        // scores 0.1 0.4 0.35 0.8 labels 0 0 1 1 -> AUROC 0.75
        let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        // perfect separation
        let a = auroc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(a, 1.0);
        // all-tied scores -> 0.5 by midranks
        let a = auroc(&[0.5, 0.5, 0.5, 0.5], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(ProbeError::DegenerateLabels)
        ));
    }

    #[test]
    fn ridge_recovers_linear_target() {
        // y = 2 x0 - 3 x1 + 1, noiseless
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_simple_fn((60, 2), || rng.gen::<f64>());
        let y: Array1<f64> = x
            .axis_iter(Axis(0))
            .map(|r| 2.0 * r[0] - 3.0 * r[1] + 1.0)
            .collect();
        let (w, b) = ridge_fit(&x, &y, 1e-9);
        let pred = x.dot(&w) + b;
        assert!(rmse(&pred, &y) < 1e-6);
        // dual path (n < d) agrees with primal on predictions
        let xt = Array2::from_shape_simple_fn((5, 8), || rng.gen::<f64>());
        let yt: Array1<f64> = xt.axis_iter(Axis(0)).map(|r| r[0] - r[3]).collect();
        let (wd, bd) = ridge_fit(&xt, &yt, 1e-6);
        let pred = xt.dot(&wd) + bd;
        assert!(rmse(&pred, &yt) < 1e-3);
    }

    #[test]
    fn fit_score_regression_and_null_classification() {
        // regression: target perfectly linear in ECFP bit counts won't be
        // exact, so use target = feature-linear function of random matrix
        let ds = regression_ds(80);
        let feats = featurize(&ds, &FeatureSource::RandomUniform { seed: 9 });
        // overwrite targets with a linear function of the features
        let mut ds = ds;
        for (i, rec) in ds.records.iter_mut().enumerate() {
            rec.1 = feats.row(i).iter().take(10).sum::<f64>();
        }
        let folds = split(&ds, 5, 1).unwrap();
        let res = fit_score(&feats, &ds, &folds, "random", None).unwrap();
        assert_eq!(res.fold_scores.len(), 5);
        assert_eq!(res.metric, "rmse");
        let spread = ds.records.iter().map(|r| r.1).fold(0.0f64, f64::max);
        assert!(res.mean < 0.2 * spread, "rmse {} vs spread {spread}", res.mean);

        // classification with labels independent of features: AUROC near 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cds = regression_ds(120);
        cds.task_type = TaskType::Classification;
        for rec in cds.records.iter_mut() {
            rec.1 = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        }
        let feats = featurize(&cds, &FeatureSource::RandomUniform { seed: 3 });
        let folds = split(&cds, 5, 2).unwrap();
        let res = fit_score(&feats, &cds, &folds, "random", None).unwrap();
        assert_eq!(res.metric, "auroc");
        assert!((res.mean - 0.5).abs() < 0.15, "null auroc {}", res.mean);
        assert!(res.sd >= 0.0);
        let csv = results_to_csv(&[res]);
        assert!(csv.starts_with("dataset,descriptor,metric"));
        assert!(csv.lines().count() == 2);
    }
}
