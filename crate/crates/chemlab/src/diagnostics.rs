//! Sequence-level and checkpoint-level diagnostics: perfect / partial /
//! masked accuracy, per-token teacher-forced accuracy, chirality-mistake
//! classification, fingerprint-similarity curves over checkpoint streams,
//! threshold extraction, and Welch's t-test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::fingerprints::{tanimoto, KeyKind};
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::greedy_decode_batch;
use crate::model::forward::teacher_forced_logits;
use crate::molgraph::{parse_smiles, validate_molecule};
use crate::par::par_map;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DiagnosticsError {
    #[error("prediction and target lists differ in length")]
    LengthMismatch,
    #[error("degenerate sample for Welch's t-test: {0}")]
    DegenerateSample(String),
}

/// Tokens up to and including the first EOS; everything after is ignored
/// ("except those after end-of-string tokens").
fn effective(seq: &[u32], eos: u32) -> &[u32] {
    match seq.iter().position(|&t| t == eos) {
        Some(i) => &seq[..=i],
        None => seq,
    }
}

/// Fraction of pairs translated exactly through EOS.
pub fn perfect_accuracy(
    preds: &[Vec<u32>],
    targets: &[Vec<u32>],
    eos: u32,
) -> Result<f64, DiagnosticsError> {
    if preds.len() != targets.len() {
        return Err(DiagnosticsError::LengthMismatch);
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let exact = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| effective(p, eos) == effective(t, eos))
        .count();
    Ok(exact as f64 / preds.len() as f64)
}

/// Per-pair fraction of target positions (through EOS) where the prediction
/// matches, then the mean over pairs. Missing positions count as misses.
pub fn partial_accuracy(preds: &[Vec<u32>], targets: &[Vec<u32>], eos: u32) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let t = effective(t, eos);
        let p = effective(p, eos);
        let hits = t
            .iter()
            .enumerate()
            .filter(|&(i, &tok)| p.get(i) == Some(&tok))
            .count();
        sum += hits as f64 / t.len() as f64;
    }
    sum / preds.len() as f64
}

/// Perfect accuracy with positions whose TARGET token equals `masked`
/// excluded from the equality check. Lengths must still agree.
pub fn masked_perfect_accuracy(
    preds: &[Vec<u32>],
    targets: &[Vec<u32>],
    masked: u32,
    eos: u32,
) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let ok = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| {
            let t = effective(t, eos);
            let p = effective(p, eos);
            p.len() == t.len()
                && t.iter()
                    .zip(p.iter())
                    .all(|(&tv, &pv)| tv == masked || tv == pv)
        })
        .count();
    ok as f64 / preds.len() as f64
}

/// One teacher-forced pass; per-vocabulary-token accuracy of the argmax
/// prediction at positions holding that token. Tokens with zero occurrences
/// are omitted.
pub fn charwise_tf_accuracy(
    ckpt: &Checkpoint,
    pairs: &[(Vec<u32>, Vec<u32>)],
    pad: u32,
) -> BTreeMap<u32, f64> {
    let mut hits: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    // chunk to keep padding overhead and memory bounded
    for chunk in pairs.chunks(64) {
        let src: Vec<Vec<u32>> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let tgt: Vec<Vec<u32>> = chunk.iter().map(|(_, t)| t.clone()).collect();
        let (logits, lt) = teacher_forced_logits(&ckpt.params, &ckpt.cfg, &src, &tgt, pad);
        for (b, t_seq) in tgt.iter().enumerate() {
            for t in 0..t_seq.len() - 1 {
                let label = t_seq[t + 1];
                let row = logits.row(b * lt + t);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i as u32)
                    .unwrap();
                let e = hits.entry(label).or_insert((0, 0));
                e.1 += 1;
                if argmax == label {
                    e.0 += 1;
                }
            }
        }
    }
    hits.into_iter()
        .map(|(tok, (c, n))| (tok, c as f64 / n as f64))
        .collect()
}

/// Counts behind the three-way chirality classification plus directional
/// swap tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChiralityReport {
    pub correct: u64,
    pub chiral_only: u64,
    pub other: u64,
    /// positions where the target holds "@" but the prediction holds "@@"
    pub at_mistaken_for_atat: u64,
    /// positions where the target holds "@@" but the prediction holds "@"
    pub atat_mistaken_for_at: u64,
}

impl ChiralityReport {
    pub fn total(&self) -> u64 {
        self.correct + self.chiral_only + self.other
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        let n = self.total() as f64;
        (
            self.correct as f64 / n,
            self.chiral_only as f64 / n,
            self.other as f64 / n,
        )
    }
}

/// Classify each pair: `correct` when exact; `chiral_only` when not exact
/// but equal after mapping both chiral tokens to one placeholder in both
/// sequences; `other` otherwise.
pub fn chirality_classification(
    preds: &[Vec<u32>],
    targets: &[Vec<u32>],
    at: u32,
    atat: u32,
    eos: u32,
) -> ChiralityReport {
    let mut report = ChiralityReport::default();
    let collapse = |seq: &[u32]| -> Vec<u32> {
        seq.iter()
            .map(|&t| if t == atat { at } else { t })
            .collect()
    };
    for (p, t) in preds.iter().zip(targets) {
        let pe = effective(p, eos);
        let te = effective(t, eos);
        if pe == te {
            report.correct += 1;
        } else if collapse(pe) == collapse(te) {
            report.chiral_only += 1;
        } else {
            report.other += 1;
        }
        for (i, &tv) in te.iter().enumerate() {
            let Some(&pv) = pe.get(i) else { continue };
            if tv == at && pv == atat {
                report.at_mistaken_for_atat += 1;
            } else if tv == atat && pv == at {
                report.atat_mistaken_for_at += 1;
            }
        }
    }
    report
}

/// Mean Tanimoto per fingerprint kind per checkpoint. The molecule set is
/// the intersection over ALL checkpoints of validly decoded predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub steps: Vec<u64>,
    /// means[kind_index][checkpoint_index]
    pub means: Vec<Vec<f64>>,
    pub kind_names: Vec<String>,
    pub omitted: usize,
    /// false when the intersection of valid decodes is empty
    pub defined: bool,
}

pub fn similarity_curve(
    checkpoints: &[&Checkpoint],
    pairs: &[(Vec<u32>, String)],
    kinds: &[(String, KeyKind)],
    vocab: &Vocabulary,
    max_len: usize,
) -> SimilarityCurve {
    let src: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| s.clone()).collect();
    // decode every checkpoint, parse predictions, keep valid molecules
    let decoded: Vec<Vec<Option<crate::molgraph::Molecule>>> = checkpoints
        .iter()
        .map(|ckpt| {
            let preds = greedy_decode_batch(
                &ckpt.params,
                &ckpt.cfg,
                &src,
                vocab.pad(),
                vocab.bos(),
                vocab.eos(),
                max_len,
            );
            par_map(&preds, |p| {
                let s = crate::tokenizer::detokenize_ids(p, vocab).ok()?;
                let m = parse_smiles(&s).ok()?;
                validate_molecule(&m).is_valid().then_some(m)
            })
        })
        .collect();
    let keep: Vec<usize> = (0..pairs.len())
        .filter(|&i| decoded.iter().all(|d| d[i].is_some()))
        .collect();
    let omitted = pairs.len() - keep.len();
    if keep.is_empty() {
        return SimilarityCurve {
            steps: checkpoints.iter().map(|c| c.step).collect(),
            means: vec![vec![]; kinds.len()],
            kind_names: kinds.iter().map(|(n, _)| n.clone()).collect(),
            omitted,
            defined: false,
        };
    }
    let targets: Vec<crate::molgraph::Molecule> = keep
        .iter()
        .map(|&i| parse_smiles(&pairs[i].1).expect("target SMILES must parse"))
        .collect();
    let mut means = vec![Vec::with_capacity(checkpoints.len()); kinds.len()];
    for d in &decoded {
        for (ki, (_, kind)) in kinds.iter().enumerate() {
            let sims = par_map(&keep.iter().copied().zip(&targets).collect::<Vec<_>>(), |(i, tgt)| {
                let pred = d[*i].as_ref().unwrap();
                tanimoto(&kind.fingerprint(pred), &kind.fingerprint(tgt)).unwrap()
            });
            means[ki].push(sims.iter().sum::<f64>() / sims.len() as f64);
        }
    }
    SimilarityCurve {
        steps: checkpoints.iter().map(|c| c.step).collect(),
        means,
        kind_names: kinds.iter().map(|(n, _)| n.clone()).collect(),
        omitted,
        defined: true,
    }
}

/// One evaluation snapshot in a training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub perfect_accuracy: f64,
    pub partial_accuracy: f64,
    /// mean Tanimoto per fingerprint kind over validly decoded predictions
    pub tanimoto: BTreeMap<String, f64>,
    /// perfect accuracy with each token masked, keyed by token string
    pub masked_accuracy: BTreeMap<String, f64>,
    /// teacher-forced per-token accuracy, keyed by token string
    pub tf_accuracy: BTreeMap<String, f64>,
    pub chirality: ChiralityReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsCurve {
    pub records: Vec<MetricsRecord>,
}

impl MetricsCurve {
    pub fn push(&mut self, r: MetricsRecord) {
        if let Some(last) = self.records.last() {
            assert!(r.step > last.step, "steps must be strictly increasing");
        }
        self.records.push(r);
    }
}

/// Smallest recorded step whose perfect accuracy reaches the threshold.
pub fn step_threshold(curve: &MetricsCurve, threshold: f64) -> Option<u64> {
    curve
        .records
        .iter()
        .find(|r| r.perfect_accuracy >= threshold)
        .map(|r| r.step)
}

/// Two-sided Welch's t-test: (t, Satterthwaite dof, p).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64), DiagnosticsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DiagnosticsError::DegenerateSample(
            "need at least two observations per sample".into(),
        ));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a), var(b));
    if va == 0.0 && vb == 0.0 {
        if ma == mb {
            // identical constant samples: no evidence of difference
            return Ok((0.0, (a.len() + b.len() - 2) as f64, 1.0));
        }
        return Err(DiagnosticsError::DegenerateSample(
            "both samples have zero variance".into(),
        ));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| DiagnosticsError::DegenerateSample(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, dof, p))
}

/// Bonferroni scaling for k simultaneous comparisons.
pub fn bonferroni(p: f64, k: usize) -> f64 {
    (p * k as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EOS: u32 = 1;

    fn seqs(xs: &[&[u32]]) -> Vec<Vec<u32>> {
        xs.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn perfect_accuracy_basics() {
        let t = seqs(&[&[0, 5, 6, 1], &[0, 7, 1]]);
        assert_eq!(perfect_accuracy(&t, &t, EOS).unwrap(), 1.0);
        // differing only after EOS still counts as correct
        let p = seqs(&[&[0, 5, 6, 1, 9, 9], &[0, 7, 1, 3]]);
        assert_eq!(perfect_accuracy(&p, &t, EOS).unwrap(), 1.0);
        let p = seqs(&[&[0, 5, 5, 1, 9], &[0, 7, 1]]);
        assert_eq!(perfect_accuracy(&p, &t, EOS).unwrap(), 0.5);
        // 1 of 4 exact
        let t4 = seqs(&[&[0, 5, 1], &[0, 6, 1], &[0, 7, 1], &[0, 8, 1]]);
        let p4 = seqs(&[&[0, 5, 1], &[0, 9, 1], &[0, 9, 1], &[0, 9, 1]]);
        assert_eq!(perfect_accuracy(&p4, &t4, EOS).unwrap(), 0.25);
        assert_eq!(
            perfect_accuracy(&p4[..2], &t4, EOS),
            Err(DiagnosticsError::LengthMismatch)
        );
    }

    #[test]
    fn partial_accuracy_basics() {
        let t = seqs(&[&[5, 6, 7, 1]]);
        assert_eq!(partial_accuracy(&t, &t, EOS), 1.0);
        // 3 of 4 positions match
        let p = seqs(&[&[5, 6, 9, 1]]);
        assert_eq!(partial_accuracy(&p, &t, EOS), 0.75);
        // empty prediction: all positions missed
        let p = seqs(&[&[]]);
        assert_eq!(partial_accuracy(&p, &t, EOS), 0.0);
    }

    #[test]
    fn masked_accuracy_definition() {
        const AT: u32 = 30;
        const ATAT: u32 = 31;
        // wrong only at @<->@@ swaps where the target side is @
        let t = seqs(&[&[0, AT, 5, 1], &[0, 6, AT, 1]]);
        let p = seqs(&[&[0, ATAT, 5, 1], &[0, 6, ATAT, 1]]);
        assert_eq!(masked_perfect_accuracy(&p, &t, AT, EOS), 1.0);
        assert_eq!(perfect_accuracy(&p, &t, EOS).unwrap(), 0.0);
        // masking a token absent from targets leaves perfect accuracy
        assert_eq!(masked_perfect_accuracy(&p, &t, 29, EOS), 0.0);
        let t2 = seqs(&[&[0, ATAT, 5, 1]]);
        let p2 = seqs(&[&[0, AT, 5, 1]]);
        assert_eq!(masked_perfect_accuracy(&p2, &t2, ATAT, EOS), 1.0);
    }

    #[test]
    fn chirality_classification_rules() {
        const AT: u32 = 30;
        const ATAT: u32 = 31;
        let t = seqs(&[
            &[0, AT, 5, 1],   // swapped chiral marker only
            &[0, 6, 7, 1],    // exact
            &[0, AT, 8, 1],   // chiral swap AND wrong token -> other
        ]);
        let p = seqs(&[
            &[0, ATAT, 5, 1],
            &[0, 6, 7, 1],
            &[0, ATAT, 9, 1],
        ]);
        let r = chirality_classification(&p, &t, AT, ATAT, EOS);
        assert_eq!((r.correct, r.chiral_only, r.other), (1, 1, 1));
        assert_eq!(r.at_mistaken_for_atat, 2);
        assert_eq!(r.atat_mistaken_for_at, 0);
        let (a, b, c) = r.fractions();
        assert!((a + b + c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_threshold_first_crossing() {
        let mut curve = MetricsCurve::default();
        for (step, acc) in [(100u64, 0.1), (200, 0.75), (300, 0.6), (400, 0.8)] {
            curve.push(MetricsRecord {
                step,
                loss: 0.0,
                perfect_accuracy: acc,
                partial_accuracy: acc,
                tanimoto: BTreeMap::new(),
                masked_accuracy: BTreeMap::new(),
                tf_accuracy: BTreeMap::new(),
                chirality: ChiralityReport::default(),
            });
        }
        // non-monotone curve: still the FIRST crossing
        assert_eq!(step_threshold(&curve, 0.7), Some(200));
        assert_eq!(step_threshold(&curve, 0.8), Some(400));
        assert_eq!(step_threshold(&curve, 0.95), None);
        // monotone in threshold
        assert!(step_threshold(&curve, 0.7) <= step_threshold(&curve, 0.8));
    }

    #[test]
    fn welch_closed_form_oracle() {
        // hand evaluation: a = 1..5, b = 2..6; equal variances 2.5, n = 5
        // t = (3 - 4) / sqrt(2.5/5 + 2.5/5) = -1, dof = 8
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let (t, dof, p) = welch_t_test(&a, &b).unwrap();
        assert!((t - (-1.0)).abs() < 1e-12);
        assert!((dof - 8.0).abs() < 1e-9);
        assert!(p > 0.3 && p < 0.4, "p = {p}");
        // symmetry: swapping flips t, keeps p
        let (t2, _, p2) = welch_t_test(&b, &a).unwrap();
        assert!((t2 - 1.0).abs() < 1e-12);
        assert!((p - p2).abs() < 1e-12);
        // identical samples
        let (t3, _, p3) = welch_t_test(&a, &a).unwrap();
        assert_eq!(t3, 0.0);
        assert_eq!(p3, 1.0);
    }

    #[test]
    fn welch_degenerate_cases() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        let (t, _, p) = welch_t_test(&[3.0, 3.0], &[3.0, 3.0]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
    }

    #[test]
    fn bonferroni_caps_at_one() {
        assert_eq!(bonferroni(0.01, 4), 0.04);
        assert_eq!(bonferroni(0.5, 4), 1.0);
    }
}
