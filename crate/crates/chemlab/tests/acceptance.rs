//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line. Tolerances are pinned in the assertions.
//!
//! Criteria 6 and 7 share one training run and are checked together; all
//! other criteria are independent. Run with `--nocapture` to see the
//! PASS lines for successful criteria.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chemlab::diagnostics::{
    chirality_classification, masked_perfect_accuracy, partial_accuracy, perfect_accuracy,
    step_threshold, welch_t_test,
};
use chemlab::model::checkpoint::Checkpoint;
use chemlab::model::decode::Pooling;
use chemlab::model::forward::loss_and_grads;
use chemlab::model::{init_params, InitScheme, ModelConfig, NormPlacement};
use chemlab::molgraph::{canonical_smiles, parse_smiles, validate, write_smiles};
use chemlab::par::par_map;
use chemlab::probe::{
    featurize, fit_score, split, FeatureSource, PropertyDataset, SplitStrategy, TaskType,
};
use chemlab::synth::{random_corpus, SynthConfig};
use chemlab::tokenizer::Vocabulary;
use chemlab::train::{
    build_corpus, tokenize_pairs, train, OptimizerConfig, SamplingPlan, SamplingStrategy,
    TrainOptions,
};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "{}: criterion {n} ({name}) — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

/// 1. Stereo round trip: canonical(parse(randomized(m))) == canonical(m)
/// over ≥ 1,000 molecules × 10 seeds.
#[test]
fn criterion_01_stereo_round_trip() {
    let cfg = SynthConfig::default();
    let corpus = random_corpus(&cfg, 1000, 101);
    let failures: usize = par_map(&corpus, |smiles| {
        let m = parse_smiles(smiles).unwrap();
        let canon = canonical_smiles(&m);
        (0..10u64)
            .filter(|&seed| {
                let r = chemlab::molgraph::randomized_smiles(&m, seed);
                match parse_smiles(&r) {
                    Ok(rm) => canonical_smiles(&rm) != canon,
                    Err(_) => true,
                }
            })
            .count()
    })
    .into_iter()
    .sum();
    verdict(
        1,
        "stereo round trip",
        failures == 0,
        &format!("{failures} failures over {} molecules x 10 seeds", corpus.len()),
    );
}

/// 2. Canonicalization oracle: canonical SMILES identical across ALL atom
/// orderings for every fixture with ≤ 8 heavy atoms; enantiomers separate.
#[test]
fn criterion_02_canonicalization_oracle() {
    let fixtures = [
        "CCO",
        "C=CC#N",
        "OC(=O)C",
        "C1CC1",
        "C1CCC1O",
        "c1ccoc1",
        "N[C@@H](C)C(=O)O", // alanine: 6 heavy atoms + chiral center
        "F[C@H](Cl)Br",
        "CC(C)C=O",
        "C1=CC=CC=C1",
        "O=S(=O)(O)O",
        "C[N+](C)(C)C",
    ];
    let mut checked = 0usize;
    let mut bad = 0usize;
    for smiles in fixtures {
        let m = parse_smiles(smiles).unwrap();
        let n = m.atoms.len();
        assert!(m.heavy_atom_count() <= 8, "fixture too large: {smiles}");
        let canon = canonical_smiles(&m);
        let mut order: Vec<usize> = (0..n).collect();
        // exhaustive permutation enumeration (Heap's algorithm)
        let mut c = vec![0usize; n];
        let mut check = |order: &[usize]| {
            checked += 1;
            let s = write_smiles(&m, order);
            let ok = parse_smiles(&s)
                .map(|pm| canonical_smiles(&pm) == canon)
                .unwrap_or(false);
            if !ok {
                bad += 1;
            }
        };
        check(&order);
        let mut i = 1;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    order.swap(0, i);
                } else {
                    order.swap(c[i], i);
                }
                check(&order);
                c[i] += 1;
                i = 1;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
    }
    // enantiomer pairs must canonicalize differently
    let enantiomers = [
        ("N[C@@H](C)C(=O)O", "N[C@H](C)C(=O)O"),
        ("F[C@H](Cl)Br", "F[C@@H](Cl)Br"),
    ];
    let separated = enantiomers.iter().all(|(a, b)| {
        canonical_smiles(&parse_smiles(a).unwrap()) != canonical_smiles(&parse_smiles(b).unwrap())
    });
    verdict(
        2,
        "canonicalization oracle",
        bad == 0 && separated,
        &format!("{checked} orderings checked, {bad} mismatches; enantiomers separated: {separated}"),
    );
}

/// 3. Validity gate: 50 hand-labelled grammar/valence/kekulization cases.
#[test]
fn criterion_03_validity_gate() {
    let valid = [
        "C",
        "CC",
        "C=C",
        "C#N",
        "CCO",
        "O",
        "N",
        "CN(C)C",
        "CC(C)(C)C",
        "C1CC1",
        "C1CCCCC1",
        "O=C=O",
        "FC(F)(F)F",
        "ClCCl",
        "CCS",
        "S(=O)(=O)(O)O",
        "c1ccccc1",
        "c1ccncc1",
        "c1cc[nH]c1",
        "c1ccoc1",
        "c1ccc2ccccc2c1",
        "N[C@@H](C)C(=O)O",
        "C/C=C/C",
        "[NH4+]",
        "CC(=O)[O-]",
    ];
    let invalid = [
        // grammar
        "C(",
        ")C",
        "C(C",
        "C=",
        "[C",
        "C1CC",
        "C%1",
        "C((C))O(",
        "=C",
        "C..C",
        // valence
        "C(C)(C)(C)(C)C",
        "N(C)(C)(C)C",
        "O(C)(C)C",
        "F=C",
        "Cl(C)C",
        "O#C",
        "C=C=C=C=C(C)(C)C#C", // interior carbon over 4 bonds
        "FF(F)F",
        "[CH5]",
        "N#N#N",
        // kekulization / aromaticity
        "C11",
        "c1cccc1",
        "c1ccccc1c",
        "cc",
        "c1ccccc2",
    ];
    let mut wrong = Vec::new();
    for s in valid {
        if !validate(s).is_valid() {
            wrong.push(format!("{s} judged invalid"));
        }
    }
    for s in invalid {
        if validate(s).is_valid() {
            wrong.push(format!("{s} judged valid"));
        }
    }
    verdict(
        3,
        "validity gate",
        wrong.is_empty(),
        &format!("{} / 50 classified correctly {:?}", 50 - wrong.len(), wrong),
    );
}

/// 4. Gradient correctness: full-model finite differences at d_model 16,
/// double precision, 20 samples per parameter tensor, rel tol 1e-4.
#[test]
fn criterion_04_gradient_correctness() {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 16,
        d_ff: 32,
        n_layers: 2,
        n_heads: 2,
        dropout: 0.0,
        norm_placement: NormPlacement::PostLn,
        init_scheme: InitScheme::HeNormal,
        max_len: 24,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pad = 2u32;
    // ragged batch exercises the padding path
    let src: Vec<Vec<u32>> = vec![
        (0..7).map(|_| rng.gen_range(3..11)).collect(),
        (0..4).map(|_| rng.gen_range(3..11)).collect(),
    ];
    let tgt: Vec<Vec<u32>> = vec![
        {
            let mut t = vec![0u32];
            t.extend((0..6).map(|_| rng.gen_range(3..11)));
            t.push(1);
            t
        },
        {
            let mut t = vec![0u32];
            t.extend((0..3).map(|_| rng.gen_range(3..11)));
            t.push(1);
            t
        },
    ];
    let params = init_params::<f64>(&cfg, 3).unwrap();
    let (_, grads, _) = loss_and_grads(&params, &cfg, &src, &tgt, pad, None).unwrap();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0u32;
    for (name, p) in &params {
        let g = &grads[name];
        let total = p.len();
        for k in 0..20.min(total) {
            let flat = (k * 7919) % total;
            let (r, c) = (flat / p.ncols(), flat % p.ncols());
            let eps = 1e-5;
            let mut pp = params.clone();
            pp.get_mut(name).unwrap()[[r, c]] += eps;
            let (lp, _, _) = loss_and_grads(&pp, &cfg, &src, &tgt, pad, None).unwrap();
            let mut pm = params.clone();
            pm.get_mut(name).unwrap()[[r, c]] -= eps;
            let (lm, _, _) = loss_and_grads(&pm, &cfg, &src, &tgt, pad, None).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            let ana = g[[r, c]];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            if (num.abs() > 1e-7 || ana.abs() > 1e-7) && rel > worst.0 {
                worst = (rel, format!("{name}[{r},{c}]"));
            }
            checked += 1;
        }
    }
    verdict(
        4,
        "gradient correctness",
        worst.0 < 1e-4,
        &format!("{checked} coordinates, worst rel err {:.3e} at {}", worst.0, worst.1),
    );
}

/// 5. Metric algebra on 1,000 random prediction/target sets:
/// perfect ≤ partial, masked ≥ perfect, chirality fractions sum to 1.
#[test]
fn criterion_05_metric_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (eos, at, atat) = (2u32, 7u32, 8u32);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let n = rng.gen_range(1..30);
        let mut preds = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let lp = rng.gen_range(1..20);
            let lt = rng.gen_range(1..20);
            preds.push((0..lp).map(|_| rng.gen_range(0..10u32)).collect::<Vec<_>>());
            targets.push((0..lt).map(|_| rng.gen_range(0..10u32)).collect::<Vec<_>>());
        }
        let perfect = perfect_accuracy(&preds, &targets, eos).unwrap();
        let partial = partial_accuracy(&preds, &targets, eos);
        if perfect > partial + 1e-12 {
            violations += 1;
        }
        for tok in 0..10u32 {
            if masked_perfect_accuracy(&preds, &targets, tok, eos) + 1e-12 < perfect {
                violations += 1;
            }
        }
        let rep = chirality_classification(&preds, &targets, at, atat, eos);
        let (a, b, c) = rep.fractions();
        if (a + b + c - 1.0).abs() > 1e-12 {
            violations += 1;
        }
    }
    verdict(
        5,
        "metric algebra",
        violations == 0,
        &format!("{violations} violations over 1000 random cases"),
    );
}

/// 6 + 7. Scaled Figure-1 and chiral-lag phenomena from one training run
/// on a chirality-enriched desk corpus (d_model 128, 2+2 layers).
#[test]
fn criterion_06_07_desk_training_phenomena() {
    // 50,000 filtered molecules, all well under the 20-heavy-atom cap;
    // short strings keep steps cheap enough for tens of thousands of
    // updates on one core, which is what canonicalization needs
    let synth = SynthConfig {
        max_heavy: 10,
        ..SynthConfig::default()
    };
    let raw = random_corpus(&synth, 50_000, 11);
    let plan = SamplingPlan {
        strategy: SamplingStrategy::ChiralityEnriched,
        achiral_keep_prob: 0.6,
        test_fraction: 0.0,
        ..SamplingPlan::default()
    };
    let corpus = build_corpus(&raw, &plan, 1).unwrap();
    let vocab = Vocabulary::smiles_default();
    let train_tok = tokenize_pairs(&corpus.train, &vocab).unwrap();
    // evaluation set: training pairs whose targets carry at least two
    // stereocenters (length >= 12). Perfect accuracy then requires every
    // chirality bit to be right — the slowest thing the model learns —
    // while its mistakes are @/@@ substitutions that leave partial
    // accuracy and (stereo-blind) ECFP Tanimoto high. This is the window
    // where the Figure-1 phenomenon lives.
    let stereo_rich: Vec<&chemlab::train::Pair> = corpus
        .train
        .iter()
        .filter(|p| {
            let (a, b) = chemlab::train::chiral_token_counts(&p.canonical);
            a + b >= 2 && p.canonical.len() >= 12
        })
        .collect();
    let stride = (stereo_rich.len() / 256).max(1);
    let eval_pairs: Vec<chemlab::train::Pair> = stereo_rich
        .iter()
        .step_by(stride)
        .take(256)
        .map(|p| (*p).clone())
        .collect();
    let test_tok = tokenize_pairs(&eval_pairs, &vocab).unwrap();
    let test_canon: Vec<String> = eval_pairs.iter().map(|p| p.canonical.clone()).collect();
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.dropout = 0.0;
    cfg.max_len = 160;
    let opt = OptimizerConfig {
        warmup_steps: 1000,
        token_budget_per_step: 2500,
        accumulation: 1,
        max_steps: 50_000,
        early_stop_perfect_accuracy: 0.58,
        ..OptimizerConfig::default()
    };
    let opts = TrainOptions {
        eval_interval: 500,
        eval_size: 256,
        max_decode_len: 96,
        snapshot_thresholds: vec![0.5],
        ..TrainOptions::default()
    };
    let run_dir = std::env::temp_dir().join("chemlab_acceptance_c67");
    let _ = std::fs::remove_dir_all(&run_dir);
    std::fs::create_dir_all(&run_dir).unwrap();
    let result = train(
        &train_tok,
        &test_tok,
        &test_canon,
        &vocab,
        &cfg,
        &opt,
        &opts,
        Some(&run_dir),
    )
    .unwrap();

    // criterion 6: some checkpoint has partial ≥ 0.95 and mean Tanimoto
    // ≥ 0.85 while perfect ≤ 0.6
    let hit = result.curve.records.iter().find(|r| {
        r.partial_accuracy >= 0.95
            && r.tanimoto.get("ecfp_r2_2048").copied().unwrap_or(0.0) >= 0.85
            && r.perfect_accuracy <= 0.6
    });
    verdict(
        6,
        "scaled Figure-1 phenomenon",
        hit.is_some(),
        &hit
            .map(|r| {
                format!(
                    "step {}: partial {:.3}, tanimoto {:.3}, perfect {:.3}",
                    r.step,
                    r.partial_accuracy,
                    r.tanimoto["ecfp_r2_2048"],
                    r.perfect_accuracy
                )
            })
            .unwrap_or_else(|| "no qualifying checkpoint".into()),
    );

    // criterion 7: at the first record with perfect ≥ 0.5, the
    // teacher-forced accuracy of "@" and "@@" is below the median
    let first = result
        .curve
        .records
        .iter()
        .find(|r| r.perfect_accuracy >= 0.5);
    let (pass7, detail7) = match first {
        None => (false, "perfect accuracy never reached 0.5".to_string()),
        Some(r) => {
            let mut accs: Vec<f64> = r.tf_accuracy.values().copied().collect();
            accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = accs[accs.len() / 2];
            let at = r.tf_accuracy.get("@").copied();
            let atat = r.tf_accuracy.get("@@").copied();
            match (at, atat) {
                (Some(a), Some(b)) => (
                    a < median && b < median,
                    format!(
                        "step {}: tf(@) {:.3}, tf(@@) {:.3}, median {:.3}",
                        r.step, a, b, median
                    ),
                ),
                _ => (false, "chiral tokens absent from evaluation set".into()),
            }
        }
    };
    verdict(7, "scaled chiral-lag phenomenon", pass7, &detail7);
}

/// 8. Pre-LN vs post-LN: mean step-0.5 over 3 seeds each, with Welch's
/// t-test reported either way.
#[test]
fn criterion_08_pre_ln_direction() {
    let synth = SynthConfig {
        max_heavy: 14,
        ..SynthConfig::default()
    };
    let raw = random_corpus(&synth, 700, 21);
    let plan = SamplingPlan {
        test_fraction: 0.0,
        ..SamplingPlan::default()
    };
    let corpus = build_corpus(&raw, &plan, 2).unwrap();
    let vocab = Vocabulary::smiles_default();
    let toks = tokenize_pairs(&corpus.train, &vocab).unwrap();
    // fitting-speed comparison: evaluate on a training slice so step-0.5
    // measures optimization stability rather than generalization
    let eval: Vec<_> = toks.iter().take(96).cloned().collect();
    let eval_canon: Vec<String> = corpus
        .train
        .iter()
        .take(96)
        .map(|p| p.canonical.clone())
        .collect();
    let mut pre_steps: Vec<f64> = Vec::new();
    let mut post_steps: Vec<f64> = Vec::new();
    for placement in [NormPlacement::PostLn, NormPlacement::PreLn] {
        for seed in 0..3u64 {
            let cfg = ModelConfig {
                vocab_size: vocab.len(),
                d_model: 64,
                d_ff: 256,
                n_layers: 2,
                n_heads: 4,
                dropout: 0.1,
                norm_placement: placement,
                init_scheme: InitScheme::HeNormal,
                max_len: 128,
            };
            let opt = OptimizerConfig {
                warmup_steps: 800,
                token_budget_per_step: 6000,
                accumulation: 1,
                max_steps: 2500,
                early_stop_perfect_accuracy: 0.5,
                ..OptimizerConfig::default()
            };
            let opts = TrainOptions {
                weight_seed: seed,
                order_seed: seed + 100,
                eval_interval: 50,
                eval_size: 96,
                max_decode_len: 80,
                snapshot_thresholds: vec![0.5],
                ..TrainOptions::default()
            };
            let result = train(&toks, &eval, &eval_canon, &vocab, &cfg, &opt, &opts, None).unwrap();
            let s = step_threshold(&result.curve, 0.5)
                .map(|s| s as f64)
                .unwrap_or(opt.max_steps as f64 + 1.0);
            match placement {
                NormPlacement::PreLn => pre_steps.push(s),
                NormPlacement::PostLn => post_steps.push(s),
            }
        }
    }
    let pre = &pre_steps;
    let post = &post_steps;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = welch_t_test(pre, post);
    let detail = format!(
        "mean step-0.5 pre-LN {:.0} vs post-LN {:.0} (pre {:?}, post {:?}); Welch {:?}",
        mean(pre),
        mean(post),
        pre,
        post,
        test
    );
    verdict(8, "pre-LN direction", mean(pre) <= mean(post), &detail);
}

/// 9. Probe sanity: random descriptors near-chance AUROC; untrained pooled
/// descriptors beat them by ≥ 0.1.
#[test]
fn criterion_09_probe_sanity() {
    let synth = SynthConfig {
        max_heavy: 16,
        ..SynthConfig::default()
    };
    let corpus = random_corpus(&synth, 900, 33);
    let records: Vec<(String, f64)> = corpus
        .iter()
        .map(|s| {
            let m = parse_smiles(s).unwrap();
            let label = if s.contains('N') { 1.0 } else { 0.0 };
            (canonical_smiles(&m), label)
        })
        .collect();
    let ds = PropertyDataset {
        records,
        task_type: TaskType::Classification,
        split_strategy: SplitStrategy::Random,
        name: "nitrogen_fixture".into(),
        dropped: 0,
    };
    let folds = split(&ds, 5, 9).unwrap();
    let rand_feats = featurize(&ds, &FeatureSource::RandomUniform { seed: 4 });
    let rand_res = fit_score(&rand_feats, &ds, &folds, "random", None).unwrap();

    let vocab = Vocabulary::smiles_default();
    let cfg = ModelConfig::desk(vocab.len());
    let ckpt = Checkpoint::fresh(cfg, init_params::<f32>(&cfg, 0).unwrap(), [0; 32]);
    let model_feats = featurize(
        &ds,
        &FeatureSource::Model {
            ckpt: &ckpt,
            pooling: Pooling::Mean,
            vocab: &vocab,
            seed: 12,
        },
    );
    let model_res = fit_score(&model_feats, &ds, &folds, "model_step0", Some(0)).unwrap();
    let pass = (0.4..=0.6).contains(&rand_res.mean) && model_res.mean >= rand_res.mean + 0.1;
    verdict(
        9,
        "probe sanity",
        pass,
        &format!(
            "random AUROC {:.3}±{:.3}, untrained-model AUROC {:.3}±{:.3}",
            rand_res.mean, rand_res.sd, model_res.mean, model_res.sd
        ),
    );
}

/// 10. Determinism: two executions of the same run config produce
/// byte-identical metrics JSONL.
#[test]
fn criterion_10_determinism() {
    let synth = SynthConfig {
        max_heavy: 12,
        ..SynthConfig::default()
    };
    let raw = random_corpus(&synth, 150, 77);
    let plan = SamplingPlan {
        test_fraction: 0.1,
        ..SamplingPlan::default()
    };
    let corpus = build_corpus(&raw, &plan, 3).unwrap();
    let vocab = Vocabulary::smiles_default();
    let train_tok = tokenize_pairs(&corpus.train, &vocab).unwrap();
    let test_tok = tokenize_pairs(&corpus.test, &vocab).unwrap();
    let test_canon: Vec<String> = corpus.test.iter().map(|p| p.canonical.clone()).collect();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        d_ff: 64,
        n_layers: 1,
        n_heads: 2,
        dropout: 0.1,
        norm_placement: NormPlacement::PostLn,
        init_scheme: InitScheme::HeNormal,
        max_len: 96,
    };
    let opt = OptimizerConfig {
        warmup_steps: 200,
        token_budget_per_step: 3000,
        accumulation: 2,
        max_steps: 60,
        early_stop_perfect_accuracy: 2.0,
        ..OptimizerConfig::default()
    };
    let opts = TrainOptions {
        eval_interval: 20,
        eval_size: 15,
        max_decode_len: 48,
        ..TrainOptions::default()
    };
    let run = |dir: &std::path::Path| {
        train(
            &train_tok, &test_tok, &test_canon, &vocab, &cfg, &opt, &opts,
            Some(dir),
        )
        .unwrap();
        std::fs::read(dir.join("metrics.jsonl")).unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (a, b) = (run(d1.path()), run(d2.path()));
    verdict(
        10,
        "determinism",
        !a.is_empty() && a == b,
        &format!("metrics JSONL {} bytes, identical: {}", a.len(), a == b),
    );
}
