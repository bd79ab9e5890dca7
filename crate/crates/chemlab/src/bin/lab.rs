//! Experiment driver: `lab preprocess|train|diagnose|probe --config <file>
//! [--out <dir>]`.
//!
//! Every run is described by one TOML file (see `RunConfig`); re-running
//! the same config reproduces the outputs byte for byte. Exit codes:
//! 0 success, 2 config error, 3 data error, 4 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use chemlab::diagnostics::{similarity_curve, step_threshold, MetricsCurve, MetricsRecord};
use chemlab::fingerprints::{FingerprintConfig, KeyKind};
use chemlab::model::checkpoint::Checkpoint;
use chemlab::model::decode::Pooling;
use chemlab::model::{InitScheme, ModelConfig, NormPlacement};
use chemlab::probe::{
    featurize, fit_score, ingest_csv, results_to_csv, split, FeatureSource, ProbeResult,
    SplitStrategy, TaskType,
};
use chemlab::synth::{random_corpus, SynthConfig};
use chemlab::tokenizer::{tokenize, SeqKind, Vocabulary};
use chemlab::train::{
    build_corpus, chiral_token_counts, tokenize_pairs, train, OptimizerConfig, Pair, RunDirLock,
    SamplingPlan, TrainError, TrainOptions,
};

#[derive(Parser)]
#[command(name = "lab", about = "chemical language model laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the (randomized, canonical) training corpus and sampling report
    Preprocess(CommonArgs),
    /// Train a model on a preprocessed corpus
    Train(CommonArgs),
    /// Decode checkpoints and emit diagnostic tables
    Diagnose(CommonArgs),
    /// Property-prediction probes over descriptors
    Probe(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// output directory (overrides the config's `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// run directory; the --out flag overrides it
    output_dir: Option<PathBuf>,
    #[serde(default)]
    corpus: CorpusConfig,
    #[serde(default)]
    sampling: SamplingConfig,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    optimizer: OptimizerSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    diagnose: DiagnoseSection,
    probe: Option<ProbeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusConfig {
    /// file of SMILES lines; when absent a synthetic corpus is generated
    input: Option<PathBuf>,
    synthetic_count: usize,
    synthetic_seed: u64,
    max_heavy: usize,
    chiral_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            input: None,
            synthetic_count: 2000,
            synthetic_seed: 7,
            max_heavy: 20,
            chiral_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingConfig {
    #[serde(flatten)]
    plan: SamplingPlan,
    seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            plan: SamplingPlan::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    d_model: usize,
    d_ff: usize,
    n_layers: usize,
    n_heads: usize,
    dropout: f64,
    norm_placement: NormPlacement,
    init_scheme: InitScheme,
    max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        ModelSection {
            d_model: d.d_model,
            d_ff: d.d_ff,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            dropout: d.dropout,
            norm_placement: d.norm_placement,
            init_scheme: d.init_scheme,
            max_len: d.max_len,
        }
    }
}

impl ModelSection {
    fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            dropout: self.dropout,
            norm_placement: self.norm_placement,
            init_scheme: self.init_scheme,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerSection {
    #[serde(flatten)]
    cfg: OptimizerConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    #[serde(flatten)]
    opts: TrainOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnoseSection {
    /// checkpoint files; when empty, every ckpt_step*.bin in the run dir
    #[serde(default)]
    checkpoints: Vec<PathBuf>,
    /// cap on pairs pulled from the test split
    #[serde(default = "default_diag_pairs")]
    max_pairs: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            checkpoints: Vec::new(),
            max_pairs: default_diag_pairs(),
        }
    }
}

fn default_diag_pairs() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeSection {
    dataset: PathBuf,
    smiles_column: String,
    target_column: String,
    task_type: TaskType,
    split_strategy: SplitStrategy,
    name: String,
    folds: usize,
    seed: u64,
    /// any of: "random", "ecfp", "model"
    descriptors: Vec<String>,
    #[serde(default)]
    poolings: Vec<Pooling>,
    #[serde(default)]
    checkpoints: Vec<PathBuf>,
}

// ---------------------------------------------------------------- errors

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient(_) | TrainError::DivergenceDetected(_) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::EmptyAfterFilter => CliError::Data(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<chemlab::probe::ProbeError> for CliError {
    fn from(e: chemlab::probe::ProbeError) -> Self {
        use chemlab::probe::ProbeError::*;
        match e {
            DegenerateLabels => CliError::Numeric(e.to_string()),
            MissingColumn(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("bad config: {e}")))
}

fn out_dir(cfg: &RunConfig, args: &CommonArgs) -> Result<PathBuf, CliError> {
    args.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory (set output_dir or --out)".into()))
}

// ------------------------------------------------------------ preprocess

fn read_pairs(path: &Path) -> Result<Vec<Pair>, CliError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (r, c) = l
                .split_once('\t')
                .ok_or_else(|| CliError::Data(format!("bad pair line: {l:?}")))?;
            Ok(Pair {
                randomized: r.to_string(),
                canonical: c.to_string(),
            })
        })
        .collect()
}

fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<(), CliError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.randomized);
        out.push('\t');
        out.push_str(&p.canonical);
        out.push('\n');
    }
    Ok(std::fs::write(path, out)?)
}

fn sampling_report(pairs: &[Pair]) -> serde_json::Value {
    let mut length_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut at, mut atat) = (0u64, 0u64);
    let mut chiral_molecules = 0usize;
    for p in pairs {
        *length_histogram
            .entry(p.canonical.chars().count())
            .or_default() += 1;
        let (a, b) = chiral_token_counts(&p.canonical);
        at += a;
        atat += b;
        if a + b > 0 {
            chiral_molecules += 1;
        }
    }
    serde_json::json!({
        "molecules": pairs.len(),
        "strata": length_histogram.len(),
        "length_histogram": length_histogram,
        "at_tokens": at,
        "atat_tokens": atat,
        "chiral_molecules": chiral_molecules,
        "chiral_fraction": chiral_molecules as f64 / pairs.len() as f64,
    })
}

fn cmd_preprocess(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let raw: Vec<String> = match &cfg.corpus.input {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .map(|l| l.to_string())
            .filter(|l| !l.trim().is_empty())
            .collect(),
        None => {
            let synth = SynthConfig {
                max_heavy: cfg.corpus.max_heavy,
                chiral_prob: cfg.corpus.chiral_prob,
                ..SynthConfig::default()
            };
            random_corpus(&synth, cfg.corpus.synthetic_count, cfg.corpus.synthetic_seed)
        }
    };
    let corpus = build_corpus(&raw, &cfg.sampling.plan, cfg.sampling.seed)?;
    write_pairs(&dir.join("pairs_train.tsv"), &corpus.train)?;
    write_pairs(&dir.join("pairs_test.tsv"), &corpus.test)?;
    let canon: Vec<&str> = corpus
        .train
        .iter()
        .chain(&corpus.test)
        .map(|p| p.canonical.as_str())
        .collect();
    std::fs::write(dir.join("canonical.txt"), canon.join("\n") + "\n")?;
    let report = sampling_report(&corpus.train);
    std::fs::write(
        dir.join("sampling_report.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )?;
    println!(
        "preprocess: {} train pairs, {} test pairs -> {}",
        corpus.train.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- train

fn cmd_train(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let _lock = RunDirLock::acquire(dir)?;
    let train_pairs = read_pairs(&dir.join("pairs_train.tsv"))?;
    let test_pairs = read_pairs(&dir.join("pairs_test.tsv"))?;
    if train_pairs.is_empty() {
        return Err(CliError::Data("empty training corpus".into()));
    }
    let vocab = Vocabulary::smiles_default();
    let train_tok = tokenize_pairs(&train_pairs, &vocab)
        .map_err(|e| CliError::Data(format!("tokenization: {e}")))?;
    let test_tok = tokenize_pairs(&test_pairs, &vocab)
        .map_err(|e| CliError::Data(format!("tokenization: {e}")))?;
    let test_canon: Vec<String> = test_pairs.iter().map(|p| p.canonical.clone()).collect();
    let model_cfg = cfg.model.to_model_config(vocab.len());
    model_cfg
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    // snapshot the effective config next to the outputs
    std::fs::write(
        dir.join("config_snapshot.toml"),
        toml::to_string_pretty(cfg).unwrap(),
    )?;
    let result = train(
        &train_tok,
        &test_tok,
        &test_canon,
        &vocab,
        &model_cfg,
        &cfg.optimizer.cfg,
        &cfg.train.opts,
        Some(dir),
    )?;
    println!(
        "train: stopped at step {} (early stop: {})",
        result.checkpoint.step, result.stopped_early
    );
    for (thr, ckpt) in &result.threshold_snapshots {
        println!("  perfect accuracy {thr} first reached by step {}", ckpt.step);
    }
    Ok(())
}

// -------------------------------------------------------------- diagnose

fn find_checkpoints(section: &DiagnoseSection, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !section.checkpoints.is_empty() {
        return Ok(section.checkpoints.clone());
    }
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        if let Some(step) = name
            .strip_prefix("ckpt_step")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            found.push((step, path));
        }
    }
    found.sort();
    found.dedup_by_key(|(s, _)| *s);
    if found.is_empty() {
        return Err(CliError::Data(format!(
            "no checkpoints found in {}",
            dir.display()
        )));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn csv_token_table(
    steps: &[u64],
    per_step: &[BTreeMap<String, f64>],
    value_name: &str,
) -> String {
    let mut tokens: Vec<&String> = per_step.iter().flat_map(|m| m.keys()).collect();
    tokens.sort();
    tokens.dedup();
    let mut out = format!("token,step,{value_name}\n");
    for tok in tokens {
        for (step, m) in steps.iter().zip(per_step) {
            if let Some(v) = m.get(tok) {
                out.push_str(&format!("{tok:?},{step},{v:.6}\n"));
            }
        }
    }
    out
}

fn cmd_diagnose(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let vocab = Vocabulary::smiles_default();
    let paths = find_checkpoints(&cfg.diagnose, dir)?;
    let checkpoints: Vec<Checkpoint> = paths
        .iter()
        .map(|p| Checkpoint::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<_, _>>()?;
    let test_pairs = read_pairs(&dir.join("pairs_test.tsv"))?;
    let test_pairs: Vec<Pair> = test_pairs.into_iter().take(cfg.diagnose.max_pairs).collect();
    let pairs_tok: Vec<(Vec<u32>, String)> = test_pairs
        .iter()
        .map(|p| {
            let s = tokenize(&p.randomized, &vocab, SeqKind::Source)
                .map_err(|e| CliError::Data(e.to_string()))?;
            Ok((s.ids, p.canonical.clone()))
        })
        .collect::<Result<_, CliError>>()?;
    let kinds = vec![
        (
            "ecfp_r2_2048".to_string(),
            KeyKind::Ecfp(FingerprintConfig::ecfp_default()),
        ),
        (
            "path_keys".to_string(),
            KeyKind::PathKeys {
                max_len: 7,
                width: 2048,
            },
        ),
    ];
    let refs: Vec<&Checkpoint> = checkpoints.iter().collect();
    let max_len = cfg.train.opts.max_decode_len;
    let curve = similarity_curve(&refs, &pairs_tok, &kinds, &vocab, max_len);
    let mut csv = String::from("kind,step,mean_tanimoto\n");
    if curve.defined {
        for (ki, name) in curve.kind_names.iter().enumerate() {
            for (si, step) in curve.steps.iter().enumerate() {
                csv.push_str(&format!("{name},{step},{:.6}\n", curve.means[ki][si]));
            }
        }
    }
    std::fs::write(dir.join("similarity_curve.csv"), csv)?;

    // per-checkpoint evaluation records reuse the training evaluator
    let pairs_ids = tokenize_pairs(&test_pairs, &vocab)
        .map_err(|e| CliError::Data(format!("tokenization: {e}")))?;
    let canon: Vec<String> = test_pairs.iter().map(|p| p.canonical.clone()).collect();
    let opts = TrainOptions {
        eval_size: cfg.diagnose.max_pairs,
        max_decode_len: max_len,
        ..cfg.train.opts.clone()
    };
    let records: Vec<MetricsRecord> = checkpoints
        .iter()
        .map(|c| chemlab::train::evaluate(c, &pairs_ids, &canon, &vocab, &opts))
        .collect();
    let steps: Vec<u64> = checkpoints.iter().map(|c| c.step).collect();
    let masked: Vec<BTreeMap<String, f64>> =
        records.iter().map(|r| r.masked_accuracy.clone()).collect();
    std::fs::write(
        dir.join("masked_accuracy.csv"),
        csv_token_table(&steps, &masked, "masked_perfect_accuracy"),
    )?;
    let tf: Vec<BTreeMap<String, f64>> = records.iter().map(|r| r.tf_accuracy.clone()).collect();
    std::fs::write(
        dir.join("tf_accuracy.csv"),
        csv_token_table(&steps, &tf, "teacher_forced_accuracy"),
    )?;
    let mut chir = String::from(
        "step,correct,chiral_only,other,at_mistaken_for_atat,atat_mistaken_for_at\n",
    );
    for (step, r) in steps.iter().zip(&records) {
        let c = &r.chirality;
        chir.push_str(&format!(
            "{step},{:.6},{:.6},{:.6},{},{}\n",
            c.correct, c.chiral_only, c.other, c.at_mistaken_for_atat, c.atat_mistaken_for_at
        ));
    }
    std::fs::write(dir.join("chirality.csv"), chir)?;

    // threshold steps from the training metrics, when present
    let metrics_path = dir.join("metrics.jsonl");
    if metrics_path.exists() {
        let mut curve = MetricsCurve::default();
        for line in std::fs::read_to_string(&metrics_path)?.lines() {
            let rec: MetricsRecord = serde_json::from_str(line)
                .map_err(|e| CliError::Data(format!("bad metrics line: {e}")))?;
            curve.push(rec);
        }
        let thresholds = serde_json::json!({
            "step_0.5": step_threshold(&curve, 0.5),
            "step_0.7": step_threshold(&curve, 0.7),
            "step_0.95": step_threshold(&curve, 0.95),
        });
        std::fs::write(
            dir.join("thresholds.json"),
            serde_json::to_string_pretty(&thresholds).unwrap(),
        )?;
    }
    println!(
        "diagnose: {} checkpoints x {} pairs -> {}",
        checkpoints.len(),
        test_pairs.len(),
        dir.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- probe

fn cmd_probe(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let section = cfg
        .probe
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [probe] section".into()))?;
    std::fs::create_dir_all(dir)?;
    let ds = ingest_csv(
        &section.dataset,
        &section.smiles_column,
        &section.target_column,
        section.task_type,
        section.split_strategy,
        &section.name,
    )?;
    let folds = split(&ds, section.folds, section.seed)?;
    let vocab = Vocabulary::smiles_default();
    let mut results: Vec<ProbeResult> = Vec::new();
    for descriptor in &section.descriptors {
        match descriptor.as_str() {
            "random" => {
                let source = FeatureSource::RandomUniform { seed: section.seed };
                let feats = featurize(&ds, &source);
                results.push(fit_score(&feats, &ds, &folds, &source.label(), None)?);
            }
            "ecfp" => {
                let feats = featurize(&ds, &FeatureSource::Ecfp);
                results.push(fit_score(&feats, &ds, &folds, "ecfp_r2_2048", None)?);
            }
            "model" => {
                let poolings = if section.poolings.is_empty() {
                    Pooling::all().to_vec()
                } else {
                    section.poolings.clone()
                };
                for path in &section.checkpoints {
                    let ckpt = Checkpoint::load(path)
                        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                    for &pooling in &poolings {
                        let source = FeatureSource::Model {
                            ckpt: &ckpt,
                            pooling,
                            vocab: &vocab,
                            seed: section.seed,
                        };
                        let feats = featurize(&ds, &source);
                        results.push(fit_score(
                            &feats,
                            &ds,
                            &folds,
                            &source.label(),
                            Some(ckpt.step),
                        )?);
                    }
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown descriptor {other:?} (expected random, ecfp, or model)"
                )))
            }
        }
    }
    for r in &results {
        std::fs::write(
            dir.join(format!("probe_{}_{}.json", r.dataset, r.descriptor)),
            serde_json::to_string_pretty(r).unwrap(),
        )?;
    }
    std::fs::write(dir.join("probe_summary.csv"), results_to_csv(&results))?;
    println!("probe: {} results -> {}", results.len(), dir.display());
    Ok(())
}

// ------------------------------------------------------------------ main

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let (cmd, args): (fn(&RunConfig, &Path) -> Result<(), CliError>, &CommonArgs) =
        match &cli.command {
            Command::Preprocess(a) => (cmd_preprocess, a),
            Command::Train(a) => (cmd_train, a),
            Command::Diagnose(a) => (cmd_diagnose, a),
            Command::Probe(a) => (cmd_probe, a),
        };
    let cfg = load_config(&args.config)?;
    let dir = out_dir(&cfg, args)?;
    cmd(&cfg, &dir)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
