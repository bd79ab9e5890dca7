//! Encoder-decoder Transformer written directly against ndarray, with
//! hand-derived backward passes. Training runs at single precision; the
//! gradient checks instantiate the same code at double precision.

pub mod checkpoint;
pub mod decode;
pub mod forward;
pub mod ops;

use std::collections::BTreeMap;

use ndarray::{Array2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    PostLn,
    PreLn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    DefaultUniform,
    HeNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub norm_placement: NormPlacement,
    pub init_scheme: InitScheme,
    pub max_len: usize,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("shape error: {0}")]
    ShapeError(String),
}

impl ModelConfig {
    /// The small configuration used throughout: trainable on a CPU in
    /// minutes to hours while exhibiting the same qualitative behavior as
    /// the full-size model (512 / 6 layers / 2,048 FF).
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 128,
            d_ff: 512,
            n_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            norm_placement: NormPlacement::PostLn,
            init_scheme: InitScheme::HeNormal,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        Ok(())
    }
}

/// All parameters as named 2-D tensors in a deterministic (sorted) order.
/// Vectors (biases, LN gains) are stored as shape (1, n).
pub type Params<F> = BTreeMap<String, Array2<F>>;

/// (name, rows, cols, kind) for every parameter of a config, in the fixed
/// construction order used by initialization.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize, ParamKind)> {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let v = cfg.vocab_size;
    let mut specs = vec![
        ("src_emb".to_string(), v, d, ParamKind::Embedding),
        ("tgt_emb".to_string(), v, d, ParamKind::Embedding),
    ];
    let attn = |prefix: &str, specs: &mut Vec<(String, usize, usize, ParamKind)>| {
        for part in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{part}"), d, d, ParamKind::Weight));
        }
        for part in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{prefix}.{part}"), 1, d, ParamKind::Bias));
        }
    };
    let ln = |prefix: &str, specs: &mut Vec<(String, usize, usize, ParamKind)>| {
        specs.push((format!("{prefix}.g"), 1, d, ParamKind::LnGain));
        specs.push((format!("{prefix}.b"), 1, d, ParamKind::Bias));
    };
    let ffn = |prefix: &str, specs: &mut Vec<(String, usize, usize, ParamKind)>| {
        specs.push((format!("{prefix}.w1"), d, ff, ParamKind::Weight));
        specs.push((format!("{prefix}.b1"), 1, ff, ParamKind::Bias));
        specs.push((format!("{prefix}.w2"), ff, d, ParamKind::Weight));
        specs.push((format!("{prefix}.b2"), 1, d, ParamKind::Bias));
    };
    for l in 0..cfg.n_layers {
        attn(&format!("enc{l}.attn"), &mut specs);
        ln(&format!("enc{l}.ln1"), &mut specs);
        ffn(&format!("enc{l}.ff"), &mut specs);
        ln(&format!("enc{l}.ln2"), &mut specs);
    }
    for l in 0..cfg.n_layers {
        attn(&format!("dec{l}.self"), &mut specs);
        ln(&format!("dec{l}.ln1"), &mut specs);
        attn(&format!("dec{l}.cross"), &mut specs);
        ln(&format!("dec{l}.ln2"), &mut specs);
        ffn(&format!("dec{l}.ff"), &mut specs);
        ln(&format!("dec{l}.ln3"), &mut specs);
    }
    specs.push(("out.w".to_string(), d, v, ParamKind::Weight));
    specs.push(("out.b".to_string(), 1, v, ParamKind::Bias));
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    LnGain,
    Embedding,
}

/// Standard normal via Box-Muller on the ChaCha stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic parameter initialization from (cfg, seed).
///
/// he_normal draws linear weights from N(0, 2/fan_in); default_uniform
/// draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Embeddings use
/// U(-sqrt(3/d), sqrt(3/d)) (variance 1/d) under both schemes; biases start
/// at zero and LN gains at one.
pub fn init_params<F: NdFloat>(cfg: &ModelConfig, seed: u64) -> Result<Params<F>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for (name, rows, cols, kind) in param_specs(cfg) {
        let arr = match kind {
            ParamKind::Bias => Array2::zeros((rows, cols)),
            ParamKind::LnGain => Array2::ones((rows, cols)),
            ParamKind::Embedding => {
                let a = (3.0 / cols as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| {
                    F::from(rng.gen_range(-a..a)).unwrap()
                })
            }
            ParamKind::Weight => match cfg.init_scheme {
                InitScheme::HeNormal => {
                    let sd = (2.0 / rows as f64).sqrt();
                    Array2::from_shape_fn((rows, cols), |_| {
                        F::from(normal(&mut rng) * sd).unwrap()
                    })
                }
                InitScheme::DefaultUniform => {
                    let a = 1.0 / (rows as f64).sqrt();
                    Array2::from_shape_fn((rows, cols), |_| {
                        F::from(rng.gen_range(-a..a)).unwrap()
                    })
                }
            },
        };
        params.insert(name, arr);
    }
    Ok(params)
}

/// Sinusoidal positional encoding rows 0..max_len.
pub fn positional_encoding<F: NdFloat>(max_len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((max_len, d), |(t, i)| {
        let exponent = (2 * (i / 2)) as f64 / d as f64;
        let angle = t as f64 / 10000f64.powf(exponent);
        F::from(if i % 2 == 0 { angle.sin() } else { angle.cos() }).unwrap()
    })
}
