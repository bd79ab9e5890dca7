//! Versioned binary checkpoint format: a JSON header describing the config,
//! counters, RNG state, and tensor shapes, followed by raw little-endian
//! f32 data. Raw bytes make the round trip bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, Params};

const MAGIC: &[u8; 8] = b"CHEMLAB1";

#[derive(Debug, Clone, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

/// Everything needed to resume a run deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: Params<f32>,
    /// Adam first moments, same keys as params.
    pub opt_m: Params<f32>,
    /// Adam second moments, same keys as params.
    pub opt_v: Params<f32>,
    /// Optimizer steps taken so far (Adam bias-correction time).
    pub opt_t: u64,
    /// Global optimizer step (equals opt_t; kept separate for clarity in
    /// metrics files).
    pub step: u64,
    /// ChaCha8 state of the training-iteration stream: seed and word
    /// position, enough to resume the exact stream.
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn fresh(cfg: ModelConfig, params: Params<f32>, rng_seed: [u8; 32]) -> Checkpoint {
        let zeros: Params<f32> = params
            .iter()
            .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
            .collect();
        Checkpoint {
            cfg,
            opt_m: zeros.clone(),
            opt_v: zeros,
            params,
            opt_t: 0,
            step: 0,
            rng_seed,
            rng_word_pos: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    cfg: ModelConfig,
    opt_t: u64,
    step: u64,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    tensors: Vec<(String, usize, usize)>,
}

fn write_tensors<W: Write>(w: &mut W, params: &Params<f32>) -> Result<(), CheckpointError> {
    for arr in params.values() {
        for &v in arr.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_tensors<R: Read>(
    r: &mut R,
    shapes: &[(String, usize, usize)],
) -> Result<Params<f32>, CheckpointError> {
    let mut out = Params::new();
    for (name, rows, cols) in shapes {
        let mut data = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let arr = Array2::from_shape_vec((*rows, *cols), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.insert(name.clone(), arr);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            cfg: self.cfg,
            opt_t: self.opt_t,
            step: self.step,
            rng_seed: self.rng_seed.to_vec(),
            rng_word_pos: self.rng_word_pos.to_string(),
            tensors: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.nrows(), v.ncols()))
                .collect(),
        };
        let hjson = serde_json::to_vec(&header)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u64::<LittleEndian>(hjson.len() as u64)?;
        out.extend_from_slice(&hjson);
        write_tensors(&mut out, &self.params)?;
        write_tensors(&mut out, &self.opt_m)?;
        write_tensors(&mut out, &self.opt_v)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let hlen = r.read_u64::<LittleEndian>()? as usize;
        if hlen > r.len() {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        r = &r[hlen..];
        let params = read_tensors(&mut r, &header.tensors)?;
        let opt_m = read_tensors(&mut r, &header.tensors)?;
        let opt_v = read_tensors(&mut r, &header.tensors)?;
        let rng_seed: [u8; 32] = header
            .rng_seed
            .try_into()
            .map_err(|_| CheckpointError::Corrupt("rng seed length".into()))?;
        let rng_word_pos = header
            .rng_word_pos
            .parse()
            .map_err(|_| CheckpointError::Corrupt("rng word pos".into()))?;
        Ok(Checkpoint {
            cfg: header.cfg,
            params,
            opt_m,
            opt_v,
            opt_t: header.opt_t,
            step: header.step,
            rng_seed,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
