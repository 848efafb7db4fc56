//! Checkpoint container.
//!
//! Layout: 8-byte magic `GRIDCKPT`, `u32` format version, `u64` header length,
//! a JSON header (model config, tensor names and shapes, training progress),
//! then every tensor as little-endian `f64` in header order: parameters first,
//! then the two optimizer moment sets when present.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GRIDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub step: u64,
    pub rng: RngState,
    /// Running averages of (base, flow, total).
    pub running: [f64; 3],
    pub moment1: Params,
    pub moment2: Params,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub progress: Option<TrainProgress>,
    /// Free-form metadata (e.g. the training config).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct ProgressHeader {
    step: u64,
    rng: RngState,
    running: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    progress: Option<ProgressHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn write_tensors(buf: &mut Vec<u8>, params: &Params) {
    for t in params.tensors() {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params = ckpt.model.params();
    let header = Header {
        config: *ckpt.model.config(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
        progress: ckpt.progress.as_ref().map(|p| ProgressHeader {
            step: p.step,
            rng: p.rng.clone(),
            running: p.running,
        }),
        meta: ckpt.meta.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let n_sets = if ckpt.progress.is_some() { 3 } else { 1 };
    let mut buf = Vec::with_capacity(24 + header_json.len() + n_sets * params.count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    write_tensors(&mut buf, params);
    if let Some(p) = &ckpt.progress {
        write_tensors(&mut buf, &p.moment1);
        write_tensors(&mut buf, &p.moment2);
    }
    crate::io::write_atomic(path, &buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn tensors(&mut self, entries: &[TensorEntry]) -> Option<Params> {
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let n = e.shape[0].checked_mul(e.shape[1])?;
            let raw = self.take(n.checked_mul(8)?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Array2::from_shape_vec((e.shape[0], e.shape[1]), data).ok()?);
        }
        Some(Params::from_parts(
            entries.iter().map(|e| e.name.clone()).collect(),
            tensors,
        ))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::CheckpointIo {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8) != Some(MAGIC.as_slice()) {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(
        cur.take(4)
            .ok_or_else(|| fail("truncated".into()))?
            .try_into()
            .unwrap(),
    );
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(
        cur.take(8)
            .ok_or_else(|| fail("truncated".into()))?
            .try_into()
            .unwrap(),
    ) as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen).ok_or_else(|| fail("truncated header".into()))?)
        .map_err(|e| fail(format!("bad header: {e}")))?;

    let params = cur
        .tensors(&header.tensors)
        .ok_or_else(|| fail("truncated parameter data".into()))?;
    let model = Model::from_params(header.config, params).map_err(|e| fail(e.to_string()))?;
    let progress = match header.progress {
        None => None,
        Some(ph) => {
            let moment1 = cur
                .tensors(&header.tensors)
                .ok_or_else(|| fail("truncated optimizer state".into()))?;
            let moment2 = cur
                .tensors(&header.tensors)
                .ok_or_else(|| fail("truncated optimizer state".into()))?;
            Some(TrainProgress {
                step: ph.step,
                rng: ph.rng,
                running: ph.running,
                moment1,
                moment2,
            })
        }
    };
    if cur.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Checkpoint {
        model,
        progress,
        meta: header.meta,
    })
}
