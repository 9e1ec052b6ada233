//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"VIGORCKP"  u32 version  u64 header length  header JSON
//! u64 array count, then per array:
//!     u32 name length  name  u64 rows  u64 cols  rows*cols f64 values
//! ```
//!
//! Arrays are the model parameters in order, then Adam's first moments
//! (`adam.m/<name>`) and second moments (`adam.v/<name>`). Random draws in
//! training are derived from the seed in the header and the step counters,
//! so those fully describe the generator state.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::model::{Model, ModelConfig, WordVocab};
use crate::scene::ClassVocab;
use crate::tensor::{AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"VIGORCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    words: WordVocab,
    classes: Vec<String>,
    train: TrainConfig,
    warmup_done: usize,
    main_done: usize,
    adam_step: u64,
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized bytes of `trainer`.
pub fn to_bytes(trainer: &Trainer) -> Vec<u8> {
    let model = &trainer.model;
    let header = Header {
        model: model.config().clone(),
        words: model.words().clone(),
        classes: model.classes().names().to_vec(),
        train: trainer.config.clone(),
        warmup_done: trainer.warmup_done,
        main_done: trainer.main_done,
        adam_step: trainer.adam.step,
    };
    let json = serde_json::to_vec(&header).expect("header is plain data");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.params();
    out.extend_from_slice(&(3 * params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        put_array(&mut out, name, t);
    }
    for (prefix, moments) in [("adam.m/", &trainer.adam.m), ("adam.v/", &trainer.adam.v)] {
        for ((name, _), t) in params.iter().zip(moments.iter()) {
            put_array(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    out
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(trainer))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("length {v} too large")))
    }

    fn array(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let (rows, cols) = (self.u64()?, self.u64()?);
        let len = rows
            .checked_mul(cols)
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| CheckpointError::Corrupt(format!("array {name} is too large")))?;
        let data = self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(rows, cols, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok((name, t))
    }
}

/// Parses checkpoint bytes back into a trainer.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u64()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let count = r.u64()?;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        arrays.push(r.array()?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    if count % 3 != 0 {
        return Err(CheckpointError::Corrupt(format!(
            "{count} arrays is not params plus two moments"
        )));
    }

    let n = count / 3;
    let mut params = ParamStore::new();
    let mut iter = arrays.into_iter();
    for (name, t) in iter.by_ref().take(n) {
        params.insert(name, t);
    }
    let mut moments = |prefix: &str| -> Result<Vec<Tensor>, CheckpointError> {
        let mut out = Vec::with_capacity(n);
        for ((name, t), (pname, p)) in iter.by_ref().take(n).zip(params.iter()) {
            if name != format!("{prefix}{pname}") || t.shape() != p.shape() {
                return Err(CheckpointError::Corrupt(format!("unexpected optimizer array {name}")));
            }
            out.push(t);
        }
        Ok(out)
    };
    let m = moments("adam.m/")?;
    let v = moments("adam.v/")?;

    let classes = Arc::new(ClassVocab::new(header.classes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
    let model = Model::from_parts(header.model, header.words, classes, params)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut trainer = Trainer::new(model, header.train).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    trainer.adam = AdamState {
        step: header.adam_step,
        m,
        v,
    };
    trainer.warmup_done = header.warmup_done;
    trainer.main_done = header.main_done;
    Ok(trainer)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and refuses it unless its model configuration equals
/// `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Trainer, CheckpointError> {
    let t = load_checkpoint(path)?;
    let got = t.model.config();
    if got != expected {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint model has d = {}, blocks = {}, heads = {}; expected d = {}, blocks = {}, heads = {}",
            got.d, got.blocks, got.n_heads, expected.d, expected.blocks, expected.n_heads
        )));
    }
    Ok(t)
}
