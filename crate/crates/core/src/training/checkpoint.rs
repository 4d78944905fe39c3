//! Binary checkpoint: `LATG`, u32 version, u64 metadata length, JSON
//! metadata, then little-endian f64 tensor data in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::{OptimizerState, Tensor};

pub const MAGIC: &[u8; 4] = b"LATG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

/// Where a run stands; enough to continue it deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: String,
    /// Completed epochs in this phase.
    pub epoch: usize,
    /// Optimizer steps taken in this phase.
    pub step: u64,
    pub seed: u64,
    pub best_score: f64,
    pub best_epoch: usize,
    /// Epochs since the best score.
    pub stale: usize,
    pub optimizer: OptimizerState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    #[serde(default)]
    pub train: Option<serde_json::Value>,
    #[serde(default)]
    pub progress: Option<Progress>,
    pub tensors: Vec<TensorEntry>,
}

/// Model parameters, optionally with optimizer moments and the best
/// parameters seen so far. Parameter tensors are stored under `param/`,
/// Adam moments under `adam_m/` and `adam_v/`, best parameters under `best/`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub train: Option<serde_json::Value>,
    pub progress: Option<Progress>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocabulary) -> Self {
        Self {
            model: model.cfg.clone(),
            vocab: vocab.clone(),
            train: None,
            progress: None,
            tensors: prefixed("param/", model),
        }
    }

    /// Tensors under `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    /// Rebuilds the model stored under `param/`.
    pub fn model(&self) -> Result<Model> {
        self.model_from("param/")
    }

    pub fn model_from(&self, prefix: &str) -> Result<Model> {
        let mut m = Model::new(self.model.clone(), 0)?;
        m.load_params(&self.group(prefix))?;
        Ok(m)
    }
}

pub(crate) fn prefixed(prefix: &str, model: &Model) -> Vec<(String, Tensor)> {
    model
        .params
        .iter()
        .map(|(n, t)| {
            let clean = Tensor::new(t.shape(), t.data().to_vec()).expect("stored tensors are valid");
            (format!("{prefix}{n}"), clean)
        })
        .collect()
}

pub fn write_checkpoint<W: Write>(mut out: W, ck: &Checkpoint) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(ck.tensors.len());
    for (name, t) in &ck.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let meta = Metadata {
        model: ck.model.clone(),
        vocab: ck.vocab.clone(),
        train: ck.train.clone(),
        progress: ck.progress.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&meta)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in &ck.tensors {
        let mut buf = Vec::with_capacity(8 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut head = [0u8; 16];
    input
        .read_exact(&mut head)
        .map_err(|_| Error::Checkpoint("file is shorter than the header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic bytes {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let meta_len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if (rest.len() as u64) < meta_len {
        return Err(Error::Checkpoint(format!(
            "metadata truncated: {} of {meta_len} bytes",
            rest.len()
        )));
    }
    let (json, data) = rest.split_at(meta_len as usize);
    let meta: Metadata =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    let mut expected = 0u64;
    for e in &meta.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` at offset {} (expected {expected})",
                e.name, e.offset
            )));
        }
        let end = e.offset + 8 * numel as u64;
        if end > data.len() as u64 {
            return Err(Error::Checkpoint(format!("data truncated inside tensor `{}`", e.name)));
        }
        let bytes = &data[e.offset as usize..end as usize];
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, values)?));
        expected = end;
    }
    if expected != data.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            data.len() as u64 - expected
        )));
    }
    Ok(Checkpoint {
        model: meta.model,
        vocab: meta.vocab,
        train: meta.train,
        progress: meta.progress,
        tensors,
    })
}

/// Writes to a temporary sibling and renames, so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    {
        let f = std::fs::File::create(&tmp)?;
        write_checkpoint(std::io::BufWriter::new(f), ck)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
