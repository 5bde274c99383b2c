//! Single-file checkpoint: magic line, little-endian `u64` header length,
//! JSON header, then every parameter as little-endian `f32` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mde_autograd::{ParamStore, Scalar, Tensor};

use super::{NoiseSchedule, ToyConfig, ToyDenoiser};
use crate::error::{io_err, MdeError, Result};
use crate::tokens::Vocabulary;

const MAGIC: &[u8] = b"MDECKPT1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob section.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: ToyConfig,
    pub vocabulary: Vec<String>,
    pub vocabulary_hash: String,
    pub schedule: NoiseSchedule,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes<T: Scalar>(model: &ToyDenoiser<T>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.len();
    }
    let header = CheckpointHeader {
        architecture: model.config.clone(),
        vocabulary: model.vocab.tokens().to_vec(),
        vocabulary_hash: model.vocab.hash(),
        schedule: model.schedule.clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &ToyDenoiser<T>, path: &Path, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let bad = |m: &str| MdeError::Checkpoint(m.to_string());
    if !bytes.starts_with(MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    let at = MAGIC.len();
    let len_bytes: [u8; 8] = bytes.get(at..at + 8).ok_or_else(|| bad("truncated header"))?.try_into().unwrap();
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(at + 8..at + 8 + len).ok_or_else(|| bad("truncated header"))?;
    Ok((serde_json::from_slice(json)?, at + 8 + len))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ToyDenoiser<T>> {
    let (header, start) = read_header(bytes)?;
    let vocab = Vocabulary::parse(&header.vocabulary.join("\n"))?;
    if vocab.tokens() != header.vocabulary.as_slice() || vocab.hash() != header.vocabulary_hash {
        return Err(MdeError::Checkpoint("vocabulary does not match its hash".into()));
    }
    let blob = &bytes[start..];
    let mut params = ParamStore::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(4 * e.offset..4 * (e.offset + n))
            .ok_or_else(|| MdeError::Checkpoint(format!("tensor {} exceeds file", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        params.insert(&e.name, Tensor::from_vec(&e.shape, data)?);
    }
    // structure must match a freshly built network
    let fresh = ToyDenoiser::<T>::new(header.architecture.clone(), vocab.clone(), header.schedule.clone(), 0);
    if fresh.params.names() != params.names()
        || fresh.params.iter().zip(params.iter()).any(|((_, a), (_, b))| a.shape() != b.shape())
    {
        return Err(MdeError::Checkpoint("parameter layout does not match architecture".into()));
    }
    Ok(ToyDenoiser { config: header.architecture, params, vocab, schedule: header.schedule })
}

pub fn load<T: Scalar>(path: &Path) -> Result<ToyDenoiser<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}

/// Digest of the checkpoint file contents.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(crate::digest(&std::fs::read(path).map_err(io_err(path))?))
}
