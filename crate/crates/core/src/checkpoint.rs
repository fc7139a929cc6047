//! Binary checkpoint: magic, version, a JSON header and raw little-endian
//! `f64` data for parameters and both Adam moments.
//!
//! ```text
//! b"AHMCEA\0\x01" | u32 version | u64 header_len | header JSON | params | adam m | adam v
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ahm::SchedulerState;
use crate::corpus::{Vocab, NUM_SPECIAL};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::phrase::{Phrase, PhrasePool};
use crate::tensor::{ParamStore, Tensor};
use crate::train::{Adam, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"AHMCEA\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    train: TrainConfig,
    vocab: Vec<String>,
    pool: Vec<Phrase>,
    scheduler: SchedulerState,
    stage: u8,
    iter: u64,
    stage_iter: u64,
    adam_step: u64,
    adam_betas: (f64, f64),
    adam_eps: f64,
    tensors: Vec<TensorEntry>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let header = Header {
        encoder: state.encoder.clone(),
        train: state.config.clone(),
        vocab: state.vocab.tokens()[NUM_SPECIAL as usize..].to_vec(),
        pool: state.pool.phrases().to_vec(),
        scheduler: state.scheduler.clone(),
        stage: state.stage,
        iter: state.iter,
        stage_iter: state.stage_iter,
        adam_step: state.adam.step,
        adam_betas: (state.adam.beta1, state.adam.beta2),
        adam_eps: state.adam.eps,
        tensors: state
            .params
            .store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in state.params.store.iter() {
        push_f64s(&mut out, t.data());
    }
    for m in state.adam.m.iter().chain(&state.adam.v) {
        push_f64s(&mut out, m);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let n = entry.shape.iter().product();
        let t = Tensor::new(entry.shape.clone(), r.f64s(n)?)?;
        store.push(entry.name.clone(), t);
    }
    let expected = ModelParams::init(&header.encoder, 0)?;
    let layout_ok = expected.store.len() == store.len()
        && expected
            .store
            .iter()
            .zip(store.iter())
            .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if !layout_ok {
        return Err(Error::Checkpoint(
            "tensor layout does not match the encoder config".into(),
        ));
    }
    let sizes: Vec<usize> = store.iter().map(|(_, t)| t.len()).collect();
    let m = sizes
        .iter()
        .map(|&n| r.f64s(n))
        .collect::<Result<Vec<_>>>()?;
    let v = sizes
        .iter()
        .map(|&n| r.f64s(n))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let adam = Adam {
        beta1: header.adam_betas.0,
        beta2: header.adam_betas.1,
        eps: header.adam_eps,
        step: header.adam_step,
        m,
        v,
    };
    let vocab = Vocab::from_tokens(header.vocab)?;
    if vocab.len() != header.encoder.vocab_size {
        return Err(Error::Checkpoint(
            "vocabulary size does not match the encoder config".into(),
        ));
    }
    Ok(TrainState::from_parts(
        header.encoder,
        header.train,
        vocab,
        PhrasePool::from_phrases(header.pool),
        ModelParams { store },
        adam,
        header.scheduler,
        (header.stage, header.iter, header.stage_iter),
    ))
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
