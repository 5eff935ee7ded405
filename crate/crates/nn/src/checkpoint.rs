//! Checkpoints: one JSON header line, then the state as little-endian f32.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{build_model, ModelConfig, Network};
use crate::scalar::Scalar;
use crate::tensor::NnError;

pub const CHECKPOINT_FORMAT: &str = "agc-nn-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub init_seed: u64,
    pub epoch: usize,
    /// `(name, length)` of every saved tensor in blob order.
    pub tensors: Vec<(String, usize)>,
    /// Caller-defined metadata such as ingest statistics.
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn tensor_index<T: Scalar>(net: &Network<T>) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for l in &net.layers {
        for p in l.params() {
            out.push((p.name.clone(), p.len()));
        }
        for b in l.buffers() {
            out.push((b.name.clone(), b.value.len()));
        }
    }
    out
}

pub fn write_checkpoint<T: Scalar>(
    net: &Network<T>,
    epoch: usize,
    extra: serde_json::Value,
    w: &mut impl Write,
) -> Result<(), NnError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        config: net.config.clone(),
        init_seed: net.init_seed,
        epoch,
        tensors: tensor_index(net),
        extra,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let mut blob = Vec::with_capacity(net.state_len() * 4);
    for v in net.state() {
        blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl BufRead) -> Result<(Network<T>, CheckpointHeader), NnError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(NnError::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    let mut net = build_model::<T>(&header.config, header.init_seed)?;
    if tensor_index(&net) != header.tensors {
        return Err(NnError::Checkpoint("tensor layout does not match the config".into()));
    }
    let n = net.state_len();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| NnError::Checkpoint(format!("truncated parameter blob: {e}")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after parameter blob".into()));
    }
    let state: Vec<T> = buf
        .chunks_exact(4)
        .map(|c| T::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    net.load_state(&state)?;
    Ok((net, header))
}

pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    epoch: usize,
    extra: serde_json::Value,
    path: &Path,
) -> Result<(), NnError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(net, epoch, extra, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, CheckpointHeader), NnError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
