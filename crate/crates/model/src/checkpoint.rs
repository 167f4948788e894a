//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `LSEGCKPT`, a little-endian `u32` format version,
//! a `u64` header length, the JSON header, then every parameter followed by
//! every running mean and variance as little-endian floats of the header's
//! scalar width.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{ModelError, Result};
use crate::net::{BackboneConfig, Network};

pub const MAGIC: &[u8; 8] = b"LSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// Validation score the checkpoint was selected on.
    pub val_metric: Option<f64>,
    /// Free-form training settings.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    scalar: String,
    config: BackboneConfig,
    meta: CheckpointMeta,
    params: Vec<(String, [usize; 4])>,
    running: Vec<usize>,
}

fn put<S: Element>(out: &mut Vec<u8>, width: usize, v: S) {
    if width == 4 {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    } else {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

pub fn encode<S: Element>(net: &Network<S>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        scalar: S::NAME.into(),
        config: net.config().clone(),
        meta: meta.clone(),
        params: net
            .param_names()
            .iter()
            .cloned()
            .zip(net.params().iter().map(|p| p.shape()))
            .collect(),
        running: net.running_stats().iter().map(|r| r.mean.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let width = std::mem::size_of::<S>();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.params() {
        p.as_slice().iter().for_each(|&v| put(&mut out, width, v));
    }
    for r in net.running_stats() {
        r.mean.iter().chain(&r.var).for_each(|&v| put(&mut out, width, v));
    }
    Ok(out)
}

/// Rebuilds a network from checkpoint bytes, converting the stored scalar width if needed.
pub fn decode<S: Element>(bytes: &[u8]) -> Result<(Network<S>, CheckpointMeta)> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated"))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    r = &r[len..];
    let width = match header.scalar.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(ModelError::Checkpoint(format!("unknown scalar type {other}"))),
    };
    let mut net = Network::<S>::new(header.config.clone())?;
    let expected: Vec<(String, [usize; 4])> = net
        .param_names()
        .iter()
        .cloned()
        .zip(net.params().iter().map(|p| p.shape()))
        .collect();
    if expected != header.params {
        return Err(bad("parameter layout does not match the configuration"));
    }
    let total: usize = net.params().iter().map(|p| p.len()).sum::<usize>()
        + net.running_stats().iter().map(|s| 2 * s.mean.len()).sum::<usize>();
    if r.len() != total * width {
        return Err(ModelError::Checkpoint(format!(
            "expected {} weight bytes, found {}",
            total * width,
            r.len()
        )));
    }
    let mut values = r.chunks_exact(width).map(|c| {
        if width == 4 {
            S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)
        } else {
            S::lit(f64::from_le_bytes(c.try_into().unwrap()))
        }
    });
    for p in net.params_mut() {
        p.as_mut_slice().iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    for s in net.running_stats_mut() {
        s.mean.iter_mut().chain(s.var.iter_mut()).for_each(|v| *v = values.next().unwrap());
    }
    Ok((net, header.meta))
}

pub fn save<S: Element>(path: &Path, net: &Network<S>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(net, meta)?;
    let tmp = path.with_extension("partial");
    std::fs::File::create(&tmp)?.write_all(&bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<S: Element>(path: &Path) -> Result<(Network<S>, CheckpointMeta)> {
    decode(&std::fs::read(path)?)
}
