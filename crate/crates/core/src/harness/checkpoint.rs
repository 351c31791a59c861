use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::canonical_json;
use crate::error::{Error, Result};
use crate::network::{AsymFusionNet, BufferKey, NetConfig, OptimConfig, Optimizer, ParamKey};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_DTYPE: &str = "f64";
const MOMENTUM_PREFIX: &str = "opt.momentum.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimConfig,
    pub step: usize,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub payload_bytes: u64,
    pub config: NetConfig,
    pub optimizer: Option<OptimizerState>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn count(&self, kind: TensorKind) -> usize {
        self.tensors.iter().filter(|t| t.kind == kind).count()
    }
}

/// `dir/checkpoint.bin` pairs with `dir/checkpoint.manifest.json`.
pub fn manifest_path(payload: &Path) -> PathBuf {
    payload.with_extension("manifest.json")
}

fn checksum_hex(t: &Tensor) -> String {
    format!("{:016x}", t.checksum())
}

fn buffer_tensor(v: &[f64]) -> Tensor {
    Tensor::new([1, v.len(), 1, 1], v.to_vec()).expect("length matches")
}

struct Writer {
    payload: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl Writer {
    fn push(&mut self, name: String, kind: TensorKind, t: &Tensor) {
        let offset = self.payload.len() as u64;
        for v in t.data() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name,
            kind,
            shape: t.shape().to_vec(),
            dtype: CHECKPOINT_DTYPE.into(),
            offset,
            checksum: checksum_hex(t),
        });
    }
}

/// Writes parameters, running statistics and, if given, optimizer momenta.
pub fn save_checkpoint(net: &AsymFusionNet, opt: Option<&Optimizer>, path: &Path) -> Result<Manifest> {
    let mut w = Writer {
        payload: Vec::new(),
        entries: Vec::new(),
    };
    for k in net.param_keys() {
        w.push(net.param_name(k), TensorKind::Param, net.param(k));
    }
    for k in net.buffer_keys() {
        w.push(net.buffer_name(k), TensorKind::Buffer, &buffer_tensor(net.buffer(k)));
    }
    if let Some(opt) = opt {
        for (&k, v) in opt.velocities() {
            w.push(format!("{MOMENTUM_PREFIX}{}", net.param_name(k)), TensorKind::Momentum, v);
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        payload_bytes: w.payload.len() as u64,
        config: net.config().clone(),
        optimizer: opt.map(|o| OptimizerState {
            config: o.cfg,
            step: o.step,
            total_steps: o.total_steps,
        }),
        tensors: w.entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &w.payload)?;
    std::fs::write(manifest_path(path), canonical_json(&manifest)?)?;
    Ok(manifest)
}

fn integrity(tensor: &str, detail: impl Into<String>) -> Error {
    Error::Integrity {
        tensor: tensor.to_string(),
        detail: detail.into(),
    }
}

fn decode(entry: &TensorEntry, payload: &[u8], expected: Shape) -> Result<Tensor> {
    if entry.dtype != CHECKPOINT_DTYPE {
        return Err(integrity(&entry.name, format!("dtype {} is not {CHECKPOINT_DTYPE}", entry.dtype)));
    }
    if entry.shape != expected {
        return Err(integrity(
            &entry.name,
            format!("shape {:?} does not match the network's {:?}", entry.shape, expected),
        ));
    }
    let len: usize = expected.iter().product();
    let start = entry.offset as usize;
    let end = start + len * 8;
    if end > payload.len() {
        return Err(integrity(
            &entry.name,
            format!("bytes {start}..{end} exceed the payload of {} bytes", payload.len()),
        ));
    }
    let data = payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let t = Tensor::new(expected, data)?;
    if checksum_hex(&t) != entry.checksum {
        return Err(integrity(&entry.name, "checksum mismatch"));
    }
    Ok(t)
}

/// Rebuilds the network (and optimizer, if one was saved) from disk.
pub fn load_checkpoint(path: &Path) -> Result<(AsymFusionNet, Option<Optimizer>)> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath)?;
    let header: serde_json::Value = serde_json::from_str(&text)?;
    let version = header.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Format(format!(
            "{}: checkpoint version {version:?}, expected {CHECKPOINT_VERSION}",
            mpath.display()
        )));
    }
    let manifest: Manifest = serde_json::from_value(header)?;
    let payload = std::fs::read(path)?;

    let mut net = AsymFusionNet::build(&manifest.config)?;
    let params: BTreeMap<String, ParamKey> = net.param_keys().into_iter().map(|k| (net.param_name(k), k)).collect();
    let buffers: BTreeMap<String, BufferKey> =
        net.buffer_keys().into_iter().map(|k| (net.buffer_name(k), k)).collect();
    let mut opt = manifest
        .optimizer
        .as_ref()
        .map(|s| {
            let mut o = Optimizer::new(s.config, s.total_steps);
            o.step = s.step;
            o
        });

    let mut seen = BTreeSet::new();
    for e in &manifest.tensors {
        if !seen.insert((e.kind, e.name.as_str())) {
            return Err(integrity(&e.name, "listed twice"));
        }
        match e.kind {
            TensorKind::Param => {
                let k = *params.get(&e.name).ok_or_else(|| integrity(&e.name, "not a network parameter"))?;
                let t = decode(e, &payload, net.param(k).shape())?;
                *net.param_mut(k) = t;
            }
            TensorKind::Buffer => {
                let k = *buffers.get(&e.name).ok_or_else(|| integrity(&e.name, "not a network buffer"))?;
                let len = net.buffer(k).len();
                let t = decode(e, &payload, [1, len, 1, 1])?;
                net.buffer_mut(k).copy_from_slice(t.data());
            }
            TensorKind::Momentum => {
                let o = opt.as_mut().ok_or_else(|| integrity(&e.name, "momentum without optimizer state"))?;
                let k = e
                    .name
                    .strip_prefix(MOMENTUM_PREFIX)
                    .and_then(|n| params.get(n))
                    .copied()
                    .ok_or_else(|| integrity(&e.name, "momentum for an unknown parameter"))?;
                let t = decode(e, &payload, net.param(k).shape())?;
                o.set_velocity(k, t);
            }
        }
    }
    for name in params.keys() {
        if !seen.contains(&(TensorKind::Param, name.as_str())) {
            return Err(integrity(name, "missing from the checkpoint"));
        }
    }
    for name in buffers.keys() {
        if !seen.contains(&(TensorKind::Buffer, name.as_str())) {
            return Err(integrity(name, "missing from the checkpoint"));
        }
    }
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(integrity(
            "<payload>",
            format!("{} bytes on disk, manifest says {}", payload.len(), manifest.payload_bytes),
        ));
    }
    Ok((net, opt))
}
