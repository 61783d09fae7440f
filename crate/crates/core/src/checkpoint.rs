//! Single-file tensor container.
//!
//! ```text
//! bytes 0..8    magic "RFDCKPT1"
//! bytes 8..16   manifest length L, u64 little-endian
//! bytes 16..16+L  JSON manifest {"meta": {..}, "tensors": [{name, shape, dtype, offset, len}]}
//! then          raw little-endian f32 buffers; offset/len are in bytes from the end of the manifest
//! ```
//!
//! Networks store parameters under their parameter names, batchnorm running statistics
//! under their buffer names and pruning masks as `mask:<param>` (1.0 kept, 0.0 pruned).

use crate::error::{Error, Result};
use crate::model::Network;
use crate::pruning::PruneState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RFDCKPT1";
pub const MASK_PREFIX: &str = "mask:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    /// In file order.
    pub tensors: Vec<(String, Tensor)>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), Tensor::from_vec(t.shape(), t.data().to_vec()).expect("valid tensor")));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let len = 4 * t.numel() as u64;
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset, len });
            offset += len;
        }
        let manifest = serde_json::to_vec(&Manifest { meta: self.meta.clone(), tensors: entries })
            .map_err(|e| ck(format!("manifest encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ck("not a checkpoint (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize.checked_add(mlen).filter(|e| *e <= bytes.len()).ok_or_else(|| ck("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| ck(format!("manifest: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(ck(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.len != 4 * n as u64 {
                return Err(ck(format!("{}: length {} does not match shape {:?}", e.name, e.len, e.shape)));
            }
            let (a, b) = (e.offset as usize, (e.offset + e.len) as usize);
            let raw = data.get(a..b).ok_or_else(|| ck(format!("{}: buffer out of bounds", e.name)))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, vals).map_err(|err| ck(format!("{}: {err}", e.name)))?));
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    /// Written to a sibling temporary file first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn network_checkpoint(net: &Network, prune: Option<&PruneState>, meta: BTreeMap<String, String>) -> Checkpoint {
    let mut ck = Checkpoint { meta, tensors: Vec::new() };
    net.visit_params(&mut |name, _, t| ck.push(name, t));
    net.visit_buffers(&mut |name, t| ck.push(name, t));
    if let Some(p) = prune {
        for (name, m) in &p.masks {
            let t = Tensor::from_vec(&[m.len()], m.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect()).expect("mask");
            ck.push(format!("{MASK_PREFIX}{name}"), &t);
        }
    }
    ck
}

/// Copies parameters and buffers into `net` (shapes must match) and returns any masks.
pub fn restore_network(ck: &Checkpoint, net: &mut Network) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut err = None;
    let mut copy = |name: &str, t: &mut Tensor| {
        if err.is_some() {
            return;
        }
        match ck.get(name) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            Some(src) => err = Some(ck_err(format!("{name}: shape {:?} vs model {:?}", src.shape(), t.shape()))),
            None => err = Some(ck_err(format!("{name}: missing from checkpoint"))),
        }
    };
    net.visit_params_mut(&mut |name, _, t| copy(name, t));
    net.visit_buffers_mut(&mut |name, t| copy(name, t));
    if let Some(e) = err {
        return Err(e);
    }
    Ok(ck
        .tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(MASK_PREFIX).map(|p| (p.to_string(), t.data().iter().map(|v| *v != 0.0).collect())))
        .collect())
}

fn ck_err(msg: String) -> Error {
    Error::Checkpoint(msg)
}
