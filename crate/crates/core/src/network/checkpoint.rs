//! Binary checkpoint file.
//!
//! Layout, all integers little-endian: magic `AAMU`, version `u32`, tensor
//! count `u32`, then per tensor a `u16` name length, the UTF-8 name, rank
//! `u8` (always 4), four `u32` extents and the `f32` payload.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::NetworkConfig;
use super::params::{bn_layers, layout, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"AAMU";
pub const VERSION: u32 = 1;

pub fn encode_tensors(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let payload: usize = entries.iter().map(|(n, t)| n.len() + 19 + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for e in t.dims().as_array() {
            let e = u32::try_from(e).map_err(|_| Error::Checkpoint(format!("{name}: extent {e} too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated at byte {} reading {what}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic: not an AAMU checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", r.pos - len)))?
            .to_string();
        let rank = r.take(1, "rank")?[0];
        if rank != 4 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}, expected 4")));
        }
        let mut e = [0usize; 4];
        for v in &mut e {
            *v = r.u32("extent")? as usize;
        }
        let dims = Dims::new(e[0], e[1], e[2], e[3]);
        let raw = r.take(dims.len().saturating_mul(4), &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|err| Error::Checkpoint(format!("{name}: {err}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn bytes_to_tensor(b: &[u8]) -> Tensor<f32> {
    Tensor::new(Dims::new(1, 1, 1, b.len()), b.iter().map(|&v| v as f32).collect()).expect("non-empty bytes")
}

fn tensor_to_bytes(t: &Tensor<f32>) -> Option<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8))
        .collect()
}

/// A trained network: its configuration, parameters with optimizer state,
/// and free-form extra tensors (training progress and the like).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParameterStore<f32>,
    pub extra: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, params: ParameterStore<f32>) -> Self {
        Checkpoint {
            config,
            params,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut entries = vec![("meta/network".to_string(), bytes_to_tensor(&json))];
        for (name, p) in self.params.iter() {
            entries.push((format!("param/{name}"), p.value.clone()));
            entries.push((format!("momentum/{name}"), p.momentum.clone()));
        }
        for (name, b) in self.params.buffers() {
            entries.push((format!("buffer/{name}"), b.clone()));
        }
        for (name, t) in &self.extra {
            entries.push((format!("extra/{name}"), t.clone()));
        }
        encode_tensors(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor<f32>> = decode_tensors(bytes)?.into_iter().collect();
        let meta = map
            .remove("meta/network")
            .ok_or_else(|| Error::Checkpoint("missing meta/network".into()))?;
        let json =
            tensor_to_bytes(&meta).ok_or_else(|| Error::Checkpoint("meta/network is not a byte string".into()))?;
        let config: NetworkConfig =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("meta/network: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored network config is invalid: {e}")))?;

        let mut take = |key: String| {
            map.remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
        };
        let mut params = ParameterStore::new();
        for slot in layout(&config) {
            let value = take(format!("param/{}", slot.name))?;
            let momentum = take(format!("momentum/{}", slot.name))?;
            if value.dims() != slot.dims || momentum.dims() != slot.dims {
                return Err(Error::Checkpoint(format!(
                    "{} has dims {} / {}, config needs {}",
                    slot.name,
                    value.dims(),
                    momentum.dims(),
                    slot.dims
                )));
            }
            params.insert(slot.name.clone(), value, slot.kind)?;
            params.get_mut(&slot.name).expect("just inserted").momentum = momentum;
        }
        for (layer, _) in bn_layers(&config) {
            for stat in ["mean", "var"] {
                let name = format!("{layer}.{stat}");
                params.insert_buffer(name.clone(), take(format!("buffer/{name}"))?)?;
            }
        }
        params.check_matches(&config)?;
        let mut extra = BTreeMap::new();
        for (name, t) in map {
            match name.strip_prefix("extra/") {
                Some(k) => {
                    extra.insert(k.to_string(), t);
                }
                None => return Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
            }
        }
        Ok(Checkpoint { config, params, extra })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
