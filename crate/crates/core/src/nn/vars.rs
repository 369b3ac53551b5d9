//! Named parameter store with deterministic init and checkpoint I/O.
//!
//! Checkpoints are safetensors files written by a small serializer of our
//! own so the bytes are reproducible: tensors and metadata keys are sorted,
//! unlike the reference serializer whose metadata ordering follows a hash
//! map. Reading uses the standard crate.

use super::init::{self, Init};
use crate::error::{Error, Result};
use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { vars: Arc::new(Mutex::new(BTreeMap::new())), device: super::device(), seed }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    /// Create (or fetch) a parameter. Init is a pure function of
    /// `(store seed, full name)`.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let mut vars = self.vars.lock().expect("param store poisoned");
        if let Some(var) = vars.get(name) {
            if var.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "param {name} exists with shape {:?}, requested {:?}",
                    var.dims(),
                    shape
                )));
            }
            return Ok(var.clone());
        }
        let mut rng = init::rng_for(self.seed, name);
        let tensor = init::build(init, shape, &mut rng, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param store poisoned").get(name).cloned()
    }

    /// Insert a raw tensor as a parameter (checkpoint loading).
    pub fn insert(&self, name: &str, tensor: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&tensor)?;
        self.vars
            .lock()
            .expect("param store poisoned")
            .insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// All `(name, var)` pairs in name order.
    pub fn entries(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("param store poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Entries whose name starts with `prefix`.
    pub fn entries_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.entries()
            .into_iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Hex digest over all parameters (name order), for freeze contracts.
    pub fn checksum(&self) -> String {
        checksum_entries(&self.entries())
    }

    pub fn checksum_prefix(&self, prefix: &str) -> String {
        checksum_entries(&self.entries_with_prefix(prefix))
    }

    /// Overwrite matching parameters from `source` (same shapes required).
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>) -> Result<usize> {
        let vars = self.vars.lock().expect("param store poisoned");
        let mut loaded = 0;
        for (name, var) in vars.iter() {
            if let Some(t) = tensors.get(name) {
                var.set(t)?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope { store: self.store, prefix }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn param(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.param(&self.name(leaf), shape, init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

fn checksum_entries(entries: &[(String, Var)]) -> String {
    let mut h = Sha256::new();
    for (name, var) in entries {
        h.update(name.as_bytes());
        h.update([0u8]);
        let flat = var
            .as_tensor()
            .flatten_all()
            .and_then(|t| t.to_vec1::<f32>())
            .unwrap_or_default();
        for v in flat {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Write tensors + string metadata as a safetensors file with fully
/// deterministic bytes (names sorted, metadata keys sorted, header padded
/// to 8 bytes).
pub fn save_safetensors(
    entries: &[(String, Tensor)],
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let mut sorted: Vec<&(String, Tensor)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        let meta: serde_json::Map<String, serde_json::Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        header.insert("__metadata__".to_string(), serde_json::Value::Object(meta));
    }
    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &sorted {
        let t = tensor.to_dtype(DType::F32)?.contiguous()?;
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        let bytes_len = data.len() * 4;
        let mut entry = serde_json::Map::new();
        entry.insert("dtype".into(), serde_json::Value::String("F32".into()));
        entry.insert(
            "shape".into(),
            serde_json::Value::Array(
                t.dims().iter().map(|&d| serde_json::Value::from(d)).collect(),
            ),
        );
        entry.insert(
            "data_offsets".into(),
            serde_json::Value::Array(vec![
                serde_json::Value::from(offset),
                serde_json::Value::from(offset + bytes_len),
            ]),
        );
        header.insert((*name).clone(), serde_json::Value::Object(entry));
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += bytes_len;
    }
    let mut header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_safetensors(path: &Path) -> Result<(HashMap<String, Tensor>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &super::device())?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata = meta
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    Ok((tensors, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_deterministic_per_seed_and_name() {
        let a = ParamStore::new(5);
        let b = ParamStore::new(5);
        let c = ParamStore::new(6);
        let va = a.param("x.w", &[3, 3], Init::Normal { std: 1.0 }).unwrap();
        let vb = b.param("x.w", &[3, 3], Init::Normal { std: 1.0 }).unwrap();
        let vc = c.param("x.w", &[3, 3], Init::Normal { std: 1.0 }).unwrap();
        assert_eq!(
            va.as_tensor().to_vec2::<f32>().unwrap(),
            vb.as_tensor().to_vec2::<f32>().unwrap()
        );
        assert_ne!(
            va.as_tensor().to_vec2::<f32>().unwrap(),
            vc.as_tensor().to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn save_is_byte_deterministic_and_loads_back() {
        let store = ParamStore::new(3);
        store.param("b.w", &[2, 2], Init::Normal { std: 0.5 }).unwrap();
        store.param("a.w", &[4], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let entries: Vec<(String, Tensor)> = store
            .entries()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("z_key".to_string(), "zv".to_string());
        meta.insert("a_key".to_string(), "av".to_string());

        let dir = std::env::temp_dir().join("textsr_vars_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.safetensors");
        let p2 = dir.join("b.safetensors");
        save_safetensors(&entries, &meta, &p1).unwrap();
        save_safetensors(&entries, &meta, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let (tensors, meta2) = load_safetensors(&p1).unwrap();
        assert_eq!(meta2.get("a_key").map(String::as_str), Some("av"));
        let store2 = ParamStore::new(999);
        store2.param("a.w", &[4], Init::Zeros).unwrap();
        store2.param("b.w", &[2, 2], Init::Zeros).unwrap();
        store2.load_from(&tensors).unwrap();
        assert_eq!(store.checksum(), store2.checksum());
    }
}
