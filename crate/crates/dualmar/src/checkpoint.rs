//! Named-array checkpoint container.
//!
//! Layout: the 8-byte magic `DMARCKPT`, a little-endian `u32` manifest
//! length, the UTF-8 JSON manifest, then the payload of every array as
//! little-endian `f64` in manifest order. The manifest lists each array's
//! name, shape and byte range, carries a SHA-256 of the payload and echoes
//! the configuration the arrays were produced under.

use std::path::Path;

use dualmar_core::nn::{Matrix, ParamStore};
use dualmar_core::pipeline::{HeadSpec, Model, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsio;

pub const MAGIC: &[u8; 8] = b"DMARCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64";

const OPTIM_M: &str = "optim/m/";
const OPTIM_V: &str = "optim/v/";
const OPTIM_STEPS: &str = "optim/steps/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
    pub config: serde_json::Value,
}

/// Arrays in a fixed order plus the configuration echo.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Matrix)>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            arrays: Vec::new(),
            config,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.arrays.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("array {name} is absent")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, m) in &self.arrays {
            if entries.iter().any(|e: &ArrayEntry| &e.name == name) {
                return Err(Error::CorruptCheckpoint(format!("duplicate array {name}")));
            }
            let offset = payload.len() as u64;
            for v in m.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            dtype: DTYPE.into(),
            arrays: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            config: self.config.clone(),
        };
        let text = serde_json::to_vec(&manifest).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let len = u32::try_from(text.len()).map_err(|_| Error::CorruptCheckpoint("manifest too large".into()))?;
        let mut out = Vec::with_capacity(12 + text.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = split_manifest(bytes)?;
        let corrupt = |m: String| Err(Error::CorruptCheckpoint(m));
        if manifest.version != FORMAT_VERSION {
            return corrupt(format!("unsupported version {}", manifest.version));
        }
        if manifest.dtype != DTYPE {
            return corrupt(format!("unsupported dtype {}", manifest.dtype));
        }
        let mut expected = 0u64;
        for e in &manifest.arrays {
            let want = (e.shape[0] as u64) * (e.shape[1] as u64) * 8;
            if e.offset != expected || e.bytes != want {
                return corrupt(format!("array {} does not tile the payload", e.name));
            }
            expected += e.bytes;
        }
        if expected != payload.len() as u64 {
            return corrupt(format!("payload holds {} bytes, manifest describes {expected}", payload.len()));
        }
        if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
            return corrupt("payload checksum mismatch".into());
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            let raw = &payload[e.offset as usize..(e.offset + e.bytes) as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let m = Matrix::from_vec(e.shape[0], e.shape[1], data).map_err(|err| Error::CorruptCheckpoint(err.to_string()))?;
            arrays.push((e.name.clone(), m));
        }
        Ok(Self {
            arrays,
            config: manifest.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read_bytes(path)?)
    }
}

fn split_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CorruptCheckpoint("manifest runs past end of file".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[12..end]).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}

/// Reads only the configuration echo, without decoding or verifying the
/// payload.
pub fn read_config(path: &Path) -> Result<serde_json::Value> {
    let bytes = fsio::read_bytes(path)?;
    Ok(split_manifest(&bytes)?.0.config)
}

/// Every parameter of `store`, optionally followed by its Adam moments and
/// step count.
pub fn store_arrays(store: &ParamStore, optimizer: bool, ck: &mut Checkpoint) {
    for p in store.iter() {
        ck.push(p.name.clone(), p.value.clone());
    }
    if optimizer {
        for p in store.iter() {
            ck.push(format!("{OPTIM_M}{}", p.name), p.m.clone());
            ck.push(format!("{OPTIM_V}{}", p.name), p.v.clone());
            ck.push(format!("{OPTIM_STEPS}{}", p.name), Matrix::filled(1, 1, p.steps as f64));
        }
    }
}

/// Rebuilds a parameter store from the non-optimizer arrays whose name
/// starts with `prefix`. Missing optimizer state loads as zeros.
pub fn load_store(ck: &Checkpoint, prefix: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, value) in &ck.arrays {
        if name.starts_with("optim/") || !name.starts_with(prefix) {
            continue;
        }
        let (r, c) = value.shape();
        let m = ck.get(&format!("{OPTIM_M}{name}")).cloned().unwrap_or_else(|| Matrix::zeros(r, c));
        let v = ck.get(&format!("{OPTIM_V}{name}")).cloned().unwrap_or_else(|| Matrix::zeros(r, c));
        let steps = ck.get(&format!("{OPTIM_STEPS}{name}")).map_or(0, |s| s.get(0, 0) as u64);
        if m.shape() != (r, c) || v.shape() != (r, c) {
            return Err(Error::CorruptCheckpoint(format!("optimizer state of {name} has the wrong shape")));
        }
        store.insert_with_state(name, value.clone(), m, v, steps)?;
    }
    Ok(store)
}

/// Structural description of a model, echoed in its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEcho {
    pub model: ModelConfig,
    pub n_concepts: usize,
    pub lab_sizes: [usize; 3],
    pub head: Option<HeadSpec>,
}

impl ModelEcho {
    pub fn of(model: &Model) -> Self {
        Self {
            model: model.cfg.clone(),
            n_concepts: model.n_concepts,
            lab_sizes: model.lab_sizes,
            head: model.head,
        }
    }
}

/// Parameters and optimizer state of `model`; `extra` is merged into the
/// configuration echo next to the structural description under `"model"`.
pub fn model_checkpoint(model: &Model, extra: serde_json::Map<String, serde_json::Value>) -> Result<Checkpoint> {
    let mut config = extra;
    let echo = serde_json::to_value(ModelEcho::of(model)).map_err(|e| Error::Config(e.to_string()))?;
    config.insert("structure".into(), echo);
    let mut ck = Checkpoint::new(serde_json::Value::Object(config));
    store_arrays(&model.store, true, &mut ck);
    Ok(ck)
}

pub fn model_echo(ck: &Checkpoint) -> Result<ModelEcho> {
    let v = ck
        .config
        .get("structure")
        .ok_or_else(|| Error::CorruptCheckpoint("no model structure in manifest".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::CorruptCheckpoint(format!("model structure: {e}")))
}

/// Restores a whole model, refusing checkpoints whose structure differs
/// from what the caller expects.
pub fn restore_model(ck: &Checkpoint, expected: &ModelConfig, n_concepts: usize, lab_sizes: [usize; 3]) -> Result<Model> {
    let echo = model_echo(ck)?;
    if &echo.model != expected {
        return Err(Error::ConfigMismatch("model settings differ from the checkpoint".into()));
    }
    if echo.n_concepts != n_concepts || echo.lab_sizes != lab_sizes {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint covers {} concepts with lab categories {:?}, data has {n_concepts} and {lab_sizes:?}",
            echo.n_concepts, echo.lab_sizes
        )));
    }
    let emb = ck.require("encoder/embedding")?.clone();
    let mut model = Model::new(echo.model.clone(), emb, lab_sizes, 0)?;
    if let Some(h) = echo.head {
        model.attach_head(h, 0)?;
    }
    let stored = load_store(ck, "")?;
    if stored.len() != model.store.len() || model.store.names().any(|n| !stored.contains(n)) {
        return Err(Error::ConfigMismatch("parameter set differs from the model layout".into()));
    }
    model
        .store
        .load_from(&stored, "")
        .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
    Ok(model)
}

/// Copies the parameters under `prefix` from `ck` into `model`, checking
/// that the structural settings agree. Returns how many arrays were loaded.
pub fn load_prefix_into(ck: &Checkpoint, model: &mut Model, prefix: &str) -> Result<usize> {
    let echo = model_echo(ck)?;
    if echo.model != model.cfg || echo.n_concepts != model.n_concepts || echo.lab_sizes != model.lab_sizes {
        return Err(Error::ConfigMismatch("model settings differ from the checkpoint".into()));
    }
    let stored = load_store(ck, prefix)?;
    model
        .store
        .load_from(&stored, prefix)
        .map_err(|e| Error::ConfigMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({"k": 3}));
        ck.push("a", Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.2));
        ck.push("b", Matrix::filled(1, 1, f64::MIN_POSITIVE));
        ck.push("empty", Matrix::zeros(0, 4));
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn duplicate_names_are_refused() {
        let mut ck = sample();
        ck.push("a", Matrix::zeros(1, 1));
        assert!(ck.to_bytes().is_err());
    }
}
