use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// How a freshly declared tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in) · gain.
    HeUniform { fan_in: usize, gain: f64 },
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Named parameter tensors with declared shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl ParamStore {
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::HeUniform { fan_in, gain } => {
                    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Constant(c) => vec![c; n],
            };
            let prev = tensors.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data));
            assert!(prev.is_none(), "duplicate parameter {}", spec.name);
        }
        Self {
            tensors,
            frozen: false,
        }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors,
            frozen: false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the store read-only and rounds values to f32 so that the
    /// on-disk representation is exact.
    pub fn freeze(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::State(format!(
                "parameter {name} belongs to a frozen store"
            )));
        }
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Checks the store against declared specs (names and shapes).
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!(
                    "parameter {} has non-finite values",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and exact value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// metadata.json of a checkpoint directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub training_log: Vec<f64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.f32")
}

/// Writes `metadata.json` plus one little-endian f32 file per tensor.
pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    config: serde_json::Value,
    params: &ParamStore,
    training_log: &[f64],
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        config,
        shapes: params.shapes(),
        training_log: training_log.to_vec(),
        extra,
    };
    let path = dir.join("metadata.json");
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for (name, t) in params.iter() {
        let mut bytes = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let path = dir.join(tensor_file(name));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads a checkpoint; the returned store is frozen.
pub fn load_checkpoint(dir: &Path, kind: &str) -> Result<(CheckpointMeta, ParamStore)> {
    let path = dir.join("metadata.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            meta.schema_version
        )));
    }
    if meta.kind != kind {
        return Err(Error::Config(format!(
            "{} holds a {} checkpoint, expected {kind}",
            dir.display(),
            meta.kind
        )));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in &meta.shapes {
        let path = dir.join(tensor_file(name));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Format(format!(
                "{}: {} bytes, expected {}",
                path.display(),
                bytes.len(),
                4 * n
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(shape, data));
    }
    let mut store = ParamStore::from_tensors(tensors);
    store.freeze();
    Ok((meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip_is_exact_after_freeze() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let specs = vec![
            ParamSpec::new("a.w", &[3, 2], Init::HeUniform { fan_in: 2, gain: 1.0 }),
            ParamSpec::new("a.b", &[3], Init::Zeros),
        ];
        let store = ParamStore::init(&specs, &mut rng).frozen();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(
            dir.path(),
            "test",
            serde_json::json!({}),
            &store,
            &[1.0],
            serde_json::Value::Null,
        )
        .unwrap();
        let (meta, loaded) = load_checkpoint(dir.path(), "test").unwrap();
        assert_eq!(meta.training_log, vec![1.0]);
        assert_eq!(loaded.fingerprint(), store.fingerprint());
        loaded.validate(&specs).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), "other"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frozen_store_rejects_mutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let specs = vec![ParamSpec::new("w", &[2], Init::Zeros)];
        let mut store = ParamStore::init(&specs, &mut rng).frozen();
        assert!(matches!(store.tensor_mut("w"), Err(Error::State(_))));
    }
}
