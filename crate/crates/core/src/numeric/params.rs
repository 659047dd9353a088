//! Named parameter collections and the checkpoint container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::graph::{Gradients, Graph, Var};
use crate::numeric::tensor::Tensor;
use crate::scalar::Scalar;

/// Named tensors, ordered by name. Names are `/`-separated, with the first
/// segment acting as a namespace (`flow/`, `encoder/`, `head/`, `disc/`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Gradient (or any per-parameter tensor) map keyed like a [`ParamSet`].
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
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

    /// Merges `other` in, overwriting on name clashes.
    pub fn extend(&mut self, other: ParamSet<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Puts every tensor on `graph`; names for which `trainable` returns
    /// true become gradient-carrying leaves.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), graph.leaf(t.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            data: t.to_f64_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_file(file: &ParamFile) -> Result<Self> {
        let mut out = Self::new();
        for (k, st) in &file.tensors {
            let t = Tensor::from_f64(&st.shape, &st.data).map_err(|e| Error::Parse(format!("parameter `{k}`: {e}")))?;
            out.insert(k.clone(), t);
        }
        Ok(out)
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients for every bound parameter that required one.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>, gradients: &Gradients<T>) -> GradMap<T> {
        self.vars
            .iter()
            .filter(|(_, v)| graph.requires_grad(**v))
            .map(|(k, v)| (k.clone(), gradients.get(*v)))
            .collect()
    }
}

/// Serialized form of one tensor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized parameter map.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct ParamFile {
    pub tensors: BTreeMap<String, StoredTensor>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: a format version, an opaque configuration block and
/// the parameters. Stored as JSON; floats round-trip exactly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointFile {
    pub format_version: u32,
    #[serde(default)]
    pub config: serde_json::Value,
    pub params: ParamFile,
}

impl CheckpointFile {
    pub fn new<T: Scalar>(config: serde_json::Value, params: &ParamSet<T>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config,
            params: params.to_file(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: Self = serde_json::from_str(&text)?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: file.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        ps.insert("flow/a", Tensor::randn(&[3, 4], 1.0, &mut rng));
        ps.insert("head/b", Tensor::from_f64(&[2], &[0.1 + 0.2, 1e-300]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        CheckpointFile::new(serde_json::json!({"k": 1}), &ps).save(&path).unwrap();
        let back = ParamSet::<f64>::from_file(&CheckpointFile::load(&path).unwrap().params).unwrap();
        assert_eq!(back, ps);
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        std::fs::write(&path, r#"{"format_version": 9, "params": {}}"#).unwrap();
        assert!(matches!(CheckpointFile::load(&path), Err(Error::Version { found: 9, .. })));
    }
}
