use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors, each paired with a same-shape gradient slot.
/// Iteration order is insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor) {
        (&mut self.values[id.0], &mut self.grads[id.0])
    }

    /// Overwrites a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(
                format!("set `{name}`"),
                format!("{:?} vs {:?}", self.values[id.0].shape(), value.shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Adds a backward pass's parameter gradients into the gradient slots.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, g) in graph.param_gradients(grads) {
            for (a, d) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
                *a += d;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Manifest<H> {
    format: String,
    payload: String,
    hyper: H,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "egoground-checkpoint-v1";

/// A loaded checkpoint: parameters plus whatever hyperparameters were recorded.
#[derive(Clone, Debug)]
pub struct Checkpoint<H> {
    pub hyper: H,
    pub params: ParamStore,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest` (JSON: name, shape, dtype, byte offset) and a sidecar
/// `.bin` holding the little-endian f64 payload.
pub fn save_checkpoint<H: Serialize>(manifest: &Path, params: &ParamStore, hyper: &H) -> Result<()> {
    let bin = payload_path(manifest);
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let t = params.value(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: payload.len() as u64,
        });
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let m = Manifest {
        format: FORMAT.into(),
        payload: bin
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        hyper,
        tensors,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(manifest, text + "\n").map_err(|e| Error::io(manifest, e))?;
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
    Ok(())
}

pub fn load_checkpoint<H: for<'de> Deserialize<'de>>(manifest: &Path) -> Result<Checkpoint<H>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let m: Manifest<H> = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::Schema {
            path: "format".into(),
            message: format!("unsupported checkpoint format `{}`", m.format),
        });
    }
    let bin = manifest.with_file_name(&m.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut params = ParamStore::new();
    for (i, e) in m.tensors.iter().enumerate() {
        if e.dtype != "f64" {
            return Err(Error::Schema {
                path: format!("tensors[{i}].dtype"),
                message: format!("unsupported dtype `{}`", e.dtype),
            });
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        let chunk = bytes.get(start..end).ok_or_else(|| Error::Schema {
            path: format!("tensors[{i}].offset"),
            message: format!("payload too short for `{}`", e.name),
        })?;
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(Checkpoint { hyper: m.hyper, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(vec![2])).is_err());
        assert_eq!(s.grad(s.id("w").unwrap()).shape(), &[2]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::matrix(2, 2, vec![0.1, -1e-300, 3.0, 1.0 / 3.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::row_vector(vec![std::f64::consts::PI]).unwrap()).unwrap();
        save_checkpoint(&path, &s, &serde_json::json!({"dim": 2})).unwrap();
        let c: Checkpoint<serde_json::Value> = load_checkpoint(&path).unwrap();
        assert_eq!(c.params, s);
        assert_eq!(c.hyper["dim"], 2);
        assert!(dir.path().join("ckpt.bin").exists());
    }

    #[test]
    fn truncated_payload_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![4])).unwrap();
        save_checkpoint(&path, &s, &()).unwrap();
        fs::write(dir.path().join("c.bin"), [0u8; 8]).unwrap();
        let err = load_checkpoint::<()>(&path).unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "tensors[0].offset"), "{err}");
    }
}
