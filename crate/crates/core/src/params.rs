//! Named parameter store and the named-tensor checkpoint archive.
//!
//! Archive layout: a sequence of entries `u32 name_len | name (UTF-8) | RBT1
//! tensor`, followed by a JSON manifest, followed by the manifest's byte
//! length as a little-endian `u64`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. The gradient starts at zero.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invariant(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
            trainable,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients a backward pass left on the bound parameter leaves.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for &(id, var) in graph.bound_params() {
            if let Some(g) = graph.grad(var) {
                for (a, b) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Euclidean norm of the accumulated gradient over parameters whose name starts with `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Writes every parameter accepted by `filter` to a named-tensor archive.
    pub fn save_archive(
        &self,
        path: &Path,
        filter: impl Fn(&str) -> bool,
        hyperparameters: serde_json::Value,
    ) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .filter(|p| filter(&p.name))
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        write_archive(path, &entries, hyperparameters)
    }

    /// Overwrites values from an archive. Every archived name must exist with
    /// the same shape; returns the number of tensors loaded.
    pub fn load_archive(&mut self, path: &Path) -> Result<usize> {
        let archive = read_archive(path)?;
        for (name, t) in &archive.tensors {
            let id = self
                .lookup(name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
            let have = self.value(id).shape().to_vec();
            if have != t.shape() {
                return Err(Error::dim(
                    "load_archive",
                    format!("{name}: checkpoint {:?} vs model {have:?}", t.shape()),
                ));
            }
            self.params[id.0].value = t.clone();
        }
        Ok(archive.tensors.len())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
    pub hyperparameters: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub manifest: ArchiveManifest,
}

pub fn write_archive(path: &Path, entries: &[(&str, &Tensor)], hyperparameters: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_to(&mut buf).expect("Vec write");
    }
    let manifest = ArchiveManifest {
        format: "rbck1".into(),
        entries: entries
            .iter()
            .map(|(n, t)| ManifestEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        hyperparameters,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "archive too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mlen = u64::from_le_bytes(tail.try_into().unwrap()) as usize;
    if mlen > body.len() {
        return Err(Error::format(path, "manifest length exceeds file"));
    }
    let (mut entries, json) = body.split_at(body.len() - mlen);
    let manifest: ArchiveManifest =
        serde_json::from_slice(json).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    let mut tensors = BTreeMap::new();
    while !entries.is_empty() {
        if entries.len() < 4 {
            return Err(Error::format(path, "truncated entry header"));
        }
        let nlen = u32::from_le_bytes(entries[..4].try_into().unwrap()) as usize;
        if entries.len() < 4 + nlen {
            return Err(Error::format(path, "truncated entry name"));
        }
        let name = std::str::from_utf8(&entries[4..4 + nlen])
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        entries = &entries[4 + nlen..];
        let t = match Tensor::read_from(&mut entries) {
            Ok(Ok(t)) => t,
            Ok(Err(d)) => return Err(Error::format(path, format!("{name}: {d}"))),
            Err(e) => return Err(Error::format(path, format!("{name}: {e}"))),
        };
        tensors.insert(name, t);
    }
    if manifest.entries.len() != tensors.len()
        || manifest.entries.iter().any(|e| {
            tensors
                .get(&e.name)
                .map(|t| t.shape() != e.shape.as_slice())
                .unwrap_or(true)
        })
    {
        return Err(Error::format(path, "manifest disagrees with archived tensors"));
    }
    Ok(Archive { tensors, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_starts_zero_and_resets() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[2, 2], 3.0), true).unwrap();
        assert!(s.grad(id).data().iter().all(|&v| v == 0.0));
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let l = g.sum(w);
        g.backward(l).unwrap();
        s.accumulate_grads(&g);
        assert_eq!(s.grad(id).data(), &[1.0; 4]);
        s.zero_grad();
        assert!(s.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[2], 1.0), false).unwrap();
        let mut g = Graph::new();
        let w = g.param(&s, id);
        let x = g.input(Tensor::full(&[2], 2.0));
        let y = g.mul(w, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn archive_round_trip_and_filter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.rbck");
        let mut s = ParamStore::new();
        s.add("lm.w", Tensor::new(&[2], vec![1.5, -2.0]).unwrap(), false).unwrap();
        s.add("lm.lora_a", Tensor::new(&[1], vec![0.25]).unwrap(), true).unwrap();
        s.save_archive(&path, |n| n.contains("lora"), serde_json::json!({"rank": 8})).unwrap();
        let a = read_archive(&path).unwrap();
        assert_eq!(a.tensors.len(), 1);
        assert_eq!(a.manifest.hyperparameters["rank"], 8);

        let mut t = s.clone();
        *t.value_mut(t.lookup("lm.lora_a").unwrap()) = Tensor::zeros(&[1]);
        assert_eq!(t.load_archive(&path).unwrap(), 1);
        assert_eq!(t.value(t.lookup("lm.lora_a").unwrap()).data(), &[0.25]);
    }

    #[test]
    fn archive_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rbck");
        std::fs::write(&path, b"garbage!garbage!").unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Format { .. })));
    }
}
