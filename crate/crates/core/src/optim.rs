//! AdamW with decoupled weight decay over the trainable parameters of a store.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::{read_archive, write_archive, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.trainable_ids() {
            let name = store.name(id).to_string();
            let grad = store.grad(id).clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(grad.shape()));
            let p = store.value_mut(id);
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= self.lr * (update + self.weight_decay * *p);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<(String, &Tensor)> = self
            .m
            .iter()
            .map(|(k, t)| (format!("m.{k}"), t))
            .chain(self.v.iter().map(|(k, t)| (format!("v.{k}"), t)))
            .collect();
        let entries: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_archive(path, &entries, serde_json::json!({ "step": self.step }))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let a = read_archive(path)?;
        self.step = a.manifest.hyperparameters["step"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "optimizer state lacks a step count"))?;
        self.m.clear();
        self.v.clear();
        for (name, t) in a.tensors {
            match name.split_once('.') {
                Some(("m", k)) => self.m.insert(k.to_string(), t),
                Some(("v", k)) => self.v.insert(k.to_string(), t),
                _ => return Err(Error::format(path, format!("unexpected entry {name}"))),
            };
        }
        Ok(())
    }
}
