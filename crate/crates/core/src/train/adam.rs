use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Weights;
use crate::tensor::{io, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place; `t` is the 1-based
/// step number.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hp: &AdamParams) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::DimMismatch(format!(
            "adam: param {n}, grad {}, m {}, v {}",
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidConfig("adam step numbers start at 1".into()));
    }
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..n {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
    Ok(())
}

/// First and second moments for every named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(weights: &Weights) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = weights
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, weights: &mut Weights, grads: &BTreeMap<String, Vec<f64>>, hp: &AdamParams) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::DimMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        for (name, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(Error::DimMismatch(format!("no optimizer state for {name}")));
            };
            let p = weights
                .get_mut(name)
                .ok_or_else(|| Error::DimMismatch(format!("no parameter {name}")))?;
            adam_step(p.data_mut(), g, m, v, self.t, hp)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (prefix, map) in [("m", &self.m), ("v", &self.v)] {
            for (k, data) in map {
                tensors.insert(format!("{prefix}.{k}"), Tensor::new(vec![data.len()], data.clone())?);
            }
        }
        io::save(path, &tensors, serde_json::json!({ "t": self.t }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = io::load(path)?;
        let t = meta
            .get("t")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("optimizer state has no step count".into()))?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in tensors {
            if let Some(k) = name.strip_prefix("m.") {
                m.insert(k.to_string(), tensor.into_data());
            } else if let Some(k) = name.strip_prefix("v.") {
                v.insert(k.to_string(), tensor.into_data());
            } else {
                return Err(Error::Format(format!("unexpected optimizer tensor {name}")));
            }
        }
        if m.keys().ne(v.keys()) {
            return Err(Error::Format("optimizer moments name different parameters".into()));
        }
        Ok(AdamState { t, m, v })
    }

    /// Errors unless the moments cover exactly the parameters of `weights`.
    pub fn check_matches(&self, weights: &Weights) -> Result<()> {
        let ok = self.m.len() == weights.tensors().len()
            && weights
                .tensors()
                .iter()
                .all(|(k, t)| self.m.get(k).is_some_and(|m| m.len() == t.numel()));
        if ok {
            Ok(())
        } else {
            Err(Error::Format("optimizer state does not match the weights".into()))
        }
    }
}
