//! Named parameter sets with Adam state, plus EMA tracking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step_count: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a parameter. Names must be unique and values finite.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "param_insert" });
        }
        let n = value.numel();
        self.moments.insert(
            name.clone(),
            Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// A copy of the values with fresh optimizer state.
    pub fn values_only(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.clone()).expect("copy of a valid set");
        }
        out
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut out = ParamSet::new();
        for (k, v) in tensors {
            out.insert(k, v)?;
        }
        Ok(out)
    }

    fn check_congruent(&self, other: &BTreeMap<String, Tensor>, what: &str) -> Result<()> {
        if self.params.len() != other.len() {
            return Err(Error::Incongruent(format!(
                "{} parameters vs {} {what}",
                self.params.len(),
                other.len()
            )));
        }
        for (name, p) in &self.params {
            match other.get(name) {
                Some(o) if o.shape() == p.shape() => {}
                Some(o) => {
                    return Err(Error::Incongruent(format!(
                        "{name}: {:?} vs {:?}",
                        p.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::Incongruent(format!("{what} lacks {name}"))),
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Non-finite gradients are rejected and
    /// leave the set untouched.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
        self.check_congruent(grads, "gradients")?;
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            let mom = self.moments.get_mut(name).expect("moments exist for every param");
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// `self <- mu * self + (1 - mu) * source`, elementwise.
    pub fn ema_update(&mut self, source: &ParamSet, mu: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::invalid(format!("ema rate {mu} outside [0, 1]")));
        }
        self.check_congruent(&source.params, "source parameters")?;
        for (name, p) in self.params.iter_mut() {
            let s = source.params[name].data();
            for (w, &x) in p.data_mut().iter_mut().zip(s) {
                *w = mu * *w + (1.0 - mu) * x;
            }
        }
        Ok(())
    }

    /// Overwrite values from `source`, keeping this set's optimizer state.
    pub fn copy_values_from(&mut self, source: &ParamSet) -> Result<()> {
        self.check_congruent(&source.params, "source parameters")?;
        for (name, p) in self.params.iter_mut() {
            p.data_mut().copy_from_slice(source.params[name].data());
        }
        Ok(())
    }
}
