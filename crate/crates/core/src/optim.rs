//! Adam optimizer over named parameters, with exportable moment state so a
//! resumed run continues bit-for-bit where it left off.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Adam with decoupled per-parameter first/second moments.
pub struct Adam {
    params: Vec<(String, Var)>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Completed update steps; bias correction uses `t` after increment.
    t: usize,
    /// Per-parameter `(m, v)` moments, allocated on first use.
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    /// Standard hyperparameters: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(params: Vec<(String, Var)>, lr: f64) -> Self {
        Adam {
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Completed steps.
    pub fn step_count(&self) -> usize {
        self.t
    }

    /// Applies one update from `grads`. Parameters without a gradient are
    /// left untouched (their moments still exist but do not decay).
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in &self.params {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            // Moments must not retain the autograd graph across steps.
            let grad = grad.detach();
            let (m, v) = match self.moments.remove(name) {
                Some(mv) => mv,
                None => (
                    Tensor::zeros(var.dims(), DType::F64, var.device())?,
                    Tensor::zeros(var.dims(), DType::F64, var.device())?,
                ),
            };
            let m = ((m.affine(self.beta1, 0.0)? + grad.affine(1.0 - self.beta1, 0.0)?)?).detach();
            let v = ((v.affine(self.beta2, 0.0)?
                + grad.sqr()?.affine(1.0 - self.beta2, 0.0)?)?)
            .detach();
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let delta = m_hat.div(&v_hat.sqrt()?.affine(1.0, self.eps)?)?;
            let updated = (var.as_tensor() - delta.affine(self.lr, 0.0)?)?;
            var.set(&updated)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moment tensors flattened to `m.<param>` / `v.<param>` keys, for
    /// embedding in a checkpoint next to the step count.
    pub fn export_state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        out
    }

    /// Restores moments and step count exported by [`export_state`]. Every
    /// key must belong to a tracked parameter and match its shape; missing
    /// moments stay unallocated, matching a parameter that had not yet
    /// received a gradient.
    ///
    /// [`export_state`]: Adam::export_state
    pub fn import_state(
        &mut self,
        step_count: usize,
        state: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (key, tensor) in state {
            let (kind, name) = key
                .split_once('.')
                .ok_or_else(|| Error::config(format!("optimizer state key {key} has no prefix")))?;
            let (_, var) = self
                .params
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::config(format!("optimizer state for unknown parameter {name}")))?;
            if tensor.dims() != var.dims() {
                return Err(Error::dim(format!(
                    "optimizer state {key} has shape {:?}, parameter has {:?}",
                    tensor.dims(),
                    var.dims()
                )));
            }
            let entry = moments.entry(name.to_string()).or_default();
            let tensor = tensor.to_dtype(DType::F64)?;
            match kind {
                "m" => entry.0 = Some(tensor),
                "v" => entry.1 = Some(tensor),
                other => {
                    return Err(Error::config(format!(
                        "optimizer state key {key} has unknown prefix {other}"
                    )))
                }
            }
        }
        let mut restored = BTreeMap::new();
        for (name, (m, v)) in moments {
            match (m, v) {
                (Some(m), Some(v)) => {
                    restored.insert(name, (m, v));
                }
                _ => {
                    return Err(Error::config(format!(
                        "optimizer state for {name} is missing one of its two moments"
                    )))
                }
            }
        }
        self.t = step_count;
        self.moments = restored;
        Ok(())
    }
}
