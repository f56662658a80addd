//! Adam with bias correction.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Apply one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Array2<f64>>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (name, w) in params.tensors.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Missing(format!("gradient for {name}")))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::Missing(format!("moment for {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::Missing(format!("moment for {name}")))?;
            if g.dim() != w.dim() || m.dim() != w.dim() || v.dim() != w.dim() {
                return Err(Error::ShapeMismatch(format!("{name}: optimizer state")));
            }
            Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}
