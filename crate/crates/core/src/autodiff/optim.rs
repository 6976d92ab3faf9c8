use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step count per parameter; parameters first seen later get their own bias correction.
    steps: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update; `grads` is consumed so it cannot be reapplied.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: Vec<(ParamId, Tensor)>,
        lr: f64,
    ) -> Result<()> {
        for (id, g) in &grads {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {}", store.entry(*id).name),
                });
            }
        }
        if self.steps.len() < store.len() {
            self.steps.resize(store.len(), 0);
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(id);
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; p.numel()];
                self.v[i] = vec![0.0; p.numel()];
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.m
            .get(id.index())
            .map(|m| m.as_slice())
            .filter(|m| !m.is_empty())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.v
            .get(id.index())
            .map(|v| v.as_slice())
            .filter(|v| !v.is_empty())
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.steps.get(id.index()).copied().unwrap_or(0)
    }

    /// Flat view for serialization: (steps, m, v) per parameter slot.
    pub fn state(&self) -> (&[u64], &[Vec<f64>], &[Vec<f64>]) {
        (&self.steps, &self.m, &self.v)
    }

    pub fn from_state(steps: Vec<u64>, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        if steps.len() != m.len() || m.len() != v.len() {
            return Err(Error::InvalidArgument(
                "inconsistent optimizer state lengths".into(),
            ));
        }
        Ok(Adam {
            steps,
            m,
            v,
            ..Adam::default()
        })
    }
}
