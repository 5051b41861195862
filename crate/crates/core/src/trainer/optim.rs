//! Adam with bias correction and global-norm gradient clipping.

use crate::compute::{ParamId, ParamStore, Tensor};
use crate::error::{ClsrError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied; bias correction uses `step` after increment.
    pub step: u64,
    /// Indexed by parameter index; `None` until a parameter first receives a gradient.
    pub moments: Vec<Option<AdamMoments>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update. Frozen parameters must not appear in `grads`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            if store.is_frozen(*id) {
                return Err(ClsrError::Internal(format!(
                    "frozen parameter {} received a gradient",
                    store.param(*id).name
                )));
            }
            let slot = &mut self.moments[id.index()];
            let mo = slot.get_or_insert_with(|| AdamMoments {
                m: Tensor::zeros(g.rows(), g.cols()),
                v: Tensor::zeros(g.rows(), g.cols()),
            });
            let (b1, b2) = (self.beta1, self.beta2);
            let param = store.value_mut(*id);
            let (p, m, v) = (param.data_mut(), mo.m.data_mut(), mo.v.data_mut());
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.scale_assign(s));
    }
    norm
}
