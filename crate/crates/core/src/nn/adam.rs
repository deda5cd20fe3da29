use super::matrix::Matrix;
use super::params::{Grads, ParamId, ParamStore};

/// Per-parameter trainability used by the optimizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamMask {
    Frozen,
    All,
    /// Only rows in the half-open range receive updates.
    Rows(usize, usize),
}

/// Adam with bias correction:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// Frozen entries are never touched, so they stay bitwise identical.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, masks: &[ParamMask]) {
        assert_eq!(masks.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, mask) in masks.iter().enumerate() {
            let id = ParamId(i);
            let Some(g) = grads.get(id) else { continue };
            let cols = g.cols();
            let (lo, hi) = match mask {
                ParamMask::Frozen => continue,
                ParamMask::All => (0, g.rows()),
                ParamMask::Rows(lo, hi) => (*lo, (*hi).min(g.rows())),
            };
            let w = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in lo * cols..hi * cols {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
