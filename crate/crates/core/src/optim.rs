//! AdaDelta with a constant learning-rate multiplier.
//!
//! Per scalar weight `x` with gradient `g`:
//!
//! ```text
//! E[g²]  ← ρ E[g²] + (1 − ρ) g²
//! Δx     = −sqrt(E[Δx²] + ε) / sqrt(E[g²] + ε) · g
//! E[Δx²] ← ρ E[Δx²] + (1 − ρ) Δx²
//! x      ← x + η Δx
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdaDelta {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    sq_grad: Vec<Vec<f64>>,
    sq_update: Vec<Vec<f64>>,
}

impl AdaDelta {
    pub fn new(store: &ParamStore, learning_rate: f64, rho: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdaDelta {
            learning_rate,
            rho,
            epsilon,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    /// Running average of squared gradients for `id`.
    pub fn sq_grad(&self, id: ParamId) -> &[f64] {
        &self.sq_grad[id.index()]
    }

    pub fn sq_update(&self, id: ParamId) -> &[f64] {
        &self.sq_update[id.index()]
    }

    /// Updates the parameters listed in `ids`; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) -> Result<()> {
        let (rho, eps, lr) = (self.rho, self.epsilon, self.learning_rate);
        for &id in ids {
            let len = store.get(id).len();
            let g = grads.dense(id, len);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: format!("adadelta update of {}", store.name(id)),
                });
            }
            let eg = &mut self.sq_grad[id.index()];
            let ex = &mut self.sq_update[id.index()];
            let x = store.get_mut(id).data_mut();
            for i in 0..len {
                let gi = g[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                let dx = -((ex[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * gi;
                ex[i] = rho * ex[i] + (1.0 - rho) * dx * dx;
                x[i] += lr * dx;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(v.to_vec()));
        (s, id)
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut s, id) = store(&[1.5, -2.0]);
        let mut opt = AdaDelta::new(&s, 0.08, 0.95, 1e-6);
        for _ in 0..10 {
            opt.step(&mut s, &Gradients::new(1), &[id]).unwrap();
        }
        assert_eq!(s.get(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_value() {
        let (mut s, id) = store(&[0.0]);
        let mut opt = AdaDelta::new(&s, 0.08, 0.95, 1e-6);
        let mut g = Gradients::new(1);
        g.add_dense(id, &[1.0]);
        opt.step(&mut s, &g, &[id]).unwrap();
        // Δx = −sqrt(1e-6) / sqrt(0.05 + 1e-6)
        let dx = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((dx + 0.004472).abs() < 1e-6);
        assert!((s.get(id).data()[0] - 0.08 * dx).abs() < 1e-15);
        assert!(opt.sq_grad(id)[0] >= 0.0 && opt.sq_update(id)[0] >= 0.0);
    }

    #[test]
    fn steady_state_is_scale_free() {
        let run = |scale: f64| {
            let (mut s, id) = store(&[0.0]);
            let mut opt = AdaDelta::new(&s, 0.08, 0.95, 1e-6);
            let mut g = Gradients::new(1);
            g.add_dense(id, &[scale]);
            let mut last = 0.0;
            for _ in 0..100 {
                let before = s.get(id).data()[0];
                opt.step(&mut s, &g, &[id]).unwrap();
                last = s.get(id).data()[0] - before;
            }
            last
        };
        let (a, b) = (run(1.0), run(10.0));
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = store(&[0.0]);
        let mut opt = AdaDelta::new(&s, 0.08, 0.95, 1e-6);
        let mut g = Gradients::new(1);
        g.add_dense(id, &[f64::NAN]);
        let err = opt.step(&mut s, &g, &[id]).unwrap_err();
        assert!(err.to_string().contains('w'));
    }
}
