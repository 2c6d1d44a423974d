use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn adam(num_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len(self.m.len(), params.len())?;
        check_len(self.m.len(), grads.len())?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut opt = OptState::adam(3, 0.1);
        opt.m = vec![1.0, -1.0, 0.5];
        opt.v = vec![1.0, 1.0, 1.0];
        let mut p = vec![0.1, 0.2, 0.3];
        let mut opt0 = OptState::adam(3, 0.1);
        let mut p0 = p.clone();
        opt0.step(&mut p0, &[0.0; 3]).unwrap();
        assert_eq!(p0, p);
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(opt.m, vec![0.9, -0.9, 0.45]);
        assert!(opt.v.iter().all(|&v| (v - 0.999).abs() < 1e-15));
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut opt = OptState::adam(2, 0.05);
            let mut p = vec![1.0, -2.0];
            let mut trace = Vec::new();
            for _ in 0..50 {
                let g = vec![2.0 * p[0], 8.0 * p[1]];
                opt.step(&mut p, &g).unwrap();
                trace.push(p.clone());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn convex_quadratic_loss_decreases() {
        // f(p) = p₀² + 4p₁² + p₀p₁, positive definite.
        let f = |p: &[f64]| p[0] * p[0] + 4.0 * p[1] * p[1] + p[0] * p[1];
        let mut opt = OptState::adam(2, 0.05);
        let mut p = vec![2.0, -1.5];
        let start = f(&p);
        for _ in 0..100 {
            let g = vec![2.0 * p[0] + p[1], 8.0 * p[1] + p[0]];
            opt.step(&mut p, &g).unwrap();
        }
        assert!(f(&p) < 0.05 * start, "{} vs {start}", f(&p));
    }
}
