//! First/second-moment adaptive gradient descent with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over a fixed parameter group. The group's tensor order and
    /// shapes must be identical on every call; state is keyed by position.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidArg(format!("learning rate {} must be positive", lr)));
        }
        if params.len() != grads.len() {
            return Err(Error::InvalidArg("params/grads length mismatch".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArg("optimizer state does not match parameter group".into()));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            g.assert_finite("gradient")?;
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_fresh_state_leaves_params_unchanged() {
        let mut w = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut opt = Adam::new();
        opt.step(&mut [&mut w], &[&g], 0.1).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn quadratic_converges_and_matches_scalar_oracle() {
        // f(w) = w^2, grad = 2w; oracle is an independent scalar transcription
        // of the same update rule.
        let mut w = Tensor::from_vec(vec![1.0]);
        let mut opt = Adam::new();

        let (mut ow, mut om, mut ov) = (1.0f64, 0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        for t in 1..=200u64 {
            let g = Tensor::from_vec(vec![2.0 * w.data()[0]]);
            opt.step(&mut [&mut w], &[&g], lr).unwrap();

            let og = 2.0 * ow;
            om = b1 * om + (1.0 - b1) * og;
            ov = b2 * ov + (1.0 - b2) * og * og;
            let mhat = om / (1.0 - b1.powi(t as i32));
            let vhat = ov / (1.0 - b2.powi(t as i32));
            ow -= lr * mhat / (vhat.sqrt() + eps);
            assert!((w.data()[0] - ow).abs() < 1e-12, "diverged from oracle at step {}", t);
        }
        assert!(w.data()[0].abs() < 1e-2);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut w = Tensor::from_vec(vec![0.5, -0.3, 1.2]);
            let mut opt = Adam::new();
            for k in 0..50 {
                let g = w.map(|v| v * 0.7 + 0.01 * k as f64);
                opt.step(&mut [&mut w], &[&g], 0.05).unwrap();
            }
            w
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut w = Tensor::from_vec(vec![1.0]);
        let g = Tensor::from_vec(vec![f64::NAN]);
        let mut opt = Adam::new();
        assert!(opt.step(&mut [&mut w], &[&g], 0.1).is_err());
    }

    #[test]
    fn convex_quadratic_loss_decreases_over_100_steps() {
        // f(w) = sum((w - c)^2)
        let c = [0.3, -1.1, 2.0];
        let mut w = Tensor::from_vec(vec![2.0, 2.0, -2.0]);
        let loss =
            |w: &Tensor| w.data().iter().zip(&c).map(|(v, ci)| (v - ci) * (v - ci)).sum::<f64>();
        let start = loss(&w);
        let mut opt = Adam::new();
        for _ in 0..100 {
            let g = Tensor::from_vec(w.data().iter().zip(&c).map(|(v, ci)| 2.0 * (v - ci)).collect());
            opt.step(&mut [&mut w], &[&g], 0.05).unwrap();
        }
        assert!(loss(&w) < start);
    }
}
