use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily to match the
/// parameter set seen on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(domain(format!(
                "adam: {} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(domain(format!(
                    "adam: parameter shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len()
            || self
                .first
                .iter()
                .zip(grads)
                .any(|(m, g)| m.shape() != g.shape())
        {
            return Err(domain("adam: parameter set changed between steps"));
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        // prime moments with a non-zero step, then feed zeros
        opt.step(
            &mut [&mut p],
            &[Tensor::vector(vec![0.5, 0.5]).unwrap()],
            0.0,
        )
        .unwrap();
        let before = p.clone();
        let m_before = opt.first_moments()[0].data()[0];
        opt.step(&mut [&mut p], &[Tensor::zeros(&[2])], 0.0)
            .unwrap();
        assert_eq!(p, before);
        assert!(opt.first_moments()[0].data()[0].abs() < m_before.abs());

        let mut q = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut fresh = Adam::new(AdamConfig::default());
        fresh
            .step(&mut [&mut q], &[Tensor::zeros(&[2])], 0.1)
            .unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let g = [0.3, -4.0, 1e-3];
        let mut p = Tensor::vector(vec![0.0; 3]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let lr = 0.01;
        opt.step(&mut [&mut p], &[Tensor::vector(g.to_vec()).unwrap()], lr)
            .unwrap();
        for (pj, gj) in p.data().iter().zip(g) {
            let expected = -lr * gj / (gj.abs() + 1e-8);
            assert!((pj - expected).abs() < 1e-15, "{pj} vs {expected}");
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Tensor::vector(vec![0.0; 3]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt
            .step(&mut [&mut p], &[Tensor::zeros(&[2])], 0.1)
            .is_err());
        assert!(opt.step(&mut [&mut p], &[], 0.1).is_err());
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Tensor::vector(vec![0.5, 0.25]).unwrap();
            let mut opt = Adam::new(AdamConfig::default());
            for i in 0..50 {
                let g = Tensor::vector(vec![(i as f64).sin(), p.data()[0]]).unwrap();
                opt.step(&mut [&mut p], &[g], 1e-2).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
