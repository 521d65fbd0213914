//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::all_finite;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", default)]
pub struct AdamWConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Real> Default for AdamWConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(0.005),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::lit(0.01),
        }
    }
}

impl<T: Real> AdamWConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: T| x >= T::zero() && x < T::one();
        if !(self.lr > T::zero()) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > T::zero()) {
            return Err(Error::InvalidConfig("invalid AdamW hyperparameters".into()));
        }
        if self.weight_decay < T::zero() {
            return Err(Error::InvalidConfig("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state: moment estimates and step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdamW<T> {
    pub config: AdamWConfig<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig<T>, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
        })
    }

    /// Decays `theta`, then applies the bias-corrected Adam update.
    pub fn step(&mut self, theta: &mut [T], grad: &[T]) -> Result<()> {
        check_len("parameters", self.m.len(), theta.len())?;
        check_len("gradient", self.m.len(), grad.len())?;
        if !all_finite(grad) {
            return Err(Error::NonFinite("gradient"));
        }
        let c = self.config;
        self.step += 1;
        let k = T::from_u64(self.step).expect("step count representable");
        let bc1 = T::one() - c.beta1.powf(k);
        let bc2 = T::one() - c.beta2.powf(k);
        let decay = T::one() - c.lr * c.weight_decay;
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (T::one() - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (T::one() - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] = theta[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_decay() -> AdamWConfig<f64> {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut opt = AdamW::new(no_decay(), 3).unwrap();
        let mut theta = vec![0.5, -1.0, 2.0];
        opt.step(&mut theta, &[0.0; 3]).unwrap();
        assert_eq!(theta, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(no_decay(), 1).unwrap();
        let mut theta = vec![0.0];
        opt.step(&mut theta, &[1.0]).unwrap();
        assert!((theta[0] + 0.005).abs() <= 1e-6);
    }

    #[test]
    fn pure_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, 2).unwrap();
        let mut theta = vec![2.0, -4.0];
        opt.step(&mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, vec![2.0 * (1.0 - 0.005 * 0.1), -4.0 * (1.0 - 0.005 * 0.1)]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut opt = AdamW::new(no_decay(), 2).unwrap();
        let mut theta = vec![0.0, 0.0];
        assert!(matches!(opt.step(&mut theta, &[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(opt.step(&mut theta, &[0.0]).is_err());
        assert!(AdamW::<f64>::new(AdamWConfig { lr: 0.0, ..no_decay() }, 1).is_err());
    }

    proptest! {
        #[test]
        fn first_step_opposes_gradient(g in proptest::collection::vec(-10.0f64..10.0, 1..8), th in -1.0f64..1.0) {
            let mut opt = AdamW::new(no_decay(), g.len()).unwrap();
            let mut theta = vec![th; g.len()];
            opt.step(&mut theta, &g).unwrap();
            for (t, gi) in theta.iter().zip(&g) {
                let d = t - th;
                if *gi != 0.0 {
                    prop_assert_eq!(d.signum(), -gi.signum());
                }
            }
        }

        #[test]
        fn deterministic(g in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let run = || {
                let mut opt = AdamW::new(AdamWConfig::default(), 4).unwrap();
                let mut theta = vec![0.1, 0.2, 0.3, 0.4];
                for _ in 0..5 {
                    opt.step(&mut theta, &g).unwrap();
                }
                theta
            };
            prop_assert_eq!(run(), run());
        }
    }
}
