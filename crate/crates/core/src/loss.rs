//! Observation losses over a trajectory and their gradient seeds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scaling};
use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mae,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::InvalidConfig(format!("unknown loss '{other}'"))),
        }
    }
}

/// Loss averaged over `K` observations and `N` components.
///
/// When `scaling` is set, predictions are mapped through it before being
/// compared with the (already scaled) observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec<T> {
    pub kind: LossKind,
    pub times: Vec<T>,
    pub observations: Vec<Vec<T>>,
    pub scaling: Option<Scaling<T>>,
}

impl<T: Real> LossSpec<T> {
    pub fn new(kind: LossKind, times: Vec<T>, observations: Vec<Vec<T>>) -> Result<Self> {
        check_len("observations", times.len(), observations.len())?;
        if times.is_empty() {
            return Err(Error::InvalidConfig("a loss needs at least one observation".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("observation times must be strictly increasing".into()));
        }
        let n = observations[0].len();
        for o in &observations {
            check_len("observation", n, o.len())?;
        }
        Ok(Self {
            kind,
            times,
            observations,
            scaling: None,
        })
    }

    /// Single observation at the end of the horizon.
    pub fn terminal(kind: LossKind, t_final: T, target: Vec<T>) -> Self {
        Self {
            kind,
            times: vec![t_final],
            observations: vec![target],
            scaling: None,
        }
    }

    /// Fits every sample after the first, which serves as initial condition.
    pub fn from_dataset(kind: LossKind, data: &Dataset<T>) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidConfig("dataset needs at least two samples".into()));
        }
        Self::new(kind, data.times[1..].to_vec(), data.observations[1..].to_vec())
    }

    pub fn with_scaling(mut self, scaling: Scaling<T>) -> Result<Self> {
        check_len("scaling", self.dim(), scaling.dim())?;
        self.scaling = Some(scaling);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.observations[0].len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn normalizer(&self) -> T {
        T::from_usize(self.len() * self.dim()).expect("size representable")
    }

    fn residual(&self, k: usize, pred: &[T]) -> Result<Vec<T>> {
        check_len("prediction", self.dim(), pred.len())?;
        let y = match &self.scaling {
            Some(s) => s.apply(pred),
            None => pred.to_vec(),
        };
        Ok(y.iter().zip(&self.observations[k]).map(|(&a, &b)| a - b).collect())
    }

    /// Contribution of observation `k` to the total loss.
    pub fn term(&self, k: usize, pred: &[T]) -> Result<T> {
        let r = self.residual(k, pred)?;
        let s: T = match self.kind {
            LossKind::Mae => r.iter().map(|x| x.abs()).sum(),
            LossKind::Mse => r.iter().map(|&x| x * x).sum(),
        };
        Ok(s / self.normalizer())
    }

    /// Gradient of the loss with respect to the unscaled prediction at
    /// observation `k`. The MAE subgradient at a zero residual is zero.
    pub fn seed(&self, k: usize, pred: &[T]) -> Result<Vec<T>> {
        let r = self.residual(k, pred)?;
        let norm = self.normalizer();
        Ok(r.iter()
            .enumerate()
            .map(|(i, &x)| {
                let dy = match self.kind {
                    LossKind::Mae => {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }
                    LossKind::Mse => T::lit(2.0) * x,
                } / norm;
                match &self.scaling {
                    Some(s) => dy * s.factor(i),
                    None => dy,
                }
            })
            .collect())
    }

    /// Total loss and per-observation seeds for aligned predictions.
    pub fn loss_and_grad_seed(&self, predictions: &[Vec<T>]) -> Result<(T, Vec<Vec<T>>)> {
        check_len("predictions", self.len(), predictions.len())?;
        let mut total = T::zero();
        let mut seeds = Vec::with_capacity(self.len());
        for (k, p) in predictions.iter().enumerate() {
            total += self.term(k, p)?;
            seeds.push(self.seed(k, p)?);
        }
        Ok((total, seeds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let mae = LossSpec::terminal(LossKind::Mae, 1.0, vec![1.0, 3.0]);
        let (l, s) = mae.loss_and_grad_seed(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!((l, s[0].clone()), (0.5, vec![0.0, -0.5]));

        let (l, s) = mae.loss_and_grad_seed(&[vec![1.0, 3.0]]).unwrap();
        assert_eq!((l, s[0].clone()), (0.0, vec![0.0, 0.0]));

        let mse = LossSpec::terminal(LossKind::Mse, 1.0, vec![0.0]);
        let (l, s) = mse.loss_and_grad_seed(&[vec![2.0]]).unwrap();
        assert_eq!((l, s[0].clone()), (4.0, vec![4.0]));
    }

    #[test]
    fn scaled_seed_applies_chain_rule() {
        let scaling = Scaling {
            min: vec![0.0, 1.0],
            max: vec![4.0, 1.0],
            degenerate: vec![false, true],
        };
        let spec = LossSpec::<f64>::terminal(LossKind::Mse, 1.0, vec![0.5, 2.0])
            .with_scaling(scaling)
            .unwrap();
        let pred = [3.0, 1.5];
        let seed = spec.seed(0, &pred).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let (mut p, mut m) = (pred.to_vec(), pred.to_vec());
            p[i] += h;
            m[i] -= h;
            let fd = (spec.term(0, &p).unwrap() - spec.term(0, &m).unwrap()) / (2.0 * h);
            assert!((fd - seed[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn validation() {
        assert!(LossSpec::new(LossKind::Mae, vec![1.0, 1.0], vec![vec![0.0], vec![0.0]]).is_err());
        assert!(LossSpec::<f64>::new(LossKind::Mae, vec![], vec![]).is_err());
        assert!("huber".parse::<LossKind>().is_err());
        let spec = LossSpec::terminal(LossKind::Mae, 1.0, vec![0.0, 0.0]);
        assert!(spec.loss_and_grad_seed(&[vec![0.0]]).is_err());
    }
}
