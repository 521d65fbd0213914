//! Time-series datasets, min-max scaling and the Robertson reference data.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::field::Robertson;
use crate::integrate::{Counters, Integrator};
use crate::scalar::Real;
use crate::solvers::SolverConfig;

/// Per-component min-max scaling `y = (u - min) / (max - min)`.
///
/// Components with `max == min` are degenerate and pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Scaling<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
    pub degenerate: Vec<bool>,
}

impl<T: Real> Scaling<T> {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// `dy_i / du_i`.
    pub fn factor(&self, i: usize) -> T {
        if self.degenerate[i] {
            T::one()
        } else {
            T::one() / (self.max[i] - self.min[i])
        }
    }

    fn offset(&self, i: usize) -> T {
        if self.degenerate[i] {
            T::zero()
        } else {
            self.min[i]
        }
    }

    pub fn apply(&self, u: &[T]) -> Vec<T> {
        (0..u.len()).map(|i| (u[i] - self.offset(i)) * self.factor(i)).collect()
    }

    pub fn invert(&self, y: &[T]) -> Vec<T> {
        (0..y.len())
            .map(|i| {
                if self.degenerate[i] {
                    y[i]
                } else {
                    y[i] * (self.max[i] - self.min[i]) + self.min[i]
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Dataset<T> {
    pub times: Vec<T>,
    pub observations: Vec<Vec<T>>,
    /// Present when the observations are scaled.
    pub scaling: Option<Scaling<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(times: Vec<T>, observations: Vec<Vec<T>>) -> Result<Self> {
        check_len("observation rows", times.len(), observations.len())?;
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("dataset times must be strictly increasing".into()));
        }
        if let Some(first) = observations.first() {
            for o in &observations {
                check_len("observation", first.len(), o.len())?;
            }
        }
        Ok(Self {
            times,
            observations,
            scaling: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Writes `t,u1,...,uN` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim()).map(|i| format!("u{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, o) in self.times.iter().zip(&self.observations) {
            let row: Vec<String> = std::iter::once(t)
                .chain(o.iter())
                .map(|x| format!("{:.16e}", x.to_f64_lossy()))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty dataset file".into()))??;
        let cols = header.split(',').count();
        if cols < 2 || !header.starts_with('t') {
            return Err(Error::InvalidConfig("dataset header must be t,u1,...".into()));
        }
        let (mut times, mut obs) = (Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidConfig(format!("bad dataset value: {e}")))?;
            check_len("dataset row", cols, vals.len())?;
            times.push(T::lit(vals[0]));
            obs.push(vals[1..].iter().map(|&v| T::lit(v)).collect());
        }
        Self::new(times, obs)
    }
}

/// Scales every component of the series to `[0, 1]` over the trajectory.
pub fn minmax_normalize<T: Real>(data: &Dataset<T>) -> Dataset<T> {
    let n = data.dim();
    let mut min = vec![T::infinity(); n];
    let mut max = vec![T::neg_infinity(); n];
    for o in &data.observations {
        for i in 0..n {
            min[i] = min[i].min(o[i]);
            max[i] = max[i].max(o[i]);
        }
    }
    let degenerate = (0..n).map(|i| !(max[i] > min[i])).collect();
    let scaling = Scaling { min, max, degenerate };
    Dataset {
        times: data.times.clone(),
        observations: data.observations.iter().map(|o| scaling.apply(o)).collect(),
        scaling: Some(scaling),
    }
}

/// Maps a scaled dataset back to raw values.
pub fn denormalize<T: Real>(data: &Dataset<T>) -> Dataset<T> {
    match &data.scaling {
        None => data.clone(),
        Some(s) => Dataset {
            times: data.times.clone(),
            observations: data.observations.iter().map(|o| s.invert(o)).collect(),
            scaling: None,
        },
    }
}

/// `n` points equally spaced in log scale over `[lo, hi]`; endpoints exact.
pub fn log_spaced<T: Real>(n: usize, lo: T, hi: T) -> Vec<T> {
    let (a, b) = (lo.ln(), hi.ln());
    let last = T::from_usize(n - 1).expect("count representable");
    (0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => (a + (b - a) * T::from_usize(i).expect("index representable") / last).exp(),
        })
        .collect()
}

/// Total number of reference substeps used for the Robertson ground truth.
pub const ROBERTSON_REFERENCE_SUBSTEPS: usize = 2000;

/// Ground truth for Robertson's equations from `[1, 0, 0]` at `t_lo`,
/// sampled at `n_points` log-spaced times in `[t_lo, t_hi]`. Integrated with
/// Crank-Nicolson on geometric substeps with a tight Newton tolerance.
pub fn generate_robertson_dataset<T: Real>(n_points: usize, t_lo: T, t_hi: T) -> Result<Dataset<T>> {
    if n_points < 2 {
        return Err(Error::InvalidConfig("need at least two sample points".into()));
    }
    if !(t_lo > T::zero() && t_hi > t_lo) {
        return Err(Error::InvalidConfig("require 0 < t_lo < t_hi".into()));
    }
    let times = log_spaced(n_points, t_lo, t_hi);
    let field = Robertson::<T>::default();
    let solver = SolverConfig {
        newton_tol: T::lit(1e-12),
        newton_maxit: 100,
        gmres_tol: T::lit(1e-13),
        ..SolverConfig::default()
    };
    let per_interval = ROBERTSON_REFERENCE_SUBSTEPS.div_ceil(n_points - 1).max(1);
    let mut counters = Counters::default();
    let mut u = vec![T::one(), T::zero(), T::zero()];
    let mut obs = vec![u.clone()];
    let m = T::from_usize(per_interval).expect("count representable");
    for w in times.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ratio = b / a;
        let mut t = a;
        for j in 1..=per_interval {
            let t_next = if j == per_interval {
                b
            } else {
                a * ratio.powf(T::from_usize(j).expect("index representable") / m)
            };
            let rec = Integrator::theta_step(T::lit(0.5), &field, 0, &u, t, t_next - t, &solver, &mut counters)?;
            u = rec.u_next;
            t = t_next;
        }
        obs.push(u.clone());
    }
    Dataset::new(times, obs)
}
