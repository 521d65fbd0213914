//! Central finite-difference reference gradients and comparison reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{evaluate_loss, grad};
use crate::checkpoint::CheckpointPolicy;
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrate::{Counters, Integrator, StepController};
use crate::loss::{LossKind, LossSpec};
use crate::nn::{Activation, MlpModel, MlpSpec};
use crate::scalar::Real;
use crate::tableau::Scheme;

/// Central differences of the loss with respect to every parameter and every
/// initial-state component. Probes run on scoped worker threads.
pub fn finite_difference_gradient<T, F>(
    field: &F,
    integrator: &Integrator<T>,
    loss: &LossSpec<T>,
    u0: &[T],
    t0: T,
    eps: T,
) -> Result<(Vec<T>, Vec<T>)>
where
    T: Real,
    F: VectorField<T> + Sync,
{
    let np = field.num_params();
    let n = u0.len();
    let total = np + n;
    let probe = |i: usize| -> Result<T> {
        let eval = |sign: T| -> Result<T> {
            let mut c = Counters::default();
            if i < np {
                let mut p = field.params().to_vec();
                p[i] += sign * eps;
                let f = field.with_params(p)?;
                Ok(evaluate_loss(&f, integrator, loss, u0, t0, &mut c)?.0)
            } else {
                let mut u = u0.to_vec();
                u[i - np] += sign * eps;
                Ok(evaluate_loss(field, integrator, loss, &u, t0, &mut c)?.0)
            }
        };
        Ok((eval(T::one())? - eval(-T::one())?) / (eps + eps))
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(total.max(1));
    let mut out: Vec<Option<Result<T>>> = (0..total).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = total.div_ceil(workers).max(1);
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let probe = &probe;
            scope.spawn(move || {
                for (j, s) in slot.iter_mut().enumerate() {
                    *s = Some(probe(w * chunk + j));
                }
            });
        }
    });
    let vals = out
        .into_iter()
        .map(|r| r.expect("every probe assigned"))
        .collect::<Result<Vec<T>>>()?;
    let (g_theta, g_u) = vals.split_at(np);
    Ok((g_theta.to_vec(), g_u.to_vec()))
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(floor)
    }
}

/// Denominator floor of [`relative_error`] in gradient reports.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub dim: usize,
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub activation: Activation,
    pub seed: u64,
    pub fd_eps: f64,
    pub policy: CheckpointPolicy,
    pub t_final: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            steps: 10,
            dim: 3,
            width: 8,
            depth: 3,
            activation: Activation::Tanh,
            seed: 42,
            fd_eps: 5e-5,
            policy: CheckpointPolicy::StoreAll,
            t_final: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentCheck {
    /// `theta[i]` or `u0[i]`.
    pub name: String,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub scheme: Scheme,
    pub steps: usize,
    pub seed: u64,
    pub fd_eps: f64,
    pub policy: String,
    pub loss: f64,
    pub components: Vec<ComponentCheck>,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    pub counters: Counters,
}

/// Random MLP, initial state and target for a gradient check; all drawn
/// from `seed`.
pub fn random_problem(cfg: &GradCheckConfig) -> Result<(MlpModel<f64>, Vec<f64>, Vec<f64>)> {
    let spec = MlpSpec::with_hidden(cfg.dim, cfg.width, cfg.depth, cfg.activation, false);
    let model = MlpModel::init(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let u0 = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok((model, u0, target))
}

/// Compares the adjoint gradient of a terminal MSE loss with central finite
/// differences on a seeded random problem.
pub fn verify_gradient(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()));
    }
    if !(cfg.fd_eps > 0.0) || !(cfg.t_final > 0.0) {
        return Err(Error::InvalidConfig("fd_eps and t_final must be positive".into()));
    }
    let (model, u0, target) = random_problem(cfg)?;
    let integrator = Integrator::new(cfg.scheme.method(), StepController::fixed(cfg.steps));
    let loss = LossSpec::terminal(LossKind::Mse, cfg.t_final, target);
    let g = grad(&model, &integrator, &loss, &u0, 0.0, cfg.policy)?;
    let (fd_theta, fd_u) = finite_difference_gradient(&model, &integrator, &loss, &u0, 0.0, cfg.fd_eps)?;
    let mut components = Vec::with_capacity(fd_theta.len() + fd_u.len());
    let named = g
        .grad_theta
        .iter()
        .zip(&fd_theta)
        .enumerate()
        .map(|(i, p)| (format!("theta[{i}]"), p))
        .chain(g.grad_u0.iter().zip(&fd_u).enumerate().map(|(i, p)| (format!("u0[{i}]"), p)));
    for (name, (&a, &d)) in named {
        components.push(ComponentCheck {
            name,
            adjoint: a,
            finite_difference: d,
            relative_error: relative_error(a, d, RELATIVE_ERROR_FLOOR),
        });
    }
    let max = components.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let mean = components.iter().map(|c| c.relative_error).sum::<f64>() / components.len() as f64;
    Ok(GradCheckReport {
        scheme: cfg.scheme,
        steps: cfg.steps,
        seed: cfg.seed,
        fd_eps: cfg.fd_eps,
        policy: cfg.policy.to_string(),
        loss: g.loss,
        components,
        max_relative_error: max,
        mean_relative_error: mean,
        counters: g.counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
    }

    #[test]
    fn rk4_random_mlp_matches_finite_differences() {
        let report = verify_gradient(&GradCheckConfig::default()).unwrap();
        assert!(report.max_relative_error <= 1e-6, "{}", report.max_relative_error);
        assert_eq!(report.components.len(), MlpSpec::with_hidden(3, 8, 3, Activation::Tanh, false).num_params() + 3);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = GradCheckConfig {
            steps: 0,
            ..GradCheckConfig::default()
        };
        assert!(verify_gradient(&cfg).is_err());
    }
}
