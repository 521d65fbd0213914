//! Full-batch training loop and the Robertson stiff-learning experiment.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{evaluate_loss, grad};
use crate::checkpoint::CheckpointPolicy;
use crate::data::{generate_robertson_dataset, minmax_normalize, Dataset};
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::integrate::{AdaptiveConfig, Counters, Integrator, StepController};
use crate::linalg::norm2;
use crate::loss::{LossKind, LossSpec};
use crate::nn::{Activation, MlpModel, MlpSpec};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Real;
use crate::tableau::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig<f64>,
    pub policy: CheckpointPolicy,
    /// Gradient 2-norm above which training stops as exploded.
    pub explosion_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            optimizer: AdamWConfig::default(),
            policy: CheckpointPolicy::StoreAll,
            explosion_threshold: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub nfe_f: u64,
    pub nfe_b: u64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub initial_loss: f64,
    /// Loss of the final parameters; absent when it could not be evaluated.
    pub final_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
    /// First epoch whose gradient was non-finite or above the threshold.
    pub explosion_epoch: Option<usize>,
    /// Solver failure that stopped training, if any.
    pub failure: Option<String>,
}

impl TrainingRecord {
    pub fn exploded(&self) -> bool {
        self.explosion_epoch.is_some()
    }

    pub fn all_gradients_finite(&self) -> bool {
        self.epochs.iter().all(|e| e.grad_norm.is_finite())
    }
}

/// Trains the parameters of `field` with AdamW on full-batch adjoint
/// gradients. Gradient explosions and solver failures end training early and
/// are reported in the record rather than as errors.
pub fn train<T, F, S>(
    mut field: F,
    integrator: &Integrator<T>,
    loss: &LossSpec<T>,
    u0: &[T],
    t0: T,
    cfg: &TrainConfig,
    mut sink: S,
) -> Result<(F, TrainingRecord)>
where
    T: Real,
    F: VectorField<T>,
    S: FnMut(&EpochLog),
{
    let opt_cfg = AdamWConfig {
        lr: T::lit(cfg.optimizer.lr),
        beta1: T::lit(cfg.optimizer.beta1),
        beta2: T::lit(cfg.optimizer.beta2),
        eps: T::lit(cfg.optimizer.eps),
        weight_decay: T::lit(cfg.optimizer.weight_decay),
    };
    let mut opt = AdamW::new(opt_cfg, field.num_params())?;
    let initial_loss = evaluate_loss(&field, integrator, loss, u0, t0, &mut Counters::default())?
        .0
        .to_f64_lossy();
    let mut record = TrainingRecord {
        initial_loss,
        final_loss: Some(initial_loss),
        epochs: Vec::with_capacity(cfg.epochs),
        explosion_epoch: None,
        failure: None,
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let g = match grad(&field, integrator, loss, u0, t0, cfg.policy) {
            Ok(g) => g,
            Err(Error::GradientExplosion { .. }) => {
                record.explosion_epoch = Some(epoch);
                break;
            }
            Err(e @ (Error::StepLimit { .. }
            | Error::StepSizeUnderflow { .. }
            | Error::Overflow { .. }
            | Error::NewtonNotConverged { .. }
            | Error::GmresNotConverged { .. }
            | Error::GmresBreakdown(_))) => {
                record.failure = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let norm = norm2(&g.grad_theta).to_f64_lossy();
        let log = EpochLog {
            epoch,
            loss: g.loss.to_f64_lossy(),
            grad_norm: norm,
            nfe_f: g.counters.nfe_forward,
            nfe_b: g.counters.nfe_backward,
            steps: g.steps,
            seconds: start.elapsed().as_secs_f64(),
        };
        sink(&log);
        record.epochs.push(log);
        if !norm.is_finite() || norm > cfg.explosion_threshold {
            record.explosion_epoch = Some(epoch);
            break;
        }
        let mut theta = field.params().to_vec();
        opt.step(&mut theta, &g.grad_theta)?;
        field = field.with_params(theta)?;
    }
    if record.epochs.is_empty() && cfg.epochs == 0 {
        return Ok((field, record));
    }
    record.final_loss = evaluate_loss(&field, integrator, loss, u0, t0, &mut Counters::default())
        .ok()
        .map(|(l, _)| l.to_f64_lossy());
    Ok((field, record))
}

/// Settings of the Robertson learning experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobertsonConfig {
    pub scheme: Scheme,
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub n_points: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Fixed steps per observation interval (non-adaptive schemes).
    pub steps_per_interval: usize,
    pub abstol: f64,
    pub reltol: f64,
    /// Attempted-step cap per observation interval (adaptive schemes).
    pub max_steps: usize,
    pub train: TrainConfig,
}

impl Default for RobertsonConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Cn,
            seed: 42,
            width: 64,
            depth: 5,
            activation: Activation::Gelu,
            n_points: 40,
            t_lo: 1e-5,
            t_hi: 100.0,
            steps_per_interval: 4,
            abstol: 1e-6,
            reltol: 1e-6,
            max_steps: 5000,
            train: TrainConfig::default(),
        }
    }
}

impl RobertsonConfig {
    /// Adaptive stepping for the embedded explicit schemes, fixed otherwise.
    pub fn integrator(&self) -> Integrator<f64> {
        let controller = match self.scheme {
            Scheme::Dopri5 | Scheme::Bosh3 => StepController::Adaptive(AdaptiveConfig {
                abstol: self.abstol,
                reltol: self.reltol,
                max_steps: self.max_steps,
                ..AdaptiveConfig::default()
            }),
            _ => StepController::fixed(self.steps_per_interval),
        };
        Integrator::new(self.scheme.method(), controller)
    }
}

/// Everything needed to train on Robertson data.
#[derive(Debug, Clone)]
pub struct RobertsonProblem {
    /// Min-max scaled samples.
    pub dataset: Dataset<f64>,
    pub model: MlpModel<f64>,
    pub integrator: Integrator<f64>,
    pub loss: LossSpec<f64>,
    pub u0: Vec<f64>,
    pub t0: f64,
}

/// Generates and scales the reference data and builds the model. The neural
/// ODE evolves the scaled state, so the loss compares scaled values directly.
pub fn robertson_problem(cfg: &RobertsonConfig) -> Result<RobertsonProblem> {
    let raw = generate_robertson_dataset(cfg.n_points, cfg.t_lo, cfg.t_hi)?;
    let dataset = minmax_normalize(&raw);
    let spec = MlpSpec::with_hidden(3, cfg.width, cfg.depth, cfg.activation, false);
    let model = MlpModel::init(spec, cfg.seed)?;
    let loss = LossSpec::from_dataset(LossKind::Mae, &dataset)?;
    Ok(RobertsonProblem {
        u0: dataset.observations[0].clone(),
        t0: dataset.times[0],
        dataset,
        model,
        integrator: cfg.integrator(),
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Affine;

    fn toy() -> (Affine<f64>, Integrator<f64>, LossSpec<f64>) {
        let field = Affine::scalar(0.2);
        let integ = Integrator::new(Scheme::Rk4.method(), StepController::fixed(4));
        let loss = LossSpec::new(LossKind::Mse, vec![0.5, 1.0], vec![vec![0.6], vec![0.37]]).unwrap();
        (field, integ, loss)
    }

    #[test]
    fn zero_epochs_keep_parameters() {
        let (field, integ, loss) = toy();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, rec) = train(field.clone(), &integ, &loss, &[1.0], 0.0, &cfg, |_| {}).unwrap();
        assert_eq!(out.params(), field.params());
        assert!(rec.epochs.is_empty());
        assert_eq!(rec.final_loss, Some(rec.initial_loss));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (field, integ, loss) = toy();
        let cfg = TrainConfig {
            epochs: 300,
            optimizer: AdamWConfig {
                lr: 0.02,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        };
        let run = || train(field.clone(), &integ, &loss, &[1.0], 0.0, &cfg, |_| {}).unwrap();
        let (a, rec) = run();
        let (b, _) = run();
        assert_eq!(a.params(), b.params());
        assert!(rec.final_loss.unwrap() < 0.1 * rec.initial_loss);
        for e in &rec.epochs {
            assert_eq!(e.nfe_f, 2 * 4 * 4);
            assert_eq!(e.nfe_b, 2 * 4 * 4);
        }
    }

    #[test]
    fn explosion_is_flagged() {
        let (field, integ, loss) = toy();
        let cfg = TrainConfig {
            epochs: 5,
            explosion_threshold: 1e-12,
            ..TrainConfig::default()
        };
        let (_, rec) = train(field, &integ, &loss, &[1.0], 0.0, &cfg, |_| {}).unwrap();
        assert_eq!(rec.explosion_epoch, Some(0));
        assert_eq!(rec.epochs.len(), 1);
    }

    #[test]
    fn step_limit_is_recorded_as_failure() {
        let field = Affine::scalar(-1.0e5);
        let integ = Integrator::new(
            Scheme::Dopri5.method(),
            StepController::Adaptive(AdaptiveConfig {
                max_steps: 50,
                ..AdaptiveConfig::default()
            }),
        );
        let loss = LossSpec::terminal(LossKind::Mae, 1.0, vec![0.0]);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        // The initial loss evaluation already fails, which is a hard error.
        assert!(train(field, &integ, &loss, &[1.0], 0.0, &cfg, |_| {}).is_err());
    }

    #[test]
    fn robertson_problem_shape() {
        let cfg = RobertsonConfig {
            n_points: 5,
            width: 8,
            depth: 2,
            ..RobertsonConfig::default()
        };
        let p = robertson_problem(&cfg).unwrap();
        assert_eq!(p.loss.len(), 4);
        assert_eq!(p.t0, 1e-5);
        assert_eq!(p.u0, vec![1.0, 0.0, 0.0]);
        for o in &p.dataset.observations {
            assert!(o.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        assert!(matches!(p.integrator.controller, StepController::Fixed { steps: 4 }));
    }
}
