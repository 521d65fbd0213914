//! Neural ODE gradients by discrete adjoint time integration.
//!
//! The engine integrates `u' = f(u, theta, t)` with explicit Runge-Kutta or
//! implicit theta methods, differentiates the discrete time-stepping map in
//! reverse, and trades memory for recomputation with binomial checkpointing.
//! Numerics are generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! the scalar to `f64`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod integrate;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod solvers;
pub mod study;
pub mod tableau;
pub mod train;

pub use adjoint::{
    adjoint_step, adjoint_terminal, continuous_adjoint, euler_adjoint_step, evaluate_loss, grad, inject_observation,
    rk_adjoint_step, theta_adjoint_step, AdjointState, GradResult,
};
pub use checkpoint::{dp_optimal_count, revolve_count, revolve_schedule, CheckpointPolicy, ScheduleAction};
pub use error::{Error, Result};
pub use field::VectorField;
pub use integrate::{AdaptiveConfig, Counters, Integrator, StepController, StepRecord};
pub use loss::{LossKind, LossSpec};
pub use nn::{Activation, MlpSpec};
pub use scalar::Real;
pub use solvers::SolverConfig;
pub use tableau::{tableau_catalog, Method, Scheme};

/// Multilayer perceptron vector field in double precision.
pub type Mlp = nn::MlpModel<f64>;
/// Multilayer perceptron vector field in single precision.
pub type Mlp32 = nn::MlpModel<f32>;
pub type Tableau = tableau::ButcherTableau<f64>;
pub type Record = integrate::StepRecord<f64>;
pub type Adjoint = adjoint::AdjointState<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Loss = loss::LossSpec<f64>;
pub type Adam = optim::AdamW<f64>;
