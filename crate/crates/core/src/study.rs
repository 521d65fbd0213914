//! Small numerical studies shared by the command-line harness and the
//! acceptance tests: adjoint discrepancy, convergence orders and checkpoint
//! counts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_step, continuous_adjoint_step, AdjointState};
use crate::checkpoint::{audit_schedule, dp_optimal_count, revolve_count, revolve_schedule};
use crate::error::{Error, Result};
use crate::field::{Affine, Quadratic, VectorField};
use crate::integrate::{Counters, Integrator, StepController};
use crate::tableau::{Method, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyProblem {
    /// `f(u) = -0.5 u`.
    Linear,
    /// `f(u) = u^2`.
    Quadratic,
}

impl fmt::Display for DiscrepancyProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Quadratic => "quadratic",
        })
    }
}

impl FromStr for DiscrepancyProblem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::InvalidConfig(format!("unknown problem '{other}'"))),
        }
    }
}

fn step_discrepancy<F: VectorField<f64>>(field: &F, scheme: Scheme, u0: f64, h: f64) -> Result<f64> {
    let Method::Explicit(tab) = scheme.method::<f64>() else {
        return Err(Error::Unsupported("continuous adjoint needs an explicit scheme".into()));
    };
    let integ = Integrator::new(scheme.method(), StepController::fixed(1));
    let mut c = Counters::default();
    let rec = integ.step(field, 0, &[u0], 0.0, h, &mut c)?;
    let np = field.num_params();
    let mut discrete = AdjointState {
        lambda: vec![1.0],
        mu: vec![0.0; np],
    };
    adjoint_step(&integ.method, field, &rec, &mut discrete, &integ.solver, &mut c)?;
    let mut continuous = AdjointState {
        lambda: vec![1.0],
        mu: vec![0.0; np],
    };
    let mut u = rec.u_next.clone();
    continuous_adjoint_step(&tab, field, &mut u, &mut continuous, h, h, &mut c)?;
    Ok((continuous.lambda[0] - discrete.lambda[0]).abs())
}

/// `|lambda_continuous - lambda_discrete|` after one step of size `h` from
/// `u = 1` with unit terminal cotangent.
pub fn one_step_discrepancy(problem: DiscrepancyProblem, scheme: Scheme, h: f64) -> Result<f64> {
    match problem {
        DiscrepancyProblem::Linear => step_discrepancy(&Affine::scalar(-0.5), scheme, 1.0, h),
        DiscrepancyProblem::Quadratic => step_discrepancy(&Quadratic::new(vec![1.0]), scheme, 1.0, h),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub scheme: Scheme,
    pub steps: usize,
    pub error: f64,
    /// `log2(err(2h) / err(h))` relative to the previous row.
    pub observed_order: Option<f64>,
}

/// Final state of `u' = u, u(0) = 1` after `n` steps over `[0, 1]`, as a
/// `(hi, lo)` pair. Explicit increments are rebuilt from the recorded stage
/// states and accumulated with Kahan summation; otherwise dopri5 at 160 steps
/// sits on the f64 rounding floor of the update.
fn exp_endpoint(scheme: Scheme, n: usize) -> Result<(f64, f64)> {
    let field = Affine::scalar(1.0);
    let integ = Integrator::new(scheme.method(), StepController::fixed(n));
    let h = 1.0 / n as f64;
    let mut c = Counters::default();
    let (mut hi, mut lo) = (1.0_f64, 0.0_f64);
    for k in 0..n {
        let t = k as f64 * h;
        let rec = integ.step(&field, k, &[hi], t, h, &mut c)?;
        let delta = match &integ.method {
            Method::Explicit(tab) => {
                let mut acc = 0.0;
                for (i, stage) in rec.stages.iter().enumerate() {
                    acc += tab.b[i] * field.eval(stage, t + tab.c[i] * h)?.0[0];
                }
                h * acc + lo
            }
            Method::Theta(_) => rec.u_next[0] - hi + lo,
        };
        let next = hi + delta;
        lo = delta - (next - hi);
        hi = next;
    }
    Ok((hi, lo))
}

/// Global error of `scheme` on `u' = u, u(0) = 1` over `[0, 1]` for each
/// step count, with observed orders between successive step counts.
pub fn order_study(scheme: Scheme, steps: &[usize]) -> Result<Vec<OrderRow>> {
    // e split into a double-double pair.
    const E_HI: f64 = std::f64::consts::E;
    const E_LO: f64 = 1.445_646_891_729_250_2e-16;
    let mut rows: Vec<OrderRow> = Vec::with_capacity(steps.len());
    for &n in steps {
        if n == 0 {
            return Err(Error::InvalidConfig("step counts must be positive".into()));
        }
        let (hi, lo) = exp_endpoint(scheme, n)?;
        let error = ((hi - E_HI) + (lo - E_LO)).abs();
        let observed_order = rows.last().map(|prev| {
            (prev.error / error).ln() / (n as f64 / prev.steps as f64).ln()
        });
        rows.push(OrderRow {
            scheme,
            steps: n,
            error,
            observed_order,
        });
    }
    Ok(rows)
}

/// One row of the checkpoint benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    pub nt: usize,
    pub nc: usize,
    pub p_tilde: u64,
    pub dp_count: u64,
    pub max_slots: usize,
    pub recomputed_steps: u64,
}

impl BenchRow {
    pub fn consistent(&self) -> bool {
        self.p_tilde == self.dp_count && self.recomputed_steps == self.p_tilde && self.max_slots <= self.nc
    }
}

/// Closed-form count, DP optimum and the audited schedule for `(nt, nc)`.
pub fn bench_row(nt: usize, nc: usize) -> Result<BenchRow> {
    let audit = audit_schedule(nt, nc, &revolve_schedule(nt, nc))?;
    Ok(BenchRow {
        nt,
        nc,
        p_tilde: revolve_count(nt, nc),
        dp_count: dp_optimal_count(nt, nc),
        max_slots: audit.max_slots,
        recomputed_steps: audit.recomputed_steps,
    })
}

/// Checks that the closed-form count is non-increasing in `nc` and
/// non-decreasing in `nt` over the grid.
pub fn monotone_counts(nt_max: usize, nc_max: usize) -> bool {
    (1..=nt_max).all(|nt| {
        (1..=nc_max).all(|nc| {
            let p = revolve_count(nt, nc);
            (nc == nc_max || revolve_count(nt, nc + 1) <= p) && (nt == nt_max || revolve_count(nt + 1, nc) >= p)
        })
    })
}
