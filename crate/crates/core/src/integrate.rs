//! Time integration of `u' = f(u, theta, t)`: explicit Runge-Kutta steps
//! (fixed or embedded-adaptive) and implicit theta-method steps solved by
//! Newton-GMRES.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::field::{eval_checked, VectorField};
use crate::linalg::all_finite;
use crate::scalar::Real;
use crate::solvers::{newton_solve, NonlinearSystem, SolverConfig};
use crate::tableau::{ButcherTableau, Method};

/// Work counters reported by forward and reverse passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Vector-field evaluations in the forward pass (including replays).
    pub nfe_forward: u64,
    /// Vector-Jacobian products in the reverse pass.
    pub nfe_backward: u64,
    /// Jacobian-vector products (Newton matvecs).
    pub jvp_evaluations: u64,
    pub steps_accepted: u64,
    pub steps_rejected: u64,
    /// Forward steps re-executed during the reverse pass.
    pub steps_recomputed: u64,
    pub newton_iterations: u64,
    pub gmres_iterations: u64,
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Self) {
        self.nfe_forward += o.nfe_forward;
        self.nfe_backward += o.nfe_backward;
        self.jvp_evaluations += o.jvp_evaluations;
        self.steps_accepted += o.steps_accepted;
        self.steps_rejected += o.steps_rejected;
        self.steps_recomputed += o.steps_recomputed;
        self.newton_iterations += o.newton_iterations;
        self.gmres_iterations += o.gmres_iterations;
    }
}

/// One accepted time step: enough data to replay it or run its adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    pub n: usize,
    pub t: T,
    pub h: T,
    pub u: Vec<T>,
    /// States at which `f` was evaluated: the RK stage states, or
    /// `[u_n, u_{n+1}]` for theta methods.
    pub stages: Vec<Vec<T>>,
    pub u_next: Vec<T>,
    pub accepted: bool,
}

impl<T: Real> StepRecord<T> {
    /// Number of stored state-sized vectors (step-start state plus stages).
    pub fn vector_count(&self) -> usize {
        1 + self.stages.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdaptiveConfig<T> {
    pub abstol: T,
    pub reltol: T,
    pub h_init: Option<T>,
    pub h_min: T,
    pub h_max: T,
    pub safety: T,
    /// Cap on attempted steps per interval.
    pub max_steps: usize,
}

impl<T: Real> Default for AdaptiveConfig<T> {
    fn default() -> Self {
        Self {
            abstol: T::lit(1e-6),
            reltol: T::lit(1e-6),
            h_init: None,
            h_min: T::lit(1e-14),
            h_max: T::infinity(),
            safety: T::lit(0.9),
            max_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", rename_all = "lowercase")]
pub enum StepController<T> {
    /// Uniform steps per integration interval.
    Fixed { steps: usize },
    Adaptive(AdaptiveConfig<T>),
}

impl<T: Real> StepController<T> {
    pub fn fixed(steps: usize) -> Self {
        Self::Fixed { steps }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed { steps } if *steps == 0 => {
                Err(Error::InvalidConfig("fixed stepping needs at least one step".into()))
            }
            Self::Fixed { .. } => Ok(()),
            Self::Adaptive(c) => {
                if !(c.abstol > T::zero() && c.reltol > T::zero()) {
                    return Err(Error::InvalidConfig("abstol and reltol must be positive".into()));
                }
                let h0 = c.h_init.unwrap_or(c.h_min);
                if !(c.h_min <= h0 && h0 <= c.h_max) || c.h_min < T::zero() {
                    return Err(Error::InvalidConfig("require h_min <= h_init <= h_max".into()));
                }
                if c.max_steps == 0 {
                    return Err(Error::InvalidConfig("max_steps must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// Step start times and sizes of `steps` uniform steps over `[t0, tf]`; the
/// last step ends exactly at `tf`.
pub fn fixed_grid<T: Real>(t0: T, tf: T, steps: usize) -> Vec<(T, T)> {
    let len = tf - t0;
    let nt = T::from_usize(steps).expect("step count representable");
    let times: Vec<T> = (0..=steps)
        .map(|j| {
            if j == steps {
                tf
            } else {
                t0 + len * (T::from_usize(j).expect("index representable") / nt)
            }
        })
        .collect();
    times.windows(2).map(|w| (w[0], w[1] - w[0])).collect()
}

/// Result of integrating over one interval.
#[derive(Debug, Clone)]
pub struct IntervalOutcome<T> {
    pub u: Vec<T>,
    pub steps: usize,
    /// Step size the adaptive controller proposes for continuing.
    pub next_h: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Integrator<T> {
    pub method: Method<T>,
    pub controller: StepController<T>,
    pub solver: SolverConfig<T>,
}

struct RkEval<T> {
    stages: Vec<Vec<T>>,
    slopes: Vec<Vec<T>>,
    u_next: Vec<T>,
}

/// `u + h * sum_j coeffs[j] * slopes[j]`, skipping zero coefficients.
fn combine<T: Real>(u: &[T], h: T, coeffs: &[T], slopes: &[Vec<T>]) -> Vec<T> {
    let mut acc = vec![T::zero(); u.len()];
    for (&c, k) in coeffs.iter().zip(slopes) {
        if c != T::zero() {
            for (a, &kj) in acc.iter_mut().zip(k) {
                *a += c * kj;
            }
        }
    }
    u.iter().zip(&acc).map(|(&x, &a)| x + h * a).collect()
}

struct ThetaSystem<'a, T: Real, F: VectorField<T>> {
    field: &'a F,
    u_n: &'a [T],
    explicit_part: Vec<T>,
    h: T,
    theta: T,
    t_next: T,
    cache: Option<F::Cache>,
    counters: &'a mut Counters,
}

impl<T: Real, F: VectorField<T>> NonlinearSystem<T> for ThetaSystem<'_, T, F> {
    fn residual(&mut self, v: &[T]) -> Result<Vec<T>> {
        let (fv, cache) = eval_checked(self.field, v, self.t_next)?;
        self.counters.nfe_forward += 1;
        self.cache = Some(cache);
        let ht = self.h * self.theta;
        Ok((0..v.len())
            .map(|i| v[i] - self.u_n[i] - self.explicit_part[i] - ht * fv[i])
            .collect())
    }

    fn apply_jacobian(&mut self, w: &[T]) -> Result<Vec<T>> {
        let cache = self.cache.as_ref().expect("residual evaluated before jacobian");
        let jw = self.field.jvp(cache, w)?;
        self.counters.jvp_evaluations += 1;
        let ht = self.h * self.theta;
        Ok(w.iter().zip(&jw).map(|(&a, &b)| a - ht * b).collect())
    }
}

impl<T: Real> Integrator<T> {
    pub fn new(method: Method<T>, controller: StepController<T>) -> Self {
        Self {
            method,
            controller,
            solver: SolverConfig::default(),
        }
    }

    pub fn with_solver(mut self, solver: SolverConfig<T>) -> Self {
        self.solver = solver;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.solver.validate()?;
        if let Method::Explicit(tab) = &self.method {
            tab.validate(T::lit(1e-6))?;
        }
        if let (StepController::Adaptive(_), Method::Explicit(tab)) = (&self.controller, &self.method) {
            if tab.b_emb.is_none() {
                return Err(Error::InvalidConfig(
                    "adaptive stepping requires an embedded scheme (bosh3 or dopri5)".into(),
                ));
            }
        }
        if let (StepController::Adaptive(_), Method::Theta(_)) = (&self.controller, &self.method) {
            return Err(Error::InvalidConfig(
                "adaptive stepping is only available for embedded explicit schemes".into(),
            ));
        }
        Ok(())
    }

    fn rk_eval<F: VectorField<T>>(
        tab: &ButcherTableau<T>,
        field: &F,
        u: &[T],
        t: T,
        h: T,
        first_slope: Option<Vec<T>>,
        counters: &mut Counters,
    ) -> Result<RkEval<T>> {
        let s = tab.stages();
        let mut stages = Vec::with_capacity(s);
        let mut slopes: Vec<Vec<T>> = Vec::with_capacity(s);
        let mut first_slope = first_slope;
        for i in 0..s {
            let ui = if i == 0 { u.to_vec() } else { combine(u, h, &tab.a[i][..i], &slopes) };
            let ti = t + tab.c[i] * h;
            let k = match (i, first_slope.take()) {
                (0, Some(k)) => k,
                _ => {
                    counters.nfe_forward += 1;
                    eval_checked(field, &ui, ti)?.0
                }
            };
            stages.push(ui);
            slopes.push(k);
        }
        let u_next = combine(u, h, &tab.b, &slopes);
        if !all_finite(&u_next) {
            return Err(Error::Overflow { t: (t + h).to_f64_lossy() });
        }
        Ok(RkEval {
            stages,
            slopes,
            u_next,
        })
    }

    /// One explicit Runge-Kutta step from `(u, t)` with step size `h`.
    pub fn explicit_step<F: VectorField<T>>(
        tab: &ButcherTableau<T>,
        field: &F,
        n: usize,
        u: &[T],
        t: T,
        h: T,
        counters: &mut Counters,
    ) -> Result<StepRecord<T>> {
        let ev = Self::rk_eval(tab, field, u, t, h, None, counters)?;
        Ok(StepRecord {
            n,
            t,
            h,
            u: u.to_vec(),
            stages: ev.stages,
            u_next: ev.u_next,
            accepted: true,
        })
    }

    /// One theta-method step; the implicit equation is solved by Newton-GMRES
    /// starting from `u`.
    #[allow(clippy::too_many_arguments)]
    pub fn theta_step<F: VectorField<T>>(
        theta: T,
        field: &F,
        n: usize,
        u: &[T],
        t: T,
        h: T,
        cfg: &SolverConfig<T>,
        counters: &mut Counters,
    ) -> Result<StepRecord<T>> {
        let explicit_part = if theta < T::one() {
            let (fu, _) = eval_checked(field, u, t)?;
            counters.nfe_forward += 1;
            fu.iter().map(|&x| h * (T::one() - theta) * x).collect()
        } else {
            vec![T::zero(); u.len()]
        };
        let mut sys = ThetaSystem {
            field,
            u_n: u,
            explicit_part,
            h,
            theta,
            t_next: t + h,
            cache: None,
            counters,
        };
        let (u_next, stats) = newton_solve(&mut sys, u, cfg)?;
        counters.newton_iterations += stats.iterations as u64;
        counters.gmres_iterations += stats.linear_iterations as u64;
        if !all_finite(&u_next) {
            return Err(Error::Overflow { t: (t + h).to_f64_lossy() });
        }
        Ok(StepRecord {
            n,
            t,
            h,
            u: u.to_vec(),
            stages: vec![u.to_vec(), u_next.clone()],
            u_next,
            accepted: true,
        })
    }

    /// One step of the configured method without any evaluation reuse.
    /// Deterministic: replaying a record's `(u, t, h)` reproduces it bit for bit.
    pub fn step<F: VectorField<T>>(
        &self,
        field: &F,
        n: usize,
        u: &[T],
        t: T,
        h: T,
        counters: &mut Counters,
    ) -> Result<StepRecord<T>> {
        check_len("state", field.dim(), u.len())?;
        if !(h > T::zero()) {
            return Err(Error::InvalidConfig("step size must be positive".into()));
        }
        match &self.method {
            Method::Explicit(tab) => Self::explicit_step(tab, field, n, u, t, h, counters),
            Method::Theta(theta) => Self::theta_step(*theta, field, n, u, t, h, &self.solver, counters),
        }
    }

    /// Integrates from `(u0, t0)` to `tf`, handing every accepted step to
    /// `sink` in order. Step indices start at zero.
    pub fn integrate<F, S>(&self, field: &F, u0: &[T], t0: T, tf: T, counters: &mut Counters, sink: S) -> Result<Vec<T>>
    where
        F: VectorField<T>,
        S: FnMut(StepRecord<T>) -> Result<()>,
    {
        Ok(self.integrate_interval(field, u0, t0, tf, None, counters, sink)?.u)
    }

    /// Like [`Integrator::integrate`], with an optional starting step size
    /// for adaptive control (ignored for fixed stepping).
    #[allow(clippy::too_many_arguments)]
    pub fn integrate_interval<F, S>(
        &self,
        field: &F,
        u0: &[T],
        t0: T,
        tf: T,
        h_hint: Option<T>,
        counters: &mut Counters,
        mut sink: S,
    ) -> Result<IntervalOutcome<T>>
    where
        F: VectorField<T>,
        S: FnMut(StepRecord<T>) -> Result<()>,
    {
        self.validate()?;
        check_len("initial state", field.dim(), u0.len())?;
        if !(tf > t0) {
            return Err(Error::InvalidConfig("integration requires tf > t0".into()));
        }
        match (&self.controller, &self.method) {
            (StepController::Fixed { steps }, Method::Explicit(tab)) => {
                let mut u = u0.to_vec();
                let mut carry: Option<Vec<T>> = None;
                let grid = fixed_grid(t0, tf, *steps);
                for (n, &(t, h)) in grid.iter().enumerate() {
                    let ev = Self::rk_eval(tab, field, &u, t, h, carry.take(), counters)?;
                    if tab.fsal {
                        carry = ev.slopes.last().cloned();
                    }
                    counters.steps_accepted += 1;
                    let rec = StepRecord {
                        n,
                        t,
                        h,
                        u,
                        stages: ev.stages,
                        u_next: ev.u_next.clone(),
                        accepted: true,
                    };
                    u = ev.u_next;
                    sink(rec)?;
                }
                Ok(IntervalOutcome {
                    u,
                    steps: *steps,
                    next_h: None,
                })
            }
            (StepController::Fixed { steps }, Method::Theta(theta)) => {
                let mut u = u0.to_vec();
                for (n, (t, h)) in fixed_grid(t0, tf, *steps).into_iter().enumerate() {
                    let rec = Self::theta_step(*theta, field, n, &u, t, h, &self.solver, counters)?;
                    counters.steps_accepted += 1;
                    u = rec.u_next.clone();
                    sink(rec)?;
                }
                Ok(IntervalOutcome {
                    u,
                    steps: *steps,
                    next_h: None,
                })
            }
            (StepController::Adaptive(cfg), Method::Explicit(tab)) => {
                self.integrate_adaptive(tab, cfg, field, u0, t0, tf, h_hint, counters, &mut sink)
            }
            (StepController::Adaptive(_), Method::Theta(_)) => unreachable!("rejected by validate"),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate_adaptive<F, S>(
        &self,
        tab: &ButcherTableau<T>,
        cfg: &AdaptiveConfig<T>,
        field: &F,
        u0: &[T],
        t0: T,
        tf: T,
        h_hint: Option<T>,
        counters: &mut Counters,
        sink: &mut S,
    ) -> Result<IntervalOutcome<T>>
    where
        F: VectorField<T>,
        S: FnMut(StepRecord<T>) -> Result<()>,
    {
        let b_emb = tab.b_emb.as_ref().expect("validated embedded weights");
        let err_w: Vec<T> = tab.b.iter().zip(b_emb).map(|(&b, &e)| b - e).collect();
        let p = T::from_u32(tab.order).expect("order representable");
        let (k_accept, k_prev) = (T::lit(0.7) / p, T::lit(0.4) / p);
        let (fac_min, fac_max) = (T::lit(0.2), T::lit(5.0));

        let mut u = u0.to_vec();
        let mut t = t0;
        let (f0, _) = eval_checked(field, &u, t)?;
        counters.nfe_forward += 1;
        let span = tf - t0;
        let mut h = match h_hint.or(cfg.h_init) {
            Some(h) => h,
            None => {
                let d0 = self.wrms_scaled(cfg, &u, &u, &u);
                let d1 = self.wrms_scaled(cfg, &f0, &u, &u);
                if d0 < T::lit(1e-5) || d1 < T::lit(1e-5) {
                    T::lit(1e-6)
                } else {
                    T::lit(0.01) * d0 / d1
                }
            }
        };
        h = h.min(cfg.h_max).max(cfg.h_min).min(span);
        let mut first = Some(f0);
        let mut err_prev = T::one();
        let mut n = 0;
        let mut attempts = 0;

        while t < tf {
            if attempts >= cfg.max_steps {
                return Err(Error::StepLimit {
                    t: t.to_f64_lossy(),
                    limit: cfg.max_steps,
                });
            }
            attempts += 1;
            let last = t + h * T::lit(1.01) >= tf;
            let h_try = if last { tf - t } else { h };
            let ev = Self::rk_eval(tab, field, &u, t, h_try, first.clone(), counters)?;
            let err_vec = combine(&vec![T::zero(); u.len()], h_try, &err_w, &ev.slopes);
            let err = self.wrms_scaled(cfg, &err_vec, &u, &ev.u_next);
            if !err.is_finite() {
                return Err(Error::Overflow { t: t.to_f64_lossy() });
            }
            if err <= T::one() {
                let factor = if err == T::zero() {
                    fac_max
                } else {
                    (cfg.safety * err.powf(-k_accept) * err_prev.powf(k_prev)).max(fac_min).min(fac_max)
                };
                err_prev = err.max(T::lit(1e-4));
                counters.steps_accepted += 1;
                first = if tab.fsal {
                    ev.slopes.last().cloned()
                } else {
                    None
                };
                let rec = StepRecord {
                    n,
                    t,
                    h: h_try,
                    u: std::mem::take(&mut u),
                    stages: ev.stages,
                    u_next: ev.u_next.clone(),
                    accepted: true,
                };
                u = ev.u_next;
                t = if last { tf } else { t + h_try };
                n += 1;
                sink(rec)?;
                if first.is_none() && t < tf {
                    let (f, _) = eval_checked(field, &u, t)?;
                    counters.nfe_forward += 1;
                    first = Some(f);
                }
                h = (h_try * factor).min(cfg.h_max);
            } else {
                counters.steps_rejected += 1;
                let factor = (cfg.safety * err.powf(-T::one() / p)).max(fac_min);
                h = h_try * factor;
                if h < cfg.h_min {
                    return Err(Error::StepSizeUnderflow {
                        t: t.to_f64_lossy(),
                        h: h.to_f64_lossy(),
                    });
                }
            }
        }
        Ok(IntervalOutcome {
            u,
            steps: n,
            next_h: Some(h),
        })
    }

    /// Weighted RMS norm with per-component scale
    /// `abstol + reltol * max(|u_a|, |u_b|)`.
    fn wrms_scaled(&self, cfg: &AdaptiveConfig<T>, e: &[T], ua: &[T], ub: &[T]) -> T {
        let n = T::from_usize(e.len().max(1)).expect("length representable");
        let s: T = (0..e.len())
            .map(|i| {
                let sc = cfg.abstol + cfg.reltol * ua[i].abs().max(ub[i].abs());
                let r = e[i] / sc;
                r * r
            })
            .sum();
        (s / n).sqrt()
    }
}
