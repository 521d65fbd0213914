//! Discrete adjoint of the time-stepping schemes, a continuous-adjoint
//! baseline, and the gradient driver that combines forward pass,
//! checkpointing and reverse sweep.

use std::collections::BTreeSet;

use crate::checkpoint::{revolve_schedule, CheckpointPolicy, CheckpointStore, ScheduleAction, StoreStats};
use crate::error::{check_len, Error, Result};
use crate::field::{eval_checked, VectorField};
use crate::integrate::{Counters, Integrator, StepController, StepRecord};
use crate::linalg::{all_finite, norm2};
use crate::loss::LossSpec;
use crate::scalar::Real;
use crate::solvers::{gmres, SolverConfig};
use crate::tableau::{ButcherTableau, Method};

/// Sensitivities with respect to the state (`lambda`) and the parameters (`mu`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState<T> {
    pub lambda: Vec<T>,
    pub mu: Vec<T>,
}

impl<T: Real> AdjointState<T> {
    pub fn zeros(n: usize, np: usize) -> Self {
        Self {
            lambda: vec![T::zero(); n],
            mu: vec![T::zero(); np],
        }
    }

    fn check_finite(&self) -> Result<()> {
        if all_finite(&self.lambda) && all_finite(&self.mu) {
            Ok(())
        } else {
            Err(Error::GradientExplosion { norm: f64::INFINITY })
        }
    }
}

/// Terminal condition from the loss derivatives at the final state.
pub fn adjoint_terminal<T: Real>(dphi_du: &[T], dphi_dtheta: &[T]) -> Result<AdjointState<T>> {
    let adj = AdjointState {
        lambda: dphi_du.to_vec(),
        mu: dphi_dtheta.to_vec(),
    };
    adj.check_finite()?;
    Ok(adj)
}

/// Adds the loss derivative of observation `k` at time `t`.
pub fn inject_observation<T: Real>(
    adj: &mut AdjointState<T>,
    loss: &LossSpec<T>,
    k: usize,
    t: T,
    u_at_tk: &[T],
) -> Result<()> {
    let tk = *loss.times.get(k).ok_or(Error::Misaligned { t: t.to_f64_lossy() })?;
    let tol = T::lit(64.0) * T::epsilon() * tk.abs().max(T::one());
    if (t - tk).abs() > tol {
        return Err(Error::Misaligned { t: t.to_f64_lossy() });
    }
    check_len("adjoint", loss.dim(), adj.lambda.len())?;
    let seed = loss.seed(k, u_at_tk)?;
    for (l, s) in adj.lambda.iter_mut().zip(&seed) {
        *l += *s;
    }
    adj.check_finite()
}

fn stage<T: Real>(rec: &StepRecord<T>, i: usize, expected: usize) -> Result<&[T]> {
    if rec.stages.len() != expected {
        return Err(Error::MissingStages(rec.n));
    }
    Ok(&rec.stages[i])
}

/// Reverse step of forward Euler:
/// `lambda_n = lambda + h J(u_n)^T lambda`, `mu_n = mu + h f_theta(u_n)^T lambda`.
pub fn euler_adjoint_step<T: Real, F: VectorField<T>>(
    field: &F,
    rec: &StepRecord<T>,
    adj: &mut AdjointState<T>,
    counters: &mut Counters,
) -> Result<()> {
    let u = stage(rec, 0, 1)?;
    let (_, cache) = field.eval(u, rec.t)?;
    counters.nfe_backward += 1;
    let mut d = vec![T::zero(); adj.lambda.len()];
    field.vjp(&cache, &adj.lambda, rec.h, Some(&mut d), Some(&mut adj.mu))?;
    for (l, x) in adj.lambda.iter_mut().zip(&d) {
        *l += *x;
    }
    adj.check_finite()
}

/// Reverse step of an explicit Runge-Kutta step, transposing the stage
/// recursion in reverse stage order. Uses exactly one VJP pair per stage.
pub fn rk_adjoint_step<T: Real, F: VectorField<T>>(
    tab: &ButcherTableau<T>,
    field: &F,
    rec: &StepRecord<T>,
    adj: &mut AdjointState<T>,
    counters: &mut Counters,
) -> Result<()> {
    let s = tab.stages();
    let n = adj.lambda.len();
    let mut stage_adj: Vec<Vec<T>> = vec![Vec::new(); s];
    for i in (0..s).rev() {
        let mut w: Vec<T> = adj.lambda.iter().map(|&l| tab.b[i] * l).collect();
        for j in i + 1..s {
            let a = tab.a[j][i];
            if a != T::zero() {
                for (wk, &lk) in w.iter_mut().zip(&stage_adj[j]) {
                    *wk += a * lk;
                }
            }
        }
        let ui = stage(rec, i, s)?;
        let (_, cache) = field.eval(ui, rec.t + tab.c[i] * rec.h)?;
        counters.nfe_backward += 1;
        let mut li = vec![T::zero(); n];
        field.vjp(&cache, &w, rec.h, Some(&mut li), Some(&mut adj.mu))?;
        stage_adj[i] = li;
    }
    for li in &stage_adj {
        for (l, &x) in adj.lambda.iter_mut().zip(li) {
            *l += x;
        }
    }
    adj.check_finite()
}

/// Reverse step of a theta-method step. Solves
/// `(I - h theta J(u_{n+1})^T) lambda_s = lambda` with GMRES, then applies
/// the explicit part at `u_n`.
pub fn theta_adjoint_step<T: Real, F: VectorField<T>>(
    theta: T,
    field: &F,
    rec: &StepRecord<T>,
    adj: &mut AdjointState<T>,
    cfg: &SolverConfig<T>,
    counters: &mut Counters,
) -> Result<()> {
    let u_n = stage(rec, 0, 2)?;
    let u_next = stage(rec, 1, 2)?;
    let h = rec.h;
    let ht = h * theta;
    let (_, cache1) = field.eval(u_next, rec.t + h)?;
    let mut vjps = 0u64;
    let solve = gmres(
        |x| {
            vjps += 1;
            let jx = field.vjp_input(&cache1, x)?;
            Ok(x.iter().zip(&jx).map(|(&a, &b)| a - ht * b).collect())
        },
        &adj.lambda,
        cfg,
    );
    counters.nfe_backward += vjps;
    let (lam_s, iters) = solve?;
    counters.gmres_iterations += iters as u64;

    field.vjp(&cache1, &lam_s, ht, None, Some(&mut adj.mu))?;
    counters.nfe_backward += 1;
    let mut lambda = lam_s.clone();
    if theta < T::one() {
        let (_, cache0) = field.eval(u_n, rec.t)?;
        field.vjp(&cache0, &lam_s, h * (T::one() - theta), Some(&mut lambda), Some(&mut adj.mu))?;
        counters.nfe_backward += 1;
    }
    adj.lambda = lambda;
    adj.check_finite()
}

/// Dispatches to the reverse step of `method`.
pub fn adjoint_step<T: Real, F: VectorField<T>>(
    method: &Method<T>,
    field: &F,
    rec: &StepRecord<T>,
    adj: &mut AdjointState<T>,
    cfg: &SolverConfig<T>,
    counters: &mut Counters,
) -> Result<()> {
    match method {
        Method::Explicit(tab) => rk_adjoint_step(tab, field, rec, adj, counters),
        Method::Theta(theta) => theta_adjoint_step(*theta, field, rec, adj, cfg, counters),
    }
}

/// Step grid and observation bookkeeping of one forward sweep.
struct Sweep<T> {
    grid: Vec<(T, T)>,
    /// Global index of the last step of each observation interval.
    interval_end: Vec<usize>,
    predictions: Vec<Vec<T>>,
}

fn check_times<T: Real>(times: &[T], t0: T) -> Result<()> {
    match times.first() {
        None => Err(Error::InvalidConfig("no observation times".into())),
        Some(&t1) if !(t1 > t0) => Err(Error::Misaligned { t: t1.to_f64_lossy() }),
        _ => Ok(()),
    }
}

/// Integrates across consecutive observation intervals, renumbering steps
/// globally and handing each record to `sink`.
fn sweep<T, F, S>(
    field: &F,
    integrator: &Integrator<T>,
    u0: &[T],
    t0: T,
    times: &[T],
    counters: &mut Counters,
    mut sink: S,
) -> Result<Sweep<T>>
where
    T: Real,
    F: VectorField<T>,
    S: FnMut(StepRecord<T>) -> Result<()>,
{
    check_times(times, t0)?;
    let mut grid = Vec::new();
    let mut interval_end = Vec::with_capacity(times.len());
    let mut predictions = Vec::with_capacity(times.len());
    let mut u = u0.to_vec();
    let mut t = t0;
    let mut h_hint = None;
    let mut offset = 0;
    for &tk in times {
        let out = integrator.integrate_interval(field, &u, t, tk, h_hint, counters, |mut rec| {
            rec.n += offset;
            grid.push((rec.t, rec.h));
            sink(rec)
        })?;
        offset += out.steps;
        interval_end.push(offset - 1);
        predictions.push(out.u.clone());
        u = out.u;
        t = tk;
        h_hint = out.next_h;
    }
    Ok(Sweep {
        grid,
        interval_end,
        predictions,
    })
}

/// Loss value and predictions from a forward pass without storage.
pub fn evaluate_loss<T: Real, F: VectorField<T>>(
    field: &F,
    integrator: &Integrator<T>,
    loss: &LossSpec<T>,
    u0: &[T],
    t0: T,
    counters: &mut Counters,
) -> Result<(T, Vec<Vec<T>>)> {
    let sw = sweep(field, integrator, u0, t0, &loss.times, counters, |_| Ok(()))?;
    let mut total = T::zero();
    for (k, p) in sw.predictions.iter().enumerate() {
        total += loss.term(k, p)?;
    }
    Ok((total, sw.predictions))
}

/// Supplies step records to the reverse sweep in descending order.
enum Reverser<T> {
    Stored {
        store: CheckpointStore<T>,
        live: Option<StepRecord<T>>,
    },
    Revolve {
        store: CheckpointStore<T>,
        live: Option<StepRecord<T>>,
        actions: Vec<ScheduleAction>,
        pos: usize,
        grid: Vec<(T, T)>,
    },
}

impl<T: Real> Reverser<T> {
    fn next<F: VectorField<T>>(
        &mut self,
        n: usize,
        integrator: &Integrator<T>,
        field: &F,
        counters: &mut Counters,
    ) -> Result<StepRecord<T>> {
        match self {
            Reverser::Stored { store, live } => match live.take() {
                Some(rec) if rec.n == n => Ok(rec),
                other => {
                    *live = other;
                    store.restore(n, true, integrator, field, counters)
                }
            },
            Reverser::Revolve {
                store,
                live,
                actions,
                pos,
                grid,
            } => loop {
                let action = *actions.get(*pos).ok_or(Error::CheckpointMissing(n))?;
                *pos += 1;
                match action {
                    ScheduleAction::Advance { from, to } => {
                        let mut cur = live.take().filter(|r| r.n + 1 == from).ok_or(Error::CheckpointMissing(from))?;
                        for j in from..to {
                            let (t, h) = grid[j];
                            cur = integrator.step(field, j, &cur.u_next, t, h, counters)?;
                            counters.steps_recomputed += 1;
                            store.stats.recomputed_steps += 1;
                        }
                        *live = Some(cur);
                    }
                    ScheduleAction::Store { step } => {
                        let rec = live.as_ref().filter(|r| r.n == step).ok_or(Error::CheckpointMissing(step))?;
                        store.store_record(rec)?;
                    }
                    ScheduleAction::Restore { step } => {
                        *live = Some(store.restore(step, false, integrator, field, counters)?);
                    }
                    ScheduleAction::Reverse { step } => {
                        if step != n {
                            return Err(Error::CheckpointMissing(n));
                        }
                        return match live.take() {
                            Some(rec) if rec.n == step => {
                                if store.contains(step) {
                                    store.restore(step, true, integrator, field, counters)?;
                                }
                                Ok(rec)
                            }
                            _ => store.restore(step, true, integrator, field, counters),
                        };
                    }
                }
            },
        }
    }

    fn stats(&self) -> StoreStats {
        match self {
            Reverser::Stored { store, .. } | Reverser::Revolve { store, .. } => store.stats,
        }
    }
}

/// Output of [`grad`].
#[derive(Debug, Clone)]
pub struct GradResult<T> {
    pub loss: T,
    pub grad_theta: Vec<T>,
    pub grad_u0: Vec<T>,
    pub predictions: Vec<Vec<T>>,
    pub counters: Counters,
    pub store_stats: StoreStats,
    /// Number of accepted forward steps.
    pub steps: usize,
}

/// Gradient of `loss` with respect to the field parameters and the initial
/// state, by the discrete adjoint of the integrator with checkpoints kept
/// according to `policy`.
pub fn grad<T: Real, F: VectorField<T>>(
    field: &F,
    integrator: &Integrator<T>,
    loss: &LossSpec<T>,
    u0: &[T],
    t0: T,
    policy: CheckpointPolicy,
) -> Result<GradResult<T>> {
    policy.validate()?;
    integrator.validate()?;
    check_len("initial state", field.dim(), u0.len())?;
    check_len("observation", field.dim(), loss.dim())?;
    let mut counters = Counters::default();

    let (sw, mut reverser) = match policy {
        CheckpointPolicy::StoreAll | CheckpointPolicy::StoreSolutions => {
            let mut store = CheckpointStore::new(None);
            let mut pending: Option<StepRecord<T>> = None;
            let full = policy == CheckpointPolicy::StoreAll;
            let sw = sweep(field, integrator, u0, t0, &loss.times, &mut counters, |rec| {
                if let Some(prev) = pending.replace(rec) {
                    if full {
                        store.store_record(&prev)?;
                    } else {
                        store.store_state(&prev)?;
                    }
                }
                Ok(())
            })?;
            (sw, Reverser::Stored { store, live: pending })
        }
        CheckpointPolicy::Revolve { capacity } => {
            let nt = match integrator.controller {
                StepController::Fixed { steps } => steps * loss.len(),
                // The step count of an adaptive run is only known after a
                // first pass; integration is deterministic, so the second
                // pass reproduces it.
                StepController::Adaptive(_) => {
                    sweep(field, integrator, u0, t0, &loss.times, &mut counters, |_| Ok(()))?
                        .grid
                        .len()
                }
            };
            let actions = revolve_schedule(nt, capacity);
            let first_reverse = actions
                .iter()
                .position(|a| matches!(a, ScheduleAction::Reverse { .. }))
                .expect("schedule reverses every step");
            let initial_stores: BTreeSet<usize> = actions[..first_reverse]
                .iter()
                .filter_map(|a| match a {
                    ScheduleAction::Store { step } => Some(*step),
                    _ => None,
                })
                .collect();
            let mut store = CheckpointStore::new(Some(capacity));
            let mut live: Option<StepRecord<T>> = None;
            let sw = sweep(field, integrator, u0, t0, &loss.times, &mut counters, |rec| {
                if initial_stores.contains(&rec.n) {
                    store.store_record(&rec)?;
                }
                live = Some(rec);
                Ok(())
            })?;
            if sw.grid.len() != nt {
                return Err(Error::InvalidConfig("step count changed between passes".into()));
            }
            let grid = sw.grid.clone();
            (
                sw,
                Reverser::Revolve {
                    store,
                    live,
                    actions,
                    pos: first_reverse,
                    grid,
                },
            )
        }
    };

    let (loss_value, seeds) = loss.loss_and_grad_seed(&sw.predictions)?;
    let mut adj = AdjointState::zeros(field.dim(), field.num_params());
    let nt = sw.grid.len();
    let mut k = sw.interval_end.len();
    for n in (0..nt).rev() {
        while k > 0 && sw.interval_end[k - 1] == n {
            k -= 1;
            for (l, s) in adj.lambda.iter_mut().zip(&seeds[k]) {
                *l += *s;
            }
        }
        let rec = reverser.next(n, integrator, field, &mut counters)?;
        adjoint_step(&integrator.method, field, &rec, &mut adj, &integrator.solver, &mut counters)?;
    }
    let norm = (norm2(&adj.mu).powi(2) + norm2(&adj.lambda).powi(2)).sqrt();
    if !norm.is_finite() {
        return Err(Error::GradientExplosion { norm: norm.to_f64_lossy() });
    }
    Ok(GradResult {
        loss: loss_value,
        grad_theta: adj.mu,
        grad_u0: adj.lambda,
        predictions: sw.predictions,
        counters,
        store_stats: reverser.stats(),
        steps: nt,
    })
}

/// Output of [`continuous_adjoint`].
#[derive(Debug, Clone)]
pub struct ContinuousResult<T> {
    pub loss: T,
    pub grad_theta: Vec<T>,
    pub grad_u0: Vec<T>,
    /// Initial state recovered by integrating the state equation backward.
    pub u0_reconstructed: Vec<T>,
    pub counters: Counters,
}

/// One backward step of the augmented system
/// `(u, lambda, mu)' = (f, -J^T lambda, -f_theta^T lambda)` from `t_end`
/// with step `-h`, using the explicit tableau.
#[allow(clippy::too_many_arguments)]
pub fn continuous_adjoint_step<T: Real, F: VectorField<T>>(
    tab: &ButcherTableau<T>,
    field: &F,
    u: &mut [T],
    adj: &mut AdjointState<T>,
    t_end: T,
    h: T,
    counters: &mut Counters,
) -> Result<()> {
    let s = tab.stages();
    let (n, np) = (u.len(), adj.mu.len());
    let mut ku: Vec<Vec<T>> = Vec::with_capacity(s);
    let mut kl: Vec<Vec<T>> = Vec::with_capacity(s);
    let mut km: Vec<Vec<T>> = Vec::with_capacity(s);
    for i in 0..s {
        let mut ui = u.to_vec();
        let mut li = adj.lambda.clone();
        for j in 0..i {
            let a = tab.a[i][j];
            if a != T::zero() {
                for q in 0..n {
                    ui[q] -= h * a * ku[j][q];
                    li[q] -= h * a * kl[j][q];
                }
            }
        }
        let (fi, cache) = eval_checked(field, &ui, t_end - tab.c[i] * h)?;
        counters.nfe_forward += 1;
        let mut gl = vec![T::zero(); n];
        let mut gm = vec![T::zero(); np];
        field.vjp(&cache, &li, -T::one(), Some(&mut gl), Some(&mut gm))?;
        counters.nfe_backward += 1;
        ku.push(fi);
        kl.push(gl);
        km.push(gm);
    }
    for i in 0..s {
        let b = tab.b[i];
        if b == T::zero() {
            continue;
        }
        for q in 0..n {
            u[q] -= h * b * ku[i][q];
            adj.lambda[q] -= h * b * kl[i][q];
        }
        for q in 0..np {
            adj.mu[q] -= h * b * km[i][q];
        }
    }
    if !all_finite(u) {
        return Err(Error::Overflow { t: (t_end - h).to_f64_lossy() });
    }
    adj.check_finite()
}

/// Gradient by the continuous adjoint: the state is reconstructed by
/// integrating backward from the final forward state, alongside the adjoint
/// equations, on the forward step grid. Explicit fixed-step schemes only.
pub fn continuous_adjoint<T: Real, F: VectorField<T>>(
    field: &F,
    integrator: &Integrator<T>,
    loss: &LossSpec<T>,
    u0: &[T],
    t0: T,
) -> Result<ContinuousResult<T>> {
    integrator.validate()?;
    let Method::Explicit(tab) = &integrator.method else {
        return Err(Error::Unsupported("continuous adjoint needs an explicit scheme".into()));
    };
    if !matches!(integrator.controller, StepController::Fixed { .. }) {
        return Err(Error::Unsupported("continuous adjoint needs fixed stepping".into()));
    }
    check_len("initial state", field.dim(), u0.len())?;
    let mut counters = Counters::default();
    let sw = sweep(field, integrator, u0, t0, &loss.times, &mut counters, |_| Ok(()))?;
    let (loss_value, seeds) = loss.loss_and_grad_seed(&sw.predictions)?;
    let mut u = sw.predictions.last().expect("at least one observation").clone();
    let mut adj = AdjointState::zeros(field.dim(), field.num_params());
    let mut k = sw.interval_end.len();
    for n in (0..sw.grid.len()).rev() {
        while k > 0 && sw.interval_end[k - 1] == n {
            k -= 1;
            for (l, s) in adj.lambda.iter_mut().zip(&seeds[k]) {
                *l += *s;
            }
        }
        let (t, h) = sw.grid[n];
        continuous_adjoint_step(tab, field, &mut u, &mut adj, t + h, h, &mut counters)?;
    }
    Ok(ContinuousResult {
        loss: loss_value,
        grad_theta: adj.mu,
        grad_u0: adj.lambda,
        u0_reconstructed: u,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Affine, Quadratic};
    use crate::loss::LossKind;
    use crate::tableau::{tableau_catalog, Scheme};

    fn record(s: Scheme, field: &impl VectorField<f64>, u: &[f64], h: f64) -> StepRecord<f64> {
        let integ = Integrator::new(tableau_catalog(s), StepController::fixed(1));
        integ.step(field, 0, u, 0.0, h, &mut Counters::default()).unwrap()
    }

    fn reverse(s: Scheme, field: &impl VectorField<f64>, u: &[f64], h: f64, lambda: &[f64]) -> AdjointState<f64> {
        let rec = record(s, field, u, h);
        let mut adj = AdjointState {
            lambda: lambda.to_vec(),
            mu: vec![0.0; field.num_params()],
        };
        adjoint_step(
            &tableau_catalog(s),
            field,
            &rec,
            &mut adj,
            &SolverConfig::default(),
            &mut Counters::default(),
        )
        .unwrap();
        adj
    }

    /// Central difference of the one-step map of `s` on `f(u) = u^2`.
    fn step_derivative(s: Scheme, u: f64, h: f64) -> f64 {
        let f = Quadratic::new(vec![1.0]);
        let e = 1e-6;
        (record(s, &f, &[u + e], h).u_next[0] - record(s, &f, &[u - e], h).u_next[0]) / (2.0 * e)
    }

    #[test]
    fn terminal_condition() {
        let adj = adjoint_terminal(&[0.0, -0.5], &[0.0; 3]).unwrap();
        assert_eq!(adj.lambda, vec![0.0, -0.5]);
        assert_eq!(adj.mu, vec![0.0; 3]);
        assert!(adjoint_terminal(&[f64::NAN], &[]).is_err());
    }

    #[test]
    fn euler_examples() {
        let f = Affine::scalar(2.0);
        let rec = record(Scheme::Euler, &f, &[1.0], 0.1);
        let mut adj = AdjointState {
            lambda: vec![1.0],
            mu: vec![0.0; 2],
        };
        euler_adjoint_step(&f, &rec, &mut adj, &mut Counters::default()).unwrap();
        assert!((adj.lambda[0] - 1.2).abs() < 1e-15);

        let q = Quadratic::new(vec![1.0]);
        let rec = record(Scheme::Euler, &q, &[1.0], 0.1);
        let mut adj = AdjointState {
            lambda: vec![1.0],
            mu: vec![0.0],
        };
        euler_adjoint_step(&q, &rec, &mut adj, &mut Counters::default()).unwrap();
        assert!((adj.lambda[0] - 1.2).abs() < 1e-15);

        let mut zero = AdjointState {
            lambda: vec![0.0],
            mu: vec![0.25],
        };
        euler_adjoint_step(&q, &rec, &mut zero, &mut Counters::default()).unwrap();
        assert_eq!(zero, AdjointState { lambda: vec![0.0], mu: vec![0.25] });
    }

    #[test]
    fn one_stage_rk_matches_euler() {
        let f = Quadratic::new(vec![0.7, -1.3]);
        let rec = record(Scheme::Euler, &f, &[0.4, 0.9], 0.05);
        let init = AdjointState {
            lambda: vec![0.3, -1.1],
            mu: vec![0.1, 0.2],
        };
        let (mut a, mut b) = (init.clone(), init);
        euler_adjoint_step(&f, &rec, &mut a, &mut Counters::default()).unwrap();
        let Method::Explicit(tab) = tableau_catalog::<f64>(Scheme::Euler) else {
            unreachable!()
        };
        rk_adjoint_step(&tab, &f, &rec, &mut b, &mut Counters::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_adjoints_match_finite_differences() {
        let q = Quadratic::new(vec![1.0]);
        for s in Scheme::ALL {
            let adj = reverse(s, &q, &[0.6], 0.1, &[1.0]);
            let fd = step_derivative(s, 0.6, 0.1);
            assert!((adj.lambda[0] - fd).abs() <= 1e-7 * fd.abs(), "{s}: {} vs {fd}", adj.lambda[0]);
        }
        let rk4 = reverse(Scheme::Rk4, &q, &[1.0], 0.1, &[1.0]);
        let fd = step_derivative(Scheme::Rk4, 1.0, 0.1);
        assert!((rk4.lambda[0] - fd).abs() <= 1e-7 * fd.abs());
    }

    #[test]
    fn theta_examples() {
        let adj = reverse(Scheme::Beuler, &Affine::scalar(1.0), &[1.0], 0.5, &[1.0]);
        assert!((adj.lambda[0] - 2.0).abs() < 1e-12);
        let adj = reverse(Scheme::Cn, &Affine::constant(0.0), &[0.3], 0.5, &[0.7]);
        assert!((adj.lambda[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_cotangent_keeps_mu() {
        let q = Quadratic::new(vec![0.5]);
        for s in Scheme::ALL {
            let rec = record(s, &q, &[0.8], 0.2);
            let mut adj = AdjointState {
                lambda: vec![0.0],
                mu: vec![0.125],
            };
            adjoint_step(
                &tableau_catalog(s),
                &q,
                &rec,
                &mut adj,
                &SolverConfig::default(),
                &mut Counters::default(),
            )
            .unwrap();
            assert_eq!(adj, AdjointState { lambda: vec![0.0], mu: vec![0.125] }, "{s}");
        }
    }

    #[test]
    fn missing_stages_are_reported() {
        let q = Quadratic::new(vec![0.5]);
        let mut rec = record(Scheme::Rk4, &q, &[0.8], 0.2);
        rec.stages.truncate(2);
        let mut adj = AdjointState::zeros(1, 1);
        let res = adjoint_step(
            &tableau_catalog(Scheme::Rk4),
            &q,
            &rec,
            &mut adj,
            &SolverConfig::default(),
            &mut Counters::default(),
        );
        assert!(matches!(res, Err(Error::MissingStages(0))));
    }

    #[test]
    fn injection() {
        let loss = LossSpec::new(LossKind::Mse, vec![0.5, 1.0], vec![vec![1.0], vec![2.0]]).unwrap();
        let mut adj = AdjointState::zeros(1, 0);
        inject_observation(&mut adj, &loss, 1, 1.0, &[2.0]).unwrap();
        assert_eq!(adj.lambda, vec![0.0]);
        inject_observation(&mut adj, &loss, 0, 0.5, &[2.0]).unwrap();
        assert_eq!(adj.lambda, vec![1.0]);
        assert!(matches!(
            inject_observation(&mut adj, &loss, 0, 0.6, &[2.0]),
            Err(Error::Misaligned { .. })
        ));
    }

    #[test]
    fn zero_field_gives_zero_gradient() {
        let f = Affine::constant(0.0);
        let integ = Integrator::new(tableau_catalog(Scheme::Rk4), StepController::fixed(5));
        let loss = LossSpec::terminal(LossKind::Mse, 1.0, vec![0.3]);
        let g = grad(&f, &integ, &loss, &[0.3], 0.0, CheckpointPolicy::StoreAll).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad_theta.iter().chain(&g.grad_u0).all(|&x| x == 0.0));
    }

    #[test]
    fn observation_before_start_is_rejected() {
        let f = Affine::scalar(1.0);
        let integ = Integrator::new(tableau_catalog(Scheme::Euler), StepController::fixed(2));
        let loss = LossSpec::terminal(LossKind::Mse, 0.0, vec![0.3]);
        assert!(matches!(
            grad(&f, &integ, &loss, &[0.3], 0.0, CheckpointPolicy::StoreAll),
            Err(Error::Misaligned { .. })
        ));
    }

    #[test]
    fn two_observation_mae_matches_finite_differences() {
        let loss = LossSpec::new(LossKind::Mae, vec![0.4, 1.0], vec![vec![0.2], vec![3.0]]).unwrap();
        let integ = Integrator::new(tableau_catalog(Scheme::Midpoint), StepController::fixed(6));
        let field = Quadratic::new(vec![0.9]);
        let g = grad(&field, &integ, &loss, &[0.5], 0.0, CheckpointPolicy::StoreAll).unwrap();
        let l = |c: f64, u0: f64| {
            evaluate_loss(&Quadratic::new(vec![c]), &integ, &loss, &[u0], 0.0, &mut Counters::default())
                .unwrap()
                .0
        };
        let e = 1e-6;
        let d_c = (l(0.9 + e, 0.5) - l(0.9 - e, 0.5)) / (2.0 * e);
        let d_u = (l(0.9, 0.5 + e) - l(0.9, 0.5 - e)) / (2.0 * e);
        assert!((g.grad_theta[0] - d_c).abs() <= 1e-6 * d_c.abs());
        assert!((g.grad_u0[0] - d_u).abs() <= 1e-6 * d_u.abs());
    }

    #[test]
    fn store_counters() {
        let field = Quadratic::new(vec![-0.4, 0.2]);
        let integ = Integrator::new(tableau_catalog(Scheme::Rk4), StepController::fixed(6));
        let loss = LossSpec::terminal(LossKind::Mse, 1.0, vec![0.0, 0.0]);
        let all = grad(&field, &integ, &loss, &[1.0, 0.5], 0.0, CheckpointPolicy::StoreAll).unwrap();
        assert_eq!(all.counters.steps_recomputed, 0);
        assert_eq!(all.store_stats.peak_vectors, 5 * 5);
        assert_eq!(all.counters.nfe_backward, 24);
        let sol = grad(&field, &integ, &loss, &[1.0, 0.5], 0.0, CheckpointPolicy::StoreSolutions).unwrap();
        assert_eq!(sol.counters.steps_recomputed, 5);
        assert_eq!(sol.grad_theta, all.grad_theta);
        let rev = grad(&field, &integ, &loss, &[1.0, 0.5], 0.0, CheckpointPolicy::Revolve { capacity: 1 }).unwrap();
        assert_eq!(rev.counters.steps_recomputed, crate::checkpoint::revolve_count(6, 1));
        assert!(rev.store_stats.max_slots <= 1);
        assert_eq!(rev.grad_theta, all.grad_theta);
        assert_eq!(rev.grad_u0, all.grad_u0);
    }

    #[test]
    fn continuous_matches_discrete_for_linear_euler() {
        let f = Affine::<f64>::new(2, vec![0.3, -0.2, 0.5, 0.1], vec![0.0, 0.0]).unwrap();
        let integ = Integrator::new(tableau_catalog(Scheme::Euler), StepController::fixed(1));
        let loss = LossSpec::terminal(LossKind::Mse, 0.1, vec![0.0, 0.0]);
        let d = grad(&f, &integ, &loss, &[1.0, -0.4], 0.0, CheckpointPolicy::StoreAll).unwrap();
        let c = continuous_adjoint(&f, &integ, &loss, &[1.0, -0.4], 0.0).unwrap();
        for (a, b) in d.grad_u0.iter().zip(&c.grad_u0) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn continuous_discrepancy_is_second_order() {
        let q = Quadratic::new(vec![1.0]);
        let gap = |h: f64| {
            let integ = Integrator::new(tableau_catalog(Scheme::Euler), StepController::fixed(1));
            let loss = LossSpec::terminal(LossKind::Mse, h, vec![0.0]);
            let d = grad(&q, &integ, &loss, &[1.0], 0.0, CheckpointPolicy::StoreAll).unwrap();
            let c = continuous_adjoint(&q, &integ, &loss, &[1.0], 0.0).unwrap();
            // Compare the per-unit-cotangent sensitivities of one step.
            let seed = 2.0 * d.predictions[0][0];
            ((c.grad_u0[0] - d.grad_u0[0]) / seed).abs()
        };
        for h in [1e-2, 1e-3] {
            let r = gap(h) / gap(h / 2.0);
            assert!((3.5..=4.5).contains(&r), "h={h}: ratio {r}");
        }
    }

    #[test]
    fn continuous_rejects_implicit() {
        let integ = Integrator::new(tableau_catalog(Scheme::Cn), StepController::fixed(1));
        let loss = LossSpec::terminal(LossKind::Mse, 1.0, vec![0.0]);
        assert!(matches!(
            continuous_adjoint(&Quadratic::new(vec![1.0]), &integ, &loss, &[1.0], 0.0),
            Err(Error::Unsupported(_))
        ));
    }
}
