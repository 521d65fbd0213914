//! Matrix-free restarted GMRES and a Newton-Krylov driver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm2, scale};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SolverConfig<T> {
    /// Absolute 2-norm tolerance on the nonlinear residual.
    pub newton_tol: T,
    pub newton_maxit: usize,
    /// Relative residual tolerance of the linear solves.
    pub gmres_tol: T,
    pub gmres_maxit: usize,
    pub gmres_restart: usize,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            newton_tol: T::lit(1e-10),
            newton_maxit: 50,
            gmres_tol: T::lit(1e-12),
            gmres_maxit: 500,
            gmres_restart: 30,
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: T| x > T::zero() && x < T::one();
        if !unit(self.newton_tol) || !unit(self.gmres_tol) {
            return Err(Error::InvalidConfig("solver tolerances must lie in (0, 1)".into()));
        }
        if self.newton_maxit == 0 || self.gmres_maxit == 0 || self.gmres_restart == 0 {
            return Err(Error::InvalidConfig("solver iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solves `A x = rhs` with restarted GMRES(m) from a zero initial guess.
///
/// Returns the solution and the number of operator applications.
pub fn gmres<T, A>(mut apply: A, rhs: &[T], cfg: &SolverConfig<T>) -> Result<(Vec<T>, usize)>
where
    T: Real,
    A: FnMut(&[T]) -> Result<Vec<T>>,
{
    let n = rhs.len();
    let mut x = vec![T::zero(); n];
    let bnorm = norm2(rhs);
    if !bnorm.is_finite() {
        return Err(Error::GmresBreakdown("non-finite right-hand side"));
    }
    if bnorm == T::zero() {
        return Ok((x, 0));
    }
    let target = cfg.gmres_tol * bnorm;
    let m = cfg.gmres_restart.min(n.max(1));
    let mut iterations = 0;
    let mut r = rhs.to_vec();

    loop {
        let beta = norm2(&r);
        if beta <= target {
            return Ok((x, iterations));
        }
        let mut basis: Vec<Vec<T>> = Vec::with_capacity(m + 1);
        let mut v0 = r.clone();
        scale(T::one() / beta, &mut v0);
        basis.push(v0);
        // Hessenberg columns, already rotated.
        let mut h: Vec<Vec<T>> = Vec::with_capacity(m);
        let mut cs: Vec<T> = Vec::with_capacity(m);
        let mut sn: Vec<T> = Vec::with_capacity(m);
        let mut g = vec![T::zero(); m + 1];
        g[0] = beta;
        let mut k = 0;
        let mut converged = false;

        while k < m {
            let mut w = apply(&basis[k])?;
            iterations += 1;
            if !all_finite(&w) {
                return Err(Error::GmresBreakdown("operator produced non-finite values"));
            }
            let mut col = vec![T::zero(); k + 2];
            // Modified Gram-Schmidt with one reorthogonalization pass.
            for _ in 0..2 {
                for (i, vi) in basis.iter().enumerate() {
                    let hij = dot(&w, vi);
                    col[i] += hij;
                    axpy(-hij, vi, &mut w);
                }
            }
            let hnext = norm2(&w);
            col[k + 1] = hnext;
            for i in 0..k {
                let (a, b) = (col[i], col[i + 1]);
                col[i] = cs[i] * a + sn[i] * b;
                col[i + 1] = -sn[i] * a + cs[i] * b;
            }
            let (a, b) = (col[k], col[k + 1]);
            let denom = a.hypot(b);
            let (c, s) = if denom == T::zero() {
                (T::one(), T::zero())
            } else {
                (a / denom, b / denom)
            };
            col[k] = denom;
            col[k + 1] = T::zero();
            cs.push(c);
            sn.push(s);
            g[k + 1] = -s * g[k];
            g[k] = c * g[k];
            h.push(col);
            k += 1;

            let resid = g[k].abs();
            if resid <= target || hnext == T::zero() {
                converged = true;
                break;
            }
            if iterations >= cfg.gmres_maxit {
                break;
            }
            let mut vnext = w;
            scale(T::one() / hnext, &mut vnext);
            basis.push(vnext);
        }

        // Back substitution on the k x k upper-triangular system.
        let mut y = vec![T::zero(); k];
        for i in (0..k).rev() {
            let mut acc = g[i];
            for j in i + 1..k {
                acc -= h[j][i] * y[j];
            }
            if h[i][i] == T::zero() {
                return Err(Error::GmresBreakdown("singular Hessenberg matrix"));
            }
            y[i] = acc / h[i][i];
        }
        for (j, &yj) in y.iter().enumerate() {
            axpy(yj, &basis[j], &mut x);
        }
        if !all_finite(&x) {
            return Err(Error::GmresBreakdown("non-finite iterate"));
        }

        let ax = apply(&x)?;
        r = rhs.iter().zip(&ax).map(|(&b, &a)| b - a).collect();
        let true_resid = norm2(&r);
        if converged && true_resid <= target * T::lit(10.0) {
            return Ok((x, iterations));
        }
        if iterations >= cfg.gmres_maxit {
            return Err(Error::GmresNotConverged {
                iterations,
                residual: (true_resid / bnorm).to_f64_lossy(),
            });
        }
    }
}

/// A square nonlinear system `G(u) = 0` with a matrix-free Jacobian.
pub trait NonlinearSystem<T> {
    /// Evaluates `G(u)` and linearizes the system at `u`.
    fn residual(&mut self, u: &[T]) -> Result<Vec<T>>;

    /// `G'(u) w` at the point passed to the most recent `residual` call.
    fn apply_jacobian(&mut self, w: &[T]) -> Result<Vec<T>>;
}

/// Closure-backed [`NonlinearSystem`]; the Jacobian closure receives the
/// linearization point and the direction.
pub struct FnSystem<T, R, J> {
    residual: R,
    jacobian: J,
    point: Vec<T>,
}

impl<T, R, J> FnSystem<T, R, J>
where
    T: Real,
    R: FnMut(&[T]) -> Result<Vec<T>>,
    J: FnMut(&[T], &[T]) -> Result<Vec<T>>,
{
    pub fn new(residual: R, jacobian: J) -> Self {
        Self {
            residual,
            jacobian,
            point: Vec::new(),
        }
    }
}

impl<T, R, J> NonlinearSystem<T> for FnSystem<T, R, J>
where
    T: Real,
    R: FnMut(&[T]) -> Result<Vec<T>>,
    J: FnMut(&[T], &[T]) -> Result<Vec<T>>,
{
    fn residual(&mut self, u: &[T]) -> Result<Vec<T>> {
        self.point = u.to_vec();
        (self.residual)(u)
    }

    fn apply_jacobian(&mut self, w: &[T]) -> Result<Vec<T>> {
        (self.jacobian)(&self.point, w)
    }
}

/// Statistics of one Newton solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NewtonStats {
    pub iterations: usize,
    pub linear_iterations: usize,
}

/// Newton's method with GMRES inner solves, re-linearized every iteration.
pub fn newton_solve<T: Real, S: NonlinearSystem<T>>(
    system: &mut S,
    u0: &[T],
    cfg: &SolverConfig<T>,
) -> Result<(Vec<T>, NewtonStats)> {
    let mut u = u0.to_vec();
    let mut stats = NewtonStats::default();
    loop {
        let r = system.residual(&u)?;
        let rnorm = norm2(&r);
        if !rnorm.is_finite() {
            return Err(Error::NewtonNotConverged {
                iterations: stats.iterations,
                residual: f64::INFINITY,
            });
        }
        if rnorm <= cfg.newton_tol {
            return Ok((u, stats));
        }
        if stats.iterations >= cfg.newton_maxit {
            return Err(Error::NewtonNotConverged {
                iterations: stats.iterations,
                residual: rnorm.to_f64_lossy(),
            });
        }
        let neg_r: Vec<T> = r.iter().map(|&x| -x).collect();
        let (delta, lin) = gmres(|w| system.apply_jacobian(w), &neg_r, cfg)?;
        stats.linear_iterations += lin;
        stats.iterations += 1;
        axpy(T::one(), &delta, &mut u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| dot(row, x)).collect()
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let rhs = [3.0, -1.0, 2.5];
        let (x, it) = gmres(|v: &[f64]| Ok(v.to_vec()), &rhs, &SolverConfig::default()).unwrap();
        for (a, b) in x.iter().zip(&rhs) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        assert_eq!(it, 1);
    }

    #[test]
    fn diagonal_solve() {
        let d = [1.0, 2.0, 4.0];
        let (x, _) = gmres(
            |v: &[f64]| Ok(v.iter().zip(&d).map(|(a, b)| a * b).collect()),
            &[1.0, 2.0, 4.0],
            &SolverConfig::default(),
        )
        .unwrap();
        for xi in x {
            assert!((xi - 1.0).abs() < 1e-14);
        }
    }

    /// Dense Gaussian elimination with partial pivoting, used as the oracle.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, p);
            b.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            x[i] = (b[i] - (i + 1..n).map(|j| a[i][j] * x[j]).sum::<f64>()) / a[i][i];
        }
        x
    }

    #[test]
    fn spd_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| m[k][i] * m[k][j]).sum::<f64>() + if i == j { n as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = SolverConfig {
            gmres_tol: 1e-10,
            ..SolverConfig::default()
        };
        let (x, _) = gmres(|v: &[f64]| Ok(matvec(&a, v)), &b, &cfg).unwrap();
        let r: Vec<f64> = matvec(&a, &x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm2(&r) / norm2(&b) <= 1e-10);
        let xd = dense_solve(a.clone(), b.clone());
        for (p, q) in x.iter().zip(&xd) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn restarted_gmres_converges_on_nonsymmetric() {
        let n = 20;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| match (i as i64 - j as i64).abs() {
                        0 => 4.0,
                        1 => if i > j { -1.5 } else { -0.5 },
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let cfg = SolverConfig {
            gmres_restart: 5,
            gmres_tol: 1e-11,
            ..SolverConfig::default()
        };
        let (x, it) = gmres(|v: &[f64]| Ok(matvec(&a, v)), &b, &cfg).unwrap();
        assert!(it > 5);
        let r: Vec<f64> = matvec(&a, &x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm2(&r) / norm2(&b) <= 1e-10);
    }

    #[test]
    fn gmres_iteration_cap_reports_failure() {
        let n = 30;
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let cfg = SolverConfig {
            gmres_maxit: 3,
            gmres_restart: 3,
            ..SolverConfig::default()
        };
        let res = gmres(
            |v: &[f64]| Ok(v.iter().enumerate().map(|(i, x)| x * (1.0 + i as f64)).collect()),
            &b,
            &cfg,
        );
        assert!(matches!(res, Err(Error::GmresNotConverged { .. })));
    }

    #[test]
    fn newton_examples() {
        let cfg = SolverConfig::default();
        let mut affine = FnSystem::new(|u: &[f64]| Ok(vec![u[0] - 2.0]), |_: &[f64], w: &[f64]| Ok(w.to_vec()));
        let (u, st) = newton_solve(&mut affine, &[0.0], &cfg).unwrap();
        assert_eq!((u[0], st.iterations), (2.0, 1));

        let mut be = FnSystem::new(|u: &[f64]| Ok(vec![u[0] - 1.0 - 0.5 * u[0]]), |_: &[f64], w: &[f64]| {
            Ok(vec![0.5 * w[0]])
        });
        let (u, _) = newton_solve(&mut be, &[1.0], &cfg).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-12);

        let mut cubic = FnSystem::new(|u: &[f64]| Ok(vec![u[0].powi(3) - 8.0]), |p: &[f64], w: &[f64]| {
            Ok(vec![3.0 * p[0] * p[0] * w[0]])
        });
        let (u, _) = newton_solve(&mut cubic, &[3.0], &cfg).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn newton_reports_non_convergence() {
        let cfg = SolverConfig {
            newton_maxit: 3,
            ..SolverConfig::default()
        };
        // x^2 + 1 has no real root.
        let mut sys = FnSystem::new(|u: &[f64]| Ok(vec![u[0] * u[0] + 1.0]), |p: &[f64], w: &[f64]| {
            Ok(vec![2.0 * p[0] * w[0]])
        });
        assert!(matches!(
            newton_solve(&mut sys, &[0.5], &cfg),
            Err(Error::NewtonNotConverged { .. })
        ));
    }
}
