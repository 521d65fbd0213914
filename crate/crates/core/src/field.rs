//! Parameterized right-hand sides `f(u, theta, t)` together with the
//! derivative products the integrators and adjoints need.

use crate::error::{check_len, Error, Result};
use crate::nn::{ForwardCache, MlpModel};
use crate::scalar::Real;

/// A differentiable vector field with a flat parameter vector.
///
/// `eval` returns the value together with a cache that the derivative
/// products consume; a cache is tied to the point it was created at.
pub trait VectorField<T: Real> {
    type Cache;

    fn dim(&self) -> usize;

    fn params(&self) -> &[T];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// A copy of this field with replaced parameters.
    fn with_params(&self, params: Vec<T>) -> Result<Self>
    where
        Self: Sized;

    fn eval(&self, u: &[T], t: T) -> Result<(Vec<T>, Self::Cache)>;

    /// Adds `alpha * (df/du)^T v` into `grad_u` and `alpha * (df/dtheta)^T v`
    /// into `grad_theta` (either may be skipped).
    fn vjp(
        &self,
        cache: &Self::Cache,
        v: &[T],
        alpha: T,
        grad_u: Option<&mut [T]>,
        grad_theta: Option<&mut [T]>,
    ) -> Result<()>;

    /// `(df/du) w`.
    fn jvp(&self, cache: &Self::Cache, w: &[T]) -> Result<Vec<T>>;

    fn vjp_input(&self, cache: &Self::Cache, v: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim()];
        self.vjp(cache, v, T::one(), Some(&mut out), None)?;
        Ok(out)
    }
}

impl<T: Real> VectorField<T> for MlpModel<T> {
    type Cache = ForwardCache<T>;

    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn params(&self) -> &[T] {
        self.theta()
    }

    fn with_params(&self, params: Vec<T>) -> Result<Self> {
        MlpModel::new(self.spec().clone(), params)
    }

    fn eval(&self, u: &[T], t: T) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.forward(u, t)
    }

    fn vjp(
        &self,
        cache: &ForwardCache<T>,
        v: &[T],
        alpha: T,
        grad_u: Option<&mut [T]>,
        grad_theta: Option<&mut [T]>,
    ) -> Result<()> {
        self.vjp_accumulate(cache, v, alpha, grad_u, grad_theta)
    }

    fn jvp(&self, cache: &ForwardCache<T>, w: &[T]) -> Result<Vec<T>> {
        self.jvp_input(cache, w)
    }
}

/// `f(u) = A u + b` with parameters `A` (row-major) followed by `b`.
#[derive(Debug, Clone)]
pub struct Affine<T> {
    n: usize,
    params: Vec<T>,
}

impl<T: Real> Affine<T> {
    pub fn new(n: usize, a: Vec<T>, b: Vec<T>) -> Result<Self> {
        check_len("affine matrix", n * n, a.len())?;
        check_len("affine offset", n, b.len())?;
        let mut params = a;
        params.extend(b);
        Ok(Self { n, params })
    }

    /// `f(u) = a u` on a scalar state.
    pub fn scalar(a: T) -> Self {
        Self {
            n: 1,
            params: vec![a, T::zero()],
        }
    }

    /// `f(u) = c` on a scalar state.
    pub fn constant(c: T) -> Self {
        Self {
            n: 1,
            params: vec![T::zero(), c],
        }
    }

    pub fn matrix(&self) -> &[T] {
        &self.params[..self.n * self.n]
    }
}

impl<T: Real> VectorField<T> for Affine<T> {
    type Cache = Vec<T>;

    fn dim(&self) -> usize {
        self.n
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn with_params(&self, params: Vec<T>) -> Result<Self> {
        check_len("affine parameters", self.params.len(), params.len())?;
        Ok(Self { n: self.n, params })
    }

    fn eval(&self, u: &[T], _t: T) -> Result<(Vec<T>, Vec<T>)> {
        check_len("state", self.n, u.len())?;
        let n = self.n;
        let a = self.matrix();
        let f = (0..n)
            .map(|i| {
                self.params[n * n + i]
                    + a[i * n..(i + 1) * n]
                        .iter()
                        .zip(u)
                        .map(|(&x, &y)| x * y)
                        .sum::<T>()
            })
            .collect();
        Ok((f, u.to_vec()))
    }

    fn vjp(
        &self,
        cache: &Vec<T>,
        v: &[T],
        alpha: T,
        grad_u: Option<&mut [T]>,
        grad_theta: Option<&mut [T]>,
    ) -> Result<()> {
        let n = self.n;
        check_len("cotangent", n, v.len())?;
        let a = self.matrix();
        if let Some(gu) = grad_u {
            for i in 0..n {
                for j in 0..n {
                    gu[j] += alpha * a[i * n + j] * v[i];
                }
            }
        }
        if let Some(gt) = grad_theta {
            for i in 0..n {
                for j in 0..n {
                    gt[i * n + j] += alpha * v[i] * cache[j];
                }
                gt[n * n + i] += alpha * v[i];
            }
        }
        Ok(())
    }

    fn jvp(&self, _cache: &Vec<T>, w: &[T]) -> Result<Vec<T>> {
        check_len("tangent", self.n, w.len())?;
        let n = self.n;
        let a = self.matrix();
        Ok((0..n)
            .map(|i| a[i * n..(i + 1) * n].iter().zip(w).map(|(&x, &y)| x * y).sum())
            .collect())
    }
}

/// Componentwise `f_i(u) = c_i u_i^2`.
#[derive(Debug, Clone)]
pub struct Quadratic<T> {
    coef: Vec<T>,
}

impl<T: Real> Quadratic<T> {
    pub fn new(coef: Vec<T>) -> Self {
        Self { coef }
    }
}

impl<T: Real> VectorField<T> for Quadratic<T> {
    type Cache = Vec<T>;

    fn dim(&self) -> usize {
        self.coef.len()
    }

    fn params(&self) -> &[T] {
        &self.coef
    }

    fn with_params(&self, params: Vec<T>) -> Result<Self> {
        check_len("quadratic coefficients", self.coef.len(), params.len())?;
        Ok(Self { coef: params })
    }

    fn eval(&self, u: &[T], _t: T) -> Result<(Vec<T>, Vec<T>)> {
        check_len("state", self.coef.len(), u.len())?;
        let f = u.iter().zip(&self.coef).map(|(&x, &c)| c * x * x).collect();
        Ok((f, u.to_vec()))
    }

    fn vjp(
        &self,
        cache: &Vec<T>,
        v: &[T],
        alpha: T,
        grad_u: Option<&mut [T]>,
        grad_theta: Option<&mut [T]>,
    ) -> Result<()> {
        check_len("cotangent", self.coef.len(), v.len())?;
        let two = T::lit(2.0);
        if let Some(gu) = grad_u {
            for i in 0..v.len() {
                gu[i] += alpha * two * self.coef[i] * cache[i] * v[i];
            }
        }
        if let Some(gt) = grad_theta {
            for i in 0..v.len() {
                gt[i] += alpha * cache[i] * cache[i] * v[i];
            }
        }
        Ok(())
    }

    fn jvp(&self, cache: &Vec<T>, w: &[T]) -> Result<Vec<T>> {
        check_len("tangent", self.coef.len(), w.len())?;
        let two = T::lit(2.0);
        Ok((0..w.len()).map(|i| two * self.coef[i] * cache[i] * w[i]).collect())
    }
}

/// Robertson's three-species stiff kinetics with rate constants as parameters.
#[derive(Debug, Clone)]
pub struct Robertson<T> {
    k: [T; 3],
}

impl<T: Real> Default for Robertson<T> {
    fn default() -> Self {
        Self {
            k: [T::lit(0.04), T::lit(3.0e7), T::lit(1.0e4)],
        }
    }
}

impl<T: Real> Robertson<T> {
    pub fn new(k1: T, k2: T, k3: T) -> Self {
        Self { k: [k1, k2, k3] }
    }

    pub fn rhs(&self, u: &[T]) -> Result<Vec<T>> {
        check_len("robertson state", 3, u.len())?;
        let [k1, k2, k3] = self.k;
        let (u1, u2, u3) = (u[0], u[1], u[2]);
        Ok(vec![
            -k1 * u1 + k3 * u2 * u3,
            k1 * u1 - k2 * u2 * u2 - k3 * u2 * u3,
            k2 * u2 * u2,
        ])
    }

    fn jacobian(&self, u: &[T]) -> [[T; 3]; 3] {
        let [k1, k2, k3] = self.k;
        let (u2, u3) = (u[1], u[2]);
        let two = T::lit(2.0);
        let z = T::zero();
        [
            [-k1, k3 * u3, k3 * u2],
            [k1, -two * k2 * u2 - k3 * u3, -k3 * u2],
            [z, two * k2 * u2, z],
        ]
    }
}

impl<T: Real> VectorField<T> for Robertson<T> {
    type Cache = Vec<T>;

    fn dim(&self) -> usize {
        3
    }

    fn params(&self) -> &[T] {
        &self.k
    }

    fn with_params(&self, params: Vec<T>) -> Result<Self> {
        check_len("robertson rate constants", 3, params.len())?;
        Ok(Self::new(params[0], params[1], params[2]))
    }

    fn eval(&self, u: &[T], _t: T) -> Result<(Vec<T>, Vec<T>)> {
        Ok((self.rhs(u)?, u.to_vec()))
    }

    fn vjp(
        &self,
        cache: &Vec<T>,
        v: &[T],
        alpha: T,
        grad_u: Option<&mut [T]>,
        grad_theta: Option<&mut [T]>,
    ) -> Result<()> {
        check_len("cotangent", 3, v.len())?;
        if let Some(gu) = grad_u {
            let j = self.jacobian(cache);
            for c in 0..3 {
                gu[c] += alpha * (0..3).map(|r| j[r][c] * v[r]).sum::<T>();
            }
        }
        if let Some(gt) = grad_theta {
            let (u1, u2, u3) = (cache[0], cache[1], cache[2]);
            gt[0] += alpha * u1 * (v[1] - v[0]);
            gt[1] += alpha * u2 * u2 * (v[2] - v[1]);
            gt[2] += alpha * u2 * u3 * (v[0] - v[1]);
        }
        Ok(())
    }

    fn jvp(&self, cache: &Vec<T>, w: &[T]) -> Result<Vec<T>> {
        check_len("tangent", 3, w.len())?;
        let j = self.jacobian(cache);
        Ok((0..3).map(|r| (0..3).map(|c| j[r][c] * w[c]).sum()).collect())
    }
}

/// Evaluates a field and rejects non-finite output as overflow.
pub(crate) fn eval_checked<T: Real, F: VectorField<T>>(
    field: &F,
    u: &[T],
    t: T,
) -> Result<(Vec<T>, F::Cache)> {
    if !crate::linalg::all_finite(u) {
        return Err(Error::Overflow { t: t.to_f64_lossy() });
    }
    let (f, cache) = field.eval(u, t)?;
    if !crate::linalg::all_finite(&f) {
        return Err(Error::Overflow { t: t.to_f64_lossy() });
    }
    Ok((f, cache))
}
