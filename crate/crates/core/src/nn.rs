//! Multilayer-perceptron vector field with hand-written forward, reverse
//! (vector-Jacobian) and forward-mode (Jacobian-vector) sweeps.
//!
//! Parameters live in one flat vector. For every layer, the weight matrix is
//! stored row-major (`w_out x w_in`) followed by its bias, layers in order.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::all_finite;
use crate::scalar::Real;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Self::Relu => x.max(T::zero()),
            Self::Gelu => T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf()),
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative of the activation. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Self::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
            Self::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Self::Identity => T::one(),
        }
    }
}

/// Layer layout of an MLP vector field `f(u, t)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub time_input: bool,
}

impl MlpSpec {
    /// `depth` hidden layers of equal `width` between a state of dimension
    /// `state_dim` and the output.
    pub fn with_hidden(
        state_dim: usize,
        width: usize,
        depth: usize,
        activation: Activation,
        time_input: bool,
    ) -> Self {
        let mut layer_widths = Vec::with_capacity(depth + 2);
        layer_widths.push(state_dim + usize::from(time_input));
        layer_widths.extend(std::iter::repeat_n(width, depth));
        layer_widths.push(state_dim);
        Self {
            layer_widths,
            activation,
            time_input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let n = self.state_dim();
        let expected_in = n + usize::from(self.time_input);
        if self.layer_widths[0] != expected_in {
            return Err(Error::InvalidConfig(format!(
                "input width {} does not match state dimension {} (time_input = {})",
                self.layer_widths[0], n, self.time_input
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len().saturating_sub(1)
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets of each layer's weight block inside the flat parameter vector.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for w in self.layer_widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        offsets
    }
}

/// Intermediates recorded by one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    model_id: u64,
    /// Input of every layer; `inputs[0]` is the (possibly time-augmented) state.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Vec<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn input(&self) -> &[T] {
        &self.inputs[0]
    }
}

#[derive(Debug, Clone)]
pub struct MlpModel<T> {
    spec: MlpSpec,
    theta: Vec<T>,
    offsets: Vec<usize>,
    id: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct ModelDocument<T> {
    spec: MlpSpec,
    theta: Vec<T>,
}

impl<T: Real> MlpModel<T> {
    pub fn new(spec: MlpSpec, theta: Vec<T>) -> Result<Self> {
        spec.validate()?;
        check_len("parameter vector", spec.num_params(), theta.len())?;
        if !all_finite(&theta) {
            return Err(Error::NonFinite("parameter vector"));
        }
        let offsets = spec.layer_offsets();
        Ok(Self {
            spec,
            theta,
            offsets,
            id: fresh_id(),
        })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights
    /// and biases of every layer.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(spec.num_params());
        for w in spec.layer_widths.windows(2) {
            let bound = (1.0 / w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                theta.push(T::lit(rng.gen_range(-bound..=bound)));
            }
        }
        Self::new(spec, theta)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Replaces the parameters; caches created before this call become stale.
    pub fn set_theta(&mut self, theta: Vec<T>) -> Result<()> {
        check_len("parameter vector", self.theta.len(), theta.len())?;
        if !all_finite(&theta) {
            return Err(Error::NonFinite("parameter vector"));
        }
        self.theta = theta;
        self.id = fresh_id();
        Ok(())
    }

    fn weights(&self, layer: usize) -> &[T] {
        let (n_in, n_out) = (self.spec.layer_widths[layer], self.spec.layer_widths[layer + 1]);
        &self.theta[self.offsets[layer]..self.offsets[layer] + n_in * n_out]
    }

    fn bias(&self, layer: usize) -> &[T] {
        let (n_in, n_out) = (self.spec.layer_widths[layer], self.spec.layer_widths[layer + 1]);
        let start = self.offsets[layer] + n_in * n_out;
        &self.theta[start..start + n_out]
    }

    fn check_cache(&self, cache: &ForwardCache<T>) -> Result<()> {
        if cache.model_id != self.id {
            return Err(Error::StaleCache);
        }
        Ok(())
    }

    /// Evaluates `f(u, t)` and records the intermediates needed by the
    /// derivative sweeps.
    pub fn forward(&self, u: &[T], t: T) -> Result<(Vec<T>, ForwardCache<T>)> {
        let n = self.state_dim();
        check_len("state", n, u.len())?;
        if !all_finite(u) || !t.is_finite() {
            return Err(Error::NonFinite("network input"));
        }
        let mut a: Vec<T> = u.to_vec();
        if self.spec.time_input {
            a.push(t);
        }
        let layers = self.spec.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers.saturating_sub(1));
        for l in 0..layers {
            let n_in = self.spec.layer_widths[l];
            let w = self.weights(l);
            let mut z = self.bias(l).to_vec();
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &w[i * n_in..(i + 1) * n_in];
                *zi += row.iter().zip(&a).map(|(&wij, &aj)| wij * aj).sum::<T>();
            }
            let next = if l + 1 < layers {
                let act: Vec<T> = z.iter().map(|&x| self.spec.activation.apply(x)).collect();
                pre_activations.push(z);
                act
            } else {
                z
            };
            inputs.push(std::mem::replace(&mut a, next));
        }
        Ok((
            a,
            ForwardCache {
                model_id: self.id,
                inputs,
                pre_activations,
            },
        ))
    }

    /// Adds `alpha * (df/du)^T v` to `grad_u` and, when given,
    /// `alpha * (df/dtheta)^T v` to `grad_theta`. One reverse sweep.
    pub fn vjp_accumulate(
        &self,
        cache: &ForwardCache<T>,
        v: &[T],
        alpha: T,
        grad_u: Option<&mut [T]>,
        mut grad_theta: Option<&mut [T]>,
    ) -> Result<()> {
        self.check_cache(cache)?;
        let n = self.state_dim();
        check_len("cotangent", n, v.len())?;
        if let Some(g) = grad_theta.as_deref() {
            check_len("parameter gradient", self.num_params(), g.len())?;
        }
        let layers = self.spec.num_layers();
        let mut g: Vec<T> = v.iter().map(|&x| alpha * x).collect();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                for (gi, &z) in g.iter_mut().zip(&cache.pre_activations[l]) {
                    *gi *= self.spec.activation.derivative(z);
                }
            }
            let n_in = self.spec.layer_widths[l];
            let a = &cache.inputs[l];
            if let Some(gt) = grad_theta.as_deref_mut() {
                let off = self.offsets[l];
                let n_out = g.len();
                for (i, &gi) in g.iter().enumerate() {
                    if gi != T::zero() {
                        let row = &mut gt[off + i * n_in..off + (i + 1) * n_in];
                        for (r, &aj) in row.iter_mut().zip(a) {
                            *r += gi * aj;
                        }
                    }
                }
                let bias = &mut gt[off + n_in * n_out..off + n_in * n_out + n_out];
                for (b, &gi) in bias.iter_mut().zip(&g) {
                    *b += gi;
                }
            }
            if l == 0 && grad_u.is_none() {
                break;
            }
            let w = self.weights(l);
            let mut prev = vec![T::zero(); n_in];
            for (i, &gi) in g.iter().enumerate() {
                if gi != T::zero() {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    for (p, &wij) in prev.iter_mut().zip(row) {
                        *p += gi * wij;
                    }
                }
            }
            g = prev;
        }
        if let Some(gu) = grad_u {
            check_len("state gradient", n, gu.len())?;
            for (o, &x) in gu.iter_mut().zip(&g[..n]) {
                *o += x;
            }
        }
        Ok(())
    }

    /// `(df/du)^T v` at the cached point.
    pub fn vjp_input(&self, cache: &ForwardCache<T>, v: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.state_dim()];
        self.vjp_accumulate(cache, v, T::one(), Some(&mut out), None)?;
        Ok(out)
    }

    /// `(df/dtheta)^T v` at the cached point.
    pub fn vjp_params(&self, cache: &ForwardCache<T>, v: &[T]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.num_params()];
        self.vjp_accumulate(cache, v, T::one(), None, Some(&mut out))?;
        Ok(out)
    }

    /// `(df/du) w` at the cached point (forward-mode sweep).
    pub fn jvp_input(&self, cache: &ForwardCache<T>, w: &[T]) -> Result<Vec<T>> {
        self.check_cache(cache)?;
        let n = self.state_dim();
        check_len("tangent", n, w.len())?;
        let mut d: Vec<T> = w.to_vec();
        if self.spec.time_input {
            d.push(T::zero());
        }
        let layers = self.spec.num_layers();
        for l in 0..layers {
            let n_in = self.spec.layer_widths[l];
            let wl = self.weights(l);
            let n_out = self.spec.layer_widths[l + 1];
            let mut dz = vec![T::zero(); n_out];
            for (i, dzi) in dz.iter_mut().enumerate() {
                let row = &wl[i * n_in..(i + 1) * n_in];
                *dzi = row.iter().zip(&d).map(|(&a, &b)| a * b).sum();
            }
            if l + 1 < layers {
                for (x, &z) in dz.iter_mut().zip(&cache.pre_activations[l]) {
                    *x *= self.spec.activation.derivative(z);
                }
            }
            d = dz;
        }
        Ok(d)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            spec: self.spec.clone(),
            theta: self.theta.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument<T> = serde_json::from_str(s)?;
        Self::new(doc.spec, doc.theta)
    }
}
