//! Time-stepping scheme catalog: explicit Butcher tableaux and the
//! one-parameter implicit theta family.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Midpoint,
    Bosh3,
    Rk4,
    Dopri5,
    Beuler,
    Cn,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Euler,
        Scheme::Midpoint,
        Scheme::Bosh3,
        Scheme::Rk4,
        Scheme::Dopri5,
        Scheme::Beuler,
        Scheme::Cn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
            Scheme::Bosh3 => "bosh3",
            Scheme::Rk4 => "rk4",
            Scheme::Dopri5 => "dopri5",
            Scheme::Beuler => "beuler",
            Scheme::Cn => "cn",
        }
    }

    /// Nominal order of accuracy.
    pub fn order(self) -> u32 {
        match self {
            Scheme::Euler | Scheme::Beuler => 1,
            Scheme::Midpoint | Scheme::Cn => 2,
            Scheme::Bosh3 => 3,
            Scheme::Rk4 => 4,
            Scheme::Dopri5 => 5,
        }
    }

    pub fn is_implicit(self) -> bool {
        matches!(self, Scheme::Beuler | Scheme::Cn)
    }

    pub fn method<T: Real>(self) -> Method<T> {
        tableau_catalog(self)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScheme(s.to_string()))
    }
}

/// Coefficients of an explicit Runge-Kutta scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau<T> {
    pub a: Vec<Vec<T>>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    /// Embedded lower-order weights for error estimation.
    pub b_emb: Option<Vec<T>>,
    pub order: u32,
    pub fsal: bool,
}

impl<T: Real> ButcherTableau<T> {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    fn from_f64(a: &[&[f64]], b: &[f64], c: &[f64], b_emb: Option<&[f64]>, order: u32, fsal: bool) -> Self {
        let s = b.len();
        let a = (0..s)
            .map(|i| {
                (0..s)
                    .map(|j| a.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0))
                    .map(T::lit)
                    .collect()
            })
            .collect();
        Self {
            a,
            b: b.iter().copied().map(T::lit).collect(),
            c: c.iter().copied().map(T::lit).collect(),
            b_emb: b_emb.map(|e| e.iter().copied().map(T::lit).collect()),
            order,
            fsal,
        }
    }

    /// Checks consistency, the row-sum condition and strict lower-triangularity.
    pub fn validate(&self, tol: T) -> Result<()> {
        let s = self.stages();
        if self.c.len() != s || self.a.len() != s || self.a.iter().any(|r| r.len() != s) {
            return Err(Error::InvalidConfig("tableau dimensions inconsistent".into()));
        }
        if (self.b.iter().copied().sum::<T>() - T::one()).abs() > tol {
            return Err(Error::InvalidConfig("tableau weights do not sum to one".into()));
        }
        for i in 0..s {
            let row: T = self.a[i].iter().copied().sum();
            if (row - self.c[i]).abs() > tol {
                return Err(Error::InvalidConfig(format!("row-sum condition fails in row {i}")));
            }
            if self.a[i][i..].iter().any(|&x| x != T::zero()) {
                return Err(Error::InvalidConfig("tableau is not explicit".into()));
            }
        }
        Ok(())
    }
}

/// A concrete stepping method.
#[derive(Debug, Clone, PartialEq)]
pub enum Method<T> {
    Explicit(ButcherTableau<T>),
    /// `u' = u + h[(1 - theta) f(u) + theta f(u')]`.
    Theta(T),
}

impl<T: Real> Method<T> {
    /// Number of stage vectors recorded per step.
    pub fn stages(&self) -> usize {
        match self {
            Method::Explicit(tab) => tab.stages(),
            Method::Theta(_) => 2,
        }
    }
}

pub fn tableau_catalog<T: Real>(scheme: Scheme) -> Method<T> {
    match scheme {
        Scheme::Euler => Method::Explicit(ButcherTableau::from_f64(&[&[0.0]], &[1.0], &[0.0], None, 1, false)),
        Scheme::Midpoint => Method::Explicit(ButcherTableau::from_f64(
            &[&[], &[0.5]],
            &[0.0, 1.0],
            &[0.0, 0.5],
            None,
            2,
            false,
        )),
        Scheme::Bosh3 => Method::Explicit(ButcherTableau::from_f64(
            &[&[], &[0.5], &[0.0, 0.75], &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0]],
            &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
            &[0.0, 0.5, 0.75, 1.0],
            Some(&[7.0 / 24.0, 0.25, 1.0 / 3.0, 0.125]),
            3,
            true,
        )),
        Scheme::Rk4 => Method::Explicit(ButcherTableau::from_f64(
            &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
            &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            &[0.0, 0.5, 0.5, 1.0],
            None,
            4,
            false,
        )),
        Scheme::Dopri5 => {
            let last = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
            Method::Explicit(ButcherTableau::from_f64(
                &[
                    &[],
                    &[1.0 / 5.0],
                    &[3.0 / 40.0, 9.0 / 40.0],
                    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
                    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
                    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
                    &last,
                ],
                &[last[0], last[1], last[2], last[3], last[4], last[5], 0.0],
                &[0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0],
                Some(&[
                    5179.0 / 57600.0,
                    0.0,
                    7571.0 / 16695.0,
                    393.0 / 640.0,
                    -92097.0 / 339200.0,
                    187.0 / 2100.0,
                    1.0 / 40.0,
                ]),
                5,
                true,
            ))
        }
        Scheme::Beuler => Method::Theta(T::one()),
        Scheme::Cn => Method::Theta(T::lit(0.5)),
    }
}
