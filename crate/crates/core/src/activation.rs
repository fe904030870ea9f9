//! Activation functions with derivatives up to third order, and the expected
//! third derivative `ρ = E[g‴(z)]`, `z ~ N(bias, ‖u‖²)`, that scales every
//! component of the cross-moment tensor.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

/// Threshold on `|ρ|` below which the `y`-weighted third moment carries no
/// usable signal and the `y³` moment must be used instead.
pub const DEGENERACY_THRESHOLD: f64 = 1e-8;

const QUADRATURE_ORDERS: [usize; 4] = [25, 50, 100, 200];
const QUADRATURE_TARGET: f64 = 1e-10;
const QUADRATURE_FAIL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Cubic,
    Logistic,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Linear,
        Activation::Cubic,
        Activation::Logistic,
        Activation::Tanh,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Cubic => "cubic",
            Activation::Logistic => "logistic",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Cubic => z * z * z,
            Activation::Logistic => logistic(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// `[g, g′, g″, g‴]` at `z`.
    #[inline]
    pub fn derivatives(&self, z: f64) -> [f64; 4] {
        match self {
            Activation::Linear => [z, 1.0, 0.0, 0.0],
            Activation::Cubic => [z * z * z, 3.0 * z * z, 6.0 * z, 6.0],
            Activation::Logistic => {
                let s = logistic(z);
                let d1 = s * (1.0 - s);
                [
                    s,
                    d1,
                    d1 * (1.0 - 2.0 * s),
                    d1 * (1.0 - 6.0 * s + 6.0 * s * s),
                ]
            }
            Activation::Tanh => {
                let t = z.tanh();
                let sech2 = 1.0 - t * t;
                [
                    t,
                    sech2,
                    -2.0 * t * sech2,
                    -2.0 * sech2 * (1.0 - 3.0 * t * t),
                ]
            }
        }
    }

    /// `k`-th derivative, `k ≤ 3`.
    pub fn derivative(&self, k: usize, z: f64) -> f64 {
        assert!(k <= 3, "activation derivatives are provided up to order 3");
        self.derivatives(z)[k]
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown activation '{s}' (expected linear, cubic, logistic or tanh)"
                ))
            })
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gauss–Hermite rule for the weight `exp(-x²)`; weights sum to `√π`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: nodes are the eigenvalues of the symmetric Jacobi matrix
    /// of the Hermite recurrence, weights come from the first eigenvector entries.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                (
                    eig.eigenvalues[k],
                    sqrt_pi * eig.eigenvectors[(0, k)].powi(2),
                )
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize so odd moments vanish exactly
        for i in 0..n / 2 {
            let (lo, hi) = (pairs[i], pairs[n - 1 - i]);
            let x = 0.5 * (hi.0 - lo.0);
            let w = 0.5 * (hi.1 + lo.1);
            pairs[i] = (-x, w);
            pairs[n - 1 - i] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Cached rule for one of the orders used by [`gaussian_expectation`].
    fn cached(order_slot: usize) -> &'static GaussHermite {
        static RULES: [OnceLock<GaussHermite>; 4] = [
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
        ];
        RULES[order_slot].get_or_init(|| GaussHermite::new(QUADRATURE_ORDERS[order_slot]))
    }

    /// `E[f(z)]` for `z ~ N(mean, sd²)`.
    pub fn expect(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let s: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mean + scale * x))
            .sum();
        s / std::f64::consts::PI.sqrt()
    }
}

/// Quadrature estimate of an expectation under `N(mean, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub value: f64,
    pub quadrature_order: usize,
    pub abs_error_bound: f64,
}

/// `E[f(z)]`, `z ~ N(mean, sd²)`, doubling the Gauss–Hermite order until two
/// successive estimates agree. The last estimate is returned even on failure.
pub fn gaussian_expectation(
    mean: f64,
    sd: f64,
    f: impl Fn(f64) -> f64,
) -> std::result::Result<RhoEstimate, RhoEstimate> {
    let mut prev = GaussHermite::cached(0).expect(mean, sd, &f);
    let mut est = RhoEstimate {
        value: prev,
        quadrature_order: QUADRATURE_ORDERS[0],
        abs_error_bound: f64::INFINITY,
    };
    for (slot, &order) in QUADRATURE_ORDERS.iter().enumerate().skip(1) {
        let next = GaussHermite::cached(slot).expect(mean, sd, &f);
        est = RhoEstimate {
            value: next,
            quadrature_order: order,
            abs_error_bound: (next - prev).abs(),
        };
        if est.abs_error_bound <= QUADRATURE_TARGET * (1.0 + next.abs()) {
            return Ok(est);
        }
        prev = next;
    }
    if est.abs_error_bound <= QUADRATURE_FAIL {
        Ok(est)
    } else {
        Err(est)
    }
}

/// `ρ = E[g‴(z)]` with `z ~ N(bias, norm_u²)`.
pub fn rho(g: Activation, norm_u: f64, bias: f64) -> Result<RhoEstimate> {
    if !(norm_u >= 0.0) || !norm_u.is_finite() || !bias.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "rho needs a finite norm_u >= 0 and finite bias, got ({norm_u}, {bias})"
        )));
    }
    match g {
        Activation::Linear | Activation::Cubic => Ok(RhoEstimate {
            value: if g == Activation::Cubic { 6.0 } else { 0.0 },
            quadrature_order: 0,
            abs_error_bound: 0.0,
        }),
        _ => gaussian_expectation(bias, norm_u, |z| g.derivatives(z)[3]).map_err(|e| {
            Error::QuadratureNonConvergence {
                bound: e.abs_error_bound,
                order: e.quadrature_order,
            }
        }),
    }
}

/// Whether the third-moment signal vanishes for this activation.
pub fn is_degenerate(g: Activation, norm_u: f64, bias: f64) -> bool {
    let value = match g {
        Activation::Linear => 0.0,
        Activation::Cubic => 6.0,
        _ => match gaussian_expectation(bias, norm_u.abs(), |z| g.derivatives(z)[3]) {
            Ok(e) | Err(e) => e.value,
        },
    };
    value.abs() < DEGENERACY_THRESHOLD
}
