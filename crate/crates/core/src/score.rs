//! Score functions `S_m(x) = (−1)^m ∇^{(m)} p(x) / p(x)` for the supported
//! input families.
//!
//! Every family exposes the derivatives of its log-density up to third order
//! (a [`LogDensityJet`]). The score tensors follow from the jet:
//!
//! ```text
//! S₁ = −D₁
//! S₂ = D₁⊗D₁ + D₂
//! S₃ = −(D₁⊗D₁⊗D₁ + sym(D₂⊗D₁) + D₃)
//! ```
//!
//! which is what the moment accumulators use. [`ScoreModel::score_m_recursive`]
//! instead applies the recursion `S_m = −S_{m−1} ⊗ ∇log p − ∇S_{m−1}` term by
//! term, and the Gaussian families also have closed Hermite forms; the test
//! suite checks the three routes against each other and against finite
//! differences of the density.
//!
//! Sign convention: `S₁ = −∇log p`, so for `N(0, I)` we have `S₁(x) = x`.

use crate::error::{check_dim, Error, Result};
use crate::tensor::{CanonicalIndex, Matrix, SymTensor3, Vector};
use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const MIN_EIGENVALUE: f64 = 1e-10;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const SINGULAR_DERIVATIVE: f64 = 1e-12;

/// Coordinatewise strictly monotone map `φ` applied to every input coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    /// `φ(x) = scale·x + shift`
    Affine {
        scale: f64,
        shift: f64,
    },
    /// `φ(x) = a3·x³ + a1·x`
    Cubic {
        a3: f64,
        a1: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl Transform {
    pub fn new_affine(scale: f64, shift: f64) -> Result<Self> {
        if scale == 0.0 || !scale.is_finite() || !shift.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "affine transform needs a finite non-zero scale, got {scale}"
            )));
        }
        Ok(Transform::Affine { scale, shift })
    }

    pub fn new_cubic(a3: f64, a1: f64) -> Result<Self> {
        if a1 == 0.0 || a3 * a1 < 0.0 || !a3.is_finite() || !a1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cubic transform a3·x³ + a1·x must be strictly monotone (a1 ≠ 0, a3·a1 ≥ 0), got ({a3}, {a1})"
            )));
        }
        Ok(Transform::Cubic { a3, a1 })
    }

    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::Affine { scale, shift } => scale * x + shift,
            Transform::Cubic { a3, a1 } => a3 * x * x * x + a1 * x,
        }
    }

    /// `[φ′, φ″, φ‴, φ⁗]` at `x`.
    #[inline]
    pub fn derivatives(&self, x: f64) -> [f64; 4] {
        match *self {
            Transform::Identity => [1.0, 0.0, 0.0, 0.0],
            Transform::Affine { scale, .. } => [scale, 0.0, 0.0, 0.0],
            Transform::Cubic { a3, a1 } => [3.0 * a3 * x * x + a1, 6.0 * a3 * x, 6.0 * a3, 0.0],
        }
    }

    pub fn inverse(&self, t: f64) -> f64 {
        match *self {
            Transform::Identity => t,
            Transform::Affine { scale, shift } => (t - shift) / scale,
            Transform::Cubic { a3, a1 } => {
                if a3 == 0.0 {
                    return t / a1;
                }
                // Cardano for x³ + p·x + q = 0 with p > 0: a single real root.
                let p = a1 / a3;
                let q = -t / a3;
                let disc = (0.25 * q * q + p * p * p / 27.0).sqrt();
                let mut x = (-0.5 * q + disc).cbrt() + (-0.5 * q - disc).cbrt();
                for _ in 0..3 {
                    let f = a3 * x * x * x + a1 * x - t;
                    let fp = 3.0 * a3 * x * x + a1;
                    x -= f / fp;
                }
                x
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Transform::Identity)
    }

    pub fn to_spec(&self) -> TransformSpec {
        match *self {
            Transform::Identity => TransformSpec {
                kind: "identity".into(),
                params: vec![],
            },
            Transform::Affine { scale, shift } => TransformSpec {
                kind: "affine".into(),
                params: vec![scale, shift],
            },
            Transform::Cubic { a3, a1 } => TransformSpec {
                kind: "cubic".into(),
                params: vec![a3, a1],
            },
        }
    }

    pub fn from_spec(spec: &TransformSpec) -> Result<Self> {
        let p = &spec.params;
        match (spec.kind.as_str(), p.len()) {
            ("identity", 0) => Ok(Transform::Identity),
            ("affine", 1) => Transform::new_affine(p[0], 0.0),
            ("affine", 2) => Transform::new_affine(p[0], p[1]),
            ("cubic", 2) => Transform::new_cubic(p[0], p[1]),
            (kind, n) => Err(Error::InvalidArgument(format!(
                "transform '{kind}' with {n} parameters is not supported \
                 (identity: [], affine: [scale, shift], cubic: [a3, a1])"
            ))),
        }
    }
}

impl Serialize for Transform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Transform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = TransformSpec::deserialize(d)?;
        Transform::from_spec(&spec).map_err(serde::de::Error::custom)
    }
}

/// Log-density derivatives `D₁ = ∇log p`, `D₂ = ∇²log p`, `D₃ = ∇³log p` at one point.
///
/// `d2` is dense row-major `d×d`; `d3` holds canonical entries in
/// [`CanonicalIndex`] order and is only meaningful when `has_d3` is set.
#[derive(Debug, Clone)]
pub struct LogDensityJet {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
    pub has_d3: bool,
    scratch: Vec<f64>,
    base: Option<Box<LogDensityJet>>,
}

impl LogDensityJet {
    pub fn new(dim: usize) -> Self {
        Self {
            d1: vec![0.0; dim],
            d2: vec![0.0; dim * dim],
            d3: vec![0.0; dim * (dim + 1) * (dim + 2) / 6],
            has_d3: false,
            scratch: Vec::new(),
            base: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.d1.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Family {
    StandardGaussian {
        dim: usize,
    },
    Gaussian {
        mean: Vector,
        cov: Matrix,
        precision: Matrix,
        chol_lower: Matrix,
        log_norm: f64,
    },
    GaussianMixture {
        /// `d×k`, one column per component mean
        means: Matrix,
        weights: Vec<f64>,
        log_weights: Vec<f64>,
    },
    Transformed {
        base: Box<ScoreModel>,
        phi: Transform,
    },
}

/// Input distribution with analytic score functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    family: Family,
    canonical: CanonicalIndex,
}

/// `S₁, S₂, S₃` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEvaluation {
    pub s1: Vector,
    pub s2: Matrix,
    pub s3: SymTensor3,
}

/// A score tensor of order 2 or 3.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreTensor {
    Order2(Matrix),
    Order3(SymTensor3),
}

fn half_log_2pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl ScoreModel {
    fn with_family(family: Family, dim: usize) -> Self {
        Self {
            family,
            canonical: CanonicalIndex::new(dim),
        }
    }

    pub fn standard_gaussian(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        Ok(Self::with_family(Family::StandardGaussian { dim }, dim))
    }

    pub fn gaussian(mean: Vector, cov: Matrix) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        check_dim("gaussian covariance rows", d, cov.nrows())?;
        check_dim("gaussian covariance cols", d, cov.ncols())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min_eig <= MIN_EIGENVALUE {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::InvalidArgument("covariance Cholesky failed".into()))?;
        let precision = chol.inverse();
        let chol_lower = chol.l();
        let log_det: f64 = chol_lower.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -(d as f64) * half_log_2pi() - 0.5 * log_det;
        Ok(Self::with_family(
            Family::Gaussian {
                mean,
                cov,
                precision,
                chol_lower,
                log_norm,
            },
            d,
        ))
    }

    /// Mixture of `N(a_c, I)` with means given as the columns of `means` (`d×k`).
    pub fn gaussian_mixture(means: Matrix, weights: Vec<f64>) -> Result<Self> {
        let d = means.nrows();
        if d == 0 || means.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "mixture needs at least one component of positive dimension".into(),
            ));
        }
        check_dim("mixture weights", means.ncols(), weights.len())?;
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture means"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "mixture weights must be >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self::with_family(
            Family::GaussianMixture {
                means,
                weights,
                log_weights,
            },
            d,
        ))
    }

    /// Distribution of `t = φ(x)` with `x` drawn from `base`.
    pub fn transformed(base: ScoreModel, phi: Transform) -> Self {
        let d = base.dim();
        Self::with_family(
            Family::Transformed {
                base: Box::new(base),
                phi,
            },
            d,
        )
    }

    pub fn dim(&self) -> usize {
        self.canonical.dim()
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::StandardGaussian { .. } => "standard_gaussian",
            Family::Gaussian { .. } => "gaussian",
            Family::GaussianMixture { .. } => "gaussian_mixture",
            Family::Transformed { .. } => "transformed",
        }
    }

    pub fn canonical_index(&self) -> &CanonicalIndex {
        &self.canonical
    }

    /// The coordinate map applied to raw inputs before scoring (identity
    /// unless this is a transformed family).
    pub fn transform(&self) -> Transform {
        match &self.family {
            Family::Transformed { phi, .. } => *phi,
            _ => Transform::Identity,
        }
    }

    /// Maps a raw input to the variable this model describes.
    pub fn map_input(&self, x: &[f64]) -> Vec<f64> {
        match &self.family {
            Family::Transformed { base, phi } => {
                let inner = base.map_input(x);
                inner.iter().map(|&v| phi.forward(v)).collect()
            }
            _ => x.to_vec(),
        }
    }

    /// Draws one raw input. For a transformed family this is a draw from the
    /// base distribution; the map is applied by the consumer.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.family {
            Family::StandardGaussian { .. } => {
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
            }
            Family::Gaussian {
                mean, chol_lower, ..
            } => {
                let d = mean.len();
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                for i in 0..d {
                    let mut s = mean[i];
                    for j in 0..=i {
                        s += chol_lower[(i, j)] * z[j];
                    }
                    out[i] = s;
                }
            }
            Family::GaussianMixture { means, weights, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut comp = weights.len() - 1;
                for (c, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        comp = c;
                        break;
                    }
                }
                for (i, v) in out.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = means[(i, comp)] + z;
                }
            }
            Family::Transformed { base, .. } => base.sample_into(rng, out),
        }
    }

    /// `log p(v)` where `v` lives in the space this model describes
    /// (for a transformed family, `v = t = φ(x)`).
    pub fn log_density(&self, v: &[f64]) -> Result<f64> {
        check_dim("log_density", self.dim(), v.len())?;
        Ok(match &self.family {
            Family::StandardGaussian { dim } => {
                -0.5 * v.iter().map(|x| x * x).sum::<f64>() - *dim as f64 * half_log_2pi()
            }
            Family::Gaussian {
                mean,
                precision,
                log_norm,
                ..
            } => {
                let z = Vector::from_column_slice(v) - mean;
                log_norm - 0.5 * z.dot(&(precision * &z))
            }
            Family::GaussianMixture {
                means, log_weights, ..
            } => {
                let d = means.nrows();
                let logits: Vec<f64> = (0..means.ncols())
                    .map(|c| {
                        let sq: f64 = (0..d).map(|i| (v[i] - means[(i, c)]).powi(2)).sum();
                        log_weights[c] - 0.5 * sq
                    })
                    .collect();
                log_sum_exp(&logits) - d as f64 * half_log_2pi()
            }
            Family::Transformed { base, phi } => {
                let x: Vec<f64> = v.iter().map(|&t| phi.inverse(t)).collect();
                let mut log_jac = 0.0;
                for (i, &xi) in x.iter().enumerate() {
                    let d1 = phi.derivatives(xi)[0];
                    if d1.abs() < SINGULAR_DERIVATIVE {
                        return Err(Error::SingularTransform {
                            coordinate: i,
                            derivative: d1,
                        });
                    }
                    log_jac -= d1.abs().ln();
                }
                base.log_density(&x)? + log_jac
            }
        })
    }

    /// Fills `jet` with the log-density derivatives at the raw input `x`
    /// (for a transformed family: the derivatives in `t` at `t = φ(x)`).
    pub fn jet_into(&self, x: &[f64], jet: &mut LogDensityJet) -> Result<()> {
        let d = self.dim();
        check_dim("score input", d, x.len())?;
        check_dim("jet buffer", d, jet.dim())?;
        match &self.family {
            Family::StandardGaussian { .. } => {
                for i in 0..d {
                    jet.d1[i] = -x[i];
                }
                jet.d2.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    jet.d2[i * d + i] = -1.0;
                }
                jet.has_d3 = false;
            }
            Family::Gaussian {
                mean, precision, ..
            } => {
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += precision[(i, j)] * (x[j] - mean[j]);
                    }
                    jet.d1[i] = -s;
                    for j in 0..d {
                        jet.d2[i * d + j] = -precision[(i, j)];
                    }
                }
                jet.has_d3 = false;
            }
            Family::GaussianMixture {
                means, log_weights, ..
            } => {
                mixture_jet(means, log_weights, x, &self.canonical, jet);
            }
            Family::Transformed { base, phi } => {
                let mut base_jet = jet
                    .base
                    .take()
                    .unwrap_or_else(|| Box::new(LogDensityJet::new(d)));
                let inner = base.map_input(x);
                let result = base
                    .jet_into(x, &mut base_jet)
                    .and_then(|_| transformed_jet(&base_jet, phi, &inner, &self.canonical, jet));
                jet.base = Some(base_jet);
                result?;
            }
        }
        if jet.d1.iter().chain(&jet.d2).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-density derivatives"));
        }
        Ok(())
    }

    pub fn jet(&self, x: &[f64]) -> Result<LogDensityJet> {
        let mut jet = LogDensityJet::new(self.dim());
        self.jet_into(x, &mut jet)?;
        Ok(jet)
    }

    pub fn score1(&self, x: &[f64]) -> Result<Vector> {
        let jet = self.jet(x)?;
        Ok(Vector::from_iterator(self.dim(), jet.d1.iter().map(|v| -v)))
    }

    pub fn score2(&self, x: &[f64]) -> Result<Matrix> {
        let jet = self.jet(x)?;
        Ok(score2_from_jet(&jet))
    }

    pub fn score3(&self, x: &[f64]) -> Result<SymTensor3> {
        let jet = self.jet(x)?;
        let mut vals = vec![0.0; self.canonical.len()];
        score3_canonical_from_jet(&jet, &self.canonical, 1.0, &mut vals);
        SymTensor3::from_canonical_values(&self.canonical, &vals)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<ScoreEvaluation> {
        let jet = self.jet(x)?;
        let s1 = Vector::from_iterator(self.dim(), jet.d1.iter().map(|v| -v));
        let s2 = score2_from_jet(&jet);
        let mut vals = vec![0.0; self.canonical.len()];
        score3_canonical_from_jet(&jet, &self.canonical, 1.0, &mut vals);
        let s3 = SymTensor3::from_canonical_values(&self.canonical, &vals)?;
        if !s3.is_finite() {
            return Err(Error::NonFinite("third-order score"));
        }
        Ok(ScoreEvaluation { s1, s2, s3 })
    }

    /// Order-`m` score built by applying `S_m = −S_{m−1} ⊗ ∇log p − ∇S_{m−1}`
    /// literally, with the gradients of `S_{m−1}` expanded by the product rule.
    pub fn score_m_recursive(&self, x: &[f64], m: usize) -> Result<ScoreTensor> {
        if !(m == 2 || m == 3) {
            return Err(Error::UnsupportedOrder {
                family: self.family_name(),
                order: m,
            });
        }
        let d = self.dim();
        let jet = self.jet(x)?;
        let full_d3 = if jet.has_d3 {
            SymTensor3::from_canonical_values(&self.canonical, &jet.d3)?
        } else {
            SymTensor3::zeros(d)
        };
        let grad_log_p = &jet.d1;
        let hess = |i: usize, j: usize| jet.d2[i * d + j];
        // S₁ and its first two gradients.
        let s1: Vec<f64> = grad_log_p.iter().map(|v| -v).collect();
        let ds1 = |i: usize, j: usize| -hess(i, j);
        let dds1 = |i: usize, j: usize, k: usize| -full_d3.get(i, j, k);

        // S₂[i,j] = −S₁[i]·∂_j log p − ∂_j S₁[i]
        let s2 = Matrix::from_fn(d, d, |i, j| -s1[i] * grad_log_p[j] - ds1(i, j));
        if m == 2 {
            let sym = (&s2 + s2.transpose()) * 0.5;
            return Ok(ScoreTensor::Order2(sym));
        }
        // ∂_k S₂[i,j] = −∂_k S₁[i]·∂_j log p − S₁[i]·∂_j∂_k log p − ∂_k∂_j S₁[i]
        let ds2 = |i: usize, j: usize, k: usize| {
            -ds1(i, k) * grad_log_p[j] - s1[i] * hess(j, k) - dds1(i, j, k)
        };
        let raw = crate::tensor::Tensor3::from_fn([d, d, d], |i, j, k| {
            -s2[(i, j)] * grad_log_p[k] - ds2(i, j, k)
        });
        Ok(ScoreTensor::Order3(SymTensor3::symmetrize(&raw)?))
    }

    /// `S₃` of a transformed family, i.e. the third-order score of `t = φ(x)`
    /// evaluated at `t = φ(x)` for the raw input `x`.
    pub fn score3_transformed(&self, x: &[f64]) -> Result<SymTensor3> {
        match self.family {
            Family::Transformed { .. } => self.score3(x),
            _ => Err(Error::InvalidArgument(format!(
                "score3_transformed called on a {} model",
                self.family_name()
            ))),
        }
    }

    /// Posterior-weighted Hermite form `Σ_c γ_c(x)·H₃(x − a_c)` of the mixture
    /// score; an independent route used to cross-check the jet.
    pub fn mixture_score3_hermite(&self, x: &[f64]) -> Result<SymTensor3> {
        let Family::GaussianMixture {
            means, log_weights, ..
        } = &self.family
        else {
            return Err(Error::InvalidArgument(
                "mixture_score3_hermite needs a gaussian_mixture model".into(),
            ));
        };
        check_dim("score input", self.dim(), x.len())?;
        let d = means.nrows();
        let k = means.ncols();
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                let sq: f64 = (0..d).map(|i| (x[i] - means[(i, c)]).powi(2)).sum();
                log_weights[c] - 0.5 * sq
            })
            .collect();
        let post = softmax(&logits);
        let mut acc = SymTensor3::zeros(d);
        for (c, &g) in post.iter().enumerate() {
            let z: Vec<f64> = (0..d).map(|i| x[i] - means[(i, c)]).collect();
            acc = acc.add_scaled(g, &score3_closed_gaussian(&z))?;
        }
        Ok(acc)
    }

    pub fn to_spec(&self) -> ScoreModelSpec {
        match &self.family {
            Family::StandardGaussian { dim } => ScoreModelSpec {
                family: "standard_gaussian".into(),
                d: Some(*dim),
                ..Default::default()
            },
            Family::Gaussian { mean, cov, .. } => ScoreModelSpec {
                family: "gaussian".into(),
                mu: Some(mean.iter().copied().collect()),
                sigma: Some(
                    (0..cov.nrows())
                        .map(|i| cov.row(i).iter().copied().collect())
                        .collect(),
                ),
                ..Default::default()
            },
            Family::GaussianMixture { means, weights, .. } => ScoreModelSpec {
                family: "gaussian_mixture".into(),
                means: Some(
                    (0..means.ncols())
                        .map(|c| means.column(c).iter().copied().collect())
                        .collect(),
                ),
                pi: Some(weights.clone()),
                ..Default::default()
            },
            Family::Transformed { base, phi } => ScoreModelSpec {
                family: "transformed".into(),
                base: Some(Box::new(base.to_spec())),
                phi: Some(phi.to_spec()),
                ..Default::default()
            },
        }
    }

    pub fn from_spec(spec: &ScoreModelSpec) -> Result<Self> {
        let missing = |field: &str| {
            Error::InvalidArgument(format!(
                "score model family '{}' requires field '{field}'",
                spec.family
            ))
        };
        match spec.family.as_str() {
            "standard_gaussian" => {
                ScoreModel::standard_gaussian(spec.d.ok_or_else(|| missing("d"))?)
            }
            "gaussian" => {
                let mu = spec.mu.as_ref().ok_or_else(|| missing("mu"))?;
                let sigma = spec.sigma.as_ref().ok_or_else(|| missing("sigma"))?;
                let d = mu.len();
                if sigma.len() != d || sigma.iter().any(|row| row.len() != d) {
                    return Err(Error::InvalidArgument(format!(
                        "sigma must be {d}x{d} to match mu"
                    )));
                }
                let cov = Matrix::from_fn(d, d, |i, j| sigma[i][j]);
                ScoreModel::gaussian(Vector::from_column_slice(mu), cov)
            }
            "gaussian_mixture" => {
                let means = spec.means.as_ref().ok_or_else(|| missing("means"))?;
                let pi = spec.pi.as_ref().ok_or_else(|| missing("pi"))?;
                let d = means.first().map(|m| m.len()).unwrap_or(0);
                if means.iter().any(|m| m.len() != d) {
                    return Err(Error::InvalidArgument(
                        "all mixture means must have the same length".into(),
                    ));
                }
                let m = Matrix::from_fn(d, means.len(), |i, c| means[c][i]);
                ScoreModel::gaussian_mixture(m, pi.clone())
            }
            "transformed" => {
                let base = spec.base.as_ref().ok_or_else(|| missing("base"))?;
                let phi = spec.phi.as_ref().ok_or_else(|| missing("phi"))?;
                Ok(ScoreModel::transformed(
                    ScoreModel::from_spec(base)?,
                    Transform::from_spec(phi)?,
                ))
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown score model family '{other}'"
            ))),
        }
    }
}

/// JSON form of a [`ScoreModel`]. Mixture means are listed one component per
/// inner array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreModelSpec {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<ScoreModelSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<TransformSpec>,
}

impl Serialize for ScoreModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScoreModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = ScoreModelSpec::deserialize(d)?;
        ScoreModel::from_spec(&spec).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn mixture_jet(
    means: &Matrix,
    log_weights: &[f64],
    x: &[f64],
    canonical: &CanonicalIndex,
    jet: &mut LogDensityJet,
) {
    let d = means.nrows();
    let k = means.ncols();
    // scratch layout: [posterior (k) | centred means (k·d) | posterior mean (d)]
    jet.scratch.resize(k + k * d + d, 0.0);
    let (post, rest) = jet.scratch.split_at_mut(k);
    let (delta, mean) = rest.split_at_mut(k * d);
    let mut max_logit = f64::NEG_INFINITY;
    for c in 0..k {
        let mut sq = 0.0;
        for i in 0..d {
            let diff = x[i] - means[(i, c)];
            sq += diff * diff;
        }
        post[c] = log_weights[c] - 0.5 * sq;
        max_logit = max_logit.max(post[c]);
    }
    let mut total = 0.0;
    for p in post.iter_mut() {
        *p = (*p - max_logit).exp();
        total += *p;
    }
    for p in post.iter_mut() {
        *p /= total;
    }
    mean.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..k {
        for i in 0..d {
            mean[i] += post[c] * means[(i, c)];
        }
    }
    for c in 0..k {
        for i in 0..d {
            delta[c * d + i] = means[(i, c)] - mean[i];
        }
    }
    for i in 0..d {
        jet.d1[i] = -(x[i] - mean[i]);
    }
    // ∇²log p = Cov_post(a) − I
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for c in 0..k {
                s += post[c] * delta[c * d + i] * delta[c * d + j];
            }
            let v = s - if i == j { 1.0 } else { 0.0 };
            jet.d2[i * d + j] = v;
            jet.d2[j * d + i] = v;
        }
    }
    // ∇³log p = third central posterior moment of a
    for (slot, &[i, j, l]) in jet.d3.iter_mut().zip(canonical.triples()) {
        let mut s = 0.0;
        for c in 0..k {
            s += post[c] * delta[c * d + i] * delta[c * d + j] * delta[c * d + l];
        }
        *slot = s;
    }
    jet.has_d3 = true;
}

fn transformed_jet(
    base: &LogDensityJet,
    phi: &Transform,
    x: &[f64],
    canonical: &CanonicalIndex,
    jet: &mut LogDensityJet,
) -> Result<()> {
    let d = x.len();
    // Per coordinate: ψ′, ψ″, ψ‴ of the inverse map and (log ψ′)′, (log ψ′)″, (log ψ′)‴.
    jet.scratch.resize(6 * d, 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let [f1, f2, f3, f4] = phi.derivatives(xi);
        if f1.abs() < SINGULAR_DERIVATIVE {
            return Err(Error::SingularTransform {
                coordinate: i,
                derivative: f1,
            });
        }
        let p1 = 1.0 / f1;
        let p2 = -f2 / f1.powi(3);
        let p3 = (3.0 * f2 * f2 - f1 * f3) / f1.powi(5);
        let p4 = (-15.0 * f2.powi(3) + 10.0 * f1 * f2 * f3 - f1 * f1 * f4) / f1.powi(7);
        let r = p2 / p1;
        let l1 = r;
        let l2 = p3 / p1 - r * r;
        let l3 = p4 / p1 - 3.0 * p3 * p2 / (p1 * p1) + 2.0 * r * r * r;
        jet.scratch[6 * i..6 * i + 6].copy_from_slice(&[p1, p2, p3, l1, l2, l3]);
    }
    let s = &jet.scratch;
    let psi = |i: usize, k: usize| s[6 * i + k];
    for i in 0..d {
        jet.d1[i] = base.d1[i] * psi(i, 0) + psi(i, 3);
    }
    for i in 0..d {
        for j in 0..d {
            let mut v = base.d2[i * d + j] * psi(i, 0) * psi(j, 0);
            if i == j {
                v += base.d1[i] * psi(i, 1) + psi(i, 4);
            }
            jet.d2[i * d + j] = v;
        }
    }
    let nonlinear = (0..d).any(|i| psi(i, 1) != 0.0 || psi(i, 2) != 0.0 || psi(i, 5) != 0.0);
    jet.has_d3 = base.has_d3 || nonlinear;
    if jet.has_d3 {
        for (slot, (pos, &[i, j, k])) in jet
            .d3
            .iter_mut()
            .zip(canonical.triples().iter().enumerate())
        {
            let l3 = if base.has_d3 { base.d3[pos] } else { 0.0 };
            let mut v = l3 * psi(i, 0) * psi(j, 0) * psi(k, 0);
            // one term per coincident index pair: ℓ_{a c}·ψ″_a·ψ′_c
            if i == j {
                v += base.d2[i * d + k] * psi(i, 1) * psi(k, 0);
            }
            if i == k {
                v += base.d2[i * d + j] * psi(i, 1) * psi(j, 0);
            }
            if j == k {
                v += base.d2[j * d + i] * psi(j, 1) * psi(i, 0);
            }
            if i == j && j == k {
                v += base.d1[i] * psi(i, 2) + psi(i, 5);
            }
            *slot = v;
        }
    }
    Ok(())
}

pub(crate) fn score2_from_jet(jet: &LogDensityJet) -> Matrix {
    let d = jet.dim();
    Matrix::from_fn(d, d, |i, j| jet.d1[i] * jet.d1[j] + jet.d2[i * d + j])
}

/// Adds `weight · S₃` (canonical entries) to `acc`.
#[inline]
pub(crate) fn score3_canonical_from_jet(
    jet: &LogDensityJet,
    canonical: &CanonicalIndex,
    weight: f64,
    acc: &mut [f64],
) {
    let d = jet.dim();
    let a = &jet.d1;
    let h = &jet.d2;
    let mut pos = 0;
    for i in 0..d {
        for j in i..d {
            let aij = a[i] * a[j];
            let hij = h[i * d + j];
            for k in j..d {
                let v = aij * a[k] + hij * a[k] + h[i * d + k] * a[j] + h[j * d + k] * a[i];
                acc[pos] -= weight * v;
                pos += 1;
            }
        }
    }
    if jet.has_d3 {
        for (slot, &v) in acc.iter_mut().zip(&jet.d3) {
            *slot -= weight * v;
        }
    }
    debug_assert_eq!(pos, canonical.len());
}

/// Third Hermite tensor `x⊗³ − Σ_j (e_j⊗x⊗e_j + e_j⊗e_j⊗x + x⊗e_j⊗e_j)`: the
/// third-order score of `N(0, I)`.
pub fn score3_closed_gaussian(x: &[f64]) -> SymTensor3 {
    let d = x.len();
    SymTensor3::from_canonical_fn(d, |i, j, k| {
        let mut v = x[i] * x[j] * x[k];
        if i == j {
            v -= x[k];
        }
        if i == k {
            v -= x[j];
        }
        if j == k {
            v -= x[i];
        }
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn normal_vec(seed: u64, d: usize, scale: f64) -> Vec<f64> {
        let mut rng = SeedStream::new(seed).rng("pt", 0);
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    }

    fn two_component_mixture(d: usize, sep: f64) -> ScoreModel {
        let mut means = Matrix::zeros(d, 2);
        means[(0, 0)] = sep / 2.0;
        means[(0, 1)] = -sep / 2.0;
        means[(1, 0)] = 0.5;
        ScoreModel::gaussian_mixture(means, vec![0.4, 0.6]).unwrap()
    }

    /// −∂³p / p by central differences of the density, Richardson-extrapolated.
    fn fd_score3(model: &ScoreModel, t: &[f64], h: f64) -> SymTensor3 {
        let coarse = fd_score3_step(model, t, h);
        let fine = fd_score3_step(model, t, h / 2.0);
        fine.scaled(4.0 / 3.0)
            .add_scaled(-1.0 / 3.0, &coarse)
            .unwrap()
    }

    fn fd_score3_step(model: &ScoreModel, t: &[f64], h: f64) -> SymTensor3 {
        let d = t.len();
        let p = |v: &[f64]| model.log_density(v).unwrap().exp();
        let p0 = p(t);
        SymTensor3::from_canonical_fn(d, |i, j, k| {
            let mut s = 0.0;
            for (si, sj, sk) in itertools_signs() {
                let mut v = t.to_vec();
                v[i] += si * h;
                v[j] += sj * h;
                v[k] += sk * h;
                s += si * sj * sk * p(&v);
            }
            -s / (8.0 * h * h * h) / p0
        })
    }

    fn itertools_signs() -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for a in [-1.0, 1.0] {
            for b in [-1.0, 1.0] {
                for c in [-1.0, 1.0] {
                    out.push((a, b, c));
                }
            }
        }
        out
    }

    #[test]
    fn standard_gaussian_score1_is_identity() {
        let m = ScoreModel::standard_gaussian(2).unwrap();
        assert_eq!(m.score1(&[1.0, -2.0]).unwrap().as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn gaussian_score1_vanishes_at_mean() {
        let cov = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mu = Vector::from_vec(vec![0.5, -1.0]);
        let m = ScoreModel::gaussian(mu.clone(), cov).unwrap();
        assert!(m.score1(mu.as_slice()).unwrap().norm() < 1e-15);
    }

    #[test]
    fn mixture_score1_matches_numerical_gradient() {
        let m = two_component_mixture(3, 8.0);
        let x = [4.0, 0.5, 0.0]; // at the first mean
        let s1 = m.score1(&x).unwrap();
        assert!(s1.norm() < 1e-6);
        let h = 1e-5;
        for pt in [x.to_vec(), vec![0.3, -0.2, 1.1]] {
            let s1 = m.score1(&pt).unwrap();
            for i in 0..3 {
                let mut a = pt.clone();
                let mut b = pt.clone();
                a[i] += h;
                b[i] -= h;
                let g = (m.log_density(&a).unwrap() - m.log_density(&b).unwrap()) / (2.0 * h);
                assert!((s1[i] + g).abs() < 1e-8, "coord {i}: {} vs {}", s1[i], -g);
            }
        }
    }

    #[test]
    fn mixture_score_survives_far_points() {
        let m = two_component_mixture(3, 8.0);
        let x = [200.0, -150.0, 90.0];
        let e = m.evaluate(&x).unwrap();
        assert!(e.s1.iter().all(|v| v.is_finite()));
        assert!(e.s3.is_finite());
    }

    #[test]
    fn closed_gaussian_score3_cases() {
        let t = score3_closed_gaussian(&[1.0]);
        assert_eq!(t.get(0, 0, 0), -2.0);
        assert!(score3_closed_gaussian(&[0.0; 3])
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        let x = normal_vec(3, 4, 1.0);
        let m = ScoreModel::standard_gaussian(4).unwrap();
        let ScoreTensor::Order3(rec) = m.score_m_recursive(&x, 3).unwrap() else {
            panic!()
        };
        assert!(rec.max_abs_diff(&score3_closed_gaussian(&x)) <= 1e-10);
        assert!(
            m.score3(&x)
                .unwrap()
                .max_abs_diff(&score3_closed_gaussian(&x))
                <= 1e-12
        );
    }

    #[test]
    fn recursion_order2_is_second_hermite_form() {
        let x = [0.4, -1.3, 2.0];
        let m = ScoreModel::standard_gaussian(3).unwrap();
        let ScoreTensor::Order2(s2) = m.score_m_recursive(&x, 2).unwrap() else {
            panic!()
        };
        let xv = Vector::from_column_slice(&x);
        let expected = &xv * xv.transpose() - Matrix::identity(3, 3);
        assert!((s2 - &expected).abs().max() < 1e-14);
        assert!((m.score2(&x).unwrap() - expected).abs().max() < 1e-14);
        assert!(matches!(
            m.score_m_recursive(&x, 4),
            Err(Error::UnsupportedOrder { order: 4, .. })
        ));
    }

    #[test]
    fn general_gaussian_recursion_matches_closed_form() {
        let cov = Matrix::from_row_slice(3, 3, &[2.0, 0.4, 0.1, 0.4, 1.5, -0.2, 0.1, -0.2, 0.8]);
        let mu = Vector::from_vec(vec![0.3, -0.7, 1.0]);
        let m = ScoreModel::gaussian(mu.clone(), cov.clone()).unwrap();
        let prec = cov.try_inverse().unwrap();
        for seed in 0..10 {
            let x = normal_vec(seed, 3, 1.5);
            let z = &prec * (Vector::from_column_slice(&x) - &mu);
            let closed = SymTensor3::from_canonical_fn(3, |i, j, k| {
                z[i] * z[j] * z[k] - prec[(i, j)] * z[k] - prec[(i, k)] * z[j] - prec[(j, k)] * z[i]
            });
            let ScoreTensor::Order3(rec) = m.score_m_recursive(&x, 3).unwrap() else {
                panic!()
            };
            assert!(rec.max_abs_diff(&closed) <= 1e-10);
            assert!(m.score3(&x).unwrap().max_abs_diff(&closed) <= 1e-10);
        }
    }

    #[test]
    fn mixture_score3_three_routes_agree() {
        let means = Matrix::from_row_slice(3, 2, &[1.5, -1.0, 0.0, 0.8, -0.5, 0.2]);
        let m = ScoreModel::gaussian_mixture(means, vec![0.3, 0.7]).unwrap();
        for seed in 0..5 {
            let x = normal_vec(100 + seed, 3, 1.0);
            let jet_route = m.score3(&x).unwrap();
            let ScoreTensor::Order3(rec) = m.score_m_recursive(&x, 3).unwrap() else {
                panic!()
            };
            let hermite = m.mixture_score3_hermite(&x).unwrap();
            assert!(jet_route.max_abs_diff(&hermite) < 1e-10);
            assert!(rec.max_abs_diff(&hermite) < 1e-10);
            let fd = fd_score3(&m, &x, 2e-3);
            assert!(
                rec.max_abs_diff(&fd) < 1e-5,
                "fd diff {}",
                rec.max_abs_diff(&fd)
            );
        }
    }

    #[test]
    fn transform_identity_keeps_base_score() {
        let base = two_component_mixture(3, 3.0);
        let t = ScoreModel::transformed(base.clone(), Transform::Identity);
        let x = [0.2, -0.4, 0.9];
        assert!(
            t.score3_transformed(&x)
                .unwrap()
                .max_abs_diff(&base.score3(&x).unwrap())
                < 1e-14
        );
        assert!(base.score3_transformed(&x).is_err());
    }

    #[test]
    fn affine_transform_matches_scaled_gaussian() {
        let base = ScoreModel::standard_gaussian(3).unwrap();
        let t = ScoreModel::transformed(base, Transform::new_affine(2.0, 0.0).unwrap());
        let target = ScoreModel::gaussian(Vector::zeros(3), Matrix::identity(3, 3) * 4.0).unwrap();
        for seed in 0..5 {
            let x = normal_vec(seed, 3, 1.0);
            let tt: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            let got = t.score3_transformed(&x).unwrap();
            let want = target.score3(&tt).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
            // t⊗³/64 − sym(t⊗I)/16
            let closed = SymTensor3::from_canonical_fn(3, |i, j, k| {
                let mut v = tt[i] * tt[j] * tt[k] / 64.0;
                if i == j {
                    v -= tt[k] / 16.0;
                }
                if i == k {
                    v -= tt[j] / 16.0;
                }
                if j == k {
                    v -= tt[i] / 16.0;
                }
                v
            });
            assert!(got.max_abs_diff(&closed) < 1e-12);
        }
    }

    #[test]
    fn cubic_transform_matches_finite_differences() {
        let base = ScoreModel::standard_gaussian(1).unwrap();
        let t = ScoreModel::transformed(base, Transform::new_cubic(1.0, 1.0).unwrap());
        for x in [-1.2, -0.3, 0.0, 0.4, 1.1] {
            let tt = [x * x * x + x];
            let got = t.score3_transformed(&[x]).unwrap();
            let fd = fd_score3(&t, &tt, 2e-3);
            assert!(
                (got.get(0, 0, 0) - fd.get(0, 0, 0)).abs() < 1e-5 * (1.0 + fd.get(0, 0, 0).abs()),
                "x={x}: {} vs {}",
                got.get(0, 0, 0),
                fd.get(0, 0, 0)
            );
            let ScoreTensor::Order3(rec) = t.score_m_recursive(&[x], 3).unwrap() else {
                panic!()
            };
            assert!((rec.get(0, 0, 0) - got.get(0, 0, 0)).abs() < 1e-10);
        }
    }

    #[test]
    fn cubic_transform_on_mixture_matches_finite_differences() {
        let means = Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 0.0]);
        let base = ScoreModel::gaussian_mixture(means, vec![0.5, 0.5]).unwrap();
        let t = ScoreModel::transformed(base, Transform::new_cubic(0.5, 1.0).unwrap());
        let x = [0.3, -0.6];
        let tt = t.map_input(&x);
        let got = t.score3(&x).unwrap();
        let fd = fd_score3(&t, &tt, 2e-3);
        assert!(got.max_abs_diff(&fd) < 1e-5, "{}", got.max_abs_diff(&fd));
    }

    #[test]
    fn cubic_inverse_round_trips() {
        let phi = Transform::new_cubic(1.0, 1.0).unwrap();
        for x in [-3.0, -0.1, 0.0, 0.7, 5.0] {
            assert!((phi.inverse(phi.forward(x)) - x).abs() < 1e-12);
        }
        assert!(Transform::new_cubic(1.0, 0.0).is_err());
        assert!(Transform::new_affine(0.0, 1.0).is_err());
    }

    #[test]
    fn singular_transform_is_reported() {
        // φ(x) = a3·x³ + a1·x with a tiny a1 has φ′(0) = a1 < 1e-12
        let phi = Transform::Cubic { a3: 1.0, a1: 1e-14 };
        let t = ScoreModel::transformed(ScoreModel::standard_gaussian(2).unwrap(), phi);
        assert!(matches!(
            t.score3(&[0.0, 1.0]),
            Err(Error::SingularTransform { coordinate: 0, .. })
        ));
    }

    #[test]
    fn scores_are_symmetric() {
        let models = [
            ScoreModel::standard_gaussian(4).unwrap(),
            two_component_mixture(4, 4.0),
            ScoreModel::transformed(
                two_component_mixture(4, 4.0),
                Transform::new_cubic(0.2, 1.0).unwrap(),
            ),
        ];
        for m in &models {
            let e = m.evaluate(&normal_vec(5, 4, 1.0)).unwrap();
            assert_eq!((&e.s2 - e.s2.transpose()).abs().max(), 0.0);
            assert_eq!(e.s3.to_tensor3().symmetry_defect(), Some(0.0));
        }
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(ScoreModel::standard_gaussian(0).is_err());
        let not_spd = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ScoreModel::gaussian(Vector::zeros(2), not_spd).is_err());
        let means = Matrix::zeros(2, 2);
        assert!(ScoreModel::gaussian_mixture(means.clone(), vec![0.5, 0.6]).is_err());
        assert!(ScoreModel::gaussian_mixture(means.clone(), vec![-0.5, 1.5]).is_err());
        assert!(ScoreModel::gaussian_mixture(means, vec![1.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let models = [
            ScoreModel::standard_gaussian(3).unwrap(),
            ScoreModel::gaussian(
                Vector::from_vec(vec![1.0, 2.0]),
                Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]),
            )
            .unwrap(),
            two_component_mixture(2, 4.0),
            ScoreModel::transformed(
                two_component_mixture(2, 4.0),
                Transform::new_affine(2.0, 0.5).unwrap(),
            ),
        ];
        for m in models {
            let json = serde_json::to_string(&m).unwrap();
            let back: ScoreModel = serde_json::from_str(&json).unwrap();
            assert_eq!(back, m, "{json}");
        }
        let parsed: ScoreModel = serde_json::from_str(
            r#"{"family":"transformed","base":{"family":"standard_gaussian","d":2},"phi":{"kind":"cubic","params":[1.0,1.0]}}"#,
        )
        .unwrap();
        assert_eq!(parsed.transform(), Transform::Cubic { a3: 1.0, a1: 1.0 });
        assert!(serde_json::from_str::<ScoreModel>(r#"{"family":"gaussian"}"#).is_err());
    }
}
