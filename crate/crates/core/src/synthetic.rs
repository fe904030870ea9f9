//! Ground-truth mixtures of GLMs and labeled sample generation.

use crate::activation::{rho, Activation};
use crate::error::{check_dim, Error, Result};
use crate::moments::{Dataset, MomentMode};
use crate::rng::SeedStream;
use crate::score::{ScoreModel, Transform};
use crate::tensor::{Matrix, SymTensor3};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CONDITION_FLOOR: f64 = 0.05;
pub const REJECTION_BUDGET: usize = 1000;
/// Rows drawn per independently seeded shard.
pub const SHARD_SIZE: usize = 1 << 16;

/// `E[y | x, h = e_j] = g(⟨u_j, φ(x)⟩ + b_j)` with `P(h = e_j) = w_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmMixture {
    /// `d×r`, one column per component.
    pub u: Matrix,
    pub biases: Vec<f64>,
    pub weights: Vec<f64>,
    pub activation: Activation,
    pub noise_sigma: f64,
    pub transform: Option<Transform>,
}

#[derive(Serialize, Deserialize)]
struct GlmMixtureJson {
    #[serde(rename = "U")]
    u: Vec<Vec<f64>>,
    biases: Vec<f64>,
    weights: Vec<f64>,
    activation: Activation,
    noise_sigma: f64,
    transform: Option<Transform>,
}

impl Serialize for GlmMixture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GlmMixtureJson {
            u: crate::io::matrix_rows(&self.u),
            biases: self.biases.clone(),
            weights: self.weights.clone(),
            activation: self.activation,
            noise_sigma: self.noise_sigma,
            transform: self.transform,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GlmMixture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = GlmMixtureJson::deserialize(d)?;
        let u = crate::io::matrix_from_rows(&j.u).map_err(serde::de::Error::custom)?;
        GlmMixture::new(
            u,
            j.biases,
            j.weights,
            j.activation,
            j.noise_sigma,
            j.transform,
        )
        .map_err(serde::de::Error::custom)
    }
}

impl GlmMixture {
    pub fn new(
        u: Matrix,
        biases: Vec<f64>,
        weights: Vec<f64>,
        activation: Activation,
        noise_sigma: f64,
        transform: Option<Transform>,
    ) -> Result<Self> {
        let r = u.ncols();
        if r == 0 || u.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "model needs at least one component".into(),
            ));
        }
        check_dim("model biases", r, biases.len())?;
        check_dim("model weights", r, weights.len())?;
        if u.iter()
            .chain(&biases)
            .chain(&weights)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("model parameters"));
        }
        if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "model weights must be a probability vector".into(),
            ));
        }
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        Ok(Self {
            u,
            biases,
            weights,
            activation,
            noise_sigma,
            transform,
        })
    }

    pub fn d(&self) -> usize {
        self.u.nrows()
    }

    pub fn r(&self) -> usize {
        self.u.ncols()
    }

    /// Smallest singular value of `U`.
    pub fn s_min(&self) -> f64 {
        smallest_singular_value(&self.u)
    }

    /// Noise-free response of component `j` at the raw input `x`.
    pub fn component_mean(&self, j: usize, x: &[f64]) -> f64 {
        let phi = self.transform.unwrap_or(Transform::Identity);
        let z: f64 = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| self.u[(i, j)] * phi.forward(xi))
            .sum();
        self.activation.value(z + self.biases[j])
    }

    /// Population third moment for standard Gaussian (transformed) input:
    /// `Σ ρ_j w_j u_j⊗³` in GLM mode, `Σ 6 w_j u_j⊗³` in regression mode
    /// (linear activation only).
    pub fn exact_m3(&self, mode: MomentMode) -> Result<SymTensor3> {
        let coeffs: Vec<f64> = match mode {
            MomentMode::Glm => (0..self.r())
                .map(|j| {
                    rho(self.activation, self.u.column(j).norm(), self.biases[j])
                        .map(|e| e.value * self.weights[j])
                })
                .collect::<Result<_>>()?,
            MomentMode::Regression => {
                if self.activation != Activation::Linear {
                    return Err(Error::InvalidArgument(
                        "exact regression-mode moment needs a linear activation".into(),
                    ));
                }
                self.weights.iter().map(|w| 6.0 * w).collect()
            }
        };
        SymTensor3::from_cp(&self.u, &coeffs)
    }
}

pub(crate) fn smallest_singular_value(m: &Matrix) -> f64 {
    m.clone().svd(false, false).singular_values.min()
}

/// Random model with unit columns, `s_min(U) ≥ condition_floor`, Dirichlet(2)
/// weights and biases uniform on `[−0.5, 0.5]`.
pub fn random_model(
    d: usize,
    r: usize,
    activation: Activation,
    seed: u64,
    condition_floor: f64,
) -> Result<GlmMixture> {
    if r == 0 || r > d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= r <= d, got r={r}, d={d}"
        )));
    }
    let streams = SeedStream::new(seed);
    let mut rng = streams.rng("directions", 0);
    let mut u = None;
    for _ in 0..REJECTION_BUDGET {
        let mut cand = Matrix::from_fn(d, r, |_, _| StandardNormal.sample(&mut rng));
        for mut c in cand.column_iter_mut() {
            let n = c.norm();
            c /= n;
        }
        if smallest_singular_value(&cand) >= condition_floor {
            u = Some(cand);
            break;
        }
    }
    let u = u.ok_or(Error::RejectionBudget(REJECTION_BUDGET))?;

    let mut rng = streams.rng("weights", 0);
    let gamma = Gamma::new(2.0, 1.0).expect("valid gamma parameters");
    let raw: Vec<f64> = (0..r).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|g| g / total).collect();

    let mut rng = streams.rng("biases", 0);
    let biases = (0..r).map(|_| rng.random_range(-0.5..=0.5)).collect();
    GlmMixture::new(u, biases, weights, activation, 0.0, None)
}

/// Draws `n` labeled samples. `x` comes from `input` (its base distribution
/// for a transformed family); the model's own transform maps `x` before the
/// linear predictor.
pub fn sample(model: &GlmMixture, input: &ScoreModel, n: usize, seed: u64) -> Result<Dataset> {
    sample_with_labels(model, input, n, seed).map(|(data, _)| data)
}

/// Like [`sample`], also returning the latent component of every row.
pub fn sample_with_labels(
    model: &GlmMixture,
    input: &ScoreModel,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    let d = model.d();
    check_dim("input distribution dimension", d, input.dim())?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    let streams = SeedStream::new(seed);
    let cumulative: Vec<f64> = model
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let n_shards = n.div_ceil(SHARD_SIZE);
    let shards: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = (0..n_shards)
        .into_par_iter()
        .map(|s| {
            let rows = SHARD_SIZE.min(n - s * SHARD_SIZE);
            let mut rng = streams.rng("sample-shard", s as u64);
            let mut x = vec![0.0; rows * d];
            let mut y = Vec::with_capacity(rows);
            let mut labels = Vec::with_capacity(rows);
            for row in x.chunks_mut(d) {
                input.sample_into(&mut rng, row);
                let u: f64 = rng.random();
                let j = cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(model.r() - 1);
                let noise: f64 = StandardNormal.sample(&mut rng);
                y.push(model.component_mean(j, row) + model.noise_sigma * noise);
                labels.push(j);
            }
            (x, y, labels)
        })
        .collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (xs, ys, ls) in shards {
        x.extend(xs);
        y.extend(ys);
        labels.extend(ls);
    }
    Ok((Dataset::new(d, x, y)?, labels))
}
