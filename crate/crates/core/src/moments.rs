//! Empirical cross-moments `M̂_m = (1/n) Σ_i w(y_i)·S_m(x_i)` between the
//! response and the input score functions.
//!
//! Samples are grouped into fixed-size blocks. Each block is summed
//! sequentially and the block sums are combined by a fixed binary tree, so
//! the result depends only on the sample order (not on the thread count).

use crate::error::{check_dim, Error, Result};
use crate::score::{score2_from_jet, score3_canonical_from_jet, LogDensityJet, ScoreModel};
use crate::tensor::{CanonicalIndex, Matrix, SymTensor3, Vector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Samples per accumulation block.
pub const BLOCK_SIZE: usize = 4096;

/// Labeled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    /// `x` is row-major `n×d`.
    pub fn new(d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "dataset must have at least one sample".into(),
            ));
        }
        if d == 0 {
            return Err(Error::InvalidArgument(
                "dataset dimension must be positive".into(),
            ));
        }
        check_dim("dataset x entries", n * d, x.len())?;
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries"));
        }
        Ok(Self { n, d, x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut x = Vec::with_capacity(rows.len() * d);
        for row in rows {
            check_dim("dataset row", d, row.len())?;
            x.extend_from_slice(row);
        }
        Self::new(d, x, y)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn x_raw(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_matrix(&self) -> Matrix {
        Matrix::from_row_slice(self.n, self.d, &self.x)
    }

    /// The first `k` samples (all of them if `k ≥ n`).
    pub fn head(&self, k: usize) -> Dataset {
        let k = k.clamp(1, self.n);
        Dataset {
            n: k,
            d: self.d,
            x: self.x[..k * self.d].to_vec(),
            y: self.y[..k].to_vec(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        check_dim("concatenated dataset dimension", self.d, other.d)?;
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Dataset {
            n: self.n + other.n,
            d: self.d,
            x,
            y,
        })
    }
}

/// Which response power multiplies the score: `y` (GLM) or `y³` (regression).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentMode {
    Glm,
    Regression,
}

impl MomentMode {
    pub fn name(&self) -> &'static str {
        match self {
            MomentMode::Glm => "glm",
            MomentMode::Regression => "regression",
        }
    }

    /// Response weight for the third-order moment.
    #[inline]
    fn weight3(&self, y: f64) -> f64 {
        match self {
            MomentMode::Glm => y,
            MomentMode::Regression => y * y * y,
        }
    }

    #[inline]
    fn weight2(&self, y: f64) -> f64 {
        match self {
            MomentMode::Glm => y,
            MomentMode::Regression => y * y,
        }
    }
}

impl fmt::Display for MomentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MomentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "glm" => Ok(MomentMode::Glm),
            "regression" => Ok(MomentMode::Regression),
            other => Err(Error::InvalidArgument(format!(
                "unknown moment mode '{other}' (expected glm or regression)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    pub tensor: SymTensor3,
    pub mode: MomentMode,
    pub n_samples: usize,
}

fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Runs `accumulate(block_range, acc)` on every block in parallel and returns
/// the tree-combined mean.
fn blocked_mean<F>(n: usize, len: usize, accumulate: F) -> Result<Vec<f64>>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) -> Result<()> + Sync,
{
    let n_blocks = n.div_ceil(BLOCK_SIZE);
    let parts: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; len];
            let range = b * BLOCK_SIZE..((b + 1) * BLOCK_SIZE).min(n);
            accumulate(range, &mut acc).map(|_| acc)
        })
        .collect::<Result<_>>()?;
    let mut total = tree_sum(parts);
    let inv = 1.0 / n as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    if total.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("moment accumulation overflowed"));
    }
    Ok(total)
}

fn check_data(data: &Dataset, score: &ScoreModel) -> Result<()> {
    check_dim("dataset vs score model dimension", score.dim(), data.d())
}

/// `(1/n) Σ y_i·S₁(x_i)`.
pub fn empirical_m1(data: &Dataset, score: &ScoreModel) -> Result<Vector> {
    check_data(data, score)?;
    let d = data.d();
    let mean = blocked_mean(data.n(), d, |range, acc| {
        let mut jet = LogDensityJet::new(d);
        for i in range {
            score.jet_into(data.row(i), &mut jet)?;
            let y = data.y()[i];
            for (a, g) in acc.iter_mut().zip(&jet.d1) {
                *a -= y * g;
            }
        }
        Ok(())
    })?;
    Ok(Vector::from_vec(mean))
}

/// `(1/n) Σ y_i·S₂(x_i)` (or `y_i²` in regression mode).
pub fn empirical_m2(data: &Dataset, score: &ScoreModel, mode: MomentMode) -> Result<Matrix> {
    check_data(data, score)?;
    let d = data.d();
    let mean = blocked_mean(data.n(), d * d, |range, acc| {
        let mut jet = LogDensityJet::new(d);
        for i in range {
            score.jet_into(data.row(i), &mut jet)?;
            let w = mode.weight2(data.y()[i]);
            let s2 = score2_from_jet(&jet);
            for (a, s) in acc.iter_mut().zip(s2.iter()) {
                *a += w * s;
            }
        }
        Ok(())
    })?;
    let m = Matrix::from_vec(d, d, mean);
    Ok((&m + m.transpose()) * 0.5)
}

/// `(1/n) Σ y_i·S₃(x_i)` (or `y_i³` in regression mode).
pub fn empirical_m3(data: &Dataset, score: &ScoreModel, mode: MomentMode) -> Result<MomentTensor> {
    check_data(data, score)?;
    let d = data.d();
    let index = score.canonical_index().clone();
    let mean = blocked_mean(data.n(), index.len(), |range, acc| {
        let mut jet = LogDensityJet::new(d);
        for i in range {
            score.jet_into(data.row(i), &mut jet)?;
            score3_canonical_from_jet(&jet, &index, mode.weight3(data.y()[i]), acc);
        }
        Ok(())
    })?;
    Ok(MomentTensor {
        tensor: SymTensor3::from_canonical_values(&index, &mean)?,
        mode,
        n_samples: data.n(),
    })
}

/// Standard-Gaussian third moment in the four-term form
/// `E[w·x⊗x⊗x] − Σ_j (m⊗e_j⊗e_j + e_j⊗m⊗e_j + e_j⊗e_j⊗m)` with `m = E[w·x]`,
/// accumulated directly from the raw samples.
pub fn empirical_m3_four_term(data: &Dataset, mode: MomentMode) -> Result<MomentTensor> {
    let d = data.d();
    let index = CanonicalIndex::new(d);
    let len = index.len();
    let raw = blocked_mean(data.n(), len + d, |range, acc| {
        let (cube, first) = acc.split_at_mut(len);
        for i in range {
            let x = data.row(i);
            let w = mode.weight3(data.y()[i]);
            for (slot, &[a, b, c]) in cube.iter_mut().zip(index.triples()) {
                *slot += w * x[a] * x[b] * x[c];
            }
            for (slot, &xi) in first.iter_mut().zip(x) {
                *slot += w * xi;
            }
        }
        Ok(())
    })?;
    let (cube, m) = raw.split_at(len);
    let values: Vec<f64> = index
        .triples()
        .iter()
        .zip(cube)
        .map(|(&[a, b, c], &v)| {
            let mut out = v;
            if a == b {
                out -= m[c];
            }
            if a == c {
                out -= m[b];
            }
            if b == c {
                out -= m[a];
            }
            out
        })
        .collect();
    Ok(MomentTensor {
        tensor: SymTensor3::from_canonical_values(&index, &values)?,
        mode,
        n_samples: data.n(),
    })
}

/// `Σ_j coeffs[j]·u_j⊗u_j⊗u_j` for the columns `u_j` of `u`.
pub fn exact_cp_tensor(u: &Matrix, coeffs: &[f64]) -> Result<SymTensor3> {
    SymTensor3::from_cp(u, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::tensor::outer3;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_data(seed: u64, n: usize, d: usize, f: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut rng = SeedStream::new(seed).rng("moments-test", 0);
        let x: Vec<f64> = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let y = x.chunks(d).map(&f).collect();
        Dataset::new(d, x, y).unwrap()
    }

    #[test]
    fn single_zero_sample_gives_zero_tensor() {
        let data = Dataset::from_rows(&[vec![0.0, 0.0, 0.0]], vec![1.0]).unwrap();
        let score = ScoreModel::standard_gaussian(3).unwrap();
        let m = empirical_m3(&data, &score, MomentMode::Glm).unwrap();
        assert_eq!(m.tensor.max_abs(), 0.0);
        assert_eq!(m.n_samples, 1);
    }

    #[test]
    fn zero_response_gives_zero_moments() {
        let data = gaussian_data(1, 100, 3, |_| 0.0);
        let score = ScoreModel::standard_gaussian(3).unwrap();
        assert_eq!(empirical_m1(&data, &score).unwrap().norm(), 0.0);
        assert_eq!(
            empirical_m3(&data, &score, MomentMode::Glm)
                .unwrap()
                .tensor
                .max_abs(),
            0.0
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = gaussian_data(1, 10, 3, |_| 1.0);
        let score = ScoreModel::standard_gaussian(4).unwrap();
        assert!(matches!(
            empirical_m3(&data, &score, MomentMode::Glm),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(Dataset::new(2, vec![1.0, f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn first_moment_recovers_logistic_direction() {
        let d = 5;
        let u = [0.5, -0.5, 0.5, 0.5, 0.0];
        let data = gaussian_data(2, 200_000, d, |x| {
            let z: f64 = x.iter().zip(&u).map(|(a, b)| a * b).sum();
            crate::activation::Activation::Logistic.value(z)
        });
        let m1 = empirical_m1(&data, &ScoreModel::standard_gaussian(d).unwrap()).unwrap();
        let dir = m1.normalize();
        let err = (0..d).map(|i| (dir[i] - u[i]).powi(2)).sum::<f64>().sqrt();
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn cubic_mixture_matches_cp_oracle() {
        let d = 4;
        let w = [0.4, 0.6];
        let u = Matrix::from_columns(&[
            Vector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
            Vector::from_vec(vec![0.0, 0.6, 0.8, 0.0]),
        ]);
        let mut rng = SeedStream::new(3).rng("labels", 0);
        let data = {
            let mut xr = SeedStream::new(3).rng("x", 0);
            let n = 1_000_000;
            let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut xr)).collect();
            let y = x
                .chunks(d)
                .map(|row| {
                    let j = usize::from(rand::Rng::random::<f64>(&mut rng) >= w[0]);
                    let z: f64 = (0..d).map(|i| u[(i, j)] * row[i]).sum();
                    z * z * z
                })
                .collect();
            Dataset::new(d, x, y).unwrap()
        };
        let score = ScoreModel::standard_gaussian(d).unwrap();
        let m3 = empirical_m3(&data, &score, MomentMode::Glm).unwrap();
        let exact = exact_cp_tensor(&u, &[6.0 * w[0], 6.0 * w[1]]).unwrap();
        let err = m3.tensor.add_scaled(-1.0, &exact).unwrap().frobenius_norm();
        assert!(err < 0.05 * 6.0f64.max(exact.frobenius_norm()), "{err}");
    }

    #[test]
    fn regression_mode_single_component() {
        let d = 3;
        let u = [0.0, 0.6, 0.8];
        let data = gaussian_data(4, 400_000, d, |x| {
            x.iter().zip(&u).map(|(a, b)| a * b).sum()
        });
        let score = ScoreModel::standard_gaussian(d).unwrap();
        let m3 = empirical_m3(&data, &score, MomentMode::Regression).unwrap();
        let uu = Matrix::from_column_slice(d, 1, &u);
        let exact = exact_cp_tensor(&uu, &[6.0]).unwrap();
        let err = m3.tensor.add_scaled(-1.0, &exact).unwrap().frobenius_norm();
        assert!(err < 0.5, "{err}");
        let m2 = empirical_m2(&data, &score, MomentMode::Regression).unwrap();
        let eig = nalgebra::SymmetricEigen::new(m2);
        let top = eig.eigenvalues.iamax();
        let v = eig.eigenvectors.column(top);
        let cos: f64 = (0..d).map(|i| v[i] * u[i]).sum::<f64>().abs();
        assert!((2.0 - 2.0 * cos).max(0.0).sqrt() < 0.05);
    }

    #[test]
    fn second_moment_vanishes_for_odd_activations() {
        let d = 3;
        let u = [0.6, 0.0, 0.8];
        let n = 200_000;
        let data = gaussian_data(5, n, d, |x| {
            x.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>().tanh()
        });
        let m2 = empirical_m2(
            &data,
            &ScoreModel::standard_gaussian(d).unwrap(),
            MomentMode::Glm,
        )
        .unwrap();
        // |y| ≤ 1 and each entry of S₂ has variance ≤ 2
        let se = (2.0f64 / n as f64).sqrt();
        assert!(m2.abs().max() < 3.0 * se * 2.0, "{}", m2.abs().max());
    }

    #[test]
    fn four_term_form_agrees_with_score_path() {
        let d = 5;
        let data = gaussian_data(6, 10_000, d, |x| x[0] * x[1] + x[2].powi(3) - 0.5 * x[4]);
        let score = ScoreModel::standard_gaussian(d).unwrap();
        for mode in [MomentMode::Glm, MomentMode::Regression] {
            let a = empirical_m3(&data, &score, mode).unwrap().tensor;
            let b = empirical_m3_four_term(&data, mode).unwrap().tensor;
            assert!(a.max_abs_diff(&b) <= 1e-12 * (1.0 + a.max_abs()));
        }
    }

    #[test]
    fn concatenation_is_weighted_average() {
        let d = 3;
        let a = gaussian_data(7, 3 * BLOCK_SIZE + 17, d, |x| x[0].powi(3));
        let b = gaussian_data(8, 5_000, d, |x| x[1] * x[2]);
        let score = ScoreModel::standard_gaussian(d).unwrap();
        let ma = empirical_m3(&a, &score, MomentMode::Glm).unwrap().tensor;
        let mb = empirical_m3(&b, &score, MomentMode::Glm).unwrap().tensor;
        let all = empirical_m3(&a.concat(&b).unwrap(), &score, MomentMode::Glm)
            .unwrap()
            .tensor;
        let n = (a.n() + b.n()) as f64;
        let avg = ma
            .scaled(a.n() as f64 / n)
            .add_scaled(b.n() as f64 / n, &mb)
            .unwrap();
        assert!(all.max_abs_diff(&avg) <= 1e-12 * (1.0 + all.max_abs()));
    }

    #[test]
    fn accumulation_is_thread_count_independent() {
        let d = 4;
        let data = gaussian_data(9, 50_000, d, |x| x[0] - x[3].powi(3));
        let score = ScoreModel::standard_gaussian(d).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| empirical_m3(&data, &score, MomentMode::Glm).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn exact_cp_matches_outer_products() {
        let e1 = Matrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let t = exact_cp_tensor(&e1, &[1.0]).unwrap();
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.frobenius_norm(), 1.0);
        assert_eq!(exact_cp_tensor(&e1, &[0.0]).unwrap().max_abs(), 0.0);

        let mut rng = SeedStream::new(10).rng("cp", 0);
        let u = Matrix::from_fn(4, 3, |_, _| StandardNormal.sample(&mut rng));
        let c = [0.5, -1.0, 2.0];
        let t = exact_cp_tensor(&u, &c).unwrap().to_tensor3();
        let mut acc = vec![0.0; 64];
        for j in 0..3 {
            let col: Vec<f64> = u.column(j).iter().copied().collect();
            let o = outer3(&col, &col, &col).unwrap();
            for (a, v) in acc.iter_mut().zip(o.as_slice()) {
                *a += c[j] * v;
            }
        }
        let diff = t
            .as_slice()
            .iter()
            .zip(&acc)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
