//! Symmetric CP decomposition of a third-order moment tensor: whitening by a
//! random slice, SVD initialization, tensor power iteration and the
//! clustering loop, then unwhitening back to input space.

use crate::error::{check_dim, Error, Result};
use crate::rng::{SeedStream, StreamRng};
use crate::tensor::{Matrix, SymTensor3, Vector};
use log::{debug, warn};
use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Smallest acceptable `λ̃_r / λ̃_1` for a whitening slice.
pub const MIN_SLICE_RATIO: f64 = 1e-10;
/// Slice directions examined per whitening.
pub const MAX_WHITENING_DRAWS: usize = 32;
const DEAD_POINT_NORM: f64 = 1e-14;
const TIE_TOL: f64 = 1e-12;
const MAX_REINITS: usize = 5;
/// Re-whitenings along the current estimates after the random slice.
const ALIGNED_PASSES: usize = 3;
/// Independent random whitenings; the lowest residual wins.
const WHITENING_ATTEMPTS: usize = 4;
/// Relative residual below which a fit counts as exact.
const EXACT_RESIDUAL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningResult {
    /// `d×r`, `W = Ũ·Diag(|λ̃|^{-1/2})`
    pub w: Matrix,
    pub v_slice: Matrix,
    pub theta: Vector,
    /// `|λ̃|`, decreasing
    pub singular_values: Vec<f64>,
    /// Sign of each kept eigenvalue; `WᵀV̂W = Diag(signs)`.
    pub signs: Vec<f64>,
    /// `Ũ`, `d×r`
    pub basis: Matrix,
}

impl WhiteningResult {
    pub fn is_definite(&self) -> bool {
        self.signs.iter().all(|&s| s == self.signs[0])
    }

    pub fn condition_ratio(&self) -> f64 {
        self.singular_values[self.singular_values.len() - 1] / self.singular_values[0]
    }
}

/// Whitens with a fixed slice direction `θ`. Returns the whitening and the
/// `r×r×r` tensor `T(W, W, W)`.
pub fn whiten_with_theta(
    t: &SymTensor3,
    r: usize,
    theta: &[f64],
) -> Result<(WhiteningResult, SymTensor3)> {
    let d = t.dim();
    if r == 0 || r > d {
        return Err(Error::InvalidArgument(format!(
            "whitening rank r={r} must satisfy 1 <= r <= d={d}"
        )));
    }
    check_dim("whitening direction", d, theta.len())?;
    let v_slice = t.slice_contract(theta)?;
    let eig = SymmetricEigen::new(v_slice.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let top = &order[..r];
    let lambda: Vec<f64> = top.iter().map(|&k| eig.eigenvalues[k]).collect();
    let largest = lambda[0].abs();
    let ratio = if largest > 0.0 {
        lambda[r - 1].abs() / largest
    } else {
        0.0
    };
    if !(ratio >= MIN_SLICE_RATIO) {
        return Err(Error::IllConditionedSlice { ratio });
    }
    let mut basis = Matrix::zeros(d, r);
    for (c, &k) in top.iter().enumerate() {
        let mut col = eig.eigenvectors.column(k).into_owned();
        // fix the eigenvector sign so results do not depend on the solver's choice
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col = -col;
        }
        basis.set_column(c, &col);
    }
    let singular_values: Vec<f64> = lambda.iter().map(|l| l.abs()).collect();
    let signs: Vec<f64> = lambda.iter().map(|l| l.signum()).collect();
    let w = Matrix::from_fn(d, r, |i, c| basis[(i, c)] / singular_values[c].sqrt());
    let white = t.multilinear_sym(&w)?;
    Ok((
        WhiteningResult {
            w,
            v_slice,
            theta: Vector::from_column_slice(theta),
            singular_values,
            signs,
            basis,
        },
        white,
    ))
}

/// Tries slice directions from `thetas` (at most `max_draws`) and keeps the
/// best one: definite slices first, then the largest `λ̃_r / λ̃_1`.
pub fn whiten_with_retries<I>(
    t: &SymTensor3,
    r: usize,
    thetas: I,
    max_draws: usize,
) -> Result<(WhiteningResult, SymTensor3)>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut best: Option<(WhiteningResult, SymTensor3)> = None;
    let mut attempts = 0;
    for theta in thetas.into_iter().take(max_draws) {
        attempts += 1;
        match whiten_with_theta(t, r, &theta) {
            Ok(candidate) => {
                let better = match &best {
                    None => true,
                    Some((b, _)) => {
                        (candidate.0.is_definite(), candidate.0.condition_ratio())
                            > (b.is_definite(), b.condition_ratio())
                    }
                };
                if better {
                    best = Some(candidate);
                }
            }
            Err(Error::IllConditionedSlice { ratio }) => {
                debug!("whitening slice {attempts} ill-conditioned (ratio {ratio:e}), retrying");
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(b) => {
            if !b.0.is_definite() {
                debug!("no definite whitening slice found; using absolute eigenvalues");
            }
            Ok(b)
        }
        None => Err(Error::WhiteningRetriesExhausted { attempts }),
    }
}

/// Whitening with Gaussian slice directions drawn from `rng`.
pub fn whiten<R: Rng + ?Sized>(
    t: &SymTensor3,
    r: usize,
    rng: &mut R,
) -> Result<(WhiteningResult, SymTensor3)> {
    let d = t.dim();
    let thetas: Vec<Vec<f64>> = (0..MAX_WHITENING_DRAWS)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    whiten_with_retries(t, r, thetas, MAX_WHITENING_DRAWS)
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    loop {
        let v = Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut *rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Top eigenvector (by magnitude) of `T_white(I, I, θ)` for a random `θ`.
pub fn svd_init<R: Rng + ?Sized>(t_white: &SymTensor3, rng: &mut R) -> Vector {
    let k = t_white.dim();
    let theta: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let slice = match t_white.slice_contract(&theta) {
        Ok(s) => s,
        Err(_) => return random_unit(k, rng),
    };
    if !(slice.abs().max() > 0.0) || slice.iter().any(|v| !v.is_finite()) {
        debug!("degenerate initialization slice; using a random unit vector");
        return random_unit(k, rng);
    }
    let eig = SymmetricEigen::new(slice);
    let top = eig.eigenvalues.iamax();
    let v = eig.eigenvectors.column(top).into_owned();
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        random_unit(k, rng)
    }
}

/// `N` updates `a ← T(I, a, a) / ‖T(I, a, a)‖`.
pub fn power_iterate(t_white: &SymTensor3, a0: &Vector, n_iter: usize) -> Result<Vector> {
    check_dim("power iteration start", t_white.dim(), a0.len())?;
    let mut a = a0.clone();
    for _ in 0..n_iter {
        let next = t_white.contract_vector(a.as_slice())?;
        let norm = next.norm();
        if !(norm >= DEAD_POINT_NORM) {
            return Err(Error::DeadPoint { norm });
        }
        a = next / norm;
    }
    Ok(a)
}

/// Maps whitened unit vectors (columns) back to unit directions in input space.
pub fn unwhiten(white_components: &Matrix, wres: &WhiteningResult) -> Matrix {
    let scale = Matrix::from_diagonal(&Vector::from_iterator(
        wres.singular_values.len(),
        wres.singular_values.iter().map(|s| s.sqrt()),
    ));
    let mut out = &wres.basis * scale * white_components;
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionParams {
    /// Number of random restarts (`L`).
    pub restarts: usize,
    /// Power iterations per restart and per refinement (`N`).
    pub iterations: usize,
    /// Pruning threshold: candidates with `|⟨a, â⟩| > ν/2` are removed.
    pub nu: f64,
}

impl DecompositionParams {
    pub fn default_for(r: usize) -> Self {
        Self {
            restarts: 50.max(10 * r),
            iterations: 100,
            nu: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    /// `d×k` unit columns.
    pub directions: Matrix,
    pub coefficients: Vec<f64>,
    pub n_restarts_used: usize,
    pub residual_fro: f64,
}

#[derive(Serialize, Deserialize)]
struct DecompositionJson {
    directions: Vec<Vec<f64>>,
    coefficients: Vec<f64>,
    residual_fro: f64,
    restarts: usize,
}

impl Serialize for DecompositionResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DecompositionJson {
            directions: crate::io::matrix_rows(&self.directions),
            coefficients: self.coefficients.clone(),
            residual_fro: self.residual_fro,
            restarts: self.n_restarts_used,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DecompositionResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = DecompositionJson::deserialize(d)?;
        let directions =
            crate::io::matrix_from_rows(&j.directions).map_err(serde::de::Error::custom)?;
        Ok(Self {
            directions,
            coefficients: j.coefficients,
            n_restarts_used: j.restarts,
            residual_fro: j.residual_fro,
        })
    }
}

impl DecompositionResult {
    pub fn rank(&self) -> usize {
        self.coefficients.len()
    }
}

/// Least-squares coefficients `c` minimizing `‖T − Σ c_j û_j⊗³‖_F`, and the
/// residual norm.
pub fn fit_coefficients(t: &SymTensor3, directions: &Matrix) -> Result<(Vec<f64>, f64)> {
    check_dim("coefficient fit", t.dim(), directions.nrows())?;
    let k = directions.ncols();
    if k == 0 {
        return Ok((vec![], t.frobenius_norm()));
    }
    let gram = Matrix::from_fn(k, k, |a, b| {
        directions.column(a).dot(&directions.column(b)).powi(3)
    });
    let mut rhs = Vector::zeros(k);
    for j in 0..k {
        let col: Vec<f64> = directions.column(j).iter().copied().collect();
        rhs[j] = t.contract_scalar(&col)?;
    }
    let coeffs = gram
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::InvalidArgument(format!("coefficient least squares failed: {e}")))?;
    let coeffs: Vec<f64> = coeffs.iter().copied().collect();
    let fit = SymTensor3::from_cp(directions, &coeffs)?;
    let residual = t.add_scaled(-1.0, &fit)?.frobenius_norm();
    Ok((coeffs, residual))
}

fn restart_candidate(t_white: &SymTensor3, n_iter: usize, mut rng: StreamRng) -> Option<Vector> {
    let mut init = svd_init(t_white, &mut rng);
    for attempt in 0..=MAX_REINITS {
        match power_iterate(t_white, &init, n_iter) {
            Ok(a) => return Some(a),
            Err(_) if attempt < MAX_REINITS => init = random_unit(t_white.dim(), &mut rng),
            Err(_) => break,
        }
    }
    None
}

/// Orthonormal basis (`r×(r−k)`) of the complement of the span of `found`.
fn complement_basis(found: &[Vector], r: usize) -> Matrix {
    let e = Matrix::from_columns(found);
    let svd = e.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let proj = Matrix::identity(r, r) - &u * u.transpose();
    let eig = SymmetricEigen::new(proj);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let keep = r - found.len();
    let mut q = Matrix::zeros(r, keep);
    for (c, &k) in order[..keep].iter().enumerate() {
        let mut col = eig.eigenvectors.column(k).into_owned();
        if col[col.iamax()] < 0.0 {
            col = -col;
        }
        q.set_column(c, &col);
    }
    q
}

/// Restarts and clustering. If the candidates run out before `r` components
/// are found, the search continues on the orthogonal complement of the
/// components found so far.
fn cluster_components(
    t_white: &SymTensor3,
    r: usize,
    params: &DecompositionParams,
    streams: &SeedStream,
) -> Vec<Vector> {
    let mut emitted: Vec<Vector> = Vec::with_capacity(r);
    for round in 0..r {
        let k = emitted.len();
        if k >= r {
            break;
        }
        let mut found = Vec::new();
        if k == 0 {
            cluster_round(t_white, r, params, streams, &mut found);
            emitted.extend(found);
        } else {
            debug!("clustering found {k} of {r} components; searching the complement");
            let q = complement_basis(&emitted, r);
            let reduced = match t_white.multilinear_sym(&q) {
                Ok(t) => t,
                Err(_) => break,
            };
            cluster_round(
                &reduced,
                r - k,
                params,
                &streams.child("complement", round as u64),
                &mut found,
            );
            emitted.extend(found.iter().map(|f| {
                let v = &q * f;
                let n = v.norm();
                v / n
            }));
        }
        if emitted.len() == k {
            break;
        }
    }
    emitted
}

fn cluster_round(
    t_white: &SymTensor3,
    r: usize,
    params: &DecompositionParams,
    streams: &SeedStream,
    emitted: &mut Vec<Vector>,
) {
    let candidates: Vec<Vector> = (0..params.restarts)
        .into_par_iter()
        .map(|i| restart_candidate(t_white, params.iterations, streams.rng("restart", i as u64)))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut pool: Vec<(usize, Vector, f64)> = candidates
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let v = t_white.contract_scalar(a.as_slice()).unwrap_or(0.0);
            (i, a, v)
        })
        .collect();
    while emitted.len() < r && !pool.is_empty() {
        let mut best = 0;
        for (p, (idx, _, val)) in pool.iter().enumerate() {
            let (bidx, bval) = (pool[best].0, pool[best].2);
            let gap = val.abs() - bval.abs();
            if gap > TIE_TOL || (gap.abs() <= TIE_TOL && *idx < bidx) {
                best = p;
            }
        }
        let (_, start, _) = pool.remove(best);
        let refined = power_iterate(t_white, &start, params.iterations).unwrap_or(start);
        pool.retain(|(_, a, _)| a.dot(&refined).abs() <= params.nu / 2.0);
        if emitted
            .iter()
            .any(|e| e.dot(&refined).abs() > params.nu / 2.0)
        {
            debug!("skipping a refined candidate that duplicates an emitted component");
            continue;
        }
        emitted.push(refined);
    }
}

fn assemble(
    t: &SymTensor3,
    r: usize,
    emitted: &[Vector],
    wres: &WhiteningResult,
    restarts: usize,
) -> Result<DecompositionResult> {
    let white_components = if emitted.is_empty() {
        Matrix::zeros(r, 0)
    } else {
        Matrix::from_columns(emitted)
    };
    let directions = unwhiten(&white_components, wres);
    let (coefficients, residual_fro) = fit_coefficients(t, &directions)?;
    Ok(DecompositionResult {
        directions,
        coefficients,
        n_restarts_used: restarts,
        residual_fro,
    })
}

/// Slice direction `θ` with `⟨û_j, θ⟩ = sign(c_j)`, so that every term of
/// `T(I, I, θ)` gets a positive weight when the estimates are close.
fn aligned_theta(result: &DecompositionResult) -> Option<Vec<f64>> {
    let u = &result.directions;
    let signs = Vector::from_iterator(
        result.rank(),
        result.coefficients.iter().map(|c| c.signum()),
    );
    let gram = u.transpose() * u;
    let coef = gram.try_inverse()? * signs;
    let theta = u * coef;
    theta
        .iter()
        .all(|v| v.is_finite())
        .then(|| theta.iter().copied().collect())
}

/// One random whitening followed by re-whitenings aligned with the
/// estimates, kept while the reconstruction residual improves.
fn decompose_attempt(
    t: &SymTensor3,
    r: usize,
    params: &DecompositionParams,
    streams: &SeedStream,
    exact: f64,
) -> Result<DecompositionResult> {
    let (wres, t_white) = whiten(t, r, &mut streams.rng("whiten", 0))?;
    let emitted = cluster_components(&t_white, r, params, streams);
    let mut result = assemble(t, r, &emitted, &wres, params.restarts)?;

    let mut definite = wres.is_definite();
    for pass in 0..ALIGNED_PASSES {
        if result.rank() < r || (definite && result.residual_fro <= exact) {
            break;
        }
        let Some(theta) = aligned_theta(&result) else {
            break;
        };
        let (aligned, t_aligned) = match whiten_with_theta(t, r, &theta) {
            Ok(w) if w.0.is_definite() => w,
            _ => {
                debug!("aligned slice is not definite; keeping the previous pass");
                break;
            }
        };
        let emitted = cluster_components(
            &t_aligned,
            r,
            params,
            &streams.child("aligned", pass as u64),
        );
        let candidate = assemble(t, r, &emitted, &aligned, params.restarts)?;
        if candidate.rank() < r
            || (definite && candidate.residual_fro >= (1.0 - 1e-9) * result.residual_fro)
        {
            break;
        }
        result = candidate;
        definite = true;
    }
    Ok(result)
}

/// Robust tensor power method on `t` with `r` components.
///
/// Each attempt whitens with a random slice, then re-whitens along the
/// current estimates; the attempt with the smallest residual
/// `‖T − Σ c_j û_j^{⊗3}‖_F` is returned.
pub fn robust_decompose(
    t: &SymTensor3,
    r: usize,
    params: &DecompositionParams,
    seed: u64,
) -> Result<DecompositionResult> {
    if params.restarts < r {
        return Err(Error::InvalidArgument(format!(
            "number of restarts L={} must be at least r={r}",
            params.restarts
        )));
    }
    if !(params.nu > 0.0 && params.nu <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nu must lie in (0, 1], got {}",
            params.nu
        )));
    }
    if params.iterations == 0 {
        return Err(Error::InvalidArgument("iterations N must be >= 1".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor to decompose"));
    }
    let streams = SeedStream::new(seed);
    let exact = EXACT_RESIDUAL * t.frobenius_norm();
    let mut result = decompose_attempt(t, r, params, &streams, exact)?;
    for attempt in 1..WHITENING_ATTEMPTS {
        if result.rank() == r && result.residual_fro <= exact {
            break;
        }
        let candidate = decompose_attempt(
            t,
            r,
            params,
            &streams.child("attempt", attempt as u64),
            exact,
        )?;
        let better = candidate.rank() > result.rank()
            || (candidate.rank() == result.rank()
                && candidate.residual_fro < (1.0 - 1e-9) * result.residual_fro);
        if better {
            result = candidate;
        }
    }

    if result.rank() < r {
        warn!("recovered {} of {r} components", result.rank());
        return Err(Error::UnderRecovery {
            found: result.rank(),
            requested: r,
            partial: Box::new(result),
        });
    }
    Ok(result)
}
