//! EM over the low-dimensional parameters left after the tensor step: a scale
//! `s_j` and bias `b_j` per component plus the mixing weights, with the
//! directions `û_j` held fixed.
//!
//! Observation model: `y | x, h = e_j ~ N(g(s_j⟨û_j, x⟩ + b_j), σ²)` with a
//! known `σ` and an input-independent gate `P(h = e_j) = w_j`.

use crate::activation::{is_degenerate, rho, Activation};
use crate::error::{check_dim, Error, Result};
use crate::moments::Dataset;
use crate::score::log_sum_exp;
use crate::tensor::Matrix;
use log::warn;
use serde::{Deserialize, Serialize};

/// Components whose total responsibility falls below this are frozen.
pub const COLLAPSE_MASS: f64 = 1e-8;
const GOLDEN: f64 = 0.618_033_988_749_894_8;
const COORDINATE_SWEEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once `|Δ loglik| ≤ tol·(1 + |loglik|)`.
    pub tol: f64,
    /// Known observation noise.
    pub sigma: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-10,
            sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub scales: Vec<f64>,
    pub biases: Vec<f64>,
    pub weights: Vec<f64>,
    /// `n×r`; empty until the first E-step.
    pub responsibilities: Matrix,
    pub loglik: f64,
    /// Log-likelihood after every iteration, starting with the initial E-step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub frozen: Vec<bool>,
}

impl EmState {
    pub fn initial(scales: Vec<f64>, biases: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let r = scales.len();
        check_dim("initial biases", r, biases.len())?;
        check_dim("initial weights", r, weights.len())?;
        if r == 0 {
            return Err(Error::InvalidArgument(
                "EM needs at least one component".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || !(total > 0.0) {
            return Err(Error::InvalidArgument(
                "initial weights must be >= 0 with positive sum".into(),
            ));
        }
        Ok(Self {
            scales,
            biases,
            weights: weights.iter().map(|w| w / total).collect(),
            responsibilities: Matrix::zeros(0, r),
            loglik: f64::NEG_INFINITY,
            loglik_trace: Vec::new(),
            iterations: 0,
            frozen: vec![false; r],
        })
    }

    pub fn r(&self) -> usize {
        self.scales.len()
    }
}

/// Projections `z[i, j] = ⟨û_j, x_i⟩`, row-major `n×r`.
fn projections(data: &Dataset, directions: &Matrix) -> Vec<f64> {
    let r = directions.ncols();
    let d = data.d();
    let mut z = vec![0.0; data.n() * r];
    for i in 0..data.n() {
        let x = data.row(i);
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..d {
                s += directions[(k, j)] * x[k];
            }
            z[i * r + j] = s;
        }
    }
    z
}

struct Problem<'a> {
    y: &'a [f64],
    z: Vec<f64>,
    r: usize,
    g: Activation,
    sigma: f64,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    /// Responsibilities (row-major) and the total log-likelihood.
    fn e_step(&self, state: &EmState) -> (Vec<f64>, f64) {
        let (n, r) = (self.n(), self.r);
        let log_norm = -(self.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let inv_2s2 = 0.5 / (self.sigma * self.sigma);
        let log_w: Vec<f64> = state.weights.iter().map(|w| w.ln()).collect();
        let mut resp = vec![0.0; n * r];
        let mut ll = 0.0;
        let mut logits = vec![0.0; r];
        for i in 0..n {
            for j in 0..r {
                let mu = self
                    .g
                    .value(state.scales[j] * self.z[i * r + j] + state.biases[j]);
                let res = self.y[i] - mu;
                logits[j] = log_w[j] + log_norm - res * res * inv_2s2;
            }
            let lse = log_sum_exp(&logits);
            ll += lse;
            for j in 0..r {
                resp[i * r + j] = (logits[j] - lse).exp();
            }
        }
        (resp, ll)
    }

    /// Responsibility-weighted squared error of component `j` at `(s, b)`.
    fn weighted_sse(&self, resp: &[f64], j: usize, s: f64, b: f64) -> f64 {
        let r = self.r;
        let mut acc = 0.0;
        for i in 0..self.n() {
            let w = resp[i * r + j];
            if w == 0.0 {
                continue;
            }
            let res = self.y[i] - self.g.value(s * self.z[i * r + j] + b);
            acc += w * res * res;
        }
        acc
    }
}

/// Minimizes `f` starting from `x0` by bracket expansion and golden-section
/// search. Returns the best point seen and its value.
fn golden_minimize(f: impl Fn(f64) -> f64, x0: f64, step: f64) -> (f64, f64) {
    let mut best = (x0, f(x0));
    let track = |x: f64, fx: f64, best: &mut (f64, f64)| {
        if fx < best.1 {
            *best = (x, fx);
        }
    };
    let (mut a, mut fa) = (x0, best.1);
    let (mut b, mut fb) = (x0 + step, f(x0 + step));
    track(b, fb, &mut best);
    if fb > fa {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let grow = 1.0 / GOLDEN;
    let mut c = b + grow * (b - a);
    let mut fc = f(c);
    track(c, fc, &mut best);
    let mut expansions = 0;
    while fc < fb && expansions < 60 {
        a = b;
        b = c;
        fb = fc;
        c = b + grow * (b - a);
        fc = f(c);
        track(c, fc, &mut best);
        expansions += 1;
    }
    let (mut lo, mut hi) = if a < c { (a, c) } else { (c, a) };
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    track(x1, f1, &mut best);
    track(x2, f2, &mut best);
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-10 * (1.0 + x1.abs()) {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
            track(x1, f1, &mut best);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
            track(x2, f2, &mut best);
        }
    }
    best
}

fn m_step(problem: &Problem<'_>, resp: &[f64], state: &mut EmState) {
    let (n, r) = (problem.n(), problem.r);
    for j in 0..r {
        let mass: f64 = (0..n).map(|i| resp[i * r + j]).sum();
        state.weights[j] = mass / n as f64;
        if mass < COLLAPSE_MASS {
            if !state.frozen[j] {
                warn!("EM component {j} collapsed (responsibility mass {mass:e}); freezing it");
            }
            state.frozen[j] = true;
        }
    }
    let total: f64 = state.weights.iter().sum();
    state.weights.iter_mut().for_each(|w| *w /= total);

    for j in 0..r {
        if state.frozen[j] {
            continue;
        }
        let (mut s, mut b) = (state.scales[j], state.biases[j]);
        let mut current = problem.weighted_sse(resp, j, s, b);
        for _ in 0..COORDINATE_SWEEPS {
            let step = 0.1 * s.abs().max(0.1);
            let (s_new, v) = golden_minimize(|v| problem.weighted_sse(resp, j, v, b), s, step);
            if v < current {
                s = s_new;
                current = v;
            }
            let step = 0.1 * b.abs().max(0.1);
            let (b_new, v) = golden_minimize(|v| problem.weighted_sse(resp, j, s, v), b, step);
            if v < current {
                b = b_new;
                current = v;
            }
        }
        state.scales[j] = s;
        state.biases[j] = b;
    }
}

/// Runs EM from `init`. `data` must already be expressed in the coordinates
/// the directions act on (apply any input transform first).
pub fn em_refine(
    data: &Dataset,
    directions: &Matrix,
    g: Activation,
    init: EmState,
    options: &EmOptions,
) -> Result<EmState> {
    check_dim("EM directions rows", data.d(), directions.nrows())?;
    check_dim("EM directions columns", init.r(), directions.ncols())?;
    if !(options.sigma > 0.0) {
        return Err(Error::InvalidArgument(
            "EM noise sigma must be positive".into(),
        ));
    }
    let problem = Problem {
        y: data.y(),
        z: projections(data, directions),
        r: init.r(),
        g,
        sigma: options.sigma,
    };
    let mut state = init;
    state.loglik_trace.clear();
    let (mut resp, mut ll) = problem.e_step(&state);
    state.loglik_trace.push(ll);
    for it in 0..options.max_iter {
        m_step(&problem, &resp, &mut state);
        let (next_resp, next_ll) = problem.e_step(&state);
        state.loglik_trace.push(next_ll);
        state.iterations = it + 1;
        let converged = (next_ll - ll).abs() <= options.tol * (1.0 + ll.abs());
        resp = next_resp;
        ll = next_ll;
        if converged {
            break;
        }
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("EM log-likelihood"));
    }
    state.loglik = ll;
    state.responsibilities = Matrix::from_row_slice(problem.n(), problem.r, &resp);
    Ok(state)
}

/// Mixing weights from tensor coefficients `c_j = ρ_j·w_j`, assuming unit
/// components and zero bias when evaluating `ρ_j`. `None` when the activation
/// is degenerate or no coefficient is positive.
pub fn scale_from_rho(
    coefficients: &[f64],
    g: Activation,
    directions: &Matrix,
) -> Option<(Vec<f64>, Vec<f64>)> {
    if is_degenerate(g, 1.0, 0.0) || directions.ncols() != coefficients.len() {
        return None;
    }
    let raw: Vec<f64> = coefficients
        .iter()
        .zip(directions.column_iter())
        .map(|(c, col)| rho(g, col.norm(), 0.0).map(|e| (c / e.value).max(0.0)))
        .collect::<Result<_>>()
        .ok()?;
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    Some((
        raw.iter().map(|w| w / total).collect(),
        vec![1.0; coefficients.len()],
    ))
}
