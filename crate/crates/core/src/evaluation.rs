//! Matching recovered components to ground truth, parameter errors, and
//! sample-complexity sweeps.

use crate::error::{Error, Result};
use crate::moments::empirical_m3;
use crate::pipeline::{learn_from_moment, ExperimentConfig, LearnOptions};
use crate::synthetic::GlmMixture;
use crate::tensor::Matrix;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::io::Write;
use std::time::Instant;

/// Fraction of failed trials above which a sweep fails.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// `permutation[j]` is the estimate column matched to truth column `j`.
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
    pub per_component_error: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
}

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// algorithm with potentials, `O(r³)`). Returns `assignment[row] = column`.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian needs a square matrix");
    // 1-based arrays, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn normalized_columns(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut c in out.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    out
}

/// Optimal sign-resolved matching of estimated to true directions. Columns
/// are normalized before comparison.
pub fn match_components(truth: &Matrix, estimate: &Matrix) -> Result<MatchReport> {
    if truth.shape() != estimate.shape() || truth.ncols() == 0 {
        return Err(Error::DimensionMismatch {
            context: "match_components (d×r shapes)",
            expected: truth.nrows() * truth.ncols(),
            got: estimate.nrows() * estimate.ncols(),
        });
    }
    let t = normalized_columns(truth);
    let e = normalized_columns(estimate);
    let r = t.ncols();
    let pair = |i: usize, j: usize| -> (f64, f64) {
        let plus = (t.column(i) - e.column(j)).norm();
        let minus = (t.column(i) + e.column(j)).norm();
        if minus < plus {
            (minus, -1.0)
        } else {
            (plus, 1.0)
        }
    };
    let cost = Matrix::from_fn(r, r, |i, j| pair(i, j).0);
    let permutation = hungarian(&cost);
    let (per_component_error, signs): (Vec<f64>, Vec<f64>) =
        (0..r).map(|i| pair(i, permutation[i])).unzip();
    let max_error = per_component_error.iter().copied().fold(0.0, f64::max);
    let mean_error = per_component_error.iter().sum::<f64>() / r as f64;
    Ok(MatchReport {
        permutation,
        signs,
        per_component_error,
        max_error,
        mean_error,
    })
}

/// Largest per-component `sqrt(‖s_j û_j − u_j‖² + (b̂_j − b_j)²)` after
/// matching learned columns (`s_j û_j`) to the truth by direction.
pub fn full_parameter_error(truth: &GlmMixture, learned: &GlmMixture) -> Result<f64> {
    let report = match_components(&truth.u, &learned.u)?;
    Ok((0..truth.r())
        .map(|j| {
            let k = report.permutation[j];
            let du = (truth.u.column(j) - learned.u.column(k)).norm_squared();
            let db = (truth.biases[j] - learned.biases[k]).powi(2);
            (du + db).sqrt()
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub n: usize,
    pub trial: usize,
    pub max_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub n_values: Vec<usize>,
    /// Mean over successful trials of the matched max error, per `n`.
    pub errors: Vec<f64>,
    /// OLS slope of `log error` against `log n`.
    pub slope: Option<f64>,
    /// 95% confidence interval of the slope.
    pub slope_ci: Option<[f64; 2]>,
    pub ci_reliable: bool,
    pub failed_trials: usize,
    pub records: Vec<TrialRecord>,
}

/// Slope, intercept, and standard error of the slope for `y ~ a + b·x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<(f64, f64, Option<f64>)> {
    let k = x.len();
    if k < 2 || k != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / k as f64;
    let my = y.iter().sum::<f64>() / k as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = (k > 2).then(|| {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (k - 2) as f64 / sxx).sqrt()
    });
    Some((slope, intercept, se))
}

fn run_trial(config: &ExperimentConfig, n: usize, trial: usize) -> Result<(f64, f64)> {
    let trial_seeds = config.seeds().child("trial", trial as u64);
    let model = config.generate_model_with(&trial_seeds)?;
    let score = config.score_model()?;
    let mode = config.resolved_mode();
    let run_seeds = trial_seeds.child("n", n as u64);
    let m3 = if config.exact_moments {
        model.exact_m3(mode)?
    } else {
        let data = config.generate_data_with(&model, n, &run_seeds)?;
        empirical_m3(&data, &score, mode)?.tensor
    };
    let opts = LearnOptions {
        seed: run_seeds.seed("decompose", 0),
        ..config.learn_options()
    };
    let outcome = learn_from_moment(&m3, None, &score, &opts)?;
    let report = match_components(&model.u, &outcome.directions)?;
    Ok((report.max_error, report.mean_error))
}

/// Error-versus-sample-size sweep over `config.n_values` with
/// `config.trials` trials each. Directions only; EM is not run.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let mut n_values = config.n_values.clone();
    if n_values.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one n value".into(),
        ));
    }
    n_values.sort_unstable();
    n_values.dedup();
    if n_values[0] == 0 {
        return Err(Error::InvalidArgument("n values must be positive".into()));
    }
    let ci_reliable = config.trials >= 2;
    if !ci_reliable {
        warn!("sweep with a single trial per n: the slope confidence interval is unreliable");
    }
    let jobs: Vec<(usize, usize)> = n_values
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let records: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(n, trial)| {
            let start = Instant::now();
            let outcome = run_trial(config, n, trial);
            let seconds = start.elapsed().as_secs_f64();
            match outcome {
                Ok((max_error, mean_error)) => TrialRecord {
                    n,
                    trial,
                    max_error: Some(max_error),
                    mean_error: Some(mean_error),
                    seconds,
                    error: None,
                },
                Err(e) => TrialRecord {
                    n,
                    trial,
                    max_error: None,
                    mean_error: None,
                    seconds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * records.len() as f64 {
        return Err(Error::SweepFailed {
            failed,
            total: records.len(),
        });
    }
    let mut errors = Vec::with_capacity(n_values.len());
    for &n in &n_values {
        let ok: Vec<f64> = records
            .iter()
            .filter(|r| r.n == n)
            .filter_map(|r| r.max_error)
            .collect();
        if ok.is_empty() {
            return Err(Error::SweepFailed {
                failed,
                total: records.len(),
            });
        }
        errors.push(ok.iter().sum::<f64>() / ok.len() as f64);
    }
    let (slope, slope_ci) = if errors.iter().all(|&e| e > 0.0) {
        let lx: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
        let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        match ols_slope(&lx, &ly) {
            Some((b, _, se)) => {
                let ci = se.and_then(|se| {
                    let df = (lx.len() - 2) as f64;
                    let t = StudentsT::new(0.0, 1.0, df).ok()?.inverse_cdf(0.975);
                    Some([b - t * se, b + t * se])
                });
                (Some(b), ci)
            }
            None => (None, None),
        }
    } else {
        (None, None)
    };
    Ok(SweepResult {
        n_values,
        errors,
        slope,
        ci_reliable: ci_reliable && slope_ci.is_some(),
        slope_ci,
        failed_trials: failed,
        records,
    })
}

impl SweepResult {
    /// `n,trial,max_error,mean_error,seconds` rows in `(n, trial)` order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["n", "trial", "max_error", "mean_error", "seconds"])
            .map_err(io)?;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.records {
            w.write_record([
                r.n.to_string(),
                r.trial.to_string(),
                fmt(r.max_error),
                fmt(r.mean_error),
                format!("{:.3}", r.seconds),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON summary without per-trial timings.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "n_values": self.n_values,
            "errors": self.errors,
            "slope": self.slope,
            "slope_ci": self.slope_ci,
            "ci_reliable": self.ci_reliable,
            "failed_trials": self.failed_trials,
            "trials": self.records.iter().filter(|r| r.n == self.n_values[0]).count(),
        })
    }
}
