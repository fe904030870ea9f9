//! End-to-end learning: cross-moment → tensor decomposition → EM, plus the
//! experiment configuration shared by the CLI and the sweep.

use crate::activation::{is_degenerate, rho, Activation};
use crate::decomposition::{robust_decompose, DecompositionParams, DecompositionResult};
use crate::em::{em_refine, scale_from_rho, EmOptions, EmState};
use crate::error::{check_dim, Error, Result};
use crate::moments::{empirical_m3, Dataset, MomentMode};
use crate::rng::SeedStream;
use crate::score::{ScoreModel, ScoreModelSpec, Transform};
use crate::synthetic::{random_model, sample, GlmMixture, DEFAULT_CONDITION_FLOOR};
use crate::tensor::{Matrix, SymTensor3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// Requested moment mode; `Auto` picks regression iff the activation is
/// degenerate at unit norm and zero bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSetting {
    Glm,
    Regression,
    #[default]
    Auto,
}

impl ModeSetting {
    pub fn resolve(&self, g: Activation) -> MomentMode {
        match self {
            ModeSetting::Glm => MomentMode::Glm,
            ModeSetting::Regression => MomentMode::Regression,
            ModeSetting::Auto => {
                if is_degenerate(g, 1.0, 0.0) {
                    MomentMode::Regression
                } else {
                    MomentMode::Glm
                }
            }
        }
    }
}

impl fmt::Display for ModeSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeSetting::Glm => "glm",
            ModeSetting::Regression => "regression",
            ModeSetting::Auto => "auto",
        })
    }
}

impl FromStr for ModeSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "glm" => Ok(ModeSetting::Glm),
            "regression" => Ok(ModeSetting::Regression),
            "auto" => Ok(ModeSetting::Auto),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected glm, regression or auto)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub enabled: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub sigma: f64,
    /// EM runs on the first `max_samples` rows.
    pub max_samples: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        let o = EmOptions::default();
        Self {
            enabled: true,
            max_iter: o.max_iter,
            tol: o.tol,
            sigma: o.sigma,
            max_samples: 20_000,
        }
    }
}

impl EmConfig {
    pub fn options(&self) -> EmOptions {
        EmOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub r: usize,
    pub n: usize,
    pub activation: Activation,
    /// Input distribution; standard Gaussian of dimension `d` when absent.
    pub input: Option<ScoreModelSpec>,
    /// Coordinatewise map applied to inputs before the linear predictor.
    pub transform: Option<Transform>,
    pub mode: ModeSetting,
    pub noise_sigma: f64,
    /// Generated biases are uniform on `[−bias_range, bias_range]`.
    pub bias_range: f64,
    pub condition_floor: f64,
    /// `L`; defaults to `max(50, 10·r)`.
    pub restarts: Option<usize>,
    /// `N`
    pub iterations: usize,
    pub nu: f64,
    pub em: EmConfig,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub n_values: Vec<usize>,
    pub trials: usize,
    /// Feed the population moment to the decomposition instead of sampling.
    pub exact_moments: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 10,
            r: 3,
            n: 100_000,
            activation: Activation::Cubic,
            input: None,
            transform: None,
            mode: ModeSetting::Auto,
            noise_sigma: 0.1,
            bias_range: 0.5,
            condition_floor: DEFAULT_CONDITION_FLOOR,
            restarts: None,
            iterations: 100,
            nu: 0.5,
            em: EmConfig::default(),
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            n_values: Vec::new(),
            trials: 5,
            exact_moments: false,
        }
    }
}

impl ExperimentConfig {
    /// Sample-complexity preset: `d = 10`, `r = 3`, cubic activation,
    /// `n ∈ {10⁴, 3·10⁴, 10⁵, 3·10⁵, 10⁶}`, 5 trials each.
    pub fn scaling_preset() -> Self {
        Self {
            d: 10,
            r: 3,
            activation: Activation::Cubic,
            noise_sigma: 0.1,
            n_values: vec![10_000, 30_000, 100_000, 300_000, 1_000_000],
            trials: 5,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-scaling" => Ok(Self::scaling_preset()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset '{other}' (available: paper-scaling)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r == 0 {
            return Err(Error::InvalidArgument("d and r must be positive".into()));
        }
        if self.r > self.d {
            return Err(Error::InvalidArgument(format!(
                "r must not exceed d (got r={}, d={}); the overcomplete case is unsupported",
                self.r, self.d
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "nu must lie in (0, 1], got {}",
                self.nu
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations N must be >= 1".into()));
        }
        if let Some(l) = self.restarts {
            if l < self.r {
                return Err(Error::InvalidArgument(format!(
                    "restarts L={l} must be at least r={}",
                    self.r
                )));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_range >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise_sigma and bias_range must be >= 0".into(),
            ));
        }
        if !(self.em.sigma > 0.0) {
            return Err(Error::InvalidArgument("em.sigma must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        if let Some(spec) = &self.input {
            let m = ScoreModel::from_spec(spec)?;
            check_dim("input distribution dimension", self.d, m.dim())?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedStream {
        SeedStream::new(self.master_seed)
    }

    pub fn resolved_mode(&self) -> MomentMode {
        self.mode.resolve(self.activation)
    }

    pub fn decomposition_params(&self) -> DecompositionParams {
        let mut p = DecompositionParams::default_for(self.r);
        if let Some(l) = self.restarts {
            p.restarts = l;
        }
        p.iterations = self.iterations;
        p.nu = self.nu;
        p
    }

    /// Distribution of the raw inputs.
    pub fn input_model(&self) -> Result<ScoreModel> {
        match &self.input {
            Some(spec) => ScoreModel::from_spec(spec),
            None => ScoreModel::standard_gaussian(self.d),
        }
    }

    /// Score model of the coordinates the linear predictor acts on.
    pub fn score_model(&self) -> Result<ScoreModel> {
        let input = self.input_model()?;
        Ok(match self.transform {
            Some(phi) if !phi.is_identity() => ScoreModel::transformed(input, phi),
            _ => input,
        })
    }

    /// Ground-truth model drawn from `seeds`.
    pub fn generate_model_with(&self, seeds: &SeedStream) -> Result<GlmMixture> {
        let mut model = random_model(
            self.d,
            self.r,
            self.activation,
            seeds.seed("model", 0),
            self.condition_floor,
        )?;
        // random_model draws biases on [−0.5, 0.5]
        for b in model.biases.iter_mut() {
            *b *= self.bias_range / 0.5;
        }
        model.noise_sigma = self.noise_sigma;
        model.transform = self.transform.filter(|t| !t.is_identity());
        Ok(model)
    }

    pub fn generate_model(&self) -> Result<GlmMixture> {
        self.generate_model_with(&self.seeds())
    }

    pub fn generate_data_with(
        &self,
        model: &GlmMixture,
        n: usize,
        seeds: &SeedStream,
    ) -> Result<Dataset> {
        sample(model, &self.input_model()?, n, seeds.seed("data", 0))
    }

    pub fn generate_data(&self, model: &GlmMixture) -> Result<Dataset> {
        self.generate_data_with(model, self.n, &self.seeds())
    }

    pub fn learn_options(&self) -> LearnOptions {
        LearnOptions {
            r: self.r,
            activation: self.activation,
            mode: self.resolved_mode(),
            decomposition: self.decomposition_params(),
            em: self.em,
            seed: self.seeds().seed("decompose", 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOptions {
    pub r: usize,
    pub activation: Activation,
    pub mode: MomentMode,
    pub decomposition: DecompositionParams,
    pub em: EmConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub mode: MomentMode,
    pub decomposition: DecompositionResult,
    /// Per-component scale constant relating coefficients to weights.
    pub rho: Vec<f64>,
    /// Sign-resolved unit directions.
    pub directions: Matrix,
    pub initial: EmState,
    pub refined: Option<EmState>,
    /// Model before EM (scales from the tensor step, zero biases).
    pub initial_model: GlmMixture,
    pub model: GlmMixture,
}

/// Constant `κ` with `coefficient_j = κ·w_j` for unit, zero-bias components.
pub fn moment_constant(g: Activation, mode: MomentMode) -> Result<f64> {
    match mode {
        MomentMode::Glm => Ok(rho(g, 1.0, 0.0)?.value),
        MomentMode::Regression => Ok(6.0),
    }
}

fn model_from_state(
    directions: &Matrix,
    state: &EmState,
    g: Activation,
    sigma: f64,
    transform: Option<Transform>,
) -> Result<GlmMixture> {
    let mut u = directions.clone();
    for (j, mut col) in u.column_iter_mut().enumerate() {
        col *= state.scales[j];
    }
    GlmMixture::new(
        u,
        state.biases.clone(),
        state.weights.clone(),
        g,
        sigma,
        transform,
    )
}

/// Initial EM state and sign-resolved directions from a decomposition.
pub fn initial_state(
    decomposition: &DecompositionResult,
    g: Activation,
    mode: MomentMode,
) -> Result<(Matrix, EmState, Vec<f64>)> {
    let kappa = moment_constant(g, mode)?;
    if kappa == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "activation {g} has no third-order signal in {mode} mode"
        )));
    }
    let r = decomposition.rank();
    let mut directions = decomposition.directions.clone();
    let mut coeffs = decomposition.coefficients.clone();
    for j in 0..r {
        if coeffs[j] / kappa < 0.0 {
            let flipped = -directions.column(j);
            directions.set_column(j, &flipped);
            coeffs[j] = -coeffs[j];
        }
    }
    let weights = match mode {
        MomentMode::Glm => scale_from_rho(&coeffs, g, &directions).map(|(w, _)| w),
        MomentMode::Regression => {
            let total: f64 = coeffs.iter().sum();
            (total > 0.0).then(|| coeffs.iter().map(|c| c / total).collect())
        }
    };
    let weights = weights.unwrap_or_else(|| vec![1.0 / r as f64; r]);
    let state = EmState::initial(vec![1.0; r], vec![0.0; r], weights)?;
    Ok((directions, state, vec![kappa; r]))
}

/// Learns a GLM mixture from labeled data with a known input score model.
pub fn learn(data: &Dataset, score: &ScoreModel, opts: &LearnOptions) -> Result<LearnOutcome> {
    check_dim("dataset vs score model dimension", score.dim(), data.d())?;
    if opts.r == 0 || opts.r > data.d() {
        return Err(Error::InvalidArgument(format!(
            "r must satisfy 1 <= r <= d (got r={}, d={})",
            opts.r,
            data.d()
        )));
    }
    let m3 = empirical_m3(data, score, opts.mode)?;
    learn_from_moment(&m3.tensor, Some(data), score, opts)
}

/// Decomposition and refinement from a precomputed moment tensor. EM runs
/// only when `data` is given and enabled in the options.
pub fn learn_from_moment(
    m3: &SymTensor3,
    data: Option<&Dataset>,
    score: &ScoreModel,
    opts: &LearnOptions,
) -> Result<LearnOutcome> {
    let decomposition = robust_decompose(m3, opts.r, &opts.decomposition, opts.seed)?;
    let (directions, initial, rho_values) =
        initial_state(&decomposition, opts.activation, opts.mode)?;
    let transform = Some(score.transform()).filter(|t| !t.is_identity());
    let initial_model = model_from_state(
        &directions,
        &initial,
        opts.activation,
        opts.em.sigma,
        transform,
    )?;
    let refined = match data {
        Some(data) if opts.em.enabled => {
            let head = data.head(opts.em.max_samples);
            let mapped = if transform.is_some() {
                let mut x = Vec::with_capacity(head.n() * head.d());
                for i in 0..head.n() {
                    x.extend(score.map_input(head.row(i)));
                }
                Dataset::new(head.d(), x, head.y().to_vec())?
            } else {
                head
            };
            Some(em_refine(
                &mapped,
                &directions,
                opts.activation,
                initial.clone(),
                &opts.em.options(),
            )?)
        }
        _ => None,
    };
    let model = match &refined {
        Some(state) => model_from_state(
            &directions,
            state,
            opts.activation,
            opts.em.sigma,
            transform,
        )?,
        None => initial_model.clone(),
    };
    Ok(LearnOutcome {
        mode: opts.mode,
        decomposition,
        rho: rho_values,
        directions,
        initial,
        refined,
        initial_model,
        model,
    })
}

/// Diagnostics written next to a learned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mode: MomentMode,
    pub residual_fro: f64,
    pub restarts: usize,
    pub rho: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub em_iterations: usize,
    pub em_loglik: Option<f64>,
    pub em_frozen: Vec<bool>,
}

impl LearnOutcome {
    pub fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            mode: self.mode,
            residual_fro: self.decomposition.residual_fro,
            restarts: self.decomposition.n_restarts_used,
            rho: self.rho.clone(),
            coefficients: self.decomposition.coefficients.clone(),
            em_iterations: self.refined.as_ref().map_or(0, |s| s.iterations),
            em_loglik: self.refined.as_ref().map(|s| s.loglik),
            em_frozen: self
                .refined
                .as_ref()
                .map_or_else(|| vec![false; self.initial.r()], |s| s.frozen.clone()),
        }
    }
}
