use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use scoremix::evaluation::{match_components, sweep};
use scoremix::io::{
    matrix_rows, read_dataset, read_json, to_json_string, write_csv_file, write_json,
};
use scoremix::pipeline::learn;
use scoremix::{Activation, Error, ExperimentConfig, GlmMixture, ModeSetting, ScoreModel};

const EXIT_THRESHOLD: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_UNDER_RECOVERY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "scoremix",
    version,
    about = "Learn mixtures of GLMs from score-function moment tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a ground-truth model and a dataset from it.
    Gen(Common),
    /// Learn a model from a dataset and its input score model.
    Learn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a learned model against the truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        learned: PathBuf,
        /// Largest acceptable matched direction error.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Error-versus-n sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

/// Config file plus overrides; flags win over the file.
#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named base config (`paper-scaling`).
    #[arg(long)]
    preset: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<ModeSetting>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    /// Power-method restarts.
    #[arg(long = "L")]
    restarts: Option<usize>,
    /// Power iterations per restart.
    #[arg(long = "N")]
    iterations: Option<usize>,
    /// Clustering threshold.
    #[arg(long)]
    nu: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.preset {
            Some(name) => ExperimentConfig::preset(name)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = match &self.config {
            Some(path) => overlay(&base, path)?,
            None => base,
        };
        if let Some(v) = self.seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.r {
            cfg.r = v;
        }
        if let Some(v) = self.activation {
            cfg.activation = v;
        }
        if let Some(v) = self.restarts {
            cfg.restarts = Some(v);
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fields present in the file replace those of `base`.
fn overlay(base: &ExperimentConfig, path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(fields) = file else {
        bail!("config {} must be a JSON object", path.display());
    };
    let mut merged = serde_json::to_value(base)?;
    let obj = merged
        .as_object_mut()
        .expect("config serializes to an object");
    for (k, v) in fields {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).with_context(|| format!("invalid config {}", path.display()))
}

fn output_dir(cfg: &ExperimentConfig) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| {
        format!(
            "cannot create output directory {}",
            cfg.output_dir.display()
        )
    })?;
    Ok(&cfg.output_dir)
}

fn cmd_gen(common: &Common) -> anyhow::Result<ExitCode> {
    let cfg = common.config()?;
    let out = output_dir(&cfg)?;
    let model = cfg.generate_model()?;
    let data = cfg.generate_data(&model)?;
    write_json(&out.join("model.json"), &model)?;
    write_csv_file(&data, &out.join("data.csv"))?;
    write_json(&out.join("score.json"), &cfg.score_model()?)?;
    info!(
        "wrote model, {} samples and score model to {}",
        data.n(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_learn(data: &Path, score: &Path, common: &Common) -> anyhow::Result<ExitCode> {
    let mut cfg = common.config()?;
    let data = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let score: ScoreModel =
        read_json(score).with_context(|| format!("reading {}", score.display()))?;
    if common.d.is_none() {
        cfg.d = data.d();
    }
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    match learn(&data, &score, &cfg.learn_options()) {
        Ok(outcome) => {
            write_json(&out.join("learned.json"), &outcome.model)?;
            write_json(&out.join("diagnostics.json"), &outcome.diagnostics())?;
            Ok(ExitCode::SUCCESS)
        }
        Err(err) if is_algorithmic(&err) => {
            let (directions, coefficients) = match &err {
                Error::UnderRecovery { partial, .. } => (
                    matrix_rows(&partial.directions),
                    partial.coefficients.clone(),
                ),
                _ => (Vec::new(), Vec::new()),
            };
            let doc = serde_json::json!({
                "error": err.to_string(),
                "U": directions,
                "coefficients": coefficients,
                "activation": cfg.activation,
            });
            fs::write(out.join("learned.json"), to_json_string(&doc)?)?;
            eprintln!("error: {err}");
            Ok(ExitCode::from(EXIT_UNDER_RECOVERY))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(truth: &Path, learned: &Path, threshold: f64) -> anyhow::Result<ExitCode> {
    let truth: GlmMixture =
        read_json(truth).with_context(|| format!("reading {}", truth.display()))?;
    let learned: GlmMixture =
        read_json(learned).with_context(|| format!("reading {}", learned.display()))?;
    if (truth.d(), truth.r()) != (learned.d(), learned.r()) {
        return Err(anyhow!(
            "shape mismatch: truth is d={} r={}, learned is d={} r={}",
            truth.d(),
            truth.r(),
            learned.d(),
            learned.r()
        ));
    }
    let report = match_components(&truth.u, &learned.u)?;
    print!("{}", to_json_string(&report)?);
    Ok(if report.max_error <= threshold {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_THRESHOLD)
    })
}

fn cmd_sweep(
    common: &Common,
    n_values: &Option<Vec<usize>>,
    trials: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let mut cfg = common.config()?;
    if let Some(v) = n_values {
        cfg.n_values = v.clone();
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if cfg.n_values.is_empty() {
        bail!("sweep needs n values (config n_values, --n-values or --preset)");
    }
    let out = output_dir(&cfg)?;
    let res = sweep(&cfg)?;
    res.write_csv(fs::File::create(out.join("sweep.csv"))?)?;
    write_json(&out.join("summary.json"), &res.summary())?;
    if let Some(s) = res.slope {
        info!("log-log slope {s:.3}");
    }
    Ok(ExitCode::SUCCESS)
}

fn is_algorithmic(err: &Error) -> bool {
    matches!(
        err,
        Error::UnderRecovery { .. }
            | Error::WhiteningRetriesExhausted { .. }
            | Error::IllConditionedSlice { .. }
            | Error::SweepFailed { .. }
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if is_algorithmic(e) => EXIT_UNDER_RECOVERY,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Gen(common) => cmd_gen(common),
        Command::Learn {
            data,
            score,
            common,
        } => cmd_learn(data, score, common),
        Command::Eval {
            truth,
            learned,
            threshold,
        } => cmd_eval(truth, learned, *threshold),
        Command::Sweep {
            common,
            n_values,
            trials,
        } => cmd_sweep(common, n_values, *trials),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
