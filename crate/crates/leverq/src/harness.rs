//! Experiment runner: seeded suites over matrices and MDPs, CSV records,
//! and JSON summaries.
//!
//! A JSON [`ExperimentConfig`] names one experiment kind, a problem source
//! (synthetic matrix spec, MDP generator spec, MDP file, or the built-in toy
//! MDP), the evaluators to compare, and a seed list plus budget sweep. Each
//! `(seed, budget)` cell runs independently and appends its rows to a
//! versioned CSV; rerunning with an existing CSV skips cells that are already
//! recorded, so interrupted sweeps resume where they stopped. Outputs are a
//! pure function of the config and seeds — rows are written in a fixed order
//! and wall-clock times stay out of the files.

use crate::algorithms::{
    estimate_matrix, evaluate_policy, lora_pi, lora_vi, AlgoError, EvaluatorKind, LoraConfig,
};
use crate::linalg::Matrix;
use crate::lme::DirectMatrixOracle;
use crate::mdp::{generate_lowrank_mdp, toy_mdp, GeneratorSpec, MdpError, Policy, RewardNoise, TabularMdp};
use crate::seeding::{child_rng, child_seed};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Schema tag written as the first line of every records CSV.
pub const RECORD_SCHEMA: &str = "leverq-records v1";
/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "LEVERQ_THREADS";

/// Errors from configuration loading, experiment execution, or output.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record file error: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error("no records to summarize")]
    EmptyRecords,
}

impl HarnessError {
    /// Process exit code the CLI maps this error to: 2 for configuration
    /// problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`]. Returns the applied
/// thread count, or `None` when the variable is unset (library default).
pub fn init_thread_pool() -> Result<Option<usize>, HarnessError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    HarnessError::Config(format!(
                        "{THREADS_ENV} must be a positive integer, got {raw:?}"
                    ))
                })?;
            // A second initialization in the same process keeps the first
            // pool; that is fine for a fixed setting.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(Some(n))
        }
    }
}

/// The experiment suites the runner knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Estimate a synthetic noisy matrix with each configured evaluator.
    MatrixCompletion,
    /// Estimate a fixed policy's action-value matrix on an MDP.
    LmeMdp,
    /// Full policy-iteration runs, one row per epoch.
    LoraPi,
    /// Full value-iteration runs, one row per epoch.
    LoraVi,
    /// Condition number of the Bellman image over a grid of value vectors
    /// (two-state MDPs only).
    CondLandscape,
    /// The built-in two-state MDP's reference diagnostics.
    ToyGolden,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::MatrixCompletion => "matrix_completion",
            ExperimentKind::LmeMdp => "lme_mdp",
            ExperimentKind::LoraPi => "lora_pi",
            ExperimentKind::LoraVi => "lora_vi",
            ExperimentKind::CondLandscape => "cond_landscape",
            ExperimentKind::ToyGolden => "toy_golden",
        }
    }
}

/// Synthetic low-rank matrix family for completion experiments: Gaussian
/// rank-`rank` factors whose rows and columns decay polynomially, giving
/// tunable leverage-score concentration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rank: usize,
    /// Power-law exponent of the row/column factor decay; zero keeps the
    /// matrix incoherent, larger values concentrate energy in early indices.
    #[serde(default)]
    pub coherence_decay: f64,
    /// Standard deviation of the additive Gaussian observation noise.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Entrywise magnitude the generated matrix is rescaled to.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_scale() -> f64 {
    1.0
}

/// Draws the matrix described by `spec`, deterministically in `seed`.
pub fn generate_matrix(spec: &MatrixSpec, seed: u64) -> Result<Matrix, HarnessError> {
    if spec.n_rows == 0 || spec.n_cols == 0 {
        return Err(HarnessError::Config("matrix dimensions must be positive".into()));
    }
    if spec.rank == 0 || spec.rank > spec.n_rows.min(spec.n_cols) {
        return Err(HarnessError::Config(format!(
            "matrix rank {} is outside 1..={}",
            spec.rank,
            spec.n_rows.min(spec.n_cols)
        )));
    }
    if !(spec.scale > 0.0) || spec.coherence_decay < 0.0 || spec.noise_sigma < 0.0 {
        return Err(HarnessError::Config(
            "matrix spec needs scale > 0, coherence_decay >= 0, noise_sigma >= 0".into(),
        ));
    }
    let d = spec.rank;
    let mut rng = child_rng(seed, &[0]);
    let mut left = Matrix::zeros(spec.n_rows, d);
    for r in 0..spec.n_rows {
        let w = ((r + 1) as f64).powf(-spec.coherence_decay);
        for c in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            left.set(r, c, w * z);
        }
    }
    let mut right = Matrix::zeros(d, spec.n_cols);
    for r in 0..d {
        for c in 0..spec.n_cols {
            let z: f64 = StandardNormal.sample(&mut rng);
            let w = ((c + 1) as f64).powf(-spec.coherence_decay);
            right.set(r, c, w * z);
        }
    }
    let product = left.matmul(&right).expect("factor shapes agree");
    let peak = product.max_abs();
    if peak == 0.0 {
        return Err(HarnessError::Config("generated matrix is zero; retry with another seed".into()));
    }
    let s = spec.scale / peak;
    Ok(Matrix::from_fn(spec.n_rows, spec.n_cols, |r, c| product.get(r, c) * s))
}

/// One experiment suite: what to run, on which problem, over which seeds and
/// budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Row label in the records; defaults to the experiment kind's name.
    #[serde(default)]
    pub id: Option<String>,
    /// Synthetic matrix source (matrix completion).
    #[serde(default)]
    pub matrix: Option<MatrixSpec>,
    /// MDP generator source; a fresh MDP is drawn per seed.
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    /// Path to an MDP JSON file, fixed across seeds.
    #[serde(default)]
    pub mdp_path: Option<PathBuf>,
    /// Use the built-in two-state MDP.
    #[serde(default)]
    pub use_toy_mdp: bool,
    /// Policy whose value matrix `lme_mdp` estimates; all-first-action when
    /// omitted.
    #[serde(default)]
    pub policy: Option<Vec<usize>>,
    /// Iteration settings for `lora_pi` / `lora_vi`; the budget sweep
    /// overrides the budget in here cell by cell.
    #[serde(default)]
    pub algorithm: LoraConfig,
    /// Estimator knobs for `matrix_completion` / `lme_mdp`.
    #[serde(default)]
    pub estimator: crate::lme::LmeConfig,
    /// Failure probability parameter for `matrix_completion` / `lme_mdp`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Evaluators to compare; each produces its own rows per cell.
    #[serde(default = "default_evaluators")]
    pub evaluators: Vec<EvaluatorKind>,
    pub seeds: Vec<u64>,
    /// Budget sweep (strictly increasing). Ignored by `cond_landscape` and
    /// `toy_golden`.
    #[serde(default)]
    pub budgets: Vec<u64>,
    /// Grid resolution per axis for `cond_landscape`.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Output directory; the CLI `--out` flag takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_delta() -> f64 {
    0.1
}

fn default_evaluators() -> Vec<EvaluatorKind> {
    vec![EvaluatorKind::LmeLeveraged]
}

fn default_resolution() -> usize {
    64
}

impl ExperimentConfig {
    /// Loads and validates a config from a JSON file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("cannot parse {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn id(&self) -> &str {
        self.id.as_deref().unwrap_or_else(|| self.experiment.name())
    }

    fn needs_budgets(&self) -> bool {
        !matches!(self.experiment, ExperimentKind::CondLandscape | ExperimentKind::ToyGolden)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if self.needs_budgets() {
            if self.budgets.is_empty() {
                return Err(HarnessError::Config("at least one budget is required".into()));
            }
            if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(HarnessError::Config("budgets must be strictly increasing".into()));
            }
        }
        if self.evaluators.is_empty() {
            return Err(HarnessError::Config("at least one evaluator is required".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(HarnessError::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        let mdp_sources = usize::from(self.generator.is_some())
            + usize::from(self.mdp_path.is_some())
            + usize::from(self.use_toy_mdp);
        match self.experiment {
            ExperimentKind::MatrixCompletion => {
                if self.matrix.is_none() {
                    return Err(HarnessError::Config("matrix_completion needs a matrix spec".into()));
                }
            }
            ExperimentKind::LmeMdp | ExperimentKind::LoraPi | ExperimentKind::LoraVi => {
                if mdp_sources != 1 {
                    return Err(HarnessError::Config(
                        "exactly one MDP source is required: generator, mdp_path, or use_toy_mdp".into(),
                    ));
                }
            }
            ExperimentKind::CondLandscape => {
                if mdp_sources > 1 {
                    return Err(HarnessError::Config(
                        "give at most one MDP source (default is the built-in toy MDP)".into(),
                    ));
                }
                if self.resolution < 2 {
                    return Err(HarnessError::Config("resolution must be at least 2".into()));
                }
            }
            ExperimentKind::ToyGolden => {}
        }
        Ok(())
    }

    /// Resolves the MDP a cell runs on. Generator specs draw a fresh MDP per
    /// seed; files and the built-in toy MDP are fixed.
    fn resolve_mdp(&self, seed: u64) -> Result<TabularMdp, HarnessError> {
        if let Some(path) = &self.mdp_path {
            let text = fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
            let mdp: TabularMdp = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("cannot parse {}: {e}", path.display())))?;
            return Ok(mdp);
        }
        if let Some(spec) = &self.generator {
            return Ok(generate_lowrank_mdp(spec, child_seed(seed, &[30]))?);
        }
        Ok(toy_mdp())
    }
}

/// One metrics row. Metric fields are absent when the row's experiment does
/// not produce them (or the cell failed); `warnings` carries estimator notes
/// or, for failed rows, the error text. Wall time is kept in memory only, so
/// record files are byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub seed: u64,
    pub budget: u64,
    pub epoch: usize,
    pub evaluator: String,
    pub status: String,
    pub entrywise_error: Option<f64>,
    pub frobenius_error: Option<f64>,
    pub value_suboptimality: Option<f64>,
    pub condition_number: Option<f64>,
    pub warnings: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

const STATUS_OK: &str = "ok";
const STATUS_FAILED: &str = "failed";

fn evaluator_name(kind: EvaluatorKind) -> String {
    serde_json::to_value(kind)
        .expect("evaluator kinds serialize")
        .as_str()
        .expect("evaluator kinds are strings")
        .to_string()
}

/// Everything one invocation of [`run_experiment`] produced.
#[derive(Debug)]
pub struct RunOutput {
    /// All records now in the CSV (previously existing plus new).
    pub records: Vec<ExperimentRecord>,
    pub summary: Summary,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub cells_run: usize,
    pub cells_skipped: usize,
}

/// Runs every `(seed, budget)` cell of the config that the records CSV does
/// not already contain, appends their rows, and rewrites the JSON summary.
/// `out_override` replaces the config's output directory.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join(format!("{}_records.csv", config.id()));
    let summary_path = out_dir.join(format!("{}_summary.json", config.id()));

    let existing = read_records_lenient(&csv_path)?;
    let done: BTreeSet<(u64, u64)> = existing.iter().map(|r| (r.seed, r.budget)).collect();

    let cells: Vec<(u64, u64)> = match config.experiment {
        ExperimentKind::CondLandscape | ExperimentKind::ToyGolden => {
            vec![(config.seeds[0], 0)]
        }
        _ => config
            .seeds
            .iter()
            .flat_map(|&seed| config.budgets.iter().map(move |&budget| (seed, budget)))
            .collect(),
    };
    let todo: Vec<(u64, u64)> = cells.iter().copied().filter(|c| !done.contains(c)).collect();
    let cells_skipped = cells.len() - todo.len();

    let batches: Vec<Vec<ExperimentRecord>> = todo
        .par_iter()
        .map(|&(seed, budget)| run_cell(config, seed, budget))
        .collect::<Result<_, _>>()?;

    let fresh = fs::metadata(&csv_path).map(|m| m.len() == 0).unwrap_or(true);
    append_records(&csv_path, batches.iter().flatten(), fresh)?;

    let mut records = existing;
    records.extend(batches.into_iter().flatten());
    let mut summary = summarize_records(&records)?;
    summary.extras = extras_for(config, &records);
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    Ok(RunOutput {
        records,
        summary,
        csv_path,
        summary_path,
        cells_run: todo.len(),
        cells_skipped,
    })
}

/// Reads a records CSV, tolerating a truncated final line (from an
/// interrupted run); a missing file yields no records.
pub fn read_records_lenient(path: &Path) -> Result<Vec<ExperimentRecord>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize::<ExperimentRecord>() {
        match row {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
    }
    Ok(records)
}

fn append_records<'a>(
    path: &Path,
    records: impl Iterator<Item = &'a ExperimentRecord>,
    fresh: bool,
) -> Result<(), HarnessError> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "# {RECORD_SCHEMA}")?;
    }
    let mut writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for record in records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Runs one `(seed, budget)` cell. Evaluator failures become `failed` rows;
/// only infrastructure problems (unreadable MDP file, invalid policy) abort.
fn run_cell(
    config: &ExperimentConfig,
    seed: u64,
    budget: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let blank = ExperimentRecord {
        experiment: config.id().to_string(),
        seed,
        budget,
        epoch: 0,
        evaluator: String::new(),
        status: STATUS_OK.to_string(),
        entrywise_error: None,
        frobenius_error: None,
        value_suboptimality: None,
        condition_number: None,
        warnings: String::new(),
        wall_time_s: 0.0,
    };
    match config.experiment {
        ExperimentKind::MatrixCompletion => run_matrix_cell(config, seed, budget, &blank),
        ExperimentKind::LmeMdp => run_lme_mdp_cell(config, seed, budget, &blank),
        ExperimentKind::LoraPi | ExperimentKind::LoraVi => {
            run_iteration_cell(config, seed, budget, &blank)
        }
        ExperimentKind::CondLandscape => run_landscape_cell(config, seed, &blank),
        ExperimentKind::ToyGolden => run_toy_golden_cell(&blank),
    }
}

fn failed_row(blank: &ExperimentRecord, evaluator: &str, error: impl std::fmt::Display) -> ExperimentRecord {
    ExperimentRecord {
        evaluator: evaluator.to_string(),
        status: STATUS_FAILED.to_string(),
        warnings: error.to_string(),
        ..blank.clone()
    }
}

fn run_matrix_cell(
    config: &ExperimentConfig,
    seed: u64,
    budget: u64,
    blank: &ExperimentRecord,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let spec = config.matrix.as_ref().expect("validated");
    let truth = generate_matrix(spec, child_seed(seed, &[20]))?;
    let noise = if spec.noise_sigma > 0.0 {
        RewardNoise::Gaussian { sigma: spec.noise_sigma }
    } else {
        RewardNoise::None
    };
    let oracle = DirectMatrixOracle::new(truth.clone(), noise, None);
    let cond = truth.cond_effective().unwrap_or(f64::NAN);

    let mut rows = Vec::new();
    for (idx, &kind) in config.evaluators.iter().enumerate() {
        let name = evaluator_name(kind);
        let start = Instant::now();
        let root = child_seed(seed, &[21, budget, idx as u64]);
        match estimate_matrix(&oracle, Some(&truth), kind, budget, config.delta, &config.estimator, root)
        {
            Ok(eval) => {
                let diff = eval.q_hat.sub(&truth)?;
                rows.push(ExperimentRecord {
                    evaluator: name,
                    entrywise_error: Some(diff.max_abs()),
                    frobenius_error: Some(diff.fro_norm()),
                    condition_number: Some(cond),
                    warnings: eval.report.map(|r| r.warnings.join("; ")).unwrap_or_default(),
                    wall_time_s: start.elapsed().as_secs_f64(),
                    ..blank.clone()
                });
            }
            Err(e) => rows.push(failed_row(blank, &name, e)),
        }
    }
    Ok(rows)
}

fn run_lme_mdp_cell(
    config: &ExperimentConfig,
    seed: u64,
    budget: u64,
    blank: &ExperimentRecord,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let mdp = config.resolve_mdp(seed)?;
    let policy = match &config.policy {
        Some(p) => Policy(p.clone()),
        None => Policy(vec![0; mdp.n_states()]),
    };
    let q_true = mdp.exact_policy_q(&policy)?;
    let (v_star, _) = mdp.exact_optimal()?;
    let v_policy = mdp.exact_policy_v(&policy)?;
    let subopt = v_star
        .iter()
        .zip(&v_policy)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let cond = q_true.cond_effective().unwrap_or(f64::NAN);

    let mut rows = Vec::new();
    for (idx, &kind) in config.evaluators.iter().enumerate() {
        let name = evaluator_name(kind);
        let start = Instant::now();
        let root = child_seed(seed, &[31, budget, idx as u64]);
        match evaluate_policy(&mdp, &policy, kind, budget, config.delta, &config.estimator, root) {
            Ok(eval) => {
                let diff = eval.q_hat.sub(&q_true)?;
                rows.push(ExperimentRecord {
                    evaluator: name,
                    entrywise_error: Some(diff.max_abs()),
                    frobenius_error: Some(diff.fro_norm()),
                    value_suboptimality: Some(subopt),
                    condition_number: Some(cond),
                    warnings: eval.report.map(|r| r.warnings.join("; ")).unwrap_or_default(),
                    wall_time_s: start.elapsed().as_secs_f64(),
                    ..blank.clone()
                });
            }
            Err(AlgoError::Lme(e)) => rows.push(failed_row(blank, &name, e)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rows)
}

fn run_iteration_cell(
    config: &ExperimentConfig,
    seed: u64,
    budget: u64,
    blank: &ExperimentRecord,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let mdp = config.resolve_mdp(seed)?;
    let (v_star, _) = mdp.exact_optimal()?;

    let mut rows = Vec::new();
    for (idx, &kind) in config.evaluators.iter().enumerate() {
        let name = evaluator_name(kind);
        let mut algo = config.algorithm.clone();
        algo.budget = budget;
        algo.evaluator = kind;
        let start = Instant::now();
        let tag = if config.experiment == ExperimentKind::LoraPi { 40 } else { 50 };
        let root = child_seed(seed, &[tag, budget, idx as u64]);

        let outcome = if config.experiment == ExperimentKind::LoraPi {
            lora_pi(&mdp, &algo, root).map(|run| {
                let final_policy = run.policy.clone();
                (run.logs, run.n_epochs, final_policy)
            })
        } else {
            lora_vi(&mdp, &algo, root).map(|run| {
                let final_policy = run.policy.clone();
                (run.logs, run.n_epochs, final_policy)
            })
        };
        match outcome {
            Ok((logs, n_epochs, final_policy)) => {
                let elapsed = start.elapsed().as_secs_f64();
                for log in &logs {
                    rows.push(ExperimentRecord {
                        epoch: log.epoch,
                        evaluator: name.clone(),
                        entrywise_error: Some(log.eval_error),
                        value_suboptimality: Some(log.value_subopt),
                        condition_number: Some(log.cond_number),
                        warnings: log
                            .report
                            .as_ref()
                            .map(|r| r.warnings.join("; "))
                            .unwrap_or_default(),
                        wall_time_s: elapsed,
                        ..blank.clone()
                    });
                }
                let v_final = mdp.exact_policy_v(&final_policy)?;
                let final_subopt = v_star
                    .iter()
                    .zip(&v_final)
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
                rows.push(ExperimentRecord {
                    epoch: n_epochs + 1,
                    evaluator: name.clone(),
                    value_suboptimality: Some(final_subopt),
                    wall_time_s: elapsed,
                    ..blank.clone()
                });
            }
            Err(AlgoError::Epoch { epoch, source }) => {
                rows.push(failed_row(blank, &name, format!("epoch {epoch}: {source}")));
            }
            Err(AlgoError::Lme(e)) => rows.push(failed_row(blank, &name, e)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rows)
}

fn run_landscape_cell(
    config: &ExperimentConfig,
    seed: u64,
    blank: &ExperimentRecord,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let mdp = config.resolve_mdp(seed)?;
    if mdp.n_states() != 2 {
        return Err(HarnessError::Config(format!(
            "cond_landscape needs a two-state MDP, got {} states",
            mdp.n_states()
        )));
    }
    let res = config.resolution;
    let v_max = mdp.value_bound();
    let coord = |i: usize| -v_max + 2.0 * v_max * i as f64 / (res - 1) as f64;
    let conds: Vec<f64> = (0..res * res)
        .into_par_iter()
        .map(|idx| {
            let v = [coord(idx / res), coord(idx % res)];
            let f = mdp.bellman_f(&v).expect("two entries for two states");
            f.cond_number().unwrap_or(f64::NAN)
        })
        .collect();
    Ok(conds
        .into_iter()
        .enumerate()
        .map(|(idx, cond)| ExperimentRecord {
            epoch: idx,
            evaluator: "exact".to_string(),
            condition_number: Some(cond),
            ..blank.clone()
        })
        .collect())
}

fn run_toy_golden_cell(blank: &ExperimentRecord) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let report = golden_toy()?;
    let mut rows: Vec<ExperimentRecord> = report
        .policy_conds
        .iter()
        .enumerate()
        .map(|(i, pc)| ExperimentRecord {
            epoch: i,
            evaluator: "exact".to_string(),
            condition_number: Some(pc.cond),
            warnings: format!("policy=({},{})", pc.actions[0], pc.actions[1]),
            ..blank.clone()
        })
        .collect();
    rows.push(ExperimentRecord {
        epoch: rows.len(),
        evaluator: "exact".to_string(),
        condition_number: Some(report.vi_max_cond),
        warnings: format!(
            "max cond along value iteration from ({}, {})",
            report.vi_initial[0], report.vi_initial[1]
        ),
        ..blank.clone()
    });
    Ok(rows)
}

/// Condition number of one deterministic policy's exact value matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCond {
    pub actions: Vec<usize>,
    pub cond: f64,
}

/// Reference diagnostics of the built-in two-state MDP: the condition numbers
/// of all four deterministic policies' value matrices, the value bound, and
/// the condition-number peak along a value-iteration trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenToyReport {
    /// `r_max / (1 - gamma)`.
    pub v_max: f64,
    pub policy_conds: Vec<PolicyCond>,
    pub vi_initial: Vec<f64>,
    pub vi_max_cond: f64,
    /// Iteration (0-based) at which the peak occurred.
    pub vi_max_cond_iteration: usize,
    pub vi_iterations: usize,
}

/// Computes [`GoldenToyReport`] from exact solves (no sampling involved).
pub fn golden_toy() -> Result<GoldenToyReport, HarnessError> {
    let mdp = toy_mdp();
    let mut policy_conds = Vec::new();
    for a0 in 0..2 {
        for a1 in 0..2 {
            let q = mdp.exact_policy_q(&Policy(vec![a0, a1]))?;
            policy_conds.push(PolicyCond {
                actions: vec![a0, a1],
                cond: q.cond_number().map_err(MdpError::from)?,
            });
        }
    }
    let v0 = vec![2.86, 2.98];
    let trace = mdp.value_iteration(&v0, 1e-10, 1000)?;
    let (vi_max_cond, vi_max_cond_iteration) = trace.max_cond();
    Ok(GoldenToyReport {
        v_max: mdp.value_bound(),
        policy_conds,
        vi_initial: v0,
        vi_max_cond,
        vi_max_cond_iteration,
        vi_iterations: trace.cond_numbers.len(),
    })
}

/// Median and quartiles of one metric over a record group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

fn metric_summary(values: &mut Vec<f64>) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(MetricSummary {
        n: values.len(),
        median: quantile(values, 0.5),
        q1: quantile(values, 0.25),
        q3: quantile(values, 0.75),
    })
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - h.floor()) * (sorted[hi] - sorted[lo])
}

/// Aggregates of one `(experiment, evaluator, budget)` group, computed over
/// each seed's final-epoch row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub experiment: String,
    pub evaluator: String,
    pub budget: u64,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub entrywise_error: Option<MetricSummary>,
    pub frobenius_error: Option<MetricSummary>,
    pub value_suboptimality: Option<MetricSummary>,
    pub condition_number: Option<MetricSummary>,
}

/// Paired one-sided sign test between two evaluators on entrywise error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignTestSummary {
    pub experiment: String,
    pub budget: u64,
    pub better: String,
    pub against: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided binomial tail `P(X >= wins)` under the fair-coin null.
    pub p_value: f64,
}

/// Aggregated view of a record set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub groups: Vec<GroupSummary>,
    pub sign_tests: Vec<SignTestSummary>,
    /// Experiment-specific named values (golden numbers, landscape info).
    pub extras: serde_json::Value,
}

/// One-sided sign-test p-value: the probability of at least `wins` successes
/// in `wins + losses` fair-coin trials (ties are excluded by the caller).
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln2 = std::f64::consts::LN_2;
    let mut p = 0.0;
    for k in wins..=n {
        // ln C(n, k) accumulated termwise keeps n in the hundreds exact
        // enough without big-integer arithmetic.
        let mut ln_c = 0.0;
        for i in 1..=k.min(n - k) {
            ln_c += ((n - k.min(n - k) + i) as f64).ln() - (i as f64).ln();
        }
        p += (ln_c - n as f64 * ln2).exp();
    }
    p.min(1.0)
}

/// Key of the final-epoch row of each `(seed, budget, evaluator)` series.
fn final_rows(records: &[ExperimentRecord]) -> Vec<&ExperimentRecord> {
    use std::collections::BTreeMap;
    let mut best: BTreeMap<(&str, u64, u64, &str), &ExperimentRecord> = BTreeMap::new();
    for r in records {
        let key = (r.experiment.as_str(), r.seed, r.budget, r.evaluator.as_str());
        match best.get(&key) {
            Some(prev) if prev.epoch >= r.epoch => {}
            _ => {
                best.insert(key, r);
            }
        }
    }
    best.into_values().collect()
}

/// Groups records and computes medians, quartiles, and the leveraged-versus-
/// uniform sign test. Uses each series' final epoch; failed rows count into
/// `n_failed` and stay out of the statistics.
pub fn summarize_records(records: &[ExperimentRecord]) -> Result<Summary, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    use std::collections::BTreeMap;
    let finals = final_rows(records);

    let mut grouped: BTreeMap<(String, String, u64), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in &finals {
        grouped
            .entry((r.experiment.clone(), r.evaluator.clone(), r.budget))
            .or_default()
            .push(r);
    }
    let mut groups = Vec::new();
    for ((experiment, evaluator, budget), rows) in &grouped {
        let ok: Vec<&&ExperimentRecord> = rows.iter().filter(|r| r.status == STATUS_OK).collect();
        let collect = |f: fn(&ExperimentRecord) -> Option<f64>| {
            let mut values: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            metric_summary(&mut values)
        };
        groups.push(GroupSummary {
            experiment: experiment.clone(),
            evaluator: evaluator.clone(),
            budget: *budget,
            n_seeds: rows.len(),
            n_failed: rows.len() - ok.len(),
            entrywise_error: collect(|r| r.entrywise_error),
            frobenius_error: collect(|r| r.frobenius_error),
            value_suboptimality: collect(|r| r.value_suboptimality),
            condition_number: collect(|r| r.condition_number),
        });
    }

    let leveraged = evaluator_name(EvaluatorKind::LmeLeveraged);
    let uniform = evaluator_name(EvaluatorKind::CurUniformAnchors);
    let mut sign_tests = Vec::new();
    let mut by_pair: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
    let mut paired: BTreeMap<(String, u64, u64), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in &finals {
        if r.status != STATUS_OK {
            continue;
        }
        let slot = if r.evaluator == leveraged {
            0
        } else if r.evaluator == uniform {
            1
        } else {
            continue;
        };
        let entry = paired.entry((r.experiment.clone(), r.seed, r.budget)).or_default();
        let value = r.entrywise_error;
        if slot == 0 {
            entry.0 = value;
        } else {
            entry.1 = value;
        }
    }
    for ((experiment, _seed, budget), (a, b)) in paired {
        if let (Some(a), Some(b)) = (a, b) {
            by_pair.entry((experiment, budget)).or_default().push((a, b));
        }
    }
    for ((experiment, budget), pairs) in by_pair {
        let wins = pairs.iter().filter(|(a, b)| a < b).count();
        let losses = pairs.iter().filter(|(a, b)| a > b).count();
        let ties = pairs.len() - wins - losses;
        sign_tests.push(SignTestSummary {
            experiment,
            budget,
            better: leveraged.clone(),
            against: uniform.clone(),
            wins,
            losses,
            ties,
            p_value: sign_test_p(wins, losses),
        });
    }

    Ok(Summary {
        schema: "leverq-summary v1".to_string(),
        groups,
        sign_tests,
        extras: serde_json::Value::Null,
    })
}

/// Recomputes a summary from a records CSV on disk.
pub fn summarize_file(path: &Path) -> Result<Summary, HarnessError> {
    let records = read_records_lenient(path)?;
    summarize_records(&records)
}

fn extras_for(config: &ExperimentConfig, records: &[ExperimentRecord]) -> serde_json::Value {
    match config.experiment {
        ExperimentKind::ToyGolden => match golden_toy() {
            Ok(report) => serde_json::to_value(report).unwrap_or(serde_json::Value::Null),
            Err(_) => serde_json::Value::Null,
        },
        ExperimentKind::CondLandscape => {
            let conds: Vec<f64> = records
                .iter()
                .filter_map(|r| r.condition_number)
                .filter(|c| c.is_finite())
                .collect();
            let max = conds.iter().fold(0.0_f64, |m, &c| m.max(c));
            serde_json::json!({
                "resolution": config.resolution,
                "value_bound": config.resolve_mdp(config.seeds[0]).map(|m| m.value_bound()).unwrap_or(f64::NAN),
                "max_finite_cond": max,
                "grid_points": records.len(),
            })
        }
        _ => serde_json::Value::Null,
    }
}
