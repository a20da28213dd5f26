//! Experiment runner behind the `layershap` binary: config loading,
//! training, attribution runs, ablation sweeps and cross-run reports.
//!
//! Every command writes the fully resolved config next to its outputs, and
//! every output is a pure function of that config and the checkpoint, so
//! reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, ablation_sweep, detect_cornerstones, group_summary, proportions, rank_agreement,
    top_k_share, AblationReport, AnalysisError, CornerstoneFinding, GroupSummary, RankAgreement,
    DEFAULT_COLLAPSE_EPSILON,
};
use crate::bridge::{Endpoint, ExternalOracle};
use crate::coalition::{
    roster, CoalitionGame, GameError, OracleError, PlayerId, PlayerKind, ValueOracle,
};
use crate::evaluator::ModelOracle;
use crate::model::{
    load_checkpoint, save_checkpoint, train, AblationMask, ModelConfig, ModelError, TrainConfig,
    TrainError,
};
use crate::shapley::{
    build_plan, closed_form_sample_count, estimate_shapley, exact_shapley_with_cap, ShapleyError,
    ShapleyMode, ShapleyResult, DEFAULT_EXACT_CAP, DEFAULT_MAX_REMOVED,
};
use crate::tasks::{evaluate, TaskError, TaskSpec};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const SHAPLEY_FILE: &str = "shapley.csv";
pub const SHAPLEY_EXACT_FILE: &str = "shapley_exact.csv";
pub const SHAPLEY_ESTIMATE_FILE: &str = "shapley_estimate.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CACHE_FILE: &str = "cache.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_MD_FILE: &str = "report.md";

const SAMPLING_NOTE: &str = "plan_size counts the enumerated contiguous removal windows of size 1..=max_removed; \
closed_form_sample_count evaluates (N+N_min)(N-N_min)/2 with N_min = N - max_removed, which is max_removed/2 \
smaller. The enumerated plan is what gets evaluated.";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("report: {0}")]
    Report(String),
}

impl ExperimentError {
    /// 0 success, 1 I/O, 2 config, 3 oracle or evaluation, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use ExperimentError as E;
        match self {
            E::Config(_) | E::Parse { .. } | E::Report(_) => 2,
            E::Oracle(_) => 3,
            E::Train(TrainError::Diverged { .. }) => 4,
            E::Train(TrainError::NoSteps | TrainError::Config(_)) => 2,
            E::Train(TrainError::Model(e)) | E::Model(e) => model_code(e),
            E::Train(TrainError::Task(e)) | E::Task(e) => task_code(e),
            E::Game(e) | E::Shapley(ShapleyError::Game(e)) => game_code(e),
            E::Analysis(AnalysisError::Game(e)) => game_code(e),
            E::Shapley(ShapleyError::NoPairs { .. }) => 4,
            E::Shapley(_) => 2,
            E::Analysis(AnalysisError::AllZero) => 4,
            E::Analysis(AnalysisError::BadK { .. } | AnalysisError::RosterMismatch { .. }) => 2,
            E::Analysis(AnalysisError::PlayerMismatch { .. }) => 2,
            E::Analysis(_) | E::Io { .. } => 1,
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) => 2,
        ModelError::Io(_) | ModelError::Checkpoint(_) => 1,
        _ => 3,
    }
}

fn task_code(e: &TaskError) -> i32 {
    match e {
        TaskError::Spec(_)
        | TaskError::VocabMismatch { .. }
        | TaskError::SequenceTooLong { .. } => 2,
        TaskError::Model(e) => model_code(e),
        TaskError::Csv(_) => 1,
    }
}

fn game_code(e: &GameError) -> i32 {
    match e {
        GameError::Evaluation { .. } => 3,
        GameError::FingerprintMismatch { .. } => 2,
        GameError::Io(_) | GameError::Cache(_) => 1,
        _ => 2,
    }
}

/// Which value function answers coalition queries.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OracleSpec {
    /// The toy transformer loaded from the checkpoint.
    #[default]
    Builtin,
    /// `external:HOST:PORT` or `external:exec:COMMAND`.
    External(String),
}

impl std::str::FromStr for OracleSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "builtin" {
            return Ok(Self::Builtin);
        }
        match s.strip_prefix("external:") {
            Some(addr) => {
                Endpoint::parse(addr).map_err(|e| e.to_string())?;
                Ok(Self::External(addr.to_owned()))
            }
            None => Err(format!(
                "oracle must be `builtin` or `external:ADDR`, got `{s}`"
            )),
        }
    }
}

impl TryFrom<String> for OracleSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<OracleSpec> for String {
    fn from(o: OracleSpec) -> String {
        match o {
            OracleSpec::Builtin => "builtin".into(),
            OracleSpec::External(addr) => format!("external:{addr}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Exact,
    Estimate,
    /// Exact when the player count is within the cap, plus the estimate.
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapleySettings {
    pub mode: RunMode,
    pub max_removed: usize,
    pub exact_cap: usize,
    /// Part of the cache key.
    pub seed: u64,
}

impl Default for ShapleySettings {
    fn default() -> Self {
        Self {
            mode: RunMode::Both,
            max_removed: DEFAULT_MAX_REMOVED,
            exact_cap: DEFAULT_EXACT_CAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub collapse_epsilon: f64,
    /// Minimum share for a cornerstone; `null` means `2 / n_players`.
    pub share_threshold: Option<f64>,
    pub top_k: Vec<usize>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            collapse_epsilon: DEFAULT_COLLAPSE_EPSILON,
            share_threshold: None,
            top_k: vec![3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model name used to group runs in reports.
    pub label: String,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub training: TrainConfig,
    pub shapley: ShapleySettings,
    pub analysis: AnalysisSettings,
    pub output_dir: PathBuf,
    pub oracle: OracleSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "toy".into(),
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            training: TrainConfig::default(),
            shapley: ShapleySettings::default(),
            analysis: AnalysisSettings::default(),
            output_dir: PathBuf::from("runs/default"),
            oracle: OracleSpec::Builtin,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.label.trim().is_empty() {
            return Err(ExperimentError::Config("label must not be empty".into()));
        }
        self.model.validate()?;
        self.task.validate()?;
        if self.task.vocab_size > self.model.vocab_size {
            return Err(TaskError::VocabMismatch {
                model: self.model.vocab_size,
                task: self.task.vocab_size,
            }
            .into());
        }
        if self.task.seq_len > self.model.max_seq_len {
            return Err(TaskError::SequenceTooLong {
                seq_len: self.task.seq_len,
                max: self.model.max_seq_len,
            }
            .into());
        }
        if self.training.steps == 0 {
            return Err(ExperimentError::Config(
                "training.steps must be at least 1".into(),
            ));
        }
        if self.training.batch_size == 0 {
            return Err(ExperimentError::Config(
                "training.batch_size must be at least 1".into(),
            ));
        }
        if !(self.training.lr > 0.0 && self.training.lr.is_finite()) {
            return Err(ExperimentError::Config(
                "training.lr must be positive".into(),
            ));
        }
        let n = self.model.n_sublayers();
        if self.shapley.mode != RunMode::Exact && !(1..n).contains(&self.shapley.max_removed) {
            return Err(ExperimentError::Config(format!(
                "shapley.max_removed must be in 1..{n} for {n} players, got {}",
                self.shapley.max_removed
            )));
        }
        let eps = self.analysis.collapse_epsilon;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(ExperimentError::Config(
                "analysis.collapse_epsilon must be >= 0".into(),
            ));
        }
        if let Some(t) = self.analysis.share_threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(ExperimentError::Config(
                    "analysis.share_threshold must be in [0, 1)".into(),
                ));
            }
        }
        if let Some(&k) = self.analysis.top_k.iter().find(|&&k| k == 0 || k > n) {
            return Err(ExperimentError::Config(format!(
                "analysis.top_k entry {k} outside 1..={n}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn players(&self) -> Vec<PlayerId> {
        roster(self.model.n_sublayers(), PlayerKind::FeedForward)
    }
}

/// Parses and validates a config file. Parse errors carry line and column.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = read_to_string(path)?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Parse {
            path: path.to_owned(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_to_string(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(|source| ExperimentError::Io {
        path: path.to_owned(),
        source,
    })
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<&Path, ExperimentError> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_owned(),
        source,
    })?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json())?;
    Ok(dir)
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summary serialises");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: String,
    pub steps: usize,
    pub n_params: usize,
    pub final_loss: f64,
    pub eval_accuracy: f64,
    pub n_eval: usize,
    pub random_baseline: f64,
}

/// Trains the model and writes the checkpoint, loss curve and summary.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary, ExperimentError> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let outcome = train(&cfg.model, &cfg.task, &cfg.training)?;
    let mut log = String::from("step,loss\n");
    for p in &outcome.curve {
        writeln!(log, "{},{}", p.step, p.loss).expect("string write");
    }
    write_file(&dir.join(TRAIN_LOG_FILE), log)?;
    save_checkpoint(&outcome.params, &dir.join(CHECKPOINT_FILE))?;

    let n = cfg.model.n_sublayers();
    let eval = evaluate(&outcome.params, &cfg.task, &AblationMask::full(n))?;
    let summary = TrainSummary {
        task: cfg.task.id(),
        steps: cfg.training.steps,
        n_params: outcome.params.n_params(),
        final_loss: outcome.curve.last().map_or(f64::NAN, |p| p.loss),
        eval_accuracy: eval.accuracy,
        n_eval: eval.n_examples,
        random_baseline: eval.baseline,
    };
    write_file(&dir.join(TRAIN_SUMMARY_FILE), to_json_line(&summary))?;
    info!(
        "trained {}: eval accuracy {}",
        summary.task, summary.eval_accuracy
    );
    Ok(summary)
}

fn build_game(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<CoalitionGame, ExperimentError> {
    let n = cfg.model.n_sublayers();
    let oracle: Box<dyn ValueOracle> = match &cfg.oracle {
        OracleSpec::Builtin => {
            let default = cfg.output_dir.join(CHECKPOINT_FILE);
            let path = checkpoint.unwrap_or(&default);
            let params = load_checkpoint(path).map_err(|e| match e {
                ModelError::Io(source) => ExperimentError::Io {
                    path: path.to_owned(),
                    source,
                },
                other => other.into(),
            })?;
            if params.config != cfg.model {
                return Err(ExperimentError::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            Box::new(ModelOracle::new(&params, &cfg.task)?)
        }
        OracleSpec::External(addr) => Box::new(ExternalOracle::connect(
            Endpoint::parse(addr)?,
            n,
            cfg.task.id(),
            cfg.task.n_eval,
            Some(Duration::from_secs(600)),
        )?),
    };
    let game = CoalitionGame::from_boxed(oracle, cfg.shapley.seed)?;
    let cache = cfg.output_dir.join(CACHE_FILE);
    if cache.exists() {
        let n = game.load_cache(&cache)?;
        info!("loaded {n} cached coalition values");
    }
    Ok(game)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKShare {
    pub k: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub n_players: usize,
    pub max_removed: usize,
    pub plan_size: usize,
    pub closed_form_sample_count: u64,
    pub note: String,
}

/// Everything `summary.json` holds for one attribution run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub task: String,
    pub n_players: usize,
    pub players: Vec<String>,
    pub random_baseline: f64,
    /// Mode of the attribution that `shapley.csv`, shares and the
    /// cornerstone set are based on.
    pub primary: ShapleyMode,
    pub shares: Vec<f64>,
    pub top_k: Vec<TopKShare>,
    pub cornerstone: CornerstoneFinding,
    pub groups: GroupSummary,
    pub rank_agreement: Option<RankAgreement>,
    pub sampling: Option<SamplingSummary>,
    pub exact: Option<ShapleyResult>,
    pub estimate: Option<ShapleyResult>,
    pub ablation: AblationReport,
    pub config: ExperimentConfig,
}

#[derive(Debug)]
pub struct ShapleyRun {
    pub summary: RunSummary,
    /// Oracle calls made by this invocation; zero on a warm cache.
    pub oracle_evaluations: usize,
}

/// Exact and/or window-estimated Shapley values, the ablation sweep, and
/// the derived analysis.
pub fn run_shapley(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<ShapleyRun, ExperimentError> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let game = build_game(cfg, checkpoint)?;
    let players = cfg.players();
    let n = players.len();

    let exact = match cfg.shapley.mode {
        RunMode::Exact => Some(exact_shapley_with_cap(&game, cfg.shapley.exact_cap)?),
        RunMode::Both if n <= cfg.shapley.exact_cap => {
            Some(exact_shapley_with_cap(&game, cfg.shapley.exact_cap)?)
        }
        _ => None,
    };
    let (estimate, sampling) = if cfg.shapley.mode == RunMode::Exact {
        (None, None)
    } else {
        let plan = build_plan(n, cfg.shapley.max_removed)?;
        let sampling = SamplingSummary {
            n_players: n,
            max_removed: plan.max_removed(),
            plan_size: plan.len(),
            closed_form_sample_count: closed_form_sample_count(n, n - plan.max_removed())?,
            note: SAMPLING_NOTE.into(),
        };
        (Some(estimate_shapley(&game, &plan)?), Some(sampling))
    };
    let ablation = ablation_sweep(
        &game,
        &players,
        cfg.task.baseline(),
        cfg.analysis.collapse_epsilon,
    )?;
    game.save_cache(&dir.join(CACHE_FILE))?;

    let (primary, main) = match (&exact, &estimate) {
        (Some(e), _) => (ShapleyMode::Exact, e),
        (None, Some(e)) => (ShapleyMode::WindowEstimate, e),
        (None, None) => unreachable!("every mode computes at least one attribution"),
    };
    let shares = proportions(main)?.shares;
    let top_k = cfg
        .analysis
        .top_k
        .iter()
        .map(|&k| {
            Ok(TopKShare {
                k,
                share: top_k_share(main, k)?,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let cornerstone = detect_cornerstones(main, &ablation, cfg.analysis.share_threshold)?;
    let groups = group_summary(main, &ablation, &cornerstone)?;
    let agreement = match (&exact, &estimate) {
        (Some(a), Some(b)) => Some(rank_agreement(&a.values, &b.values)),
        _ => None,
    };

    let mut buf = Vec::new();
    analysis::write_shapley_csv(main, &players, &mut buf)?;
    write_file(&dir.join(SHAPLEY_FILE), &buf)?;
    for (result, file) in [
        (&exact, SHAPLEY_EXACT_FILE),
        (&estimate, SHAPLEY_ESTIMATE_FILE),
    ] {
        if let Some(r) = result {
            buf.clear();
            analysis::write_shapley_csv(r, &players, &mut buf)?;
            write_file(&dir.join(file), &buf)?;
        }
    }
    buf.clear();
    ablation.write_csv(&mut buf)?;
    write_file(&dir.join(ABLATION_FILE), &buf)?;

    let summary = RunSummary {
        label: cfg.label.clone(),
        task: cfg.task.id(),
        n_players: n,
        players: players.iter().map(ToString::to_string).collect(),
        random_baseline: cfg.task.baseline(),
        primary,
        shares,
        top_k,
        cornerstone,
        groups,
        rank_agreement: agreement,
        sampling,
        exact,
        estimate,
        ablation,
        config: cfg.clone(),
    };
    write_file(&dir.join(SUMMARY_FILE), to_json_line(&summary))?;
    Ok(ShapleyRun {
        summary,
        oracle_evaluations: game.oracle_evaluations(),
    })
}

#[derive(Debug)]
pub struct AblateRun {
    pub report: AblationReport,
    pub oracle_evaluations: usize,
}

/// Leave-one-out sweep only; shares the cache with `run_shapley`.
pub fn run_ablate(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<AblateRun, ExperimentError> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let game = build_game(cfg, checkpoint)?;
    let report = ablation_sweep(
        &game,
        &cfg.players(),
        cfg.task.baseline(),
        cfg.analysis.collapse_epsilon,
    )?;
    game.save_cache(&dir.join(CACHE_FILE))?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_file(&dir.join(ABLATION_FILE), &buf)?;
    Ok(AblateRun {
        report,
        oracle_evaluations: game.oracle_evaluations(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub run: String,
    pub task: String,
    pub top_k: Vec<TopKShare>,
    pub cornerstone: Vec<String>,
    pub groups: GroupSummary,
}

/// One model's runs across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub label: String,
    pub n_players: usize,
    pub tasks: Vec<TaskEntry>,
    /// Top-k shares averaged over tasks, for the k values every run has.
    pub mean_top_k: Vec<TopKShare>,
    /// Players flagged as cornerstone in every task.
    pub consistent_cornerstone: Vec<String>,
    /// Per-group drops averaged over the tasks where the group is present.
    pub mean_groups: GroupSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub models: Vec<ModelReport>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{:.1}%", 100.0 * x))
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let common_k: Vec<usize> = self
            .models
            .first()
            .map(|m| m.mean_top_k.iter().map(|t| t.k).collect())
            .unwrap_or_default();
        let common_k: Vec<usize> = common_k
            .into_iter()
            .filter(|k| {
                self.models
                    .iter()
                    .all(|m| m.mean_top_k.iter().any(|t| t.k == *k))
            })
            .collect();

        md.push_str("## Shapley share of the top layers\n\n| Model |");
        for k in &common_k {
            write!(md, " Top {k} Layers |").unwrap();
        }
        match common_k.first() {
            Some(k) if common_k.len() > 1 => write!(md, " Outside Top {k} |").unwrap(),
            _ => md.push_str(" Other Layers |"),
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(common_k.len() + 1));
        md.push('\n');
        for m in &self.models {
            write!(md, "| {} |", m.label).unwrap();
            let share = |k: usize| m.mean_top_k.iter().find(|t| t.k == k).map(|t| t.share);
            for &k in &common_k {
                write!(md, " {} |", pct(share(k))).unwrap();
            }
            let other = common_k.first().and_then(|&k| share(k)).map(|s| 1.0 - s);
            writeln!(md, " {} |", pct(other)).unwrap();
        }

        md.push_str("\n## Cornerstone layers\n\n| Model | Cornerstone Layers |\n|---|---|\n");
        for m in &self.models {
            let set = if m.consistent_cornerstone.is_empty() {
                "none".to_owned()
            } else {
                m.consistent_cornerstone.join(", ")
            };
            writeln!(md, "| {} | {set} |", m.label).unwrap();
        }

        md.push_str("\n## Accuracy drop after single-layer ablation\n\n| Model | C Layers | NC Layers |\n|---|---|---|\n");
        for m in &self.models {
            writeln!(
                md,
                "| {} | {} | {} |",
                m.label,
                pct(m.mean_groups.cornerstone_mean_drop),
                pct(m.mean_groups.other_mean_drop)
            )
            .unwrap();
        }

        let mut tasks: Vec<&str> = Vec::new();
        for t in self.models.iter().flat_map(|m| &m.tasks) {
            if !tasks.contains(&t.task.as_str()) {
                tasks.push(&t.task);
            }
        }
        md.push_str("\n## Non-cornerstone accuracy drop per task\n\n| Task |");
        for m in &self.models {
            write!(md, " {} |", m.label).unwrap();
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(self.models.len()));
        md.push('\n');
        for task in tasks {
            write!(md, "| {task} |").unwrap();
            for m in &self.models {
                let v = m
                    .tasks
                    .iter()
                    .find(|t| t.task == task)
                    .and_then(|t| t.groups.other_mean_drop);
                write!(md, " {} |", pct(v)).unwrap();
            }
            md.push('\n');
        }
        md
    }
}

/// Reads `summary.json` from each run directory.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<(String, RunSummary)>, ExperimentError> {
    dirs.iter()
        .map(|d| {
            let path = d.join(SUMMARY_FILE);
            let text = read_to_string(&path)?;
            let summary = serde_json::from_str(&text).map_err(|e| ExperimentError::Parse {
                path: path.clone(),
                message: format!("line {} column {}: {e}", e.line(), e.column()),
            })?;
            Ok((d.display().to_string(), summary))
        })
        .collect()
}

/// Groups runs by model label; runs of one model must share the roster.
pub fn build_report(runs: &[(String, RunSummary)]) -> Result<Report, ExperimentError> {
    if runs.is_empty() {
        return Err(ExperimentError::Report("no runs given".into()));
    }
    let mut models: Vec<(ModelReport, Vec<&RunSummary>)> = Vec::new();
    for (name, run) in runs {
        let idx = match models.iter().position(|(m, _)| m.label == run.label) {
            Some(i) => i,
            None => {
                models.push((
                    ModelReport {
                        label: run.label.clone(),
                        n_players: run.n_players,
                        tasks: Vec::new(),
                        mean_top_k: Vec::new(),
                        consistent_cornerstone: Vec::new(),
                        mean_groups: analysis::average_groups(&[]),
                    },
                    Vec::new(),
                ));
                models.len() - 1
            }
        };
        let (model, members) = &mut models[idx];
        if let Some(first) = members.first() {
            if first.players != run.players {
                return Err(ExperimentError::Report(format!(
                    "runs `{}` ({} players) and `{name}` ({} players) of model `{}` have different player sets",
                    model.tasks[0].run, first.n_players, run.n_players, model.label
                )));
            }
        }
        model.tasks.push(TaskEntry {
            run: name.clone(),
            task: run.task.clone(),
            top_k: run.top_k.clone(),
            cornerstone: run.cornerstone.names.clone(),
            groups: run.groups.clone(),
        });
        members.push(run);
    }

    let models = models
        .into_iter()
        .map(|(mut m, members)| {
            let ks: Vec<usize> = members[0]
                .top_k
                .iter()
                .map(|t| t.k)
                .filter(|k| members.iter().all(|r| r.top_k.iter().any(|t| t.k == *k)))
                .collect();
            m.mean_top_k = ks
                .into_iter()
                .map(|k| {
                    let sum: f64 = members
                        .iter()
                        .map(|r| r.top_k.iter().find(|t| t.k == k).expect("k present").share)
                        .sum();
                    TopKShare {
                        k,
                        share: sum / members.len() as f64,
                    }
                })
                .collect();
            m.consistent_cornerstone = members[0]
                .players
                .iter()
                .filter(|p| members.iter().all(|r| r.cornerstone.names.contains(p)))
                .cloned()
                .collect();
            let groups: Vec<GroupSummary> = members.iter().map(|r| r.groups.clone()).collect();
            m.mean_groups = analysis::average_groups(&groups);
            m
        })
        .collect();
    Ok(Report { models })
}

/// Merges run directories into `report.json` and `report.md` under `out`.
pub fn run_report(dirs: &[PathBuf], out: &Path) -> Result<Report, ExperimentError> {
    let runs = load_runs(dirs)?;
    let report = build_report(&runs)?;
    fs::create_dir_all(out).map_err(|source| ExperimentError::Io {
        path: out.to_owned(),
        source,
    })?;
    write_file(&out.join(REPORT_JSON_FILE), to_json_line(&report))?;
    write_file(&out.join(REPORT_MD_FILE), report.to_markdown())?;
    Ok(report)
}
