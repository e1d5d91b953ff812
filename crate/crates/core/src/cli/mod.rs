//! Command-line surface: run configuration, subcommands and exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{self, EvalModels, EvalOptions, FlopsQuery, Variant};
use crate::hypernet::FusionLayers;
use crate::model::{Checkpoint, ModelConfig, ModelError};
use crate::tasks::{build_suite, FormatMode, Split, TaskError, DEFAULT_TRAIN_TASKS};
use crate::tensor::{check_all_ops, GradCheckConfig, GradCheckReport, TensorError};
use crate::training::{
    self, backbone_hash, base_models, load_models, load_teacher, MetricsLog, PipelineContext, TeacherRegistry,
    TrainConfig, TrainError, METRICS_FILE, TAGI_FILE,
};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const NUMERICAL: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Numerical(_) => exit::NUMERICAL,
            CliError::Io(_) => exit::IO,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            ModelError::Io(_) | ModelError::Format(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Io(io) => io.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Task(t) => t.into(),
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Io(io) => io.into(),
        }
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        match e {
            eval::EvalError::Model(m) => m.into(),
            eval::EvalError::Task(t) => t.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_train_tasks: usize,
    pub mode: FormatMode,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train_tasks: DEFAULT_TRAIN_TASKS,
            mode: FormatMode::Def,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub corpus_seed: u64,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            corpus_seed: 0,
        }
    }
}

/// The JSON run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub suite: SuiteConfig,
    pub paths: PathsConfig,
}

/// Replaces every float by its 12-significant-digit rendering so the hash
/// ignores differences below that precision.
fn canonicalize(v: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            Value::String(format!("{:.11e}", n.as_f64().unwrap_or(f64::NAN)))
        }
        Value::Array(xs) => Value::Array(xs.iter().map(canonicalize).collect()),
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), canonicalize(v))).collect()),
        other => other.clone(),
    }
}

/// SHA-256 of the canonical (sorted-key, float-rounded) JSON of `value`.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serialises");
    let text = serde_json::to_string(&canonicalize(&v)).expect("value serialises");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl RunConfig {
    /// Parses a JSON document, reporting the offending key path on schema
    /// errors and the line on syntax errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_syntax() || inner.is_eof() {
                CliError::Usage(format!("config is not valid JSON: {inner}"))
            } else {
                CliError::Usage(format!("invalid config at `{path}`: {inner}"))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Hash of everything except `paths.out_dir`, so identical runs in
    /// different directories share it.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(paths) = v.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("out_dir");
        }
        canonical_hash(&v)
    }

    pub fn model_hash(&self) -> String {
        canonical_hash(&self.model)
    }

    pub fn context(&self) -> Result<PipelineContext> {
        self.validate()?;
        Ok(PipelineContext {
            model: self.model.clone(),
            train: self.train.clone(),
            suite: build_suite(self.suite.seed, self.suite.n_train_tasks)?,
            mode: self.suite.mode,
            corpus_seed: self.paths.corpus_seed,
            out_dir: self.paths.out_dir.clone(),
            config_hash: self.config_hash(),
            model_hash: self.model_hash(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "tagi", version, about = "Instruction-to-adapter hypernetwork training and evaluation")]
pub struct Cli {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `paths.out_dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Overrides `model.fusion_layers` (`all` or `last`).
    #[arg(long, global = true)]
    pub fusion_layers: Option<FusionLayers>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain backbone and hypernetwork on corpus windows.
    Pretrain,
    /// Train one teacher adapter per meta-train task.
    TrainTeachers {
        /// Retrain and overwrite existing teacher files.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Distillation finetuning of the hypernetwork.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on one split and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every op and of the finetuning objective.
    Gradcheck(GradcheckArgs),
    /// Analytical FLOPs of standard versus instruction-once processing.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Ablation {
    /// Start from a fresh backbone instead of the pretraining checkpoint.
    #[arg(long)]
    pub no_pretrain: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub ablation: Ablation,
    /// Drop instruction fusion.
    #[arg(long)]
    pub no_fusion: bool,
    /// Drop the distillation term.
    #[arg(long)]
    pub no_kl: bool,
    /// Drop the parameter-alignment term.
    #[arg(long)]
    pub no_ins: bool,
    /// Drop the target cross-entropy term.
    #[arg(long)]
    pub no_pred: bool,
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Continue from the saved finetune state.
    #[arg(long)]
    pub resume: bool,
    /// Save the finetune state after this many steps and stop.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Checkpoint to evaluate (default: `<out_dir>/tagi.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "student")]
    pub variant: Variant,
    /// Overrides `suite.mode`.
    #[arg(long)]
    pub mode: Option<FormatMode>,
    /// Evaluate without instruction fusion.
    #[arg(long)]
    pub no_fusion: bool,
    #[arg(long)]
    pub max_instances: Option<usize>,
    #[arg(long, default_value_t = 24)]
    pub max_new_tokens: usize,
    /// Accept a checkpoint whose model section differs from the config.
    #[arg(long)]
    pub allow_mismatch: bool,
    /// Report path (default: `<out_dir>/eval_<split>_<variant>.json`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Sampled hypernetwork parameters for the objective check.
    #[arg(long, default_value_t = 64)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// Model parameter count.
    #[arg(value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub n_params: u64,
    /// Instances per task.
    #[arg(value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Instruction length in tokens.
    #[arg(value_parser = clap::value_parser!(u64).range(1..))]
    pub t: u64,
    /// Input length in tokens.
    #[arg(value_parser = clap::value_parser!(u64).range(1..))]
    pub i: u64,
    /// Also write the numbers as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Resolves the run configuration from `--config`, `--out-dir` and the
/// `TAGI_SEED` environment variable.
pub fn resolve_config(cli: &Cli, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    if let Some(f) = cli.fusion_layers {
        cfg.model.fusion_layers = f;
    }
    if let Some(s) = env_seed {
        cfg.train.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("TAGI_SEED must be an unsigned integer, got {s:?}")))?;
    }
    Ok(cfg)
}

fn apply_ablation(cfg: &mut RunConfig, a: &Ablation) {
    if a.no_pretrain {
        cfg.train.pretrain_enabled = false;
    }
}

/// Applies finetune flags to the configuration (they become part of the
/// config hash of the outputs).
pub fn apply_finetune_flags(cfg: &mut RunConfig, a: &FinetuneArgs) -> Result<()> {
    apply_ablation(cfg, &a.ablation);
    let t = &mut cfg.train;
    if a.no_fusion {
        t.fusion_enabled = false;
    }
    if a.no_kl {
        t.use_kl = false;
    }
    if a.no_ins {
        t.use_ins = false;
    }
    if a.no_pred {
        t.use_pred = false;
    }
    if let Some(l) = a.lambda1 {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(CliError::Usage(format!("--lambda1 must be a finite value >= 0, got {l}")));
        }
        t.lambda1 = l;
    }
    Ok(())
}

fn open_log(ctx: &PipelineContext) -> Result<MetricsLog> {
    fs::create_dir_all(&ctx.out_dir)?;
    Ok(MetricsLog::open(&ctx.path(METRICS_FILE), ctx.train.log_wall_time)?)
}

/// Loads every meta-train teacher from disk and checks it was trained on
/// `backbone_hash`.
pub fn load_registry(ctx: &PipelineContext, bhash: &str) -> Result<TeacherRegistry> {
    let mut reg = TeacherRegistry::default();
    for task in &ctx.suite.meta_train {
        let path = ctx.teacher_path(task.id());
        if !path.exists() {
            return Err(CliError::Config(format!(
                "teacher {} missing; run train-teachers with the same configuration first",
                path.display()
            )));
        }
        let (entry, meta) = load_teacher(&path, &ctx.model)?;
        let thash = ctx.teacher_hash();
        if meta.get("backbone_hash").and_then(|v| v.as_str()) != Some(bhash)
            || meta.get("teacher_hash").and_then(|v| v.as_str()) != Some(thash.as_str())
        {
            return Err(CliError::Config(format!(
                "{} was trained on a different backbone or with different teacher settings; rerun train-teachers with the same flags",
                path.display()
            )));
        }
        reg.insert(entry);
    }
    Ok(reg)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let ctx = cfg.context()?;
    let mut log = open_log(&ctx)?;
    training::stage_pretrain(&ctx, &mut log)?;
    log::info!("wrote {}", ctx.path(training::PRETRAIN_FILE).display());
    Ok(())
}

pub fn cmd_train_teachers(cfg: &RunConfig, force: bool) -> Result<()> {
    let ctx = cfg.context()?;
    let mut log = open_log(&ctx)?;
    let (mut backbone, _) = base_models(&ctx)?;
    let reg = training::stage_teachers(&ctx, &mut backbone, force, &mut log)?;
    log::info!("{} teachers in {}", reg.entries.len(), ctx.path(training::TEACHER_DIR).display());
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, args: &FinetuneArgs) -> Result<()> {
    let ctx = cfg.context()?;
    let mut log = open_log(&ctx)?;
    let (mut backbone, hyper) = base_models(&ctx)?;
    let reg = if ctx.train.use_kl || ctx.train.use_ins {
        load_registry(&ctx, &backbone_hash(&backbone))?
    } else {
        TeacherRegistry::default()
    };
    training::stage_finetune(&ctx, &mut backbone, hyper, &reg, args.resume, args.stop_after, &mut log)?;
    if args.stop_after.is_none() {
        log::info!("wrote {}", ctx.path(TAGI_FILE).display());
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<eval::EvalReport> {
    let ctx = cfg.context()?;
    let path = args.checkpoint.clone().unwrap_or_else(|| ctx.path(TAGI_FILE));
    let ck = Checkpoint::load(&path)?;
    let stored = ck.meta.get("model_hash").and_then(|v| v.as_str()).unwrap_or("<none>");
    if stored != ctx.model_hash {
        if !args.allow_mismatch {
            return Err(CliError::Config(format!(
                "{} has model_hash {stored}, configuration has {}; pass --allow-mismatch to override",
                path.display(),
                ctx.model_hash
            )));
        }
        log::warn!("model hash mismatch accepted for {}", path.display());
    }
    let (backbone, hyper) = load_models(&ck, &ctx.model)?;
    let fusion = ck.meta.get("fusion_enabled").and_then(|v| v.as_bool()).unwrap_or(ctx.train.fusion_enabled);
    let teachers = if args.variant == Variant::Teacher {
        Some(load_registry(&ctx, &backbone_hash(&backbone))?)
    } else {
        None
    };
    let opts = EvalOptions {
        mode: args.mode.unwrap_or(ctx.mode),
        variant: args.variant,
        fusion: fusion && !args.no_fusion,
        max_new_tokens: args.max_new_tokens,
        max_instances: args.max_instances,
    };
    let models = EvalModels {
        backbone: &backbone,
        hyper: &hyper,
        teachers: teachers.as_ref(),
    };
    let tasks = ctx.suite.split(args.split);
    let report = eval::evaluate_split(models, tasks, args.split, &opts, &ctx.config_hash)?;
    let out = args.output.clone().unwrap_or_else(|| {
        let v = serde_json::to_value(args.variant).ok();
        let name = v.as_ref().and_then(|v| v.as_str()).unwrap_or("student");
        ctx.path(&format!("eval_{}_{name}.json", args.split))
    });
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, serde_json::to_string_pretty(&report).expect("report serialises"))?;
    for t in &report.per_task {
        log::info!("{}: rouge_l {:.4} exact_match {:.4}", t.task_id, t.rouge_l, t.exact_match);
    }
    log::info!(
        "aggregate rouge_l {:.4} exact_match {:.4}; wrote {}",
        report.aggregate.rouge_l,
        report.aggregate.exact_match,
        out.display()
    );
    Ok(report)
}

/// Runs every op check and the objective check; returns the reports and
/// the rendered table.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(Vec<GradCheckReport>, String)> {
    if !(args.tol > 0.0 && args.step > 0.0) {
        return Err(CliError::Usage("--tol and --step must be positive".into()));
    }
    let gc = GradCheckConfig {
        h: args.step,
        tol: args.tol,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let mut reports = check_all_ops(&gc)?;
    reports.push(training::objective_gradcheck(args.coords, &gc)?);
    let mut table = format!("{:<24} {:>7} {:>12} {:>16} {:>16}  {}\n", "check", "coords", "worst_rel", "analytic", "numeric", "result");
    for r in &reports {
        let w = r.worst();
        table.push_str(&format!(
            "{:<24} {:>7} {:>12.3e} {:>16.9e} {:>16.9e}  {}\n",
            r.name,
            r.coords.len(),
            w.map_or(0.0, |c| c.rel_error),
            w.map_or(0.0, |c| c.analytic),
            w.map_or(0.0, |c| c.numeric),
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    Ok((reports, table))
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsTable {
    pub query: FlopsQuery,
    pub standard: u128,
    pub tagi: u128,
    pub ratio: f64,
}

pub fn cmd_flops(args: &FlopsArgs) -> Result<(FlopsTable, String)> {
    let q = FlopsQuery {
        n_params: args.n_params,
        n: args.n,
        t: args.t,
        i: args.i,
    };
    let (s, g) = (eval::flops_standard(&q), eval::flops_tagi(&q));
    let table = FlopsTable {
        query: q,
        standard: s,
        tagi: g,
        ratio: g as f64 / s as f64,
    };
    let text = format!(
        "{:<10} {:>10} {:>10} {:>10} {:>22} {:>22} {:>8}\n{:<10} {:>10} {:>10} {:>10} {:>22} {:>22} {:>8.4}\n",
        "N", "n", "t", "i", "flops_standard", "flops_tagi", "ratio", q.n_params, q.n, q.t, q.i, s, g, table.ratio
    );
    if let Some(p) = &args.json {
        fs::write(p, serde_json::to_string_pretty(&table).expect("table serialises"))?;
    }
    Ok((table, text))
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli, env_seed: Option<&str>) -> i32 {
    match dispatch(cli, env_seed) {
        Ok(()) => exit::OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, env_seed: Option<&str>) -> Result<()> {
    match &cli.command {
        Command::Gradcheck(a) => {
            let (reports, table) = cmd_gradcheck(a)?;
            print!("{table}");
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Flops(a) => {
            let (_, text) = cmd_flops(a)?;
            print!("{text}");
            Ok(())
        }
        Command::Pretrain => cmd_pretrain(&resolve_config(&cli, env_seed)?),
        Command::TrainTeachers { force, ablation } => {
            let mut cfg = resolve_config(&cli, env_seed)?;
            apply_ablation(&mut cfg, ablation);
            cmd_train_teachers(&cfg, *force)
        }
        Command::Finetune(a) => {
            let mut cfg = resolve_config(&cli, env_seed)?;
            apply_finetune_flags(&mut cfg, a)?;
            cmd_finetune(&cfg, a)
        }
        Command::Evaluate(a) => cmd_evaluate(&resolve_config(&cli, env_seed)?, a).map(|_| ()),
    }
    .inspect_err(|_| {
        let _ = std::io::stdout().flush();
    })
}

#[cfg(test)]
mod tests;
