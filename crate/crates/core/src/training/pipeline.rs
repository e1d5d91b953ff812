//! Stage drivers: pretraining, teacher training and finetuning, each
//! writing a checkpoint and appending to a shared metrics CSV.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{
    lr_at, pretrain_batch, pretrain_step, train_teacher, AdamW, Finetuner, LossBreakdown, Result, TeacherEntry,
    TeacherRegistry, TrainConfig, TrainError,
};
use crate::hypernet::Hypernetwork;
use crate::model::{Checkpoint, ModelConfig, ModelError, ParamSet, TaskAdapterSet, TransformerWeights};
use crate::tasks::{FormatMode, TaskSuite};
use crate::tensor::{SeededRng, Tensor};

pub const PRETRAIN_FILE: &str = "pretrain.ckpt";
pub const TAGI_FILE: &str = "tagi.ckpt";
pub const FINETUNE_STATE_FILE: &str = "finetune_state.ckpt";
pub const TEACHER_DIR: &str = "teachers";
pub const METRICS_FILE: &str = "metrics.csv";

/// Everything a stage needs besides model weights.
#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub suite: TaskSuite,
    pub mode: FormatMode,
    pub corpus_seed: u64,
    pub out_dir: PathBuf,
    /// Digest of the whole run configuration.
    pub config_hash: String,
    /// Digest of the model section only; checkpoints are compatible across
    /// runs that share it.
    pub model_hash: String,
}

impl PipelineContext {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn teacher_path(&self, task_id: &str) -> PathBuf {
        self.out_dir.join(TEACHER_DIR).join(format!("{task_id}.ckpt"))
    }

    /// Digest of the settings a teacher depends on besides the backbone.
    pub fn teacher_hash(&self) -> String {
        let t = &self.train;
        let v = serde_json::json!({
            "teacher_steps": t.teacher_steps,
            "teacher_lr": t.teacher_lr,
            "warmup_ratio": t.warmup_ratio,
            "weight_decay": t.weight_decay,
            "grad_clip": t.grad_clip,
            "batch_size": t.batch_size,
            "seed": t.seed,
            "mode": self.mode,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    fn meta(&self, stage: &str) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.config_hash,
            "model_hash": self.model_hash,
            "stage": stage,
            "seed": self.train.seed,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: String,
    pub task_id: String,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Append-only CSV metrics log.
pub struct MetricsLog {
    out: BufWriter<File>,
    start: Instant,
    wall: bool,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,stage,task_id,l_pred,l_kl,l_ins,lambda2,l_total,grad_norm,lr,wall_ms";

    pub fn open(path: &Path, wall: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{}", Self::HEADER)?;
        }
        Ok(Self {
            out,
            start: Instant::now(),
            wall,
        })
    }

    pub fn elapsed_ms(&self) -> u64 {
        if self.wall {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    pub fn write(&mut self, r: &MetricsRow) -> Result<()> {
        let l = &r.loss;
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step, r.stage, r.task_id, l.l_pred, l.l_kl, l.l_ins, l.lambda2, l.l_total, r.grad_norm, r.lr, r.wall_ms
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn should_log(step: usize, total: usize, every: usize) -> bool {
    step.is_multiple_of(every) || step + 1 == total
}

fn check_finite(stage: &str, lb: &LossBreakdown) -> Result<()> {
    if lb.l_total.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Tensor(crate::tensor::TensorError::NonFinite {
            op: match stage {
                "pretrain" => "pretrain loss",
                _ => "finetune loss",
            },
        })
        .into())
    }
}

/// SHA-256 over parameter names and values.
pub fn backbone_hash(backbone: &TransformerWeights) -> String {
    let mut h = Sha256::new();
    for (name, t) in backbone.named_params() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Freshly initialised backbone and hypernetwork for the run seed.
pub fn initial_models(model: &ModelConfig, seed: u64) -> Result<(TransformerWeights, Hypernetwork)> {
    let mut rng = SeededRng::stream(seed, 1);
    let backbone = TransformerWeights::init(model, &mut rng)?;
    let hyper = Hypernetwork::init(model, &mut rng, seed)?;
    Ok((backbone, hyper))
}

/// Loads backbone and hypernetwork stored under `model/` and `hyper/`.
pub fn load_models(ck: &Checkpoint, model: &ModelConfig) -> Result<(TransformerWeights, Hypernetwork)> {
    let (mut backbone, mut hyper) = initial_models(model, 0)?;
    ck.load_params("model", &mut backbone)?;
    ck.load_params("hyper", &mut hyper)?;
    Ok((backbone, hyper))
}

fn models_checkpoint(ctx: &PipelineContext, stage: &str, backbone: &TransformerWeights, hyper: &Hypernetwork) -> Checkpoint {
    let mut ck = Checkpoint::new(ctx.meta(stage));
    ck.push_params("model", backbone);
    ck.push_params("hyper", hyper);
    ck
}

/// Pretrains backbone and hypernetwork on corpus windows and writes
/// `pretrain.ckpt`.
pub fn stage_pretrain(ctx: &PipelineContext, log: &mut MetricsLog) -> Result<(TransformerWeights, Hypernetwork)> {
    let cfg = &ctx.train;
    cfg.validate()?;
    let (mut backbone, mut hyper) = initial_models(&ctx.model, cfg.seed)?;
    backbone.set_trainable(true);
    hyper.set_trainable(true);
    let sizes: Vec<usize> = backbone
        .named_params()
        .iter()
        .chain(hyper.named_params().iter())
        .map(|(_, t)| t.len())
        .collect();
    let mut opt = AdamW::with_sizes(sizes, cfg.weight_decay);
    for step in 0..cfg.pretrain_steps {
        let batch = pretrain_batch(ctx.corpus_seed, step, cfg)?;
        let lr = lr_at(step, cfg.pretrain_steps, cfg.warmup_ratio, cfg.pretrain_lr);
        let (lb, norm) = pretrain_step(&mut backbone, &mut hyper, &mut opt, &batch, lr, cfg)?;
        check_finite("pretrain", &lb)?;
        if should_log(step, cfg.pretrain_steps, cfg.log_every) {
            log.write(&MetricsRow {
                step,
                stage: "pretrain".into(),
                task_id: String::new(),
                loss: lb,
                grad_norm: norm,
                lr,
                wall_ms: log.elapsed_ms(),
            })?;
        }
    }
    log.flush()?;
    backbone.set_trainable(false);
    hyper.set_trainable(false);
    let mut ck = models_checkpoint(ctx, "pretrain", &backbone, &hyper);
    ck.meta["steps"] = cfg.pretrain_steps.into();
    ck.save(ctx.path(PRETRAIN_FILE))?;
    Ok((backbone, hyper))
}

/// Backbone and hypernetwork the later stages start from: the pretraining
/// checkpoint when pretraining is enabled, a fresh initialisation otherwise.
pub fn base_models(ctx: &PipelineContext) -> Result<(TransformerWeights, Hypernetwork)> {
    if !ctx.train.pretrain_enabled {
        return initial_models(&ctx.model, ctx.train.seed);
    }
    let path = ctx.path(PRETRAIN_FILE);
    if !path.exists() {
        return Err(TrainError::Config(format!(
            "{} not found; run pretrain first or disable pretraining",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    check_hash(&ck, "model_hash", &ctx.model_hash, &path)?;
    load_models(&ck, &ctx.model)
}

fn check_hash(ck: &Checkpoint, key: &str, expected: &str, path: &Path) -> Result<()> {
    match ck.meta.get(key).and_then(|v| v.as_str()) {
        Some(h) if h == expected => Ok(()),
        other => Err(TrainError::Config(format!(
            "{} has {key} {:?}, current configuration has {expected}",
            path.display(),
            other.unwrap_or("<none>")
        ))),
    }
}

/// Reads a teacher checkpoint.
pub fn load_teacher(path: &Path, model: &ModelConfig) -> Result<(TeacherEntry, serde_json::Value)> {
    let ck = Checkpoint::load(path)?;
    let task_id = ck
        .meta
        .get("task_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ModelError::Format(format!("{}: missing task_id", path.display())))?
        .to_string();
    let mut adapters = TaskAdapterSet::zeros(&task_id, model);
    ck.load_params("teacher", &mut adapters)?;
    let entry = TeacherEntry {
        adapters,
        final_loss: ck.meta.get("final_loss").and_then(|v| v.as_f64()).unwrap_or(f64::NAN),
        steps: ck.meta.get("steps").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
    };
    Ok((entry, ck.meta))
}

/// Trains (or reuses) one teacher per meta-train task, writing
/// `teachers/<task_id>.ckpt`. An existing file trained on the same
/// backbone and config is reused; any other existing file is refused
/// unless `force`.
pub fn stage_teachers(
    ctx: &PipelineContext,
    backbone: &mut TransformerWeights,
    force: bool,
    log: &mut MetricsLog,
) -> Result<TeacherRegistry> {
    let cfg = &ctx.train;
    cfg.validate()?;
    backbone.set_trainable(false);
    let bhash = backbone_hash(backbone);
    let thash = ctx.teacher_hash();
    let mut registry = TeacherRegistry::default();
    for task in &ctx.suite.meta_train {
        let path = ctx.teacher_path(task.id());
        if path.exists() && !force {
            let (entry, meta) = load_teacher(&path, &ctx.model)?;
            let same = meta.get("backbone_hash").and_then(|v| v.as_str()) == Some(bhash.as_str())
                && meta.get("model_hash").and_then(|v| v.as_str()) == Some(ctx.model_hash.as_str())
                && meta.get("teacher_hash").and_then(|v| v.as_str()) == Some(thash.as_str());
            if !same {
                return Err(TrainError::Config(format!(
                    "{} exists from a different run; pass --force to overwrite",
                    path.display()
                )));
            }
            log::info!("reusing teacher {}", task.id());
            registry.insert(entry);
            continue;
        }
        let mut rows = Vec::new();
        let entry = train_teacher(backbone, task, ctx.mode, cfg, |step, loss, norm, lr| {
            if should_log(step, cfg.teacher_steps, cfg.log_every) {
                rows.push((step, loss, norm, lr));
            }
        })?;
        for (step, loss, norm, lr) in rows {
            log.write(&MetricsRow {
                step,
                stage: "teacher".into(),
                task_id: task.id().into(),
                loss: LossBreakdown {
                    l_pred: loss,
                    l_total: loss,
                    ..Default::default()
                },
                grad_norm: norm,
                lr,
                wall_ms: log.elapsed_ms(),
            })?;
        }
        log::info!("teacher {} final loss {:.4}", task.id(), entry.final_loss);
        let mut ck = Checkpoint::new(ctx.meta("teacher"));
        ck.meta["task_id"] = task.id().into();
        ck.meta["backbone_hash"] = bhash.clone().into();
        ck.meta["teacher_hash"] = thash.clone().into();
        ck.meta["final_loss"] = entry.final_loss.into();
        ck.meta["steps"] = entry.steps.into();
        ck.push_params("teacher", &entry.adapters);
        ck.save(&path)?;
        registry.insert(entry);
    }
    log.flush()?;
    Ok(registry)
}

fn save_finetune_state(ctx: &PipelineContext, hyper: &Hypernetwork, opt: &AdamW, next_step: usize) -> Result<()> {
    let mut ck = Checkpoint::new(ctx.meta("finetune_state"));
    ck.meta["next_step"] = next_step.into();
    ck.meta["opt_step"] = opt.step.into();
    ck.push_params("hyper", hyper);
    for ((name, _), (m, v)) in hyper.named_params().iter().zip(opt.m.iter().zip(&opt.v)) {
        let shape = vec![m.len()];
        ck.push(format!("opt/m/{name}"), &Tensor::new(shape.clone(), m.clone()).expect("non-empty"));
        ck.push(format!("opt/v/{name}"), &Tensor::new(shape, v.clone()).expect("non-empty"));
    }
    ck.save(ctx.path(FINETUNE_STATE_FILE))?;
    Ok(())
}

fn load_finetune_state(ctx: &PipelineContext, hyper: &mut Hypernetwork, opt: &mut AdamW) -> Result<usize> {
    let path = ctx.path(FINETUNE_STATE_FILE);
    let ck = Checkpoint::load(&path)?;
    check_hash(&ck, "config_hash", &ctx.config_hash, &path)?;
    ck.load_params("hyper", hyper)?;
    let names: Vec<String> = hyper.named_params().into_iter().map(|(n, _)| n).collect();
    for (i, name) in names.iter().enumerate() {
        for (kind, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let src = ck
                .get(&format!("opt/{kind}/{name}"))
                .filter(|t| t.len() == dst.len())
                .ok_or_else(|| ModelError::Format(format!("{}: bad optimizer state for {name}", path.display())))?;
            dst.copy_from_slice(src.data());
        }
    }
    opt.step = ck.meta.get("opt_step").and_then(|v| v.as_u64()).unwrap_or(0);
    Ok(ck.meta.get("next_step").and_then(|v| v.as_u64()).unwrap_or(0) as usize)
}

/// Distillation finetuning of the hypernetwork on the frozen backbone;
/// writes `tagi.ckpt`. With `resume`, continues from the saved finetune
/// state. With `stop_after = Some(k)`, saves the state after `k` steps
/// and returns without writing `tagi.ckpt`.
pub fn stage_finetune(
    ctx: &PipelineContext,
    backbone: &mut TransformerWeights,
    mut hyper: Hypernetwork,
    registry: &TeacherRegistry,
    resume: bool,
    stop_after: Option<usize>,
    log: &mut MetricsLog,
) -> Result<Hypernetwork> {
    let cfg = &ctx.train;
    cfg.validate()?;
    if (cfg.use_kl || cfg.use_ins) && registry.is_empty() {
        return Err(TrainError::Config(
            "finetuning with the kl or ins loss needs trained teachers; run train-teachers first".into(),
        ));
    }
    backbone.set_trainable(false);
    hyper.set_trainable(true);
    let mut opt = AdamW::new(&hyper, cfg.weight_decay);
    let start = if resume { load_finetune_state(ctx, &mut hyper, &mut opt)? } else { 0 };
    let mut ft = Finetuner::new(backbone, &ctx.suite.meta_train, ctx.mode, Some(registry), cfg)?;
    for step in start..cfg.finetune_steps {
        if stop_after == Some(step) {
            log.flush()?;
            save_finetune_state(ctx, &hyper, &opt, step)?;
            hyper.set_trainable(false);
            return Ok(hyper);
        }
        let lr = lr_at(step, cfg.finetune_steps, cfg.warmup_ratio, cfg.lr);
        let (lb, t, norm) = ft.step(&mut hyper, &mut opt, step, lr)?;
        check_finite("finetune", &lb)?;
        if should_log(step, cfg.finetune_steps, cfg.log_every) {
            log.write(&MetricsRow {
                step,
                stage: "finetune".into(),
                task_id: ft.task_id(t).into(),
                loss: lb,
                grad_norm: norm,
                lr,
                wall_ms: log.elapsed_ms(),
            })?;
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.finetune_steps {
            log.flush()?;
            save_finetune_state(ctx, &hyper, &opt, step + 1)?;
        }
    }
    log.flush()?;
    hyper.set_trainable(false);
    let mut ck = models_checkpoint(ctx, "finetune", backbone, &hyper);
    ck.meta["steps"] = cfg.finetune_steps.into();
    ck.meta["fusion_enabled"] = cfg.fusion_enabled.into();
    ck.save(ctx.path(TAGI_FILE))?;
    Ok(hyper)
}

pub struct PipelineOutput {
    pub backbone: TransformerWeights,
    pub hyper: Hypernetwork,
    pub registry: TeacherRegistry,
}

/// Optional pretraining, teacher training and finetuning, in order.
pub fn run_pipeline(ctx: &PipelineContext, force: bool) -> Result<PipelineOutput> {
    fs::create_dir_all(&ctx.out_dir)?;
    let mut log = MetricsLog::open(&ctx.path(METRICS_FILE), ctx.train.log_wall_time)?;
    let (mut backbone, hyper) = if ctx.train.pretrain_enabled {
        stage_pretrain(ctx, &mut log)?
    } else {
        initial_models(&ctx.model, ctx.train.seed)?
    };
    let registry = if ctx.train.use_kl || ctx.train.use_ins {
        stage_teachers(ctx, &mut backbone, force, &mut log)?
    } else {
        TeacherRegistry::default()
    };
    let hyper = stage_finetune(ctx, &mut backbone, hyper, &registry, false, None, &mut log)?;
    Ok(PipelineOutput {
        backbone,
        hyper,
        registry,
    })
}
