//! Teacher LoRA tuning, hypernetwork pretraining on corpus windows and
//! distillation finetuning, with an AdamW optimizer.

mod optim;
mod pipeline;

pub use optim::{lr_at, AdamW};
pub use pipeline::{
    backbone_hash, base_models, initial_models, load_models, load_teacher, run_pipeline, stage_finetune,
    stage_pretrain, stage_teachers, MetricsLog, MetricsRow, PipelineContext, PipelineOutput, FINETUNE_STATE_FILE,
    METRICS_FILE, PRETRAIN_FILE, TAGI_FILE, TEACHER_DIR,
};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypernet::{encode_input, encode_instruction, student_forward, teacher_init, Hypernetwork};
use crate::model::{ModelError, ParamSet, TaskAdapterSet, Token, TransformerWeights};
use crate::tasks::{corpus_window, format_input, FormatMode, Task, TaskError, BOS, EOS, SEP};
use crate::tensor::gradcheck::check_coordinates;
use crate::tensor::{GradCheckConfig, GradCheckReport, SeededRng, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged on {task}: loss {loss} above 10x initial {initial} for 100 consecutive steps")]
    Diverged { task: String, initial: f64, loss: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda2Mode {
    SigmoidOfIns,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2_mode: Lambda2Mode,
    /// Finetuning learning rate.
    pub lr: f64,
    pub pretrain_lr: f64,
    pub teacher_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub pretrain_steps: usize,
    /// Steps per teacher.
    pub teacher_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_pred: bool,
    pub use_kl: bool,
    pub use_ins: bool,
    pub pretrain_enabled: bool,
    pub fusion_enabled: bool,
    pub window_len: usize,
    pub min_seg: usize,
    /// Weight of the backbone reconstruction term added during pretraining
    /// (0 disables it).
    pub reconstruction_weight: f64,
    pub log_every: usize,
    /// Finetune state is saved every this many steps (0: never).
    pub checkpoint_every: usize,
    /// Record wall-clock time in the metrics log (otherwise 0, which keeps
    /// the log reproducible).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2_mode: Lambda2Mode::SigmoidOfIns,
            lr: 1e-3,
            pretrain_lr: 1e-3,
            teacher_lr: 3e-3,
            warmup_ratio: 0.02,
            weight_decay: 0.01,
            grad_clip: 1.0,
            pretrain_steps: 5000,
            teacher_steps: 2000,
            finetune_steps: 10000,
            batch_size: 4,
            seed: 0,
            use_pred: true,
            use_kl: true,
            use_ins: true,
            pretrain_enabled: true,
            fusion_enabled: true,
            window_len: 32,
            min_seg: 4,
            reconstruction_weight: 1.0,
            log_every: 10,
            checkpoint_every: 1000,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be a finite value >= 0");
        }
        if let Lambda2Mode::Constant(c) = self.lambda2_mode {
            if !(c >= 0.0 && c.is_finite()) {
                return bad("constant lambda2 must be a finite value >= 0");
            }
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("teacher_lr", self.teacher_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1)");
        }
        if !(self.reconstruction_weight >= 0.0 && self.reconstruction_weight.is_finite()) {
            return bad("reconstruction_weight must be a finite value >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.min_seg == 0 || self.window_len < 3 * self.min_seg {
            return bad("window_len must be at least 3 * min_seg and min_seg >= 1");
        }
        if !(self.use_pred || self.use_kl || self.use_ins) {
            return bad("at least one of the pred, kl and ins losses must be enabled");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        Ok(())
    }
}

/// Per-step loss terms. Disabled terms are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_kl: f64,
    pub l_ins: f64,
    pub lambda2: f64,
    pub l_total: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Segments `a ‖ b ‖ c` of a corpus window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainSplit {
    pub a: Vec<Token>,
    pub b: Vec<Token>,
    pub c: Vec<Token>,
}

/// Cuts `window` into three segments of at least `min_seg` tokens, with
/// the pair of cut points uniform over all valid pairs.
pub fn split_abc(window: &[Token], min_seg: usize, rng: &mut SeededRng) -> Result<PretrainSplit> {
    let n = window.len();
    if min_seg == 0 || n < 3 * min_seg {
        return Err(TaskError::Degenerate(format!("window of {n} tokens cannot hold three segments of {min_seg}")).into());
    }
    // First cut i in [m, n-2m], second cut j in [i+m, n-m].
    let counts: Vec<usize> = (min_seg..=n - 2 * min_seg).map(|i| n - min_seg - (i + min_seg) + 1).collect();
    let mut k = rng.index(counts.iter().sum());
    let mut i = min_seg;
    for c in &counts {
        if k < *c {
            break;
        }
        k -= c;
        i += 1;
    }
    let j = i + min_seg + k;
    Ok(PretrainSplit {
        a: window[..i].to_vec(),
        b: window[i..j].to_vec(),
        c: window[j..].to_vec(),
    })
}

/// Decoder input `[BOS, y0 .. y_{T-2}]` for labels `y`.
pub fn shifted_prefix(labels: &[Token]) -> Vec<Token> {
    let mut p = Vec::with_capacity(labels.len());
    p.push(BOS);
    p.extend_from_slice(&labels[..labels.len().saturating_sub(1)]);
    p
}

/// Target tokens followed by EOS.
pub fn with_eos(target: &[Token]) -> Vec<Token> {
    let mut v = target.to_vec();
    v.push(EOS);
    v
}

fn as_ids(t: &[Token]) -> Vec<usize> {
    t.iter().map(|&x| x as usize).collect()
}

/// Collects gradients of `params` (in order) from a finished sweep.
fn collect<'g>(grads: &'g crate::tensor::Gradients, params: &[(String, &Tensor)]) -> Vec<Option<&'g [f64]>> {
    params.iter().map(|(_, t)| grads.for_param(t)).collect()
}

/// Student cross-entropy on one pretraining split.
pub fn pretrain_loss<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a TransformerWeights,
    hyper: &'a Hypernetwork,
    split: &PretrainSplit,
    fusion: bool,
) -> Result<Var> {
    let prefix = shifted_prefix(&split.c);
    let out = student_forward(backbone, hyper, tape, &split.a, &split.b, &prefix, fusion)?;
    Ok(tape.cross_entropy(out.logits, &as_ids(&split.c), None)?)
}

/// Backbone-only reconstruction: encoder input `a ; SEP ; b`, target
/// `b` followed by EOS, with no adapters and no fusion.
pub fn reconstruction_loss<'a>(tape: &mut Tape<'a>, backbone: &'a TransformerWeights, split: &PretrainSplit) -> Result<Var> {
    let input = [split.a.as_slice(), &[SEP], &split.b].concat();
    let labels = with_eos(&split.b);
    let enc = backbone.encode(tape, &input, None, None)?;
    let logits = backbone.decode_logits(tape, &shifted_prefix(&labels), enc.hidden, None)?;
    Ok(tape.cross_entropy(logits, &as_ids(&labels), None)?)
}

/// Draws the pretraining batch for `step`; a pure function of
/// `(corpus_seed, step)`.
pub fn pretrain_batch(corpus_seed: u64, step: usize, cfg: &TrainConfig) -> Result<Vec<PretrainSplit>> {
    let mut rng = SeededRng::stream(corpus_seed ^ 0x7072_6574, step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let w = corpus_window(&mut rng, cfg.window_len)?;
            split_abc(&w, cfg.min_seg, &mut rng)
        })
        .collect()
}

/// One pretraining update of backbone and hypernetwork; returns the losses
/// (`l_pred` is the student term alone, `l_total` adds the weighted
/// reconstruction term) and the pre-clip gradient norm.
pub fn pretrain_step(
    backbone: &mut TransformerWeights,
    hyper: &mut Hypernetwork,
    opt: &mut AdamW,
    batch: &[PretrainSplit],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f64)> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty pretraining batch".into()));
    }
    let (loss, grads) = {
        let mut tape = Tape::new();
        let w = 1.0 / batch.len() as f64;
        let (mut pred, mut rec) = (Vec::with_capacity(batch.len()), Vec::new());
        for s in batch {
            pred.push((pretrain_loss(&mut tape, backbone, hyper, s, cfg.fusion_enabled)?, w));
            if cfg.reconstruction_weight > 0.0 {
                rec.push((reconstruction_loss(&mut tape, backbone, s)?, w));
            }
        }
        let pred = tape.weighted_sum(&pred)?;
        let l_pred = tape.scalar(pred);
        let total = if rec.is_empty() {
            pred
        } else {
            let rec = tape.weighted_sum(&rec)?;
            tape.weighted_sum(&[(pred, 1.0), (rec, cfg.reconstruction_weight)])?
        };
        ((l_pred, tape.scalar(total)), tape.backward(total)?)
    };
    let norm = {
        let mut names = backbone.named_params();
        names.extend(hyper.named_params());
        let g: Vec<Option<Vec<f64>>> = collect(&grads, &names).into_iter().map(|o| o.map(<[f64]>::to_vec)).collect();
        drop(names);
        let mut params: Vec<&mut Tensor> = backbone.named_params_mut().into_iter().map(|(_, t)| t).collect();
        params.extend(hyper.named_params_mut().into_iter().map(|(_, t)| t));
        opt.update(&mut params, &g, lr, cfg.grad_clip)
    };
    Ok((
        LossBreakdown {
            l_pred: loss.0,
            l_total: loss.1,
            ..Default::default()
        },
        norm,
    ))
}

/// A trained teacher and its training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEntry {
    pub adapters: TaskAdapterSet,
    pub final_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherRegistry {
    pub entries: BTreeMap<String, TeacherEntry>,
}

impl TeacherRegistry {
    pub fn get(&self, task_id: &str) -> Option<&TeacherEntry> {
        self.entries.get(task_id)
    }

    pub fn insert(&mut self, entry: TeacherEntry) {
        self.entries.insert(entry.adapters.task_id.clone(), entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tokenised teacher example: `(a ; SEP ; b)`, decoder prefix and labels.
#[derive(Debug, Clone)]
pub struct TeacherExample {
    pub input: Vec<Token>,
    pub prefix: Vec<Token>,
    pub labels: Vec<Token>,
}

pub fn teacher_example(task: &Task, index: usize, mode: FormatMode) -> Result<TeacherExample> {
    let f = format_input(task, &task.instance(index), mode)?;
    let labels = with_eos(&f.target);
    Ok(TeacherExample {
        input: f.concatenated(),
        prefix: shifted_prefix(&labels),
        labels,
    })
}

/// Teacher logits for one example (backbone + `adapters`, no fusion).
pub fn teacher_logits<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a TransformerWeights,
    adapters: &'a TaskAdapterSet,
    ex: &TeacherExample,
) -> Result<Var> {
    let bound = adapters.bind(tape);
    let enc = backbone.encode(tape, &ex.input, Some(&bound), None)?;
    Ok(backbone.decode_logits(tape, &ex.prefix, enc.hidden, Some(&bound))?)
}

fn task_stream(seed: u64, task_id: &str) -> u64 {
    task_id
        .bytes()
        .fold(seed ^ 0x0074_6561_6368_6572, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Instance indices for teacher step `step`.
fn teacher_batch(task: &Task, seed: u64, step: usize, batch: usize) -> Vec<usize> {
    let mut rng = SeededRng::stream(task_stream(seed, task.id()), step as u64);
    (0..batch).map(|_| rng.index(task.n_instances)).collect()
}

/// Trains LoRA adapters for one task on the frozen backbone.
/// `on_step(step, loss, grad_norm, lr)` observes every update.
pub fn train_teacher(
    backbone: &TransformerWeights,
    task: &Task,
    mode: FormatMode,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64, f64, f64),
) -> Result<TeacherEntry> {
    if backbone.named_params().iter().any(|(_, t)| t.requires_grad) {
        return Err(TrainError::Config("backbone must be frozen for teacher training".into()));
    }
    let mcfg = &backbone.config;
    let mut adapters = teacher_init(task.id(), mcfg, cfg.seed);
    adapters.set_trainable(true);
    let mut opt = AdamW::new(&adapters, cfg.weight_decay);
    let mut initial = None;
    let mut above = 0usize;
    let mut last = f64::NAN;
    for step in 0..cfg.teacher_steps {
        let examples: Vec<TeacherExample> = teacher_batch(task, cfg.seed, step, cfg.batch_size)
            .into_iter()
            .map(|i| teacher_example(task, i, mode))
            .collect::<Result<_>>()?;
        let (loss, grads) = {
            let mut tape = Tape::new();
            let bound = adapters.bind(&mut tape);
            let mut terms = Vec::with_capacity(examples.len());
            for ex in &examples {
                let enc = backbone.encode(&mut tape, &ex.input, Some(&bound), None)?;
                let logits = backbone.decode_logits(&mut tape, &ex.prefix, enc.hidden, Some(&bound))?;
                let l = tape.cross_entropy(logits, &as_ids(&ex.labels), None)?;
                terms.push((l, 1.0 / examples.len() as f64));
            }
            let total = tape.weighted_sum(&terms)?;
            (tape.scalar(total), tape.backward(total)?)
        };
        let init = *initial.get_or_insert(loss);
        above = if loss > 10.0 * init { above + 1 } else { 0 };
        if above >= 100 {
            return Err(TrainError::Diverged {
                task: task.id().to_string(),
                initial: init,
                loss,
            });
        }
        let g: Vec<Option<Vec<f64>>> = collect(&grads, &adapters.named_params())
            .into_iter()
            .map(|o| o.map(<[f64]>::to_vec))
            .collect();
        let lr = lr_at(step, cfg.teacher_steps, cfg.warmup_ratio, cfg.teacher_lr);
        let mut params: Vec<&mut Tensor> = adapters.named_params_mut().into_iter().map(|(_, t)| t).collect();
        let norm = opt.update(&mut params, &g, lr, cfg.grad_clip);
        on_step(step, loss, norm, lr);
        last = loss;
    }
    adapters.set_trainable(false);
    Ok(TeacherEntry {
        adapters,
        final_loss: last,
        steps: cfg.teacher_steps,
    })
}

/// Teacher-forced token accuracy (target tokens plus EOS) over `indices`.
pub fn teacher_token_accuracy(
    backbone: &TransformerWeights,
    adapters: &TaskAdapterSet,
    task: &Task,
    mode: FormatMode,
    indices: impl IntoIterator<Item = usize>,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let v = backbone.config.vocab_size;
    for i in indices {
        let ex = teacher_example(task, i, mode)?;
        let mut tape = Tape::no_grad();
        let logits = teacher_logits(&mut tape, backbone, adapters, &ex)?;
        for (r, &y) in ex.labels.iter().enumerate() {
            hit += (crate::model::argmax(&tape.value(logits)[r * v..(r + 1) * v]) == y as usize) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// How the finetuning loss terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficients {
    /// Toggles and coefficients from the config.
    Config,
    /// As `Config`, with λ2 fixed to the given value.
    Lambda2(f64),
    /// Every term computed, each with the given coefficient, ignoring the
    /// toggles.
    Explicit { pred: f64, kl: f64, ins: f64 },
}

struct FinetuneTask {
    task: Task,
    instruction: Vec<Token>,
    i_x: Tensor,
    teacher: Option<TaskAdapterSet>,
    teacher_flat: Option<Tensor>,
}

/// Distillation finetuning state shared across steps: frozen backbone,
/// cached instruction encodings and cached teacher logits.
pub struct Finetuner<'m> {
    backbone: &'m TransformerWeights,
    tasks: Vec<FinetuneTask>,
    mode: FormatMode,
    teacher_cache: HashMap<(usize, usize), Tensor>,
    pub cfg: TrainConfig,
}

/// Finetuning example tokens.
struct StudentExample {
    input: Vec<Token>,
    prefix: Vec<Token>,
    labels: Vec<usize>,
}

impl<'m> Finetuner<'m> {
    pub fn new(
        backbone: &'m TransformerWeights,
        tasks: &[Task],
        mode: FormatMode,
        registry: Option<&TeacherRegistry>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(TrainError::Config("no meta-train tasks".into()));
        }
        if backbone.named_params().iter().any(|(_, t)| t.requires_grad) {
            return Err(TrainError::Config("backbone must be frozen during finetuning".into()));
        }
        let need_teacher = cfg.use_kl || cfg.use_ins;
        let mut out = Vec::with_capacity(tasks.len());
        for task in tasks {
            let teacher = registry.and_then(|r| r.get(task.id())).map(|e| e.adapters.clone());
            if need_teacher && teacher.is_none() {
                return Err(TrainError::Config(format!(
                    "no teacher for task {} while the kl or ins loss is enabled",
                    task.id()
                )));
            }
            let instruction = crate::tasks::format_instruction(task, mode)?;
            let i_x = {
                let mut tape = Tape::no_grad();
                let e = encode_instruction(backbone, &mut tape, &instruction)?;
                tape.to_tensor(e.i_x)
            };
            let teacher_flat = teacher.as_ref().map(|t| {
                let flat = t.flatten();
                Tensor::new(vec![1, flat.len()], flat).expect("non-empty adapters")
            });
            out.push(FinetuneTask {
                task: task.clone(),
                instruction,
                i_x,
                teacher,
                teacher_flat,
            });
        }
        Ok(Self {
            backbone,
            tasks: out,
            mode,
            teacher_cache: HashMap::new(),
            cfg: cfg.clone(),
        })
    }

    pub fn task_id(&self, task_idx: usize) -> &'static str {
        self.tasks[task_idx].task.id()
    }

    pub fn instruction(&self, task_idx: usize) -> &[Token] {
        &self.tasks[task_idx].instruction
    }

    /// `(task index, instance indices)` for `step`; a pure function of the
    /// seed and the step.
    pub fn batch(&self, step: usize) -> (usize, Vec<usize>) {
        let mut rng = SeededRng::stream(self.cfg.seed ^ 0x6669_6e65, step as u64);
        let t = rng.index(self.tasks.len());
        let n = self.tasks[t].task.n_instances;
        (t, (0..self.cfg.batch_size).map(|_| rng.index(n)).collect())
    }

    fn example(&self, t: usize, i: usize) -> Result<StudentExample> {
        let task = &self.tasks[t].task;
        let f = format_input(task, &task.instance(i), self.mode)?;
        let labels = with_eos(&f.target);
        Ok(StudentExample {
            input: f.input,
            prefix: shifted_prefix(&labels),
            labels: as_ids(&labels),
        })
    }

    fn cached_teacher_logits(&mut self, t: usize, i: usize) -> Result<Tensor> {
        if let Some(l) = self.teacher_cache.get(&(t, i)) {
            return Ok(l.clone());
        }
        let ft = &self.tasks[t];
        let adapters = ft
            .teacher
            .as_ref()
            .ok_or_else(|| TrainError::Config(format!("no teacher for task {}", ft.task.id())))?;
        let ex = teacher_example(&ft.task, i, self.mode)?;
        let mut tape = Tape::no_grad();
        let logits = teacher_logits(&mut tape, self.backbone, adapters, &ex)?;
        let out = tape.to_tensor(logits);
        self.teacher_cache.insert((t, i), out.clone());
        Ok(out)
    }

    /// Builds `L_finetune` for one batch on `tape`.
    pub fn loss<'a>(
        &mut self,
        tape: &mut Tape<'a>,
        hyper: &'a Hypernetwork,
        task_idx: usize,
        instances: &[usize],
        coefficients: Coefficients,
    ) -> Result<(Var, LossBreakdown)>
    where
        'm: 'a,
    {
        if instances.is_empty() {
            return Err(TrainError::Config("empty finetuning batch".into()));
        }
        let mut cfg = self.cfg.clone();
        if let Coefficients::Explicit { .. } = coefficients {
            cfg.use_pred = true;
            cfg.use_kl = true;
            cfg.use_ins = true;
        }
        let (c_pred, c_kl) = match coefficients {
            Coefficients::Explicit { pred, kl, .. } => (pred, kl),
            _ => (1.0, cfg.lambda1),
        };
        let teacher: Vec<Option<Tensor>> = instances
            .iter()
            .map(|&i| if cfg.use_kl { self.cached_teacher_logits(task_idx, i).map(Some) } else { Ok(None) })
            .collect::<Result<_>>()?;
        let examples: Vec<StudentExample> =
            instances.iter().map(|&i| self.example(task_idx, i)).collect::<Result<_>>()?;
        let backbone: &'a TransformerWeights = self.backbone;
        let ft = &self.tasks[task_idx];

        let ix = tape.constant(ft.i_x.clone());
        let adapters = hyper.generate_adapters(tape, ix)?;
        let w = 1.0 / instances.len() as f64;
        let (mut pred_terms, mut kl_terms) = (Vec::new(), Vec::new());
        for (ex, t_logits) in examples.iter().zip(teacher) {
            let memory = encode_input(backbone, hyper, tape, ix, Some(&adapters), &ex.input, cfg.fusion_enabled)?;
            let logits = backbone.decode_logits(tape, &ex.prefix, memory, Some(&adapters))?;
            if cfg.use_pred {
                pred_terms.push((tape.cross_entropy(logits, &ex.labels, None)?, w));
            }
            if let Some(tl) = t_logits {
                let p = tape.constant(tl);
                let mask = vec![true; ex.labels.len()];
                kl_terms.push((tape.kl_divergence(p, logits, &mask)?, w));
            }
        }
        let mut parts = Vec::with_capacity(3);
        let mut out = LossBreakdown::default();
        if cfg.use_pred {
            let v = tape.weighted_sum(&pred_terms)?;
            out.l_pred = tape.scalar(v);
            parts.push((v, c_pred));
        }
        if cfg.use_kl {
            let v = tape.weighted_sum(&kl_terms)?;
            out.l_kl = tape.scalar(v);
            parts.push((v, c_kl));
        }
        if cfg.use_ins {
            let target = ft
                .teacher_flat
                .clone()
                .ok_or_else(|| TrainError::Config(format!("no teacher for task {}", ft.task.id())))?;
            let flat = adapters.flatten(tape)?;
            let target = tape.constant(target);
            let v = tape.mse(flat, target)?;
            out.l_ins = tape.scalar(v);
            out.lambda2 = match (coefficients, cfg.lambda2_mode) {
                (Coefficients::Explicit { ins, .. }, _) | (Coefficients::Lambda2(ins), _) => ins,
                (Coefficients::Config, Lambda2Mode::SigmoidOfIns) => sigmoid(out.l_ins),
                (Coefficients::Config, Lambda2Mode::Constant(c)) => c,
            };
            parts.push((v, out.lambda2));
        }
        let total = tape.weighted_sum(&parts)?;
        out.l_total = tape.scalar(total);
        Ok((total, out))
    }

    /// Gradients of `L_finetune` for `step`'s batch, in `hyper.named_params()`
    /// order (`None` where a parameter took no part).
    pub fn gradients(
        &mut self,
        hyper: &Hypernetwork,
        step: usize,
        coefficients: Coefficients,
    ) -> Result<(LossBreakdown, Vec<Option<Vec<f64>>>)> {
        let (t, insts) = self.batch(step);
        let mut tape = Tape::new();
        let (total, lb) = self.loss(&mut tape, hyper, t, &insts, coefficients)?;
        let grads = tape.backward(total)?;
        let g = collect(&grads, &hyper.named_params())
            .into_iter()
            .map(|o| o.map(<[f64]>::to_vec))
            .collect();
        Ok((lb, g))
    }

    /// One optimizer step on the hypernetwork; returns the losses, the task
    /// index and the pre-clip gradient norm.
    pub fn step(&mut self, hyper: &mut Hypernetwork, opt: &mut AdamW, step: usize, lr: f64) -> Result<(LossBreakdown, usize, f64)> {
        let (t, _) = self.batch(step);
        let (lb, g) = self.gradients(hyper, step, Coefficients::Config)?;
        let mut params: Vec<&mut Tensor> = hyper.named_params_mut().into_iter().map(|(_, p)| p).collect();
        let norm = opt.update(&mut params, &g, lr, self.cfg.grad_clip);
        Ok((lb, t, norm))
    }
}

/// Finite-difference check of the full finetuning objective with respect
/// to `n_coords` sampled hypernetwork parameters, on a tiny model. λ2 is
/// held at its value at the unperturbed point, matching its treatment as
/// a coefficient.
pub fn objective_gradcheck(n_coords: usize, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    use crate::model::ModelConfig;
    let mcfg = ModelConfig {
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        d_ff: 32,
        lora_rank: 2,
        generator_hidden: 16,
        id_embed_dim: 8,
        max_len: 64,
        ..ModelConfig::default()
    };
    let mut rng = SeededRng::new(gc.seed);
    let backbone = TransformerWeights::init(&mcfg, &mut rng)?;
    let mut hyper = Hypernetwork::init(&mcfg, &mut rng, gc.seed)?;
    // Move away from the zero-output initialisation so every factor is live.
    for gen in &mut hyper.generators {
        gen.head.w = Tensor::randn(gen.head.w.shape(), 0.05, &mut rng);
    }
    hyper.set_trainable(true);
    let suite = crate::tasks::build_suite(gc.seed, 2)?;
    let mut registry = TeacherRegistry::default();
    for task in &suite.meta_train {
        let mut t = teacher_init(task.id(), &mcfg, gc.seed);
        for m in &mut t.modules {
            m.b = Tensor::randn(m.b.shape(), 0.1, &mut rng);
        }
        registry.insert(TeacherEntry {
            adapters: t,
            final_loss: 0.0,
            steps: 0,
        });
    }
    let tcfg = TrainConfig {
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut ft = Finetuner::new(&backbone, &suite.meta_train, FormatMode::Def, Some(&registry), &tcfg)?;
    let (t, insts) = ft.batch(0);

    let names: Vec<(String, usize)> = hyper.named_params().into_iter().map(|(n, p)| (n, p.len())).collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let (lambda2, analytic) = {
        let mut tape = Tape::new();
        let (loss, lb) = ft.loss(&mut tape, &hyper, t, &insts, Coefficients::Config)?;
        let grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(total);
        for (_, p) in hyper.named_params() {
            match grads.for_param(p) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        (lb.lambda2, flat)
    };
    let coords = crate::tensor::gradcheck::sample_coords(total, n_coords, gc.seed);
    let locate = |mut i: usize| {
        for (k, (_, len)) in names.iter().enumerate() {
            if i < *len {
                return (k, i);
            }
            i -= len;
        }
        unreachable!("coordinate within total")
    };
    let mut eval = |i: usize, delta: f64| -> crate::tensor::Result<f64> {
        let (k, j) = locate(i);
        let mut h = hyper.clone();
        h.named_params_mut()[k].1.data_mut()[j] += delta;
        let mut tape = Tape::no_grad();
        let (loss, _) = ft
            .loss(&mut tape, &h, t, &insts, Coefficients::Lambda2(lambda2))
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        Ok(tape.scalar(loss))
    };
    Ok(check_coordinates("finetune_objective", &coords, |i| analytic[i], &mut eval, gc)?)
}
