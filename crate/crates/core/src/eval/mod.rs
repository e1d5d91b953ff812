//! Metrics, per-task evaluation with one-shot instruction processing, and
//! cost accounting (analytical and counted FLOPs, generated-parameter ratio).

mod cost;
mod metrics;

pub use cost::{backbone_param_count, flops_standard, flops_tagi, param_ratio, FlopsQuery};
pub use metrics::{exact_match, lcs_len, rouge_l};

use serde::Serialize;
use thiserror::Error;

use crate::hypernet::{call_counts, encode_input, encode_instruction, materialize, Hypernetwork};
use crate::model::{ModelError, TaskAdapterSet, Token, TransformerWeights};
use crate::tasks::{format_input, format_instruction, FormatMode, Instance, Split, Task, TaskError, Tokenizer, BOS, EOS};
use crate::tensor::flops::{self, FlopsCounter, Phase};
use crate::tensor::Tape;
use crate::training::TeacherRegistry;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("task {task}: {what} of instance {instance} has {len} tokens, above max_len {max}")]
    Length {
        task: String,
        instance: String,
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("no teacher for task {0}")]
    MissingTeacher(String),
    #[error("task {0} has no instances to evaluate")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which adapters the backbone runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Hypernetwork-generated adapters over the raw input.
    Student,
    /// Same memory layout as the student, adapters forced to zero.
    ZeroAdapters,
    /// The task's teacher adapters over `instruction ; SEP ; input`.
    Teacher,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "student" => Ok(Variant::Student),
            "zero_adapters" | "zero" => Ok(Variant::ZeroAdapters),
            "teacher" => Ok(Variant::Teacher),
            other => Err(format!("unknown variant {other:?} (expected student, zero_adapters or teacher)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mode: FormatMode,
    pub variant: Variant,
    /// Instruction fusion in the student encoder (ignored for teachers).
    pub fusion: bool,
    /// Greedy decoding budget, EOS included.
    pub max_new_tokens: usize,
    /// Evaluate only the first `k` instances of each task.
    pub max_instances: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: FormatMode::Def,
            variant: Variant::Student,
            fusion: true,
            max_new_tokens: 24,
            max_instances: None,
        }
    }
}

/// Weights an evaluation runs on.
#[derive(Clone, Copy)]
pub struct EvalModels<'m> {
    pub backbone: &'m TransformerWeights,
    pub hyper: &'m Hypernetwork,
    pub teachers: Option<&'m TeacherRegistry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AnalyticalFlops {
    pub standard: u128,
    pub tagi: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task_id: String,
    pub split: Split,
    pub rouge_l: f64,
    pub exact_match: f64,
    pub n_instances: usize,
    pub instruction_encodings_performed: usize,
    pub adapter_generations_performed: usize,
    pub counted_flops: FlopsCounter,
    pub analytical_flops: AnalyticalFlops,
    /// Greedy outputs, in instance order.
    #[serde(skip)]
    pub predictions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub rouge_l: f64,
    pub exact_match: f64,
    pub n_tasks: usize,
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsSummary {
    pub analytical_standard: u128,
    pub analytical_tagi: u128,
    pub counted_buckets: FlopsCounter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub split: Split,
    pub mode: FormatMode,
    pub variant: Variant,
    pub fusion: bool,
    pub per_task: Vec<TaskReport>,
    pub aggregate: Aggregate,
    pub flops: FlopsSummary,
    pub param_ratio: f64,
}

fn check_len(task: &Task, inst: &Instance, what: &'static str, tokens: &[Token], max: usize) -> Result<()> {
    if tokens.len() > max {
        return Err(EvalError::Length {
            task: task.id().to_string(),
            instance: inst.source.clone(),
            what,
            len: tokens.len(),
            max,
        });
    }
    Ok(())
}

fn strip_eos(mut out: Vec<Token>) -> Vec<Token> {
    if out.last() == Some(&EOS) {
        out.pop();
    }
    out
}

/// Evaluates the first instances of `task` (all, or `opts.max_instances`).
pub fn evaluate_task(models: EvalModels<'_>, task: &Task, opts: &EvalOptions) -> Result<TaskReport> {
    let n = opts.max_instances.map_or(task.n_instances, |k| k.min(task.n_instances));
    let instances: Vec<Instance> = (0..n).map(|j| task.instance(j)).collect();
    evaluate_instances(models, task, &instances, opts)
}

/// Evaluates `instances` under `task`'s instruction. For the student and
/// zero-adapter variants the instruction is encoded, and adapters are
/// generated, exactly once.
pub fn evaluate_instances(
    models: EvalModels<'_>,
    task: &Task,
    instances: &[Instance],
    opts: &EvalOptions,
) -> Result<TaskReport> {
    if instances.is_empty() {
        return Err(EvalError::Empty(task.id().to_string()));
    }
    let backbone = models.backbone;
    let max = backbone.config.max_len;
    let instruction = format_instruction(task, opts.mode)?;
    let mut formatted = Vec::with_capacity(instances.len());
    for inst in instances {
        let f = format_input(task, inst, opts.mode)?;
        match opts.variant {
            Variant::Teacher => check_len(task, inst, "instruction ; input", &f.concatenated(), max)?,
            _ => {
                check_len(task, inst, "instruction", &f.instruction, max)?;
                check_len(task, inst, "input", &f.input, max)?;
            }
        }
        formatted.push(f);
    }

    flops::reset();
    let (enc0, gen0) = call_counts();
    let teacher: Option<&TaskAdapterSet> = match opts.variant {
        Variant::Teacher => Some(
            &models
                .teachers
                .and_then(|r| r.get(task.id()))
                .ok_or_else(|| EvalError::MissingTeacher(task.id().to_string()))?
                .adapters,
        ),
        _ => None,
    };
    // Instruction-level work, done once per task.
    let (i_x, generated) = match opts.variant {
        Variant::Teacher => (None, None),
        Variant::Student | Variant::ZeroAdapters => {
            let mut tape = Tape::no_grad();
            let e = encode_instruction(backbone, &mut tape, &instruction)?;
            let set = if opts.variant == Variant::Student {
                let vars = models.hyper.generate_adapters(&mut tape, e.i_x)?;
                Some(materialize(&tape, &vars, task.id(), &backbone.config)?)
            } else {
                None
            };
            (Some(tape.to_tensor(e.i_x)), set)
        }
    };

    let mut predictions = Vec::with_capacity(instances.len());
    let (mut rouge, mut em) = (0.0, 0.0);
    for (inst, f) in instances.iter().zip(&formatted) {
        let out = flops::in_phase(Phase::PerInstance, || -> Result<Vec<Token>> {
            let mut tape = Tape::no_grad();
            let (memory, adapters) = match opts.variant {
                Variant::Teacher => {
                    let t = teacher.expect("teacher resolved above");
                    let bound = t.bind(&mut tape);
                    let enc = backbone.encode(&mut tape, &f.concatenated(), Some(&bound), None)?;
                    (tape.to_tensor(enc.hidden), Some(t))
                }
                _ => {
                    let ix = tape.constant(i_x.clone().expect("encoded above"));
                    let bound = generated.as_ref().map(|g| g.bind(&mut tape));
                    let mem = encode_input(backbone, models.hyper, &mut tape, ix, bound.as_ref(), &f.input, opts.fusion)?;
                    (tape.to_tensor(mem), generated.as_ref())
                }
            };
            Ok(backbone.greedy_decode(&memory, adapters, BOS, EOS, opts.max_new_tokens)?)
        })?;
        let text = Tokenizer.decode(&strip_eos(out));
        rouge += rouge_l(&inst.target, &text);
        em += exact_match(&inst.target, &text);
        predictions.push(text);
    }
    let (enc1, gen1) = call_counts();
    let n = instances.len();
    let mean_input = formatted.iter().map(|f| f.input.len()).sum::<usize>() as f64 / n as f64;
    let q = FlopsQuery {
        n_params: backbone_param_count(&backbone.config) as u64,
        n: n as u64,
        t: instruction.len() as u64,
        i: mean_input.round() as u64,
    };
    Ok(TaskReport {
        task_id: task.id().to_string(),
        split: task.split,
        rouge_l: rouge / n as f64,
        exact_match: em / n as f64,
        n_instances: n,
        instruction_encodings_performed: (enc1 - enc0) as usize,
        adapter_generations_performed: (gen1 - gen0) as usize,
        counted_flops: flops::snapshot(),
        analytical_flops: AnalyticalFlops {
            standard: flops_standard(&q),
            tagi: flops_tagi(&q),
        },
        predictions,
    })
}

/// Evaluates every task of `tasks` (in order) and assembles the report.
pub fn evaluate_split(
    models: EvalModels<'_>,
    tasks: &[Task],
    split: Split,
    opts: &EvalOptions,
    config_hash: &str,
) -> Result<EvalReport> {
    let per_task: Vec<TaskReport> = tasks.iter().map(|t| evaluate_task(models, t, opts)).collect::<Result<_>>()?;
    Ok(assemble_report(per_task, split, opts, config_hash, &models.backbone.config))
}

pub fn assemble_report(
    per_task: Vec<TaskReport>,
    split: Split,
    opts: &EvalOptions,
    config_hash: &str,
    cfg: &crate::model::ModelConfig,
) -> EvalReport {
    let k = per_task.len().max(1) as f64;
    let mut buckets = FlopsCounter::default();
    for t in &per_task {
        buckets.instruction_encode += t.counted_flops.instruction_encode;
        buckets.adapter_generate += t.counted_flops.adapter_generate;
        buckets.per_instance += t.counted_flops.per_instance;
        buckets.other += t.counted_flops.other;
    }
    EvalReport {
        config_hash: config_hash.to_string(),
        split,
        mode: opts.mode,
        variant: opts.variant,
        fusion: opts.fusion,
        aggregate: Aggregate {
            rouge_l: per_task.iter().map(|t| t.rouge_l).sum::<f64>() / k,
            exact_match: per_task.iter().map(|t| t.exact_match).sum::<f64>() / k,
            n_tasks: per_task.len(),
            n_instances: per_task.iter().map(|t| t.n_instances).sum(),
        },
        flops: FlopsSummary {
            analytical_standard: per_task.iter().map(|t| t.analytical_flops.standard).sum(),
            analytical_tagi: per_task.iter().map(|t| t.analytical_flops.tagi).sum(),
            counted_buckets: buckets,
        },
        param_ratio: param_ratio(cfg),
        per_task,
    }
}

#[cfg(test)]
mod tests;
