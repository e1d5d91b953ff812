//! Synthetic instruction-following suite: character tokenizer, string
//! transformation tasks with natural-language definitions, disjoint
//! meta-train/valid/test splits, and a pretraining text generator.

mod corpus;
mod family;
mod tokenizer;

pub use corpus::{corpus_window, sentence, LEXICON_SIZE};
pub use family::{TaskFamily, DEFAULT_TRAIN_TASKS, TEST_FAMILIES, TRAIN_FAMILIES, VALID_FAMILIES};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, SEP, VOCAB_SIZE};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Token;
use crate::tensor::SeededRng;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("character {0:?} is not in the vocabulary")]
    Vocabulary(char),
    #[error("invalid suite configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MIN_SOURCE_LEN: usize = 3;
pub const MAX_SOURCE_LEN: usize = 8;
pub const TRAIN_INSTANCES: usize = 1000;
pub const TEST_INSTANCES: usize = 100;
const N_DEMOS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(TaskError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub source: String,
    pub target: String,
}

/// One task: a transformation, its definition, fixed demonstrations and a
/// deterministic instance generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub family: TaskFamily,
    pub split: Split,
    pub demonstrations: Vec<Instance>,
    pub n_instances: usize,
    seed: u64,
}

fn family_stream(seed: u64, family: TaskFamily) -> u64 {
    family
        .id()
        .bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn random_source(rng: &mut SeededRng) -> String {
    let len = rng.range_inclusive(MIN_SOURCE_LEN, MAX_SOURCE_LEN);
    (0..len).map(|_| (b'a' + rng.index(26) as u8) as char).collect()
}

impl Task {
    pub fn new(family: TaskFamily, split: Split, seed: u64) -> Self {
        let stream = family_stream(seed, family);
        let mut rng = SeededRng::stream(stream, u64::MAX);
        let mut demonstrations: Vec<Instance> = Vec::with_capacity(N_DEMOS);
        while demonstrations.len() < N_DEMOS {
            let source = random_source(&mut rng);
            if demonstrations.iter().all(|d| d.source != source) {
                demonstrations.push(Instance {
                    target: family.apply(&source),
                    source,
                });
            }
        }
        let n_instances = match split {
            Split::Test => TEST_INSTANCES,
            _ => TRAIN_INSTANCES,
        };
        Self {
            family,
            split,
            demonstrations,
            n_instances,
            seed: stream,
        }
    }

    pub fn id(&self) -> &'static str {
        self.family.id()
    }

    pub fn definition(&self) -> &'static str {
        self.family.definition()
    }

    /// Instance `index`; a pure function of `(suite seed, task, index)`.
    /// Sources never coincide with a demonstration.
    pub fn instance(&self, index: usize) -> Instance {
        let mut rng = SeededRng::stream(self.seed, index as u64);
        loop {
            let source = random_source(&mut rng);
            if self.demonstrations.iter().all(|d| d.source != source) {
                return Instance {
                    target: self.family.apply(&source),
                    source,
                };
            }
        }
    }

    pub fn instances(&self) -> Vec<Instance> {
        (0..self.n_instances).map(|i| self.instance(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub seed: u64,
    pub meta_train: Vec<Task>,
    pub meta_valid: Vec<Task>,
    pub meta_test: Vec<Task>,
}

impl TaskSuite {
    pub fn split(&self, split: Split) -> &[Task] {
        match split {
            Split::Train => &self.meta_train,
            Split::Valid => &self.meta_valid,
            Split::Test => &self.meta_test,
        }
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &Task> {
        self.meta_train.iter().chain(&self.meta_valid).chain(&self.meta_test)
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.all_tasks().find(|t| t.id() == id)
    }
}

/// Builds the suite: the first `n_train_tasks` training families, the two
/// validation families and the two held-out test families.
pub fn build_suite(seed: u64, n_train_tasks: usize) -> Result<TaskSuite, TaskError> {
    if n_train_tasks == 0 || n_train_tasks > TRAIN_FAMILIES.len() {
        return Err(TaskError::Config(format!(
            "n_train_tasks must be in 1..={}, got {n_train_tasks}",
            TRAIN_FAMILIES.len()
        )));
    }
    let make = |fams: &[TaskFamily], split| fams.iter().map(|&f| Task::new(f, split, seed)).collect();
    Ok(TaskSuite {
        seed,
        meta_train: make(&TRAIN_FAMILIES[..n_train_tasks], Split::Train),
        meta_valid: make(&VALID_FAMILIES, Split::Valid),
        meta_test: make(&TEST_FAMILIES, Split::Test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    /// Definition only.
    #[default]
    Def,
    /// Definition plus the task's two fixed positive demonstrations.
    #[serde(rename = "def_2pos")]
    Def2Pos,
}

impl FormatMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FormatMode::Def => "def",
            FormatMode::Def2Pos => "def_2pos",
        }
    }
}

impl std::str::FromStr for FormatMode {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        match s {
            "def" => Ok(FormatMode::Def),
            "def_2pos" => Ok(FormatMode::Def2Pos),
            other => Err(TaskError::Config(format!("unknown mode {other:?} (expected def or def_2pos)"))),
        }
    }
}

/// Tokenised `(instruction a, input b, target c)` for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Formatted {
    pub instruction: Vec<Token>,
    pub input: Vec<Token>,
    pub target: Vec<Token>,
}

impl Formatted {
    /// `a SEP b`: what a model without a hypernetwork consumes.
    pub fn concatenated(&self) -> Vec<Token> {
        let mut v = Vec::with_capacity(self.instruction.len() + 1 + self.input.len());
        v.extend_from_slice(&self.instruction);
        v.push(SEP);
        v.extend_from_slice(&self.input);
        v
    }
}

/// Instruction tokens for a task; independent of any instance.
pub fn format_instruction(task: &Task, mode: FormatMode) -> Result<Vec<Token>, TaskError> {
    let tok = Tokenizer;
    let mut a = tok.encode(task.definition())?;
    if mode == FormatMode::Def2Pos {
        if task.demonstrations.len() < N_DEMOS {
            return Err(TaskError::Contract(format!("task {} has fewer than two demonstrations", task.id())));
        }
        for d in &task.demonstrations[..N_DEMOS] {
            a.push(SEP);
            a.extend(tok.encode(&format!("IN: {}", d.source))?);
            a.push(SEP);
            a.extend(tok.encode(&format!("OUT: {}", d.target))?);
        }
    }
    Ok(a)
}

pub fn format_input(task: &Task, instance: &Instance, mode: FormatMode) -> Result<Formatted, TaskError> {
    if mode == FormatMode::Def2Pos && task.demonstrations.iter().any(|d| d == instance) {
        return Err(TaskError::Contract(format!(
            "instance {:?} of {} is one of its demonstrations",
            instance.source,
            task.id()
        )));
    }
    Ok(Formatted {
        instruction: format_instruction(task, mode)?,
        input: Tokenizer.encode(&instance.source)?,
        target: Tokenizer.encode(&instance.target)?,
    })
}

#[derive(Debug, Serialize)]
struct ExportRow<'a> {
    task_id: &'a str,
    split: Split,
    definition: &'a str,
    demos: &'a [Instance],
    source: &'a str,
    target: &'a str,
}

/// Writes `<dir>/<split>/<task_id>.jsonl`, one line per instance.
pub fn export_suite(suite: &TaskSuite, dir: &Path) -> Result<(), TaskError> {
    for task in suite.all_tasks() {
        let sub = dir.join(task.split.as_str());
        fs::create_dir_all(&sub)?;
        let mut f = std::io::BufWriter::new(fs::File::create(sub.join(format!("{}.jsonl", task.id())))?);
        for inst in task.instances() {
            let row = ExportRow {
                task_id: task.id(),
                split: task.split,
                definition: task.definition(),
                demos: &task.demonstrations,
                source: &inst.source,
                target: &inst.target,
            };
            serde_json::to_writer(&mut f, &row).map_err(|e| TaskError::Io(e.into()))?;
            f.write_all(b"\n")?;
        }
    }
    Ok(())
}
