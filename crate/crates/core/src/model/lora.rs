use std::fmt;

use serde::{Deserialize, Serialize};

use super::params::join;
use super::{ModelConfig, ModelError, ParamSet};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Proj {
    Q,
    V,
}

/// One self-attention projection that carries a LoRA delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InjectionPoint {
    pub stack: Stack,
    pub layer: usize,
    pub proj: Proj,
}

impl InjectionPoint {
    /// Self-attention block index: encoder blocks first, then decoder.
    pub fn block(&self, cfg: &ModelConfig) -> usize {
        match self.stack {
            Stack::Encoder => self.layer,
            Stack::Decoder => cfg.n_enc_layers + self.layer,
        }
    }

    /// Position in the flat injection order; doubles as the generator's
    /// layer id (`2·block` for Q, `2·block + 1` for V).
    pub fn index(&self, cfg: &ModelConfig) -> usize {
        2 * self.block(cfg) + matches!(self.proj, Proj::V) as usize
    }

    pub fn path(&self) -> String {
        let stack = match self.stack {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        };
        let proj = match self.proj {
            Proj::Q => "Q",
            Proj::V => "V",
        };
        format!("{stack}/{}/{proj}", self.layer)
    }
}

impl fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path())
    }
}

/// Low-rank pair contributing `x·A·B·scale` on top of `x·W₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    /// `d × r`
    pub a: Tensor,
    /// `r × k`
    pub b: Tensor,
    pub scale: f64,
}

impl LoraModule {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

impl ParamSet for LoraModule {
    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        out.push((join(prefix, "A"), &self.a));
        out.push((join(prefix, "B"), &self.b));
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        out.push((join(prefix, "A"), &mut self.a));
        out.push((join(prefix, "B"), &mut self.b));
    }
}

/// LoRA modules for every injection point of one model, indexed by
/// [`InjectionPoint::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAdapterSet {
    pub task_id: String,
    pub modules: Vec<LoraModule>,
    points: Vec<InjectionPoint>,
}

impl TaskAdapterSet {
    /// Standard LoRA initialisation: `A ~ N(0, 1/d)`, `B = 0`.
    pub fn init(task_id: &str, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let (d, r) = (cfg.d_model, cfg.lora_rank);
        let modules = cfg
            .injection_points()
            .iter()
            .map(|_| LoraModule {
                a: Tensor::randn(&[d, r], 1.0 / (d as f64).sqrt(), rng),
                b: Tensor::zeros(&[r, d]),
                scale: cfg.lora_scale(),
            })
            .collect();
        Self::from_modules(task_id, cfg, modules).expect("shapes follow config")
    }

    pub fn zeros(task_id: &str, cfg: &ModelConfig) -> Self {
        let (d, r) = (cfg.d_model, cfg.lora_rank);
        let modules = cfg
            .injection_points()
            .iter()
            .map(|_| LoraModule {
                a: Tensor::zeros(&[d, r]),
                b: Tensor::zeros(&[r, d]),
                scale: cfg.lora_scale(),
            })
            .collect();
        Self::from_modules(task_id, cfg, modules).expect("shapes follow config")
    }

    pub fn from_modules(task_id: &str, cfg: &ModelConfig, modules: Vec<LoraModule>) -> Result<Self, ModelError> {
        let points = cfg.injection_points();
        if modules.len() != points.len() {
            return Err(ModelError::Config(format!(
                "adapter set has {} modules, model has {} injection points",
                modules.len(),
                points.len()
            )));
        }
        let (d, r) = (cfg.d_model, cfg.lora_rank);
        for (m, p) in modules.iter().zip(&points) {
            if m.a.shape() != [d, r] || m.b.shape() != [r, d] {
                return Err(ModelError::Config(format!(
                    "adapter {p}: A{:?} B{:?}, expected A[{d}, {r}] B[{r}, {d}]",
                    m.a.shape(),
                    m.b.shape()
                )));
            }
        }
        Ok(Self {
            task_id: task_id.to_string(),
            modules,
            points,
        })
    }

    pub fn points(&self) -> &[InjectionPoint] {
        &self.points
    }

    pub fn module(&self, p: &InjectionPoint, cfg: &ModelConfig) -> &LoraModule {
        &self.modules[p.index(cfg)]
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(LoraModule::param_count).sum()
    }

    /// Concatenation in injection order: per point, `A` then `B`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in &self.modules {
            out.extend_from_slice(m.a.data());
            out.extend_from_slice(m.b.data());
        }
        out
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> AdapterVars {
        AdapterVars {
            modules: self
                .modules
                .iter()
                .map(|m| LoraVars {
                    a: tape.param(&m.a),
                    b: tape.param(&m.b),
                    scale: m.scale,
                })
                .collect(),
        }
    }
}

impl ParamSet for TaskAdapterSet {
    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        for (m, p) in self.modules.iter().zip(&self.points) {
            m.visit(&join(prefix, &p.path()), out);
        }
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        for (m, p) in self.modules.iter_mut().zip(&self.points) {
            m.visit_mut(&join(prefix, &p.path()), out);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Adapter handles on a tape, indexed like [`TaskAdapterSet::modules`].
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub modules: Vec<LoraVars>,
}

impl AdapterVars {
    pub fn get(&self, index: usize) -> Option<&LoraVars> {
        self.modules.get(index)
    }

    /// Flat concatenation on the tape, same layout as [`TaskAdapterSet::flatten`].
    pub fn flatten(&self, tape: &mut Tape<'_>) -> crate::tensor::Result<Var> {
        let mut parts = Vec::with_capacity(2 * self.modules.len());
        for m in &self.modules {
            let a = tape.value(m.a).len();
            let b = tape.value(m.b).len();
            parts.push(tape.narrow(m.a, 0, &[1, a])?);
            parts.push(tape.narrow(m.b, 0, &[1, b])?);
        }
        tape.concat_cols(&parts)
    }
}
