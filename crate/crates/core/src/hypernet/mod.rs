//! Instruction hypernetwork: encodes a task instruction with the backbone
//! encoder, fuses it into every encoder layer by cross-attention and
//! generates the LoRA factors for every injection point.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::model::params::{impl_param_set, join};
use crate::model::{
    AdapterVars, Attention, EncoderFusion, LayerNorm, Linear, LoraModule, LoraVars, ModelConfig, ModelError,
    ParamSet, Result, TaskAdapterSet, Token, TransformerWeights,
};
use crate::tensor::flops::{self, Phase};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLayers {
    #[default]
    All,
    Last,
}

impl std::str::FromStr for FusionLayers {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "last" => Ok(Self::Last),
            other => Err(format!("unknown fusion layer set {other:?} (expected all or last)")),
        }
    }
}

thread_local! {
    static ENCODE_CALLS: Cell<u64> = const { Cell::new(0) };
    static GENERATE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// `(encode_instruction, generate_adapters)` calls on this thread.
pub fn call_counts() -> (u64, u64) {
    (ENCODE_CALLS.with(Cell::get), GENERATE_CALLS.with(Cell::get))
}

pub fn reset_call_counts() {
    ENCODE_CALLS.with(|c| c.set(0));
    GENERATE_CALLS.with(|c| c.set(0));
}

/// Encoder output over the instruction tokens, `s × d`.
#[derive(Debug, Clone, Copy)]
pub struct InstructionEncoding {
    pub i_x: Var,
    pub len: usize,
}

/// Runs the shared backbone encoder over the instruction, without LoRA
/// and without fusion.
pub fn encode_instruction<'a>(
    backbone: &'a TransformerWeights,
    tape: &mut Tape<'a>,
    instruction: &[Token],
) -> Result<InstructionEncoding> {
    if instruction.is_empty() {
        return Err(ModelError::Empty("instruction"));
    }
    ENCODE_CALLS.with(|c| c.set(c.get() + 1));
    let out = flops::in_phase(Phase::InstructionEncode, || backbone.encode(tape, instruction, None, None))?;
    Ok(InstructionEncoding {
        i_x: out.hidden,
        len: instruction.len(),
    })
}

/// `F = LayerNorm(S + MHA(S, I_x, I_x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub attn: Attention,
    pub norm: LayerNorm,
}
impl_param_set!(FusionLayer { attn, norm });

impl FusionLayer {
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, s: Var, i_x: Var, heads: usize) -> Result<Var> {
        let (ds, di) = (tape.shape(s)[1], tape.shape(i_x)[1]);
        if ds != di {
            return Err(crate::tensor::TensorError::Dimension {
                op: "fuse",
                lhs: tape.shape(s).to_vec(),
                rhs: tape.shape(i_x).to_vec(),
            }
            .into());
        }
        let a = self.attn.forward(tape, s, i_x, heads, false, None, None)?;
        let r = tape.add(s, a)?;
        self.norm.forward(tape, r)
    }
}

/// Two-layer MLP for one block, shared by its Q and V projections.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGenerator {
    pub hidden: Linear,
    /// Emits `A` (`d×r`, row-major) followed by `B` (`r×d`).
    pub head: Linear,
}
impl_param_set!(BlockGenerator { hidden, head });

/// Per-block starting point of the LoRA `A` factor, shared by the
/// generator's output bias and by every teacher's initialisation.
pub fn initial_lora_a(cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
    let mut rng = SeededRng::stream(seed, 0x10_4a);
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    (0..cfg.n_blocks())
        .map(|_| Tensor::randn(&[d, r], 1.0 / (d as f64).sqrt(), &mut rng))
        .collect()
}

/// Teacher adapter initialisation: `A` from [`initial_lora_a`], `B = 0`.
pub fn teacher_init(task_id: &str, cfg: &ModelConfig, seed: u64) -> TaskAdapterSet {
    let a0 = initial_lora_a(cfg, seed);
    let modules = cfg
        .injection_points()
        .iter()
        .map(|p| LoraModule {
            a: a0[p.block(cfg)].clone(),
            b: Tensor::zeros(&[cfg.lora_rank, cfg.d_model]),
            scale: cfg.lora_scale(),
        })
        .collect();
    TaskAdapterSet::from_modules(task_id, cfg, modules).expect("shapes follow config")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypernetwork {
    pub config: ModelConfig,
    /// One row per injection point.
    pub id_emb: Tensor,
    pub generators: Vec<BlockGenerator>,
    pub fusion: Vec<FusionLayer>,
}

impl ParamSet for Hypernetwork {
    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        self.id_emb.visit(&join(prefix, "id_emb"), out);
        self.generators.visit(&join(prefix, "generator"), out);
        self.fusion.visit(&join(prefix, "fusion"), out);
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        self.id_emb.visit_mut(&join(prefix, "id_emb"), out);
        self.generators.visit_mut(&join(prefix, "generator"), out);
        self.fusion.visit_mut(&join(prefix, "fusion"), out);
    }
}

impl Hypernetwork {
    /// Output head weights and the `B` half of its bias start at zero, so
    /// every generated `B` is exactly zero and the generated adapters add
    /// nothing. The `A` half of the bias starts at [`initial_lora_a`].
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng, lora_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, r, e, g) = (cfg.d_model, cfg.lora_rank, cfg.id_embed_dim, cfg.generator_hidden);
        let n_points = cfg.injection_points().len();
        let id_emb = Tensor::randn(&[n_points, e], 1.0, rng);
        let a0 = initial_lora_a(cfg, lora_seed);
        let generators = a0
            .iter()
            .map(|a| {
                let mut head = Linear::zeros(g, 2 * r * d);
                head.b.data_mut()[..d * r].copy_from_slice(a.data());
                BlockGenerator {
                    hidden: Linear::new(d + e, g, rng),
                    head,
                }
            })
            .collect();
        let fusion = (0..cfg.n_enc_layers)
            .map(|_| FusionLayer {
                attn: Attention::new(d, rng),
                norm: LayerNorm::new(d),
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            id_emb,
            generators,
            fusion,
        })
    }

    fn check_encoding(&self, tape: &Tape<'_>, i_x: Var) -> Result<()> {
        let shape = tape.shape(i_x);
        if shape.len() != 2 || shape[1] != self.config.d_model || shape[0] == 0 {
            return Err(ModelError::Config(format!(
                "instruction encoding shape {shape:?} does not match d_model {}",
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// LoRA factors for every injection point from `mean_rows(I_x)` and the
    /// point's id embedding.
    pub fn generate_adapters<'a>(&'a self, tape: &mut Tape<'a>, i_x: Var) -> Result<AdapterVars> {
        self.check_encoding(tape, i_x)?;
        GENERATE_CALLS.with(|c| c.set(c.get() + 1));
        flops::in_phase(Phase::AdapterGenerate, || {
            let cfg = &self.config;
            let (d, r) = (cfg.d_model, cfg.lora_rank);
            let pooled = tape.mean_rows(i_x);
            let ids = tape.param(&self.id_emb);
            let width = 2 * d * r;
            let pooled2 = tape.concat_rows(&[pooled, pooled])?;
            let mut modules = Vec::with_capacity(2 * cfg.n_blocks());
            // Each block's Q and V rows go through its generator together;
            // row order follows the injection index (Q = 2·block, V = 2·block + 1).
            for (block, gen) in self.generators.iter().enumerate() {
                let id = tape.slice_rows(ids, 2 * block, 2)?;
                let x = tape.concat_cols(&[pooled2, id])?;
                let h = gen.hidden.forward(tape, x)?;
                let h = tape.relu(h);
                let out = gen.head.forward(tape, h)?;
                for row in 0..2 {
                    modules.push(LoraVars {
                        a: tape.narrow(out, row * width, &[d, r])?,
                        b: tape.narrow(out, row * width + d * r, &[r, d])?,
                        scale: cfg.lora_scale(),
                    });
                }
            }
            Ok(AdapterVars { modules })
        })
    }

    /// Fusion hook for [`TransformerWeights::encode`].
    pub fn fusion<'a>(&'a self, i_x: Var) -> InstructionFusion<'a> {
        InstructionFusion { hyper: self, i_x }
    }
}

pub struct InstructionFusion<'a> {
    hyper: &'a Hypernetwork,
    i_x: Var,
}

impl<'a> EncoderFusion<'a> for InstructionFusion<'a> {
    fn fuse(&self, tape: &mut Tape<'a>, layer: usize, s: Var) -> Result<Var> {
        let cfg = &self.hyper.config;
        let active = match cfg.fusion_layers {
            FusionLayers::All => true,
            FusionLayers::Last => layer + 1 == cfg.n_enc_layers,
        };
        if !active {
            return Ok(s);
        }
        self.hyper.fusion[layer].forward(tape, s, self.i_x, cfg.n_heads)
    }
}

/// Copies generated adapter values off the tape.
pub fn materialize(tape: &Tape<'_>, vars: &AdapterVars, task_id: &str, cfg: &ModelConfig) -> Result<TaskAdapterSet> {
    let modules = vars
        .modules
        .iter()
        .map(|m| LoraModule {
            a: tape.to_tensor(m.a),
            b: tape.to_tensor(m.b),
            scale: m.scale,
        })
        .collect();
    TaskAdapterSet::from_modules(task_id, cfg, modules)
}

/// Decoder memory `(I_x ; F_last)`, instruction rows first.
pub fn assemble_decoder_memory(tape: &mut Tape<'_>, i_x: Var, f_last: Var) -> Result<Var> {
    Ok(tape.concat_rows(&[i_x, f_last])?)
}

/// Encodes the instance input `b` with adapters and (optionally) fusion,
/// returning the decoder memory.
pub fn encode_input<'a>(
    backbone: &'a TransformerWeights,
    hyper: &'a Hypernetwork,
    tape: &mut Tape<'a>,
    i_x: Var,
    adapters: Option<&AdapterVars>,
    input: &[Token],
    fusion: bool,
) -> Result<Var> {
    let hook = hyper.fusion(i_x);
    let enc = backbone.encode(tape, input, adapters, fusion.then_some(&hook as &dyn EncoderFusion<'a>))?;
    assemble_decoder_memory(tape, i_x, enc.hidden)
}

#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub logits: Var,
    pub adapters: AdapterVars,
    pub instruction: InstructionEncoding,
    pub memory: Var,
}

/// Full student pass: instruction encoding, adapter generation, fused
/// input encoding and decoding of `prefix` over `(I_x ; F)`. The
/// instruction is encoded once and shared by fusion and generation.
pub fn student_forward<'a>(
    backbone: &'a TransformerWeights,
    hyper: &'a Hypernetwork,
    tape: &mut Tape<'a>,
    instruction: &[Token],
    input: &[Token],
    prefix: &[Token],
    fusion: bool,
) -> Result<StudentOutput> {
    let enc = encode_instruction(backbone, tape, instruction)?;
    let adapters = hyper.generate_adapters(tape, enc.i_x)?;
    let memory = encode_input(backbone, hyper, tape, enc.i_x, Some(&adapters), input, fusion)?;
    let logits = backbone.decode_logits(tape, prefix, memory, Some(&adapters))?;
    Ok(StudentOutput {
        logits,
        adapters,
        instruction: enc,
        memory,
    })
}
