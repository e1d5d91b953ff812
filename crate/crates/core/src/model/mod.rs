//! Pre-norm encoder-decoder transformer with LoRA injection on the query
//! and value projections of every self-attention block.

pub mod checkpoint;
mod lora;
pub(crate) mod params;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use lora::{AdapterVars, InjectionPoint, LoraModule, LoraVars, Proj, Stack, TaskAdapterSet};
pub use params::ParamSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{SeededRng, Tape, Tensor, TensorError, Var};
use params::impl_param_set;

pub type Token = u32;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: Token, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("empty {0} sequence")]
    Empty(&'static str),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    /// Hidden width of each per-block generator MLP.
    pub generator_hidden: usize,
    /// Width of the layer-id embedding fed to the generator.
    pub id_embed_dim: usize,
    /// Encoder layers that receive instruction fusion.
    pub fusion_layers: crate::hypernet::FusionLayers,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: crate::tasks::VOCAB_SIZE,
            max_len: 128,
            lora_rank: 4,
            generator_hidden: 256,
            id_embed_dim: 32,
            fusion_layers: crate::hypernet::FusionLayers::All,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("generator_hidden", self.generator_hidden),
            ("id_embed_dim", self.id_embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.d_model {
            return Err(ModelError::Config(format!(
                "lora_rank {} must be in [1, d_model)",
                self.lora_rank
            )));
        }
        Ok(())
    }

    /// Self-attention blocks across both stacks.
    pub fn n_blocks(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }

    /// Q and V of every self-attention block, encoder first.
    pub fn injection_points(&self) -> Vec<InjectionPoint> {
        let mut out = Vec::with_capacity(2 * self.n_blocks());
        for (stack, n) in [(Stack::Encoder, self.n_enc_layers), (Stack::Decoder, self.n_dec_layers)] {
            for layer in 0..n {
                for proj in [Proj::Q, Proj::V] {
                    out.push(InjectionPoint { stack, layer, proj });
                }
            }
        }
        out
    }

    /// `alpha / r` with `alpha = r`.
    pub fn lora_scale(&self) -> f64 {
        1.0
    }

    /// LoRA parameters in one adapter set: `blocks · 2 · r · (d + k)`.
    pub fn lora_param_count(&self) -> usize {
        self.n_blocks() * 2 * self.lora_rank * (self.d_model + self.d_model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Tensor,
    pub b: Tensor,
}
impl_param_set!(Linear { w, b });

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            w: Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// `x·W + b + scale·(x·A)·B`.
    pub fn forward_lora<'a>(&'a self, tape: &mut Tape<'a>, x: Var, lora: Option<&LoraVars>) -> Result<Var> {
        let base = self.forward(tape, x)?;
        let Some(l) = lora else { return Ok(base) };
        let xa = tape.matmul(x, l.a)?;
        let mut delta = tape.matmul(xa, l.b)?;
        if l.scale != 1.0 {
            delta = tape.scale(delta, l.scale);
        }
        Ok(tape.add(base, delta)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}
impl_param_set!(LayerNorm { gain, bias });

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        Ok(tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}
impl_param_set!(Attention { q, k, v, o });

impl Attention {
    pub fn new(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
        }
    }

    /// Queries from `x`, keys and values from `context`; optional LoRA on
    /// the query and value projections.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        context: Var,
        heads: usize,
        causal: bool,
        lora_q: Option<&LoraVars>,
        lora_v: Option<&LoraVars>,
    ) -> Result<Var> {
        let q = self.q.forward_lora(tape, x, lora_q)?;
        let k = self.k.forward(tape, context)?;
        let v = self.v.forward_lora(tape, context, lora_v)?;
        let a = tape.attention(q, k, v, heads, causal)?;
        self.o.forward(tape, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}
impl_param_set!(FeedForward { up, down });

impl FeedForward {
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}
impl_param_set!(EncoderLayer { ln_attn, attn, ln_ff, ff });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}
impl_param_set!(DecoderLayer { ln_self, self_attn, ln_cross, cross_attn, ln_ff, ff });

/// Hook applied to each encoder layer's self-attention output `S_l`.
pub trait EncoderFusion<'a> {
    fn fuse(&self, tape: &mut Tape<'a>, layer: usize, s: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final (normalised) hidden states, `n × d`.
    pub hidden: Var,
    /// Output of each layer's self-attention sublayer (after the residual).
    pub self_attn_outputs: Vec<Var>,
}

/// The backbone ("vanilla") model. The output projection is tied to the
/// token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
}

impl ParamSet for TransformerWeights {
    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        use params::join;
        self.tok_emb.visit(&join(prefix, "tok_emb"), out);
        self.pos_emb.visit(&join(prefix, "pos_emb"), out);
        self.encoder.visit(&join(prefix, "enc"), out);
        self.enc_norm.visit(&join(prefix, "enc_norm"), out);
        self.decoder.visit(&join(prefix, "dec"), out);
        self.dec_norm.visit(&join(prefix, "dec_norm"), out);
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        use params::join;
        self.tok_emb.visit_mut(&join(prefix, "tok_emb"), out);
        self.pos_emb.visit_mut(&join(prefix, "pos_emb"), out);
        self.encoder.visit_mut(&join(prefix, "enc"), out);
        self.enc_norm.visit_mut(&join(prefix, "enc_norm"), out);
        self.decoder.visit_mut(&join(prefix, "dec"), out);
        self.dec_norm.visit_mut(&join(prefix, "dec_norm"), out);
    }
}

/// Sinusoidal table scaled to unit row norm, used as the starting value of
/// the learned positional embeddings.
fn sinusoidal(rows: usize, d: usize) -> Tensor {
    let scale = (2.0 / d as f64).sqrt();
    let data = (0..rows)
        .flat_map(|p| {
            (0..d).map(move |j| {
                let freq = 1.0 / 10000f64.powf((j / 2 * 2) as f64 / d as f64);
                let a = p as f64 * freq;
                scale * if j % 2 == 0 { a.sin() } else { a.cos() }
            })
        })
        .collect();
    Tensor::new(vec![rows, d], data).expect("non-empty table")
}

impl TransformerWeights {
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let ff = |rng: &mut SeededRng| FeedForward {
            up: Linear::new(d, f, rng),
            down: Linear::new(f, d, rng),
        };
        let tok_emb = Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), rng);
        let pos_emb = sinusoidal(config.max_len, d);
        let encoder = (0..config.n_enc_layers)
            .map(|_| EncoderLayer {
                ln_attn: LayerNorm::new(d),
                attn: Attention::new(d, rng),
                ln_ff: LayerNorm::new(d),
                ff: ff(rng),
            })
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|_| DecoderLayer {
                ln_self: LayerNorm::new(d),
                self_attn: Attention::new(d, rng),
                ln_cross: LayerNorm::new(d),
                cross_attn: Attention::new(d, rng),
                ln_ff: LayerNorm::new(d),
                ff: ff(rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            encoder,
            enc_norm: LayerNorm::new(d),
            decoder,
            dec_norm: LayerNorm::new(d),
        })
    }

    fn check_tokens(&self, tokens: &[Token], what: &'static str) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(ModelError::Empty(what));
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::Length {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(ModelError::Vocabulary {
                        id: t,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    fn embed<'a>(&'a self, tape: &mut Tape<'a>, ids: &[usize]) -> Result<Var> {
        let emb = tape.param(&self.tok_emb);
        let pos = tape.param(&self.pos_emb);
        let x = tape.embedding(emb, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = tape.embedding(pos, &positions)?;
        Ok(tape.add(x, p)?)
    }

    fn lora_for<'v>(
        &self,
        adapters: Option<&'v AdapterVars>,
        stack: Stack,
        layer: usize,
    ) -> (Option<&'v LoraVars>, Option<&'v LoraVars>) {
        let Some(a) = adapters else { return (None, None) };
        let idx = |proj| InjectionPoint { stack, layer, proj }.index(&self.config);
        (a.get(idx(Proj::Q)), a.get(idx(Proj::V)))
    }

    /// Runs the encoder. With `fusion`, each layer's self-attention output
    /// is replaced by the fused representation before the feed-forward.
    pub fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[Token],
        adapters: Option<&AdapterVars>,
        fusion: Option<&dyn EncoderFusion<'a>>,
    ) -> Result<EncoderOutput> {
        let ids = self.check_tokens(tokens, "encoder input")?;
        let mut x = self.embed(tape, &ids)?;
        let mut s_outputs = Vec::with_capacity(self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            let (lq, lv) = self.lora_for(adapters, Stack::Encoder, l);
            let h = layer.ln_attn.forward(tape, x)?;
            let a = layer.attn.forward(tape, h, h, self.config.n_heads, false, lq, lv)?;
            let mut s = tape.add(x, a)?;
            s_outputs.push(s);
            if let Some(f) = fusion {
                s = f.fuse(tape, l, s)?;
            }
            let h = layer.ln_ff.forward(tape, s)?;
            let f = layer.ff.forward(tape, h)?;
            x = tape.add(s, f)?;
        }
        let hidden = self.enc_norm.forward(tape, x)?;
        Ok(EncoderOutput {
            hidden,
            self_attn_outputs: s_outputs,
        })
    }

    /// Logits `T × V` for a decoder input (BOS-prefixed target prefix)
    /// attending to `memory`.
    pub fn decode_logits<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        prefix: &[Token],
        memory: Var,
        adapters: Option<&AdapterVars>,
    ) -> Result<Var> {
        let ids = self.check_tokens(prefix, "decoder prefix")?;
        if tape.value(memory).is_empty() {
            return Err(ModelError::Empty("memory"));
        }
        let heads = self.config.n_heads;
        let mut y = self.embed(tape, &ids)?;
        for (l, layer) in self.decoder.iter().enumerate() {
            let (lq, lv) = self.lora_for(adapters, Stack::Decoder, l);
            let h = layer.ln_self.forward(tape, y)?;
            let a = layer.self_attn.forward(tape, h, h, heads, true, lq, lv)?;
            y = tape.add(y, a)?;
            let h = layer.ln_cross.forward(tape, y)?;
            let c = layer.cross_attn.forward(tape, h, memory, heads, false, None, None)?;
            y = tape.add(y, c)?;
            let h = layer.ln_ff.forward(tape, y)?;
            let f = layer.ff.forward(tape, h)?;
            y = tape.add(y, f)?;
        }
        let h = self.dec_norm.forward(tape, y)?;
        let emb = tape.param(&self.tok_emb);
        Ok(tape.matmul_t(h, emb)?)
    }

    /// Greedy argmax decoding against a fixed encoder memory. Stops after
    /// emitting `eos` or `max_new` tokens; ties go to the lowest id. The
    /// returned sequence excludes BOS and includes EOS when emitted.
    pub fn greedy_decode(
        &self,
        memory: &Tensor,
        adapters: Option<&TaskAdapterSet>,
        bos: Token,
        eos: Token,
        max_new: usize,
    ) -> Result<Vec<Token>> {
        if max_new == 0 {
            return Err(ModelError::Config("max_new must be >= 1".into()));
        }
        let mut prefix = vec![bos];
        let mut out = Vec::new();
        while out.len() < max_new {
            let mut tape = Tape::no_grad();
            let mem = tape.constant(memory.clone());
            let bound = adapters.map(|a| a.bind(&mut tape));
            let logits = self.decode_logits(&mut tape, &prefix, mem, bound.as_ref())?;
            tape.check_finite()?;
            let v = self.config.vocab_size;
            let last = &tape.value(logits)[(prefix.len() - 1) * v..prefix.len() * v];
            let next = argmax(last) as Token;
            out.push(next);
            if next == eos || prefix.len() >= self.config.max_len {
                break;
            }
            prefix.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
