use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

/// Inputs of the cost model: `N` parameters, `n` instances per task,
/// `t` instruction tokens and `i` input tokens per instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsQuery {
    #[serde(rename = "N")]
    pub n_params: u64,
    pub n: u64,
    pub t: u64,
    pub i: u64,
}

/// `N · n · (t + i)`: the instruction is reprocessed with every instance.
pub fn flops_standard(q: &FlopsQuery) -> u128 {
    q.n_params as u128 * q.n as u128 * (q.t as u128 + q.i as u128)
}

/// `N · (t + n · i)`: the instruction is processed once per task.
pub fn flops_tagi(q: &FlopsQuery) -> u128 {
    q.n_params as u128 * (q.t as u128 + q.n as u128 * q.i as u128)
}

/// Backbone parameter count from the configuration alone.
pub fn backbone_param_count(cfg: &ModelConfig) -> usize {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ff = d * f + f + f * d + d;
    let enc_layer = ln + attn + ln + ff;
    let dec_layer = ln + attn + ln + attn + ln + ff;
    cfg.vocab_size * d + cfg.max_len * d + cfg.n_enc_layers * enc_layer + cfg.n_dec_layers * dec_layer + 2 * ln
}

/// Generated LoRA parameters over backbone parameters:
/// `blocks · 2 · r · (d + k) / N` with square Q/V projections (`k = d`).
pub fn param_ratio(cfg: &ModelConfig) -> f64 {
    let (d, k) = (cfg.d_model, cfg.d_model);
    let generated = cfg.n_blocks() * 2 * cfg.lora_rank * (d + k);
    generated as f64 / backbone_param_count(cfg) as f64
}
