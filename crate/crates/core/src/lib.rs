//! Instruction-conditioned LoRA generation for a small encoder-decoder
//! transformer, with distillation training and cost accounting.

pub mod tensor;
pub mod hypernet;
pub mod model;
pub mod tasks;
pub mod training;
pub mod eval;
pub mod cli;
