//! Thread-local matmul FLOP counter with per-phase buckets.
//!
//! Every forward matmul (including the score and mixing products inside
//! attention) adds `2·m·k·n` to the bucket of the current phase.

use serde::{Deserialize, Serialize};
use std::cell::RefCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InstructionEncode,
    AdapterGenerate,
    PerInstance,
    Other,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsCounter {
    pub instruction_encode: u64,
    pub adapter_generate: u64,
    pub per_instance: u64,
    pub other: u64,
}

impl FlopsCounter {
    pub fn total(&self) -> u64 {
        self.instruction_encode + self.adapter_generate + self.per_instance + self.other
    }

    fn bucket_mut(&mut self, phase: Phase) -> &mut u64 {
        match phase {
            Phase::InstructionEncode => &mut self.instruction_encode,
            Phase::AdapterGenerate => &mut self.adapter_generate,
            Phase::PerInstance => &mut self.per_instance,
            Phase::Other => &mut self.other,
        }
    }

    pub fn get(&self, phase: Phase) -> u64 {
        match phase {
            Phase::InstructionEncode => self.instruction_encode,
            Phase::AdapterGenerate => self.adapter_generate,
            Phase::PerInstance => self.per_instance,
            Phase::Other => self.other,
        }
    }
}

struct State {
    counter: FlopsCounter,
    phase: Phase,
}

thread_local! {
    static STATE: RefCell<State> = const {
        RefCell::new(State {
            counter: FlopsCounter {
                instruction_encode: 0,
                adapter_generate: 0,
                per_instance: 0,
                other: 0,
            },
            phase: Phase::Other,
        })
    };
}

pub fn add(flops: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let phase = s.phase;
        *s.counter.bucket_mut(phase) += flops;
    });
}

pub fn total() -> u64 {
    snapshot().total()
}

pub fn snapshot() -> FlopsCounter {
    STATE.with(|s| s.borrow().counter)
}

pub fn reset() {
    STATE.with(|s| s.borrow_mut().counter = FlopsCounter::default());
}

pub fn phase() -> Phase {
    STATE.with(|s| s.borrow().phase)
}

/// Runs `f` with `phase` as the active bucket, restoring the previous one.
pub fn in_phase<T>(phase: Phase, f: impl FnOnce() -> T) -> T {
    let prev = STATE.with(|s| std::mem::replace(&mut s.borrow_mut().phase, phase));
    let out = f();
    STATE.with(|s| s.borrow_mut().phase = prev);
    out
}
