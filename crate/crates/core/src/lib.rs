//! Adaptive-origin guidance for instruction-conditioned flow-matching
//! editors, at desk scale.
//!
//! A small conditional velocity network is trained on synthetic paired
//! edits with reserved `null` and `id` instruction tokens. Sampling combines
//! the conditional, null and identity predictions so that a single
//! strength `α ∈ [0, 1]` moves continuously from reconstructing the source
//! (`α = 0`) to the model's standard guided edit (`α = 1`).

pub mod eval;
pub mod flow;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod ndcore;
pub mod rng;
pub mod sampler;
pub mod task;
pub mod train;

pub use task::{Instruction, Sample, TaskKind};
