//! Fused bidirectional pipelines: two models share the same physical stages,
//! one flowing forward and the other in reversed stage order.

mod layout;
pub(crate) mod incremental;
mod schedule;

pub use layout::{
    transform_problem, Chunk, FusionLayout, ModelId, PipelineSpec, Subtask, SubtaskId, TrainingShape,
};
pub use schedule::{
    check_valid, compute_energy, energy_and_peak, evaluate, peak_memory, Evaluator, FusedSchedule, Timeline,
    Violation, ViolationKind,
};
pub(crate) use schedule::row_peak;
