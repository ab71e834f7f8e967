//! Scheduling and simulation for fused multi-model RLHF training.

pub mod annealer;
pub mod baseline;
pub mod error;
pub mod fusion;
pub mod genfuse;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod workflow;

pub use error::{Error, Result};
pub use model::{ClusterSpec, CostModel, Direction, ModelSpec, ParallelStrategy};
pub use scalar::Scalar;

/// Pipeline trace with floating-point seconds.
pub type Trace = baseline::PipelineTaskTrace<f64>;
/// Pipeline trace over exact rationals.
pub type ExactTrace = baseline::PipelineTaskTrace<num_rational::Rational64>;
/// Fusion layout with floating-point latencies.
pub type Layout = fusion::FusionLayout<f64>;
/// Fusion layout over exact rationals.
pub type ExactLayout = fusion::FusionLayout<num_rational::Rational64>;
