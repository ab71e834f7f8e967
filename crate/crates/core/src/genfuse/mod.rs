//! Generation and inference stages of one RLHF iteration: long-tail output
//! lengths, sample migration onto a few generation instances, and streaming
//! of finished samples into inference on the freed devices.

mod lengths;
mod plan;
mod sim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{estimate_params, subtask_latency, ClusterSpec, CostModel, Direction, ModelSpec};

pub use lengths::{sample_lengths, LengthDistribution};
pub use plan::{plan_migration, required_destinations};
pub use sim::{default_grid, simulate_fused, simulate_serial, sweep_threshold, SweepPoint, SweepResult, Timeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSample {
    pub id: usize,
    pub prompt_len: u32,
    pub target_output_len: u32,
    pub generated: u32,
    pub kv_bytes: f64,
}

/// A generation engine replica and the samples still assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenInstance {
    pub id: usize,
    pub inflight: Vec<usize>,
    pub bs_max: u64,
    pub kv_capacity: f64,
    pub decode_step: f64,
}

/// Snapshot handed to the migration planner.
#[derive(Debug, Clone, PartialEq)]
pub struct GenState {
    pub time: f64,
    pub samples: Vec<GenSample>,
    pub instances: Vec<GenInstance>,
}

impl GenState {
    pub fn remaining(&self) -> usize {
        self.instances.iter().map(|i| i.inflight.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    KvTransfer,
    RecomputePrefill,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::KvTransfer => "kv_transfer",
            Mechanism::RecomputePrefill => "recompute_prefill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub trigger_time: f64,
    pub r_t: usize,
    pub m: usize,
    pub destinations: Vec<usize>,
    pub mechanism: Mechanism,
    pub migrated: Vec<usize>,
    /// Destination of each migrated sample, parallel to `migrated`.
    pub assignment: Vec<usize>,
    pub overhead: f64,
}

impl MigrationPlan {
    /// True when the plan moves nothing and frees nothing.
    pub fn is_noop(&self) -> bool {
        self.destinations.is_empty()
    }
}

/// A forward-only task over every generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTask {
    pub name: String,
    pub spec: ModelSpec,
}

/// Everything about the generation stage except the batch itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSetup {
    pub actor: ModelSpec,
    pub inference: Vec<InferenceTask>,
    pub num_instances: usize,
    pub gpus_per_instance: u64,
    pub prompt_len: u32,
    /// `kv_capacity` and `bs_max` are per instance.
    pub cluster: ClusterSpec,
    pub cost: CostModel,
}

impl GenSetup {
    pub fn validate(&self) -> Result<()> {
        self.actor.validate()?;
        for t in &self.inference {
            t.spec.validate()?;
        }
        self.cluster.validate()?;
        self.cost.validate()?;
        if self.num_instances == 0 || self.gpus_per_instance == 0 {
            return Err(Error::invalid("need at least one generation instance with GPUs"));
        }
        if self.prompt_len == 0 {
            return Err(Error::invalid("prompt_len must be positive"));
        }
        Ok(())
    }

    pub fn kv_per_token(&self) -> f64 {
        self.actor.kv_bytes_per_token(self.cost.kv_element_bytes)
    }

    /// Prefill latency of `tokens` tokens of one sample on one instance.
    pub fn prefill_latency(&self, tokens: u32) -> Result<f64> {
        if tokens == 0 {
            return Ok(0.0);
        }
        let l = subtask_latency(
            &self.actor,
            self.actor.num_layers as f64,
            tokens as f64,
            1.0,
            Direction::Fwd,
            &self.cost,
        )?;
        Ok(l / self.gpus_per_instance as f64)
    }

    /// GPU-seconds of all inference tasks for a sample with `tokens` tokens.
    pub fn inference_work(&self, tokens: u32) -> f64 {
        let params: f64 = self.inference.iter().map(|t| estimate_params(&t.spec)).sum();
        params * tokens as f64 * self.cost.time_per_token_coeff
    }

    /// Builds the batch from output lengths, one sample per length.
    pub fn batch(&self, lengths: &[u32]) -> Vec<GenSample> {
        lengths
            .iter()
            .enumerate()
            .map(|(id, &len)| GenSample {
                id,
                prompt_len: self.prompt_len,
                target_output_len: len,
                generated: 0,
                kv_bytes: self.prompt_len as f64 * self.kv_per_token(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Admit,
    DecodeStart,
    Finish,
    Trigger,
    MigrateOut,
    MigrateIn,
    JoinInference,
    InferenceDone,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Admit => "admit",
            EventKind::DecodeStart => "decode_start",
            EventKind::Finish => "finish",
            EventKind::Trigger => "trigger",
            EventKind::MigrateOut => "migrate_out",
            EventKind::MigrateIn => "migrate_in",
            EventKind::JoinInference => "join_inference",
            EventKind::InferenceDone => "inference_done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenEvent {
    pub time: f64,
    pub instance: Option<usize>,
    pub kind: EventKind,
    pub sample: Option<usize>,
}

/// One line per event: `time,instance,kind,sample`, with `-` for absent fields.
pub fn format_events(events: &[GenEvent]) -> String {
    let mut out = String::from("time,instance,kind,sample\n");
    for e in events {
        let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        out.push_str(&format!("{:.9},{},{},{}\n", e.time, opt(e.instance), e.kind.as_str(), opt(e.sample)));
    }
    out
}
