//! Model shapes, parallel strategies, the cluster description and the
//! analytical latency/memory cost model every simulator is built on.
//!
//! Latency is proportional to the parameter count a stage holds times the
//! number of tokens it processes. Backward passes cost a fixed multiple of
//! the forward. Activation memory is linear in hidden size, tokens and layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward or backward pass of a subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Fwd,
    Bwd,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Fwd => "fwd",
            Direction::Bwd => "bwd",
        }
    }
}

fn default_vocab() -> u64 {
    32_000
}

/// Decoder-only transformer shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub num_heads: u64,
    pub hidden_size: u64,
    pub intermediate_size: u64,
    /// Only used for the embedding term of [`estimate_params`].
    #[serde(default = "default_vocab")]
    pub vocab_size: u64,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        num_layers: u64,
        num_heads: u64,
        hidden_size: u64,
        intermediate_size: u64,
    ) -> Result<Self> {
        let spec = ModelSpec {
            name: name.into(),
            num_layers,
            num_heads,
            hidden_size,
            intermediate_size,
            vocab_size: default_vocab(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_vocab(mut self, vocab_size: u64) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.num_heads == 0
            || self.hidden_size == 0
            || self.intermediate_size == 0
        {
            return Err(Error::invalid(format!(
                "model {:?}: layers, heads, hidden and intermediate sizes must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Parameters of one transformer layer: attention projections plus the MLP.
    pub fn layer_params(&self) -> f64 {
        let h = self.hidden_size as f64;
        let i = self.intermediate_size as f64;
        4.0 * h * h + 2.0 * h * i
    }

    /// Bytes of key/value cache per token for the whole model.
    pub fn kv_bytes_per_token(&self, element_bytes: f64) -> f64 {
        2.0 * self.num_layers as f64 * self.hidden_size as f64 * element_bytes
    }

    pub fn llama_13b() -> Self {
        ModelSpec::new("LLaMA-13B", 40, 40, 5120, 20480).expect("valid preset")
    }

    pub fn llama_33b() -> Self {
        ModelSpec::new("LLaMA-33B", 60, 52, 6656, 26624).expect("valid preset")
    }

    pub fn llama_65b() -> Self {
        ModelSpec::new("LLaMA-65B", 80, 64, 8192, 32768).expect("valid preset")
    }
}

/// Parameter count: `L * (4 h^2 + 2 h i)` for the layers plus `2 * vocab * h`
/// for the input embedding and the output head.
pub fn estimate_params(spec: &ModelSpec) -> f64 {
    spec.num_layers as f64 * spec.layer_params()
        + 2.0 * spec.vocab_size as f64 * spec.hidden_size as f64
}

/// Data, pipeline and tensor parallel degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelStrategy {
    pub dp: u64,
    pub pp: u64,
    pub tp: u64,
}

impl ParallelStrategy {
    pub fn new(dp: u64, pp: u64, tp: u64) -> Result<Self> {
        let s = ParallelStrategy { dp, pp, tp };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dp == 0 || self.pp == 0 || self.tp == 0 {
            return Err(Error::invalid("parallel degrees must be positive"));
        }
        if !self.tp.is_power_of_two() {
            return Err(Error::invalid(format!(
                "tp degree {} is not a power of two",
                self.tp
            )));
        }
        Ok(())
    }

    pub fn gpus(&self) -> u64 {
        self.dp * self.pp * self.tp
    }

    /// Checks the strategy occupies exactly the given device pool.
    pub fn validate_for(&self, cluster: &ClusterSpec) -> Result<()> {
        self.validate()?;
        if self.gpus() != cluster.num_gpus {
            return Err(Error::invalid(format!(
                "strategy dp={} pp={} tp={} uses {} GPUs, cluster has {}",
                self.dp,
                self.pp,
                self.tp,
                self.gpus(),
                cluster.num_gpus
            )));
        }
        Ok(())
    }
}

fn default_bwd_ratio() -> f64 {
    2.0
}

fn default_kv_element_bytes() -> f64 {
    2.0
}

/// Analytical cost coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Seconds per (parameter x token) on one GPU for a forward pass.
    pub time_per_token_coeff: f64,
    #[serde(default = "default_bwd_ratio")]
    pub backward_forward_ratio: f64,
    /// Bytes per (hidden x token x layer) of stored activations.
    pub activation_bytes_coeff: f64,
    /// Seconds per decoding iteration while the batch is at most `bs_max`.
    pub decode_step_base: f64,
    /// Bytes per second between pipeline stages.
    pub comm_bandwidth: f64,
    #[serde(default = "default_kv_element_bytes")]
    pub kv_element_bytes: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            // 2 flops per parameter-token at roughly 125 TFLOP/s sustained.
            time_per_token_coeff: 1.6e-14,
            backward_forward_ratio: 2.0,
            activation_bytes_coeff: 34.0,
            decode_step_base: 0.03,
            comm_bandwidth: 25.0e9,
            kv_element_bytes: 2.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("time_per_token_coeff", self.time_per_token_coeff),
            ("activation_bytes_coeff", self.activation_bytes_coeff),
            ("decode_step_base", self.decode_step_base),
            ("comm_bandwidth", self.comm_bandwidth),
            ("kv_element_bytes", self.kv_element_bytes),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("cost model {name} must be positive")));
            }
        }
        if !(self.backward_forward_ratio >= 1.0) {
            return Err(Error::invalid("backward_forward_ratio must be at least 1"));
        }
        Ok(())
    }
}

fn default_gpu_memory() -> f64 {
    80.0e9
}

/// Device pool shared by the fused tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_gpus: u64,
    pub gpus_per_node: u64,
    /// Activation memory available to one pipeline stage, in bytes.
    pub activation_capacity_per_stage: f64,
    /// Memory a generation instance can devote to key/value cache, in bytes.
    pub kv_capacity: f64,
    /// Largest decoding batch that keeps per-iteration latency flat.
    pub bs_max: u64,
    /// Bytes per second between generation instances.
    pub interconnect_bandwidth: f64,
    /// Per-GPU memory used by the strategy search.
    #[serde(default = "default_gpu_memory")]
    pub gpu_memory: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 || self.gpus_per_node == 0 {
            return Err(Error::invalid("cluster must have GPUs"));
        }
        if self.num_gpus % self.gpus_per_node != 0 {
            return Err(Error::invalid(format!(
                "{} GPUs do not divide into nodes of {}",
                self.num_gpus, self.gpus_per_node
            )));
        }
        if self.bs_max == 0 {
            return Err(Error::invalid("bs_max must be positive"));
        }
        for (name, v) in [
            ("activation_capacity_per_stage", self.activation_capacity_per_stage),
            ("kv_capacity", self.kv_capacity),
            ("interconnect_bandwidth", self.interconnect_bandwidth),
            ("gpu_memory", self.gpu_memory),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("cluster {name} must be positive")));
            }
        }
        Ok(())
    }

    /// A cluster with unbounded activation and KV memory, useful for pure
    /// latency studies.
    pub fn unbounded(num_gpus: u64, gpus_per_node: u64) -> Self {
        ClusterSpec {
            num_gpus,
            gpus_per_node,
            activation_capacity_per_stage: f64::INFINITY,
            kv_capacity: f64::INFINITY,
            bs_max: 256,
            interconnect_bandwidth: 25.0e9,
            gpu_memory: default_gpu_memory(),
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// Latency of one micro-batch pass through `layers_in_stage` layers on one
/// GPU. Callers divide by the tensor-parallel degree of the stage.
///
/// `layers_in_stage` may be fractional when a model's layers do not divide
/// evenly into its stages.
pub fn subtask_latency(
    spec: &ModelSpec,
    layers_in_stage: f64,
    seq_len: f64,
    mb_size: f64,
    direction: Direction,
    cost: &CostModel,
) -> Result<f64> {
    check_positive("layers_in_stage", layers_in_stage)?;
    check_positive("seq_len", seq_len)?;
    check_positive("mb_size", mb_size)?;
    let fwd = spec.layer_params() * layers_in_stage * seq_len * mb_size * cost.time_per_token_coeff;
    Ok(match direction {
        Direction::Fwd => fwd,
        Direction::Bwd => fwd * cost.backward_forward_ratio,
    })
}

/// Activation bytes a forward pass leaves resident until its backward ends.
pub fn activation_per_microbatch(
    spec: &ModelSpec,
    layers_in_stage: f64,
    seq_len: f64,
    mb_size: f64,
    cost: &CostModel,
) -> Result<f64> {
    check_positive("layers_in_stage", layers_in_stage)?;
    check_positive("seq_len", seq_len)?;
    check_positive("mb_size", mb_size)?;
    Ok(cost.activation_bytes_coeff * spec.hidden_size as f64 * seq_len * mb_size * layers_in_stage)
}
