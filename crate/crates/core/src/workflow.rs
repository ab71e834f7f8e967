//! One RLHF iteration end to end: generation and inference, then actor and
//! critic training per mini-batch, plus task-switching overhead.

use serde::{Deserialize, Serialize};

use crate::annealer::{greedy_schedule, multi_seed_search, serial_1f1b_makespan, AnnealParams};
use crate::error::{Error, Result};
use crate::fusion::{transform_problem, FusedSchedule, FusionLayout, TrainingShape};
use crate::genfuse::{
    default_grid, sample_lengths, simulate_fused, simulate_serial, sweep_threshold, GenSetup, InferenceTask,
    LengthDistribution,
};
use crate::model::{
    activation_per_microbatch, estimate_params, subtask_latency, ClusterSpec, CostModel, Direction, ModelSpec,
    ParallelStrategy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Base,
    Fused,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Fused => "fused",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Mode::Base),
            "fused" => Ok(Mode::Fused),
            _ => Err(Error::invalid(format!("mode must be base or fused, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub actor: ModelSpec,
    pub reference: ModelSpec,
    pub critic: ModelSpec,
    pub reward: ModelSpec,
    pub actor_strategy: ParallelStrategy,
    pub critic_strategy: ParallelStrategy,
    /// GPUs per generation instance; the whole pool is split into instances.
    pub gen_gpus_per_instance: u64,
    pub global_batch: u64,
    pub mini_batch: u64,
    pub microbatch_size: u64,
    pub prompt_len: u32,
    pub lengths: LengthDistribution,
    pub seed: u64,
    /// Fixed migration threshold as a fraction of the batch; swept when absent.
    pub migration_ratio: Option<f64>,
    /// Seconds of fixed setup per iteration for task switching.
    pub switch_setup: f64,
    pub anneal: AnnealParams,
    pub chains: usize,
    pub cluster: ClusterSpec,
    pub cost: CostModel,
}

impl IterationConfig {
    /// 13B actor and reference, 33B critic and reward model on 64 GPUs.
    pub fn example() -> Self {
        let mut cluster = ClusterSpec::unbounded(64, 8);
        cluster.kv_capacity = 80e9;
        IterationConfig {
            actor: ModelSpec::llama_13b(),
            reference: ModelSpec::llama_13b(),
            critic: ModelSpec::llama_33b(),
            reward: ModelSpec::llama_33b(),
            actor_strategy: ParallelStrategy { dp: 2, pp: 4, tp: 8 },
            critic_strategy: ParallelStrategy { dp: 1, pp: 8, tp: 8 },
            gen_gpus_per_instance: 8,
            global_batch: 512,
            mini_batch: 64,
            microbatch_size: 4,
            prompt_len: 1024,
            lengths: LengthDistribution::Lognormal { median: 200.0, p999_ratio: 10.0, max_len: 1024 },
            seed: 0,
            migration_ratio: None,
            switch_setup: 1.0,
            anneal: AnnealParams::default(),
            chains: 4,
            cluster,
            cost: CostModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in [&self.actor, &self.reference, &self.critic, &self.reward] {
            m.validate()?;
        }
        if estimate_params(&self.actor) != estimate_params(&self.reference) {
            return Err(Error::invalid("actor and reference models must have the same size"));
        }
        if estimate_params(&self.critic) != estimate_params(&self.reward) {
            return Err(Error::invalid("critic and reward models must have the same size"));
        }
        self.cluster.validate()?;
        self.cost.validate()?;
        self.lengths.validate()?;
        if self.mini_batch == 0 || self.global_batch % self.mini_batch != 0 {
            return Err(Error::invalid(format!(
                "global batch {} is not a multiple of mini-batch {}",
                self.global_batch, self.mini_batch
            )));
        }
        let gpi = self.gen_gpus_per_instance;
        if gpi == 0 || self.cluster.num_gpus % gpi != 0 {
            return Err(Error::invalid(format!(
                "{} GPUs do not split into generation instances of {gpi}",
                self.cluster.num_gpus
            )));
        }
        if let Some(r) = self.migration_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("migration_ratio must be in [0, 1], got {r}")));
            }
        }
        if !(self.switch_setup >= 0.0) {
            return Err(Error::invalid("switch_setup must be non-negative"));
        }
        if self.chains == 0 {
            return Err(Error::invalid("need at least one annealing chain"));
        }
        self.anneal.validate()
    }

    pub fn gen_setup(&self) -> GenSetup {
        GenSetup {
            actor: self.actor.clone(),
            inference: vec![
                InferenceTask { name: "reference".into(), spec: self.reference.clone() },
                InferenceTask { name: "reward".into(), spec: self.reward.clone() },
                InferenceTask { name: "critic".into(), spec: self.critic.clone() },
            ],
            num_instances: (self.cluster.num_gpus / self.gen_gpus_per_instance) as usize,
            gpus_per_instance: self.gen_gpus_per_instance,
            prompt_len: self.prompt_len,
            cluster: self.cluster,
            cost: self.cost,
        }
    }

    /// Training layout of one mini-batch, at the batch's mean sequence length.
    pub fn training_layout(&self, lengths: &[u32]) -> Result<FusionLayout<f64>> {
        let mean = lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64;
        let shape = TrainingShape {
            global_batch: self.mini_batch,
            microbatch_size: self.microbatch_size,
            seq_len: self.prompt_len as f64 + mean,
        };
        transform_problem(
            &self.actor,
            &self.actor_strategy,
            &self.critic,
            &self.critic_strategy,
            &shape,
            &self.cluster,
            &self.cost,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationBreakdown {
    pub gen_plus_inf: f64,
    pub train: f64,
    pub others: f64,
}

impl IterationBreakdown {
    pub fn total(&self) -> f64 {
        self.gen_plus_inf + self.train + self.others
    }
}

impl std::fmt::Display for IterationBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let total = self.total();
        writeln!(f, "{:<12} {:>12} {:>8}", "stage", "seconds", "share")?;
        for (name, v) in [("Gen.+Inf.", self.gen_plus_inf), ("Train", self.train), ("Others", self.others)] {
            writeln!(f, "{name:<12} {v:>12.3} {:>7.2}%", 100.0 * v / total)?;
        }
        write!(f, "{:<12} {total:>12.3}", "Total")
    }
}

/// Everything `simulate_iteration` measured on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub breakdown: IterationBreakdown,
    pub migration_ratio: Option<f64>,
    /// Makespan of one mini-batch at the mean sequence length.
    pub minibatch_makespan: f64,
    pub schedule: FusedSchedule,
}

/// Simulates one iteration; see [`simulate_iteration_report`].
pub fn simulate_iteration(config: &IterationConfig, mode: Mode) -> Result<IterationBreakdown> {
    Ok(simulate_iteration_report(config, mode)?.breakdown)
}

/// Base mode runs generation then inference serially and trains the two
/// models one after the other with 1F1B. Fused mode migrates the long tail
/// and trains with an annealed fused schedule, kept only if it is no slower
/// than serial. The same schedule serves every mini-batch; each mini-batch is
/// scaled by its token load on the busiest data-parallel group.
pub fn simulate_iteration_report(config: &IterationConfig, mode: Mode) -> Result<IterationReport> {
    config.validate()?;
    let lengths = sample_lengths(&config.lengths, config.global_batch as usize, config.seed)?;
    let setup = config.gen_setup();
    let batch = setup.batch(&lengths);

    let (gen_plus_inf, migration_ratio) = match mode {
        Mode::Base => (simulate_serial(&batch, &setup)?.total, None),
        Mode::Fused => match config.migration_ratio {
            Some(r) => {
                let r_t = (r * batch.len() as f64).round() as usize;
                (simulate_fused(&batch, &setup, r_t)?.total, Some(r))
            }
            None => {
                let sweep = sweep_threshold(&batch, &setup, &default_grid())?;
                let best = sweep.best_point();
                if best.total <= sweep.serial_total {
                    (best.total, Some(best.ratio))
                } else {
                    (sweep.serial_total, Some(0.0))
                }
            }
        },
    };

    let layout = config.training_layout(&lengths)?;
    let serial = serial_1f1b_makespan(&layout)?;
    let (schedule, per_mb) = match mode {
        Mode::Base => (crate::annealer::serial_1f1b_schedule(&layout), serial),
        Mode::Fused => {
            let s0 = greedy_schedule(&layout)?;
            let (s, report) = multi_seed_search(&s0, &layout, &config.anneal, config.chains)?;
            if report.best_energy <= serial {
                (s, report.best_energy)
            } else {
                (crate::annealer::serial_1f1b_schedule(&layout), serial)
            }
        }
    };
    let tokens: Vec<u32> = lengths.iter().map(|&l| l + config.prompt_len).collect();
    let dp = config.actor_strategy.dp.max(config.critic_strategy.dp) as usize;
    let train: f64 = tokens
        .chunks(config.mini_batch as usize)
        .map(|mb| per_mb * load_factor(mb, dp))
        .sum();

    let others = switch_overhead(config);
    Ok(IterationReport {
        breakdown: IterationBreakdown { gen_plus_inf, train, others },
        migration_ratio,
        minibatch_makespan: per_mb,
        schedule,
    })
}

/// Busiest group's tokens relative to an even split.
fn load_factor(tokens: &[u32], dp: usize) -> f64 {
    let dp = dp.min(tokens.len()).max(1);
    let groups = balance_minibatch(tokens, dp);
    let loads: Vec<u64> = groups.iter().map(|g| g.iter().map(|&i| tokens[i] as u64).sum()).collect();
    let total: u64 = loads.iter().sum();
    let max = *loads.iter().max().expect("at least one group");
    max as f64 * dp as f64 / total as f64
}

/// Weight redistribution between generation and training layouts: the actor
/// moves twice and the critic once, every GPU sending its shard in parallel.
pub fn switch_overhead(config: &IterationConfig) -> f64 {
    let bytes = 2.0 * (2.0 * estimate_params(&config.actor) + estimate_params(&config.critic));
    bytes / (config.cluster.num_gpus as f64 * config.cluster.interconnect_bandwidth) + config.switch_setup
}

/// Longest-processing-time packing of sample indices into `dp` groups.
/// Ties go to the earlier sample and the lower group.
pub fn balance_minibatch(lengths: &[u32], dp: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(lengths[i]), i));
    let mut groups = vec![Vec::new(); dp];
    let mut load = vec![0u64; dp];
    for i in order {
        let g = (0..dp).min_by_key(|&g| (load[g], g)).expect("dp > 0");
        groups[g].push(i);
        load[g] += lengths[i] as u64;
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Train,
    Forward,
}

/// Latency multiplier for splitting a layer across `tp` GPUs.
const TP_OVERHEAD_PER_DOUBLING: f64 = 0.1;

/// Bytes per parameter for training: bf16 weights and gradients plus fp32
/// master weights and two Adam moments.
const TRAIN_BYTES_PER_PARAM: f64 = 16.0;
const FORWARD_BYTES_PER_PARAM: f64 = 2.0;

/// Brute-force search over tensor, pipeline and data parallel degrees.
/// Returns the fastest strategy that fits in GPU memory and its predicted
/// time for `shape`; ties go to the smaller pipeline and then smaller tp.
pub fn search_strategy(
    spec: &ModelSpec,
    cluster: &ClusterSpec,
    kind: TaskKind,
    shape: &TrainingShape,
    cost: &CostModel,
) -> Result<(ParallelStrategy, f64)> {
    spec.validate()?;
    cluster.validate()?;
    cost.validate()?;
    let params = estimate_params(spec);
    let mut best: Option<(ParallelStrategy, f64)> = None;
    for tp in [1u64, 2, 4, 8] {
        if tp > cluster.gpus_per_node || cluster.num_gpus % tp != 0 {
            continue;
        }
        for pp in (1..=spec.num_layers).filter(|p| spec.num_layers % p == 0) {
            if (cluster.num_gpus / tp) % pp != 0 {
                continue;
            }
            let dp = cluster.num_gpus / (tp * pp);
            let per_pipe = dp * shape.microbatch_size;
            if shape.global_batch % per_pipe != 0 {
                continue;
            }
            let m = (shape.global_batch / per_pipe) as f64;
            let layers = (spec.num_layers / pp) as f64;
            let mbs = shape.microbatch_size as f64;
            let act = activation_per_microbatch(spec, layers, shape.seq_len, mbs, cost)? / tp as f64;
            let (weights, in_flight) = match kind {
                TaskKind::Train => (TRAIN_BYTES_PER_PARAM, (pp as f64).min(m)),
                TaskKind::Forward => (FORWARD_BYTES_PER_PARAM, 1.0),
            };
            if params * weights / (tp * pp) as f64 + act * in_flight > cluster.gpu_memory {
                continue;
            }
            let slow = 1.0 + TP_OVERHEAD_PER_DOUBLING * (tp as f64).log2();
            let f = subtask_latency(spec, layers, shape.seq_len, mbs, Direction::Fwd, cost)? / tp as f64 * slow;
            let per = match kind {
                TaskKind::Train => f * (1.0 + cost.backward_forward_ratio),
                TaskKind::Forward => f,
            };
            let time = (m + pp as f64 - 1.0) * per;
            let strat = ParallelStrategy { dp, pp, tp };
            if best.as_ref().is_none_or(|b| time < b.1) {
                best = Some((strat, time));
            }
        }
    }
    best.ok_or_else(|| {
        Error::NoFeasibleStrategy(format!(
            "{} does not fit on {} GPUs of {:.0} bytes for a batch of {}",
            spec.name, cluster.num_gpus, cluster.gpu_memory, shape.global_batch
        ))
    })
}
