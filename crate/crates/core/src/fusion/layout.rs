use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    activation_per_microbatch, estimate_params, subtask_latency, ClusterSpec, CostModel, Direction,
    ModelSpec, ParallelStrategy,
};
use crate::scalar::Scalar;

/// Which of the two fused models a subtask belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelId {
    A,
    B,
}

impl ModelId {
    pub fn index(self) -> usize {
        match self {
            ModelId::A => 0,
            ModelId::B => 1,
        }
    }

    pub fn other(self) -> ModelId {
        match self {
            ModelId::A => ModelId::B,
            ModelId::B => ModelId::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::A => "A",
            ModelId::B => "B",
        }
    }
}

/// Index of a subtask inside its layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubtaskId(pub u32);

impl SubtaskId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// A model chunk hosted on a physical stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub model: ModelId,
    pub group: usize,
    pub logical: usize,
}

/// One forward or backward pass of one micro-batch through one chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subtask<T> {
    pub model: ModelId,
    pub group: usize,
    pub microbatch: usize,
    pub stage_logical: usize,
    pub direction: Direction,
    pub latency: T,
    /// Physical stage executing the subtask.
    pub stage: usize,
}

/// Per-model description used to build a layout by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec<T> {
    /// Stages per pipeline group.
    pub stages: usize,
    /// Pipeline groups fused into the physical stages.
    pub groups: usize,
    /// Micro-batches per pipeline group; 0 leaves the model empty.
    pub microbatches: usize,
    /// Forward latency per logical stage.
    pub fwd: Vec<T>,
    /// Backward latency per logical stage.
    pub bwd: Vec<T>,
    /// Activation bytes per logical stage and micro-batch.
    pub activation: Vec<f64>,
}

impl<T: Scalar> PipelineSpec<T> {
    /// A pipeline with identical stages.
    pub fn uniform(stages: usize, groups: usize, microbatches: usize, fwd: T, bwd: T, activation: f64) -> Self {
        PipelineSpec {
            stages,
            groups,
            microbatches,
            fwd: vec![fwd; stages],
            bwd: vec![bwd; stages],
            activation: vec![activation; stages],
        }
    }

    /// A model with no micro-batches, occupying `stages` stages once.
    pub fn empty(stages: usize) -> Self {
        PipelineSpec::uniform(stages, 1, 0, T::one(), T::one(), 0.0)
    }

    fn work_per_microbatch(&self) -> f64 {
        self.fwd.iter().chain(&self.bwd).map(|l| l.as_f64()).sum()
    }
}

/// The fused-schedule problem: `N` physical stages hosting `K1` pipeline
/// groups of model A (forward direction) and `K2` groups of model B laid out
/// in reversed stage order.
#[derive(Debug, Clone)]
pub struct FusionLayout<T> {
    /// Tensor-parallel ratio used to merge stages of the narrower model.
    pub tp_ratio: u64,
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub k1: usize,
    pub k2: usize,
    pub m1: usize,
    pub m2: usize,
    /// Hosted chunks per physical stage, model A first.
    pub placement: Vec<[Chunk; 2]>,
    /// Model preferred by the greedy scheduler.
    pub larger: ModelId,
    /// Per-stage activation capacity in bytes.
    pub capacity: f64,
    /// Latency charged on every dependency crossing physical stages.
    pub comm: T,
    pub(crate) pipes: [PipelineSpec<T>; 2],
    pub(crate) subtasks: Vec<Subtask<T>>,
    pub(crate) activation: Vec<f64>,
    pub(crate) inter_pred: Vec<Option<SubtaskId>>,
    pub(crate) inter_succ: Vec<Option<SubtaskId>>,
    pub(crate) stage_tasks: Vec<Vec<SubtaskId>>,
    base: [u32; 2],
}

impl<T: Scalar> FusionLayout<T> {
    /// Builds a layout from per-model pipeline descriptions.
    pub fn new(a: PipelineSpec<T>, b: PipelineSpec<T>) -> Result<Self> {
        for (name, p) in [("A", &a), ("B", &b)] {
            if p.stages == 0 || p.groups == 0 {
                return Err(Error::invalid(format!("model {name}: stages and groups must be positive")));
            }
            if p.fwd.len() != p.stages || p.bwd.len() != p.stages || p.activation.len() != p.stages {
                return Err(Error::invalid(format!("model {name}: per-stage arrays must have {} entries", p.stages)));
            }
            if p.fwd.iter().chain(&p.bwd).any(|&l| !(l > T::zero())) {
                return Err(Error::invalid(format!("model {name}: latencies must be positive")));
            }
            if p.activation.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::invalid(format!("model {name}: activation bytes must be non-negative")));
            }
        }
        let n = a.stages * a.groups;
        if b.stages * b.groups != n {
            return Err(Error::invalid(format!(
                "K1*N1 = {} but K2*N2 = {}",
                n,
                b.stages * b.groups
            )));
        }
        if a.groups.gcd(&b.groups) != 1 {
            return Err(Error::invalid(format!(
                "fusion factors {} and {} are not coprime",
                a.groups, b.groups
            )));
        }
        if a.microbatches > 0 && b.microbatches > 0 && a.groups * a.microbatches != b.groups * b.microbatches {
            return Err(Error::invalid(format!(
                "K1*M1 = {} differs from K2*M2 = {}",
                a.groups * a.microbatches,
                b.groups * b.microbatches
            )));
        }
        if a.microbatches == 0 && b.microbatches == 0 {
            return Err(Error::invalid("both models are empty"));
        }
        let larger = if b.work_per_microbatch() > a.work_per_microbatch() && b.microbatches > 0 {
            ModelId::B
        } else {
            ModelId::A
        };
        let mut layout = FusionLayout {
            tp_ratio: 1,
            n,
            n1: a.stages,
            n2: b.stages,
            k1: a.groups,
            k2: b.groups,
            m1: a.microbatches,
            m2: b.microbatches,
            placement: Vec::new(),
            larger,
            capacity: f64::INFINITY,
            comm: T::zero(),
            pipes: [a, b],
            subtasks: Vec::new(),
            activation: Vec::new(),
            inter_pred: Vec::new(),
            inter_succ: Vec::new(),
            stage_tasks: Vec::new(),
            base: [0, 0],
        };
        layout.build();
        Ok(layout)
    }

    /// Single-model layout: model A only, model B present but empty.
    pub fn single(stages: usize, microbatches: usize, fwd: Vec<T>, bwd: Vec<T>, activation: Vec<f64>) -> Result<Self> {
        let a = PipelineSpec { stages, groups: 1, microbatches, fwd, bwd, activation };
        FusionLayout::new(a, PipelineSpec::empty(stages))
    }

    pub fn with_capacity(mut self, capacity: f64) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn with_comm(mut self, comm: T) -> Self {
        self.comm = comm;
        self
    }

    pub fn with_larger(mut self, larger: ModelId) -> Self {
        self.larger = larger;
        self
    }

    pub fn pipeline(&self, model: ModelId) -> &PipelineSpec<T> {
        &self.pipes[model.index()]
    }

    /// Physical stage of `(model, group, logical)`.
    pub fn physical_stage(&self, model: ModelId, group: usize, logical: usize) -> usize {
        match model {
            ModelId::A => group * self.n1 + logical,
            ModelId::B => (group + 1) * self.n2 - 1 - logical,
        }
    }

    fn build(&mut self) {
        let n = self.n;
        self.placement = (0..n)
            .map(|s| {
                let ga = s / self.n1;
                let gb = s / self.n2;
                [
                    Chunk { model: ModelId::A, group: ga, logical: s - ga * self.n1 },
                    Chunk { model: ModelId::B, group: gb, logical: (gb + 1) * self.n2 - 1 - s },
                ]
            })
            .collect();
        let mut subtasks = Vec::new();
        let mut activation = Vec::new();
        for model in [ModelId::A, ModelId::B] {
            self.base[model.index()] = subtasks.len() as u32;
            let p = &self.pipes[model.index()];
            for group in 0..p.groups {
                for mb in 0..p.microbatches {
                    for logical in 0..p.stages {
                        for dir in [Direction::Fwd, Direction::Bwd] {
                            let latency = match dir {
                                Direction::Fwd => p.fwd[logical],
                                Direction::Bwd => p.bwd[logical],
                            };
                            subtasks.push(Subtask {
                                model,
                                group,
                                microbatch: mb,
                                stage_logical: logical,
                                direction: dir,
                                latency,
                                stage: self.physical_stage(model, group, logical),
                            });
                            activation.push(p.activation[logical]);
                        }
                    }
                }
            }
        }
        let total = subtasks.len();
        let mut pred = vec![None; total];
        let mut succ = vec![None; total];
        for (i, t) in subtasks.iter().enumerate() {
            let stages = self.pipes[t.model.index()].stages;
            let p = match t.direction {
                Direction::Fwd if t.stage_logical == 0 => None,
                Direction::Fwd => Some((t.stage_logical - 1, Direction::Fwd)),
                Direction::Bwd if t.stage_logical + 1 == stages => Some((t.stage_logical, Direction::Fwd)),
                Direction::Bwd => Some((t.stage_logical + 1, Direction::Bwd)),
            };
            if let Some((logical, dir)) = p {
                let j = self.id_of(t.model, t.group, t.microbatch, logical, dir);
                pred[i] = Some(j);
                succ[j.idx()] = Some(SubtaskId(i as u32));
            }
        }
        let mut stage_tasks = vec![Vec::new(); n];
        for (i, t) in subtasks.iter().enumerate() {
            stage_tasks[t.stage].push(SubtaskId(i as u32));
        }
        self.subtasks = subtasks;
        self.activation = activation;
        self.inter_pred = pred;
        self.inter_succ = succ;
        self.stage_tasks = stage_tasks;
    }

    /// Identifier of a subtask by its coordinates.
    pub fn id_of(&self, model: ModelId, group: usize, mb: usize, logical: usize, dir: Direction) -> SubtaskId {
        let p = &self.pipes[model.index()];
        let d = match dir {
            Direction::Fwd => 0,
            Direction::Bwd => 1,
        };
        let local = ((group * p.microbatches + mb) * p.stages + logical) * 2 + d;
        SubtaskId(self.base[model.index()] + local as u32)
    }

    pub fn subtask(&self, id: SubtaskId) -> &Subtask<T> {
        &self.subtasks[id.idx()]
    }

    pub fn subtasks(&self) -> &[Subtask<T>] {
        &self.subtasks
    }

    pub fn num_subtasks(&self) -> usize {
        self.subtasks.len()
    }

    /// Activation bytes `id` holds from forward start to backward end.
    pub fn activation_of(&self, id: SubtaskId) -> f64 {
        self.activation[id.idx()]
    }

    /// Upstream subtask on the data path, if any.
    pub fn inter_pred(&self, id: SubtaskId) -> Option<SubtaskId> {
        self.inter_pred[id.idx()]
    }

    pub fn inter_succ(&self, id: SubtaskId) -> Option<SubtaskId> {
        self.inter_succ[id.idx()]
    }

    /// Subtasks hosted on a physical stage, in construction order.
    pub fn stage_tasks(&self, stage: usize) -> &[SubtaskId] {
        &self.stage_tasks[stage]
    }

    pub fn row_len(&self, stage: usize) -> usize {
        self.stage_tasks[stage].len()
    }

    /// Sum of hosted latencies per stage.
    pub fn stage_work(&self, stage: usize) -> T {
        self.stage_tasks[stage]
            .iter()
            .fold(T::zero(), |acc, &id| acc + self.subtasks[id.idx()].latency)
    }

    /// Total work over every stage; invariant under any reordering.
    pub fn total_work(&self) -> T {
        self.subtasks.iter().fold(T::zero(), |acc, t| acc + t.latency)
    }

    /// Latency a dependency edge from `from` to `to` adds on top of `from`'s end.
    #[inline]
    pub(crate) fn edge_delay(&self, from: SubtaskId, to: SubtaskId) -> T {
        if self.subtasks[from.idx()].stage != self.subtasks[to.idx()].stage {
            self.comm
        } else {
            T::zero()
        }
    }
}

/// Per-step training workload fed to the transformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingShape {
    /// Samples per optimizer step across the whole device pool.
    pub global_batch: u64,
    pub microbatch_size: u64,
    /// Tokens per sample.
    pub seq_len: f64,
}

fn quantize_ns(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Transforms two models and their parallel strategies into a fusion
/// layout: stages of the narrower-TP model are merged by the TP ratio, the
/// fused stage count is the least common multiple of the two pipeline
/// depths, and latencies come from the analytical cost model.
///
/// Latencies are rounded to whole nanoseconds so schedule files written with
/// nine fractional digits reload losslessly.
#[allow(clippy::too_many_arguments)]
pub fn transform_problem(
    spec_a: &ModelSpec,
    strat_a: &ParallelStrategy,
    spec_b: &ModelSpec,
    strat_b: &ParallelStrategy,
    shape: &TrainingShape,
    cluster: &ClusterSpec,
    cost: &CostModel,
) -> Result<FusionLayout<f64>> {
    spec_a.validate()?;
    spec_b.validate()?;
    cluster.validate()?;
    cost.validate()?;
    strat_a.validate_for(cluster)?;
    strat_b.validate_for(cluster)?;
    if shape.global_batch == 0 || shape.microbatch_size == 0 || !(shape.seq_len > 0.0) {
        return Err(Error::invalid("batch, micro-batch size and sequence length must be positive"));
    }
    let (stages_a, stages_b, tp_ratio) = if strat_a.tp >= strat_b.tp {
        let s = strat_a.tp / strat_b.tp;
        if strat_b.pp % s != 0 {
            return Err(Error::InfeasibleLayout(format!(
                "pp of model B ({}) is not divisible by the tp ratio {s}",
                strat_b.pp
            )));
        }
        (strat_a.pp, strat_b.pp / s, s)
    } else {
        let s = strat_b.tp / strat_a.tp;
        if strat_a.pp % s != 0 {
            return Err(Error::InfeasibleLayout(format!(
                "pp of model A ({}) is not divisible by the tp ratio {s}",
                strat_a.pp
            )));
        }
        (strat_a.pp / s, strat_b.pp, s)
    };
    let n = stages_a.lcm(&stages_b);
    let stage_tp = strat_a.tp.max(strat_b.tp);
    let mut pipes = Vec::with_capacity(2);
    for (spec, strat, stages) in [(spec_a, strat_a, stages_a), (spec_b, strat_b, stages_b)] {
        let per_pipe = strat.dp * shape.microbatch_size;
        if shape.global_batch % per_pipe != 0 {
            return Err(Error::InfeasibleLayout(format!(
                "global batch {} does not split into dp={} pipelines of micro-batch size {}",
                shape.global_batch, strat.dp, shape.microbatch_size
            )));
        }
        let microbatches = (shape.global_batch / per_pipe) as usize;
        let layers = spec.num_layers as f64 / stages as f64;
        let mbs = shape.microbatch_size as f64;
        let f = subtask_latency(spec, layers, shape.seq_len, mbs, Direction::Fwd, cost)? / stage_tp as f64;
        let b = subtask_latency(spec, layers, shape.seq_len, mbs, Direction::Bwd, cost)? / stage_tp as f64;
        let (f, b) = (quantize_ns(f), quantize_ns(b));
        if f <= 0.0 || b <= 0.0 {
            return Err(Error::invalid("stage latency rounds to zero nanoseconds"));
        }
        let act = activation_per_microbatch(spec, layers, shape.seq_len, mbs, cost)?;
        let stages = stages as usize;
        pipes.push(PipelineSpec::uniform(stages, n as usize / stages, microbatches, f, b, act));
    }
    let b = pipes.pop().expect("two pipes");
    let a = pipes.pop().expect("two pipes");
    let mut layout = FusionLayout::new(a, b)?.with_capacity(cluster.activation_capacity_per_stage);
    layout.tp_ratio = tp_ratio;
    layout.larger = if estimate_params(spec_b) > estimate_params(spec_a) {
        ModelId::B
    } else {
        ModelId::A
    };
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(gpus: u64) -> ClusterSpec {
        ClusterSpec::unbounded(gpus, 8)
    }

    fn shape(gbs: u64) -> TrainingShape {
        TrainingShape { global_batch: gbs, microbatch_size: 1, seq_len: 1024.0 }
    }

    #[test]
    fn tp_ratio_merges_model_b_stages() {
        let a = ParallelStrategy::new(4, 4, 8).unwrap();
        let b = ParallelStrategy::new(4, 8, 4).unwrap();
        let l = transform_problem(
            &ModelSpec::llama_65b(),
            &a,
            &ModelSpec::llama_33b(),
            &b,
            &shape(64),
            &cluster(128),
            &CostModel::default(),
        )
        .unwrap();
        assert_eq!(l.tp_ratio, 2);
        assert_eq!(l.n2, 4);
        assert_eq!((l.k1, l.k2), (1, 1));
    }

    #[test]
    fn non_divisible_pp_rejected() {
        let a = ParallelStrategy::new(2, 2, 8).unwrap();
        let b = ParallelStrategy::new(8, 2, 2).unwrap();
        let err = transform_problem(
            &ModelSpec::llama_13b(),
            &a,
            &ModelSpec::llama_13b(),
            &b,
            &shape(16),
            &cluster(32),
            &CostModel::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleLayout(_)));
    }

    #[test]
    fn homogeneous_strategies_are_symmetric() {
        let s = ParallelStrategy::new(1, 4, 8).unwrap();
        let spec = ModelSpec::llama_13b();
        let l = transform_problem(&spec, &s, &spec, &s, &shape(4), &cluster(32), &CostModel::default()).unwrap();
        assert_eq!((l.k1, l.k2, l.n), (1, 1, 4));
        assert_eq!(l.m1, l.m2);
        for s in 0..4 {
            assert_eq!(l.placement[s][0].logical, s);
            assert_eq!(l.placement[s][1].logical, 3 - s);
        }
    }

    #[test]
    fn deeper_model_a_gives_one_two_fusion() {
        let a = ParallelStrategy::new(1, 4, 8).unwrap();
        let b = ParallelStrategy::new(2, 2, 8).unwrap();
        let l = transform_problem(
            &ModelSpec::llama_65b(),
            &a,
            &ModelSpec::llama_13b(),
            &b,
            &shape(8),
            &cluster(32),
            &CostModel::default(),
        )
        .unwrap();
        assert_eq!((l.k1, l.k2), (1, 2));
        assert_eq!(l.k1 * l.m1, l.k2 * l.m2);
        // group 1 of B is reversed over physical stages 2..4
        assert_eq!(l.physical_stage(ModelId::B, 1, 0), 3);
        assert_eq!(l.physical_stage(ModelId::B, 1, 1), 2);
    }

    #[test]
    fn batch_must_split() {
        let a = ParallelStrategy::new(1, 4, 8).unwrap();
        let b = ParallelStrategy::new(2, 2, 8).unwrap();
        assert!(transform_problem(
            &ModelSpec::llama_65b(),
            &a,
            &ModelSpec::llama_13b(),
            &b,
            &shape(7),
            &cluster(32),
            &CostModel::default(),
        )
        .is_err());
    }

    #[test]
    fn every_stage_hosts_one_chunk_per_model() {
        let l = FusionLayout::new(
            PipelineSpec::uniform(6, 1, 2, 1.0, 2.0, 1.0),
            PipelineSpec::uniform(2, 3, 2, 1.0, 2.0, 1.0),
        );
        // K1*M1 = 2 but K2*M2 = 6
        assert!(l.is_err());
        let l = FusionLayout::new(
            PipelineSpec::uniform(6, 1, 3, 1.0, 2.0, 1.0),
            PipelineSpec::uniform(2, 3, 1, 1.0, 2.0, 1.0),
        )
        .unwrap();
        for s in 0..6 {
            assert_eq!(l.row_len(s), 2 * 3 + 2);
        }
    }
}
