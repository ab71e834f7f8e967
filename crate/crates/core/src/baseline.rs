//! Single-model reference schedules: 1F1B and interleaved 1F1B, plus the
//! closed-form bubble fraction they are measured against.

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::model::{subtask_latency, CostModel, Direction, ModelSpec};
use crate::scalar::Scalar;

/// One executed pass in a single-model pipeline timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry<T> {
    pub stage: usize,
    /// Model chunk hosted by the stage; always 0 for plain 1F1B.
    pub chunk: usize,
    pub microbatch: usize,
    pub direction: Direction,
    pub start: T,
    pub end: T,
}

/// Timeline of a single-model pipeline, sorted by `(stage, start)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTaskTrace<T> {
    pub num_stages: usize,
    pub entries: Vec<TraceEntry<T>>,
}

impl<T: Scalar> PipelineTaskTrace<T> {
    pub fn makespan(&self) -> T {
        self.entries.iter().fold(T::zero(), |m, e| m.max_of(e.end))
    }

    pub fn stage_entries(&self, stage: usize) -> impl Iterator<Item = &TraceEntry<T>> {
        self.entries.iter().filter(move |e| e.stage == stage)
    }

    pub fn busy_time(&self, stage: usize) -> T {
        self.stage_entries(stage)
            .fold(T::zero(), |acc, e| acc + (e.end - e.start))
    }

    /// Idle fraction averaged over stages: `1 - sum(busy) / (N * makespan)`.
    pub fn bubble_fraction(&self) -> T {
        let makespan = self.makespan();
        if makespan == T::zero() {
            return T::zero();
        }
        let mut busy = T::zero();
        let mut n = T::zero();
        for s in 0..self.num_stages {
            busy = busy + self.busy_time(s);
            n = n + T::one();
        }
        T::one() - busy / (n * makespan)
    }

    /// Per-stage ordering `(chunk, microbatch, direction)`, useful for
    /// comparing against other schedule representations.
    pub fn stage_order(&self, stage: usize) -> Vec<(usize, usize, Direction)> {
        self.stage_entries(stage)
            .map(|e| (e.chunk, e.microbatch, e.direction))
            .collect()
    }
}

/// `(N - 1) / (N - 1 + K * M)`, exact.
pub fn bubble_fraction(n: u64, m: u64, k: u64) -> Ratio<u64> {
    assert!(n >= 1 && m >= 1 && k >= 1, "stage, micro-batch and chunk counts must be positive");
    Ratio::new(n - 1, n - 1 + k * m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Pass {
    /// Virtual stage: `chunk * N + stage`.
    vstage: usize,
    mb: usize,
    dir: Direction,
}

/// Evaluates per-stage pass orders under the pipeline data dependencies.
/// `link` is charged on every dependency edge that crosses devices.
fn evaluate<T: Scalar>(
    n: usize,
    k: usize,
    m: usize,
    orders: &[Vec<Pass>],
    latency: impl Fn(&Pass) -> T,
    link: T,
) -> Result<PipelineTaskTrace<T>> {
    let vstages = n * k;
    let idx = |p: &Pass| -> usize {
        let d = match p.dir {
            Direction::Fwd => 0,
            Direction::Bwd => 1,
        };
        (p.vstage * m + p.mb) * 2 + d
    };
    let pred = |p: &Pass| -> Option<Pass> {
        match p.dir {
            Direction::Fwd if p.vstage == 0 => None,
            Direction::Fwd => Some(Pass { vstage: p.vstage - 1, ..*p }),
            Direction::Bwd if p.vstage + 1 == vstages => Some(Pass { dir: Direction::Fwd, ..*p }),
            Direction::Bwd => Some(Pass { vstage: p.vstage + 1, ..*p }),
        }
    };
    let mut finish: Vec<Option<T>> = vec![None; vstages * m * 2];
    let mut ptr = vec![0usize; n];
    let mut clock = vec![T::zero(); n];
    let mut entries = Vec::with_capacity(vstages * m * 2);
    let total: usize = orders.iter().map(Vec::len).sum();
    while entries.len() < total {
        let mut progressed = false;
        for s in 0..n {
            while let Some(p) = orders[s].get(ptr[s]) {
                let ready = match pred(p) {
                    None => Some(T::zero()),
                    Some(q) => finish[idx(&q)].map(|f| {
                        if q.vstage % n != s {
                            f + link
                        } else {
                            f
                        }
                    }),
                };
                let Some(ready) = ready else { break };
                let start = ready.max_of(clock[s]);
                let end = start + latency(p);
                finish[idx(p)] = Some(end);
                clock[s] = end;
                entries.push(TraceEntry {
                    stage: s,
                    chunk: p.vstage / n,
                    microbatch: p.mb,
                    direction: p.dir,
                    start,
                    end,
                });
                ptr[s] += 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::invalid("pipeline order deadlocks"));
        }
    }
    entries.sort_by(|a, b| {
        a.stage
            .cmp(&b.stage)
            .then(a.start.partial_cmp(&b.start).expect("comparable times"))
    });
    Ok(PipelineTaskTrace { num_stages: n, entries })
}

fn check_latencies<T: Scalar>(n: usize, m: usize, fwd: &[T], bwd: &[T]) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("need at least one stage and one micro-batch"));
    }
    if fwd.is_empty() || bwd.is_empty() {
        return Err(Error::invalid("empty latency arrays"));
    }
    if fwd.len() != n || bwd.len() != n {
        return Err(Error::invalid(format!(
            "latency arrays have lengths {}/{}, expected {n}",
            fwd.len(),
            bwd.len()
        )));
    }
    if fwd.iter().chain(bwd).any(|&l| !(l > T::zero())) {
        return Err(Error::invalid("latencies must be positive"));
    }
    Ok(())
}

/// Canonical per-stage 1F1B order: `min(N - i, M)` warm-up forwards, then
/// strict backward/forward alternation, then the remaining backwards.
pub fn order_1f1b(n: usize, m: usize, stage: usize) -> Vec<(usize, Direction)> {
    let warmup = (n - stage).min(m);
    let mut order = Vec::with_capacity(2 * m);
    order.extend((0..warmup).map(|mb| (mb, Direction::Fwd)));
    for b in 0..m {
        order.push((b, Direction::Bwd));
        let f = warmup + b;
        if f < m {
            order.push((f, Direction::Fwd));
        }
    }
    order
}

pub fn schedule_1f1b<T: Scalar>(n: usize, m: usize, fwd: &[T], bwd: &[T]) -> Result<PipelineTaskTrace<T>> {
    schedule_1f1b_with_comm(n, m, fwd, bwd, T::zero())
}

/// As [`schedule_1f1b`], charging `comm` on every stage-to-stage dependency.
pub fn schedule_1f1b_with_comm<T: Scalar>(
    n: usize,
    m: usize,
    fwd: &[T],
    bwd: &[T],
    comm: T,
) -> Result<PipelineTaskTrace<T>> {
    check_latencies(n, m, fwd, bwd)?;
    let orders: Vec<Vec<Pass>> = (0..n)
        .map(|s| {
            order_1f1b(n, m, s)
                .into_iter()
                .map(|(mb, dir)| Pass { vstage: s, mb, dir })
                .collect()
        })
        .collect();
    evaluate(
        n,
        1,
        m,
        &orders,
        |p| match p.dir {
            Direction::Fwd => fwd[p.vstage],
            Direction::Bwd => bwd[p.vstage],
        },
        comm,
    )
}

/// Micro-batch groups for interleaving: blocks of `N`, the last one
/// absorbing any remainder.
fn interleave_groups(n: usize, m: usize) -> Vec<usize> {
    if m <= n {
        return vec![m];
    }
    let mut groups = vec![n; m / n];
    if let Some(last) = groups.last_mut() {
        *last += m % n;
    }
    groups
}

/// Interleaved order for one device. Micro-batches advance group by group
/// through the chunks; forwards visit chunks in ascending order and
/// backwards in descending order.
fn order_interleaved(n: usize, m: usize, k: usize, stage: usize) -> Vec<Pass> {
    let groups = interleave_groups(n, m);
    let units = |reverse: bool| -> Vec<(usize, usize)> {
        let mut seq = Vec::with_capacity(m * k);
        let mut group_start = 0;
        for &g in &groups {
            for c in 0..k {
                let chunk = if reverse { k - 1 - c } else { c };
                seq.extend((group_start..group_start + g).map(|mb| (chunk, mb)));
            }
            group_start += g;
        }
        seq
    };
    let fwd = units(false);
    let bwd = units(true);
    let total = m * k;
    let widest = groups.iter().copied().max().unwrap_or(0);
    let warmup = if k == 1 {
        (n - stage).min(m)
    } else {
        ((n - stage - 1) * 2 + (k - 1) * widest + 1).min(total)
    };
    let pass = |(chunk, mb): (usize, usize), dir| Pass { vstage: chunk * n + stage, mb, dir };
    let mut order = Vec::with_capacity(2 * total);
    order.extend(fwd[..warmup].iter().map(|&u| pass(u, Direction::Fwd)));
    for b in 0..total {
        order.push(pass(bwd[b], Direction::Bwd));
        if warmup + b < total {
            order.push(pass(fwd[warmup + b], Direction::Fwd));
        }
    }
    order
}

/// Interleaved 1F1B with `K` chunks per stage. `fwd[i]` / `bwd[i]` are the
/// full per-stage latencies; each chunk costs `1/K` of them.
pub fn schedule_interleaved<T: Scalar>(
    n: usize,
    m: usize,
    k: usize,
    fwd: &[T],
    bwd: &[T],
) -> Result<PipelineTaskTrace<T>> {
    schedule_interleaved_with_comm(n, m, k, fwd, bwd, T::zero())
}

/// As [`schedule_interleaved`], charging `comm` on every dependency that
/// crosses a device boundary.
pub fn schedule_interleaved_with_comm<T: Scalar>(
    n: usize,
    m: usize,
    k: usize,
    fwd: &[T],
    bwd: &[T],
    comm: T,
) -> Result<PipelineTaskTrace<T>> {
    check_latencies(n, m, fwd, bwd)?;
    if k == 0 {
        return Err(Error::invalid("chunks per stage must be positive"));
    }
    let kt = (0..k).fold(T::zero(), |acc, _| acc + T::one());
    let orders: Vec<Vec<Pass>> = (0..n).map(|s| order_interleaved(n, m, k, s)).collect();
    evaluate(
        n,
        k,
        m,
        &orders,
        |p| match p.dir {
            Direction::Fwd => fwd[p.vstage % n] / kt,
            Direction::Bwd => bwd[p.vstage % n] / kt,
        },
        comm,
    )
}

/// Interleaved schedule for a concrete model, checking that its layers split
/// evenly into `N * K` chunks.
pub fn interleaved_for_model(
    spec: &ModelSpec,
    n: usize,
    m: usize,
    k: usize,
    seq_len: f64,
    mb_size: f64,
    cost: &CostModel,
) -> Result<PipelineTaskTrace<f64>> {
    let chunks = (n * k) as u64;
    if chunks == 0 || spec.num_layers % chunks != 0 {
        return Err(Error::invalid(format!(
            "{} layers do not divide into {n} x {k} chunks",
            spec.num_layers
        )));
    }
    let layers = (spec.num_layers / n as u64) as f64;
    let f = subtask_latency(spec, layers, seq_len, mb_size, Direction::Fwd, cost)?;
    let b = subtask_latency(spec, layers, seq_len, mb_size, Direction::Bwd, cost)?;
    schedule_interleaved(n, m, k, &vec![f; n], &vec![b; n])
}
