#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use fuseplan::fusion::{FusedSchedule, FusionLayout, ModelId, PipelineSpec, SubtaskId};
use fuseplan::Direction;
use rand::Rng;

/// Random integer-latency layout with at most `max_stages` physical stages,
/// `M1 + M2 <= max_mb` and at most `max_subtasks` subtasks.
pub fn random_layout<R: Rng>(rng: &mut R, max_stages: usize, max_mb: usize, max_subtasks: usize) -> FusionLayout<i64> {
    loop {
        let n = rng.random_range(1..=max_stages);
        let divisors: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
        let n1 = divisors[rng.random_range(0..divisors.len())];
        let n2 = divisors[rng.random_range(0..divisors.len())];
        let (k1, k2) = (n / n1, n / n2);
        if gcd(k1, k2) != 1 {
            continue;
        }
        let single = rng.random_bool(0.15);
        let (m1, m2) = if single {
            (rng.random_range(1..=max_mb), 0)
        } else {
            let unit = k1 * k2;
            let t = unit * rng.random_range(1..=4);
            (t / k1, t / k2)
        };
        if m1 + m2 > max_mb || 2 * n * (m1 + m2) > max_subtasks {
            continue;
        }
        let mut pipe = |stages: usize, groups: usize, mb: usize| PipelineSpec {
            stages,
            groups,
            microbatches: mb,
            fwd: (0..stages).map(|_| rng.random_range(1..=4)).collect(),
            bwd: (0..stages).map(|_| rng.random_range(1..=8)).collect(),
            activation: (0..stages).map(|_| rng.random_range(1..=4) as f64).collect(),
        };
        let a = pipe(n1, k1, m1);
        let b = pipe(n2, k2, m2);
        let comm = rng.random_range(0..=2);
        return FusionLayout::new(a, b).expect("generated layout is well formed").with_comm(comm);
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

type Key = (ModelId, usize, usize, usize, Direction);

fn key_of(layout: &FusionLayout<i64>, id: SubtaskId) -> Key {
    let t = layout.subtask(id);
    (t.model, t.group, t.microbatch, t.stage_logical, t.direction)
}

/// Upstream pass on the data path, derived from subtask coordinates alone.
fn data_pred(layout: &FusionLayout<i64>, index: &HashMap<Key, SubtaskId>, id: SubtaskId) -> Option<SubtaskId> {
    let (model, group, mb, logical, dir) = key_of(layout, id);
    let last = layout.pipeline(model).stages - 1;
    let k = match dir {
        Direction::Fwd if logical == 0 => return None,
        Direction::Fwd => (model, group, mb, logical - 1, Direction::Fwd),
        Direction::Bwd if logical == last => (model, group, mb, logical, Direction::Fwd),
        Direction::Bwd => (model, group, mb, logical + 1, Direction::Bwd),
    };
    Some(index[&k])
}

fn coordinate_index(layout: &FusionLayout<i64>) -> HashMap<Key, SubtaskId> {
    (0..layout.num_subtasks() as u32).map(|i| (key_of(layout, SubtaskId(i)), SubtaskId(i))).collect()
}

/// Rows filled from a random topological order of the data dependencies.
pub fn random_valid_schedule<R: Rng>(layout: &FusionLayout<i64>, rng: &mut R) -> FusedSchedule {
    let index = coordinate_index(layout);
    let total = layout.num_subtasks();
    let mut succ: Vec<Vec<SubtaskId>> = vec![Vec::new(); total];
    let mut ready = Vec::new();
    for i in 0..total as u32 {
        match data_pred(layout, &index, SubtaskId(i)) {
            Some(p) => succ[p.idx()].push(SubtaskId(i)),
            None => ready.push(SubtaskId(i)),
        }
    }
    let mut rows = vec![Vec::new(); layout.n];
    while !ready.is_empty() {
        let id = ready.swap_remove(rng.random_range(0..ready.len()));
        rows[layout.subtask(id).stage].push(id);
        ready.extend(succ[id.idx()].iter().copied());
    }
    FusedSchedule::new(rows)
}

/// Discrete-event execution: every stage runs its row in order, starting
/// each subtask once the stage is free and the data it needs has arrived.
/// Returns `None` on deadlock.
pub fn execute(layout: &FusionLayout<i64>, schedule: &FusedSchedule) -> Option<i64> {
    let index = coordinate_index(layout);
    let total = layout.num_subtasks();
    let mut consumers: Vec<Vec<SubtaskId>> = vec![Vec::new(); total];
    for i in 0..total as u32 {
        if let Some(p) = data_pred(layout, &index, SubtaskId(i)) {
            consumers[p.idx()].push(SubtaskId(i));
        }
    }
    let n = schedule.rows.len();
    let mut head = vec![0usize; n];
    let mut free_at = vec![0i64; n];
    let mut busy = vec![false; n];
    let mut arrival: Vec<Option<i64>> = (0..total as u32)
        .map(|i| data_pred(layout, &index, SubtaskId(i)).map_or(Some(0), |_| None))
        .collect();
    let mut events: BinaryHeap<Reverse<(i64, usize)>> = BinaryHeap::new();
    let mut done = 0;
    let mut makespan = 0;

    let try_start = |s: usize,
                     head: &[usize],
                     busy: &mut [bool],
                     free_at: &[i64],
                     arrival: &[Option<i64>],
                     events: &mut BinaryHeap<Reverse<(i64, usize)>>| {
        if busy[s] || head[s] >= schedule.rows[s].len() {
            return;
        }
        let id = schedule.rows[s][head[s]];
        if let Some(a) = arrival[id.idx()] {
            let start = a.max(free_at[s]);
            busy[s] = true;
            events.push(Reverse((start + layout.subtask(id).latency, s)));
        }
    };

    for s in 0..n {
        try_start(s, &head, &mut busy, &free_at, &arrival, &mut events);
    }
    while let Some(Reverse((t, s))) = events.pop() {
        let id = schedule.rows[s][head[s]];
        head[s] += 1;
        busy[s] = false;
        free_at[s] = t;
        done += 1;
        makespan = makespan.max(t);
        let mut touched = vec![s];
        for &c in &consumers[id.idx()] {
            let to = layout.subtask(c).stage;
            let delay = if to != s { layout.comm } else { 0 };
            arrival[c.idx()] = Some(t + delay);
            touched.push(to);
        }
        for st in touched {
            try_start(st, &head, &mut busy, &free_at, &arrival, &mut events);
        }
    }
    (done == total).then_some(makespan)
}
