use crate::model::Direction;
use crate::scalar::Scalar;

use super::layout::{FusionLayout, SubtaskId};
use super::schedule::Evaluator;

const NONE: u32 = u32::MAX;

/// Result of re-timing a proposed swap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Trial<T> {
    Done(T),
    /// The makespan provably reaches the cutoff; timing was abandoned.
    Cutoff,
}

/// Schedule with cached timings that supports adjacent swaps, re-timing only
/// the subtasks whose timing a swap actually changes.
///
/// Subtasks are kept in a topological order of the dependency graph. Swapping
/// `x` and `y` can only affect `y` and what `y` reaches afterwards, all of
/// which come after `x` in that order, so they are settled by a forward scan
/// over a bitset of queued ranks. Committing a swap repairs the order locally
/// around the reversed row edge. Cycles are ruled out beforehand by searching
/// for a path from `x` to `y` that avoids their shared row edge.
pub(crate) struct SwapEngine<'a, T> {
    layout: &'a FusionLayout<T>,
    pub(crate) rows: Vec<Vec<SubtaskId>>,
    pos: Vec<u32>,
    stage: Vec<u32>,
    latency: Vec<T>,
    pred: Vec<u32>,
    succ: Vec<u32>,
    /// Delay between a subtask's data predecessor finishing and it starting.
    lag: Vec<T>,
    start: Vec<T>,
    finish: Vec<T>,
    /// Previous timings of subtasks re-timed by the current trial.
    undo: Vec<(u32, T, T)>,
    /// `live[s][q]`: activation bytes held before position `q`.
    live: Vec<Vec<f64>>,
    /// `suffix[s][q]`: latency sum of positions `q..` of row `s`.
    suffix: Vec<Vec<T>>,
    makespan: T,
    order: Vec<u32>,
    rank: Vec<u32>,
    /// Bitset over ranks of subtasks waiting to be re-timed.
    queued: Vec<u64>,
    mark: Vec<u32>,
    epoch: u32,
    dfs: Vec<u32>,
    ahead: Vec<u32>,
    behind: Vec<u32>,
    slots: Vec<u32>,
    pending: Option<(usize, usize)>,
    trial_makespan: Option<T>,
}

impl<'a, T: Scalar> SwapEngine<'a, T> {
    /// `rows` must be well formed and deadlock free.
    pub(crate) fn new(layout: &'a FusionLayout<T>, rows: Vec<Vec<SubtaskId>>) -> Option<Self> {
        let mut ev = Evaluator::new(layout);
        let makespan = ev.makespan(layout, &rows)?;
        let finish = ev.finish_times().to_vec();
        let total = layout.num_subtasks();
        let latency: Vec<T> = layout.subtasks.iter().map(|t| t.latency).collect();
        let start: Vec<T> = (0..total).map(|i| finish[i] - latency[i]).collect();
        let raw = |v: Option<SubtaskId>| v.map_or(NONE, |id| id.0);
        let lag = (0..total)
            .map(|i| layout.inter_pred[i].map_or(T::zero(), |p| layout.edge_delay(p, SubtaskId(i as u32))))
            .collect();
        let mut pos = vec![0u32; total];
        let mut live = Vec::with_capacity(rows.len());
        let mut suffix = Vec::with_capacity(rows.len());
        for row in &rows {
            let mut l = Vec::with_capacity(row.len() + 1);
            let mut acc = 0.0;
            l.push(acc);
            for (q, &id) in row.iter().enumerate() {
                pos[id.idx()] = q as u32;
                acc += delta(layout, id);
                l.push(acc);
            }
            live.push(l);
            let mut z = vec![T::zero(); row.len() + 1];
            for q in (0..row.len()).rev() {
                z[q] = z[q + 1] + latency[row[q].idx()];
            }
            suffix.push(z);
        }
        let mut order: Vec<u32> = (0..total as u32).collect();
        order.sort_by(|&a, &b| start[a as usize].partial_cmp(&start[b as usize]).expect("finite times"));
        let mut rank = vec![0u32; total];
        for (r, &i) in order.iter().enumerate() {
            rank[i as usize] = r as u32;
        }
        Some(SwapEngine {
            layout,
            rows,
            pos,
            stage: layout.subtasks.iter().map(|t| t.stage as u32).collect(),
            latency,
            pred: layout.inter_pred.iter().map(|&p| raw(p)).collect(),
            succ: layout.inter_succ.iter().map(|&p| raw(p)).collect(),
            lag,
            start,
            finish,
            undo: Vec::new(),
            live,
            suffix,
            makespan,
            order,
            rank,
            queued: vec![0; total.div_ceil(64)],
            mark: vec![0; total],
            epoch: 0,
            dfs: Vec::new(),
            ahead: Vec::new(),
            behind: Vec::new(),
            slots: Vec::new(),
            pending: None,
            trial_makespan: None,
        })
    }

    pub(crate) fn makespan(&self) -> T {
        self.makespan
    }

    pub(crate) fn row_len(&self, s: usize) -> usize {
        self.rows[s].len()
    }

    pub(crate) fn num_stages(&self) -> usize {
        self.rows.len()
    }

    /// Applies the swap at `(s, p)` if it keeps every validity constraint.
    pub(crate) fn propose(&mut self, s: usize, p: usize) -> bool {
        debug_assert!(self.pending.is_none());
        let l = self.layout;
        let (x, y) = (self.rows[s][p], self.rows[s][p + 1]);
        if self.pred[y.idx()] == x.0 {
            return false;
        }
        let after = self.live[s][p] + delta(l, y);
        if after > l.capacity {
            return false;
        }
        if self.creates_cycle(x, y) {
            return false;
        }
        self.rows[s].swap(p, p + 1);
        self.pos[x.idx()] = (p + 1) as u32;
        self.pos[y.idx()] = p as u32;
        self.live[s][p + 1] = after;
        self.suffix[s][p + 1] = self.suffix[s][p + 2] + self.latency[x.idx()];
        self.pending = Some((s, p));
        self.trial_makespan = None;
        true
    }

    /// A path from `x` to `y` other than their row edge would close a cycle
    /// once `y` runs first. Such a path ends at `y`'s data predecessor and
    /// only visits subtasks ordered before it.
    fn creates_cycle(&mut self, x: SubtaskId, y: SubtaskId) -> bool {
        let target = self.pred[y.idx()];
        let first = self.succ[x.idx()];
        if target == NONE || first == NONE {
            return false;
        }
        let limit = self.rank[target as usize];
        self.bump_epoch();
        self.dfs.clear();
        self.dfs.push(first);
        while let Some(z) = self.dfs.pop() {
            if z == target {
                return true;
            }
            let zi = z as usize;
            if self.mark[zi] == self.epoch || self.rank[zi] > limit {
                continue;
            }
            self.mark[zi] = self.epoch;
            if self.succ[zi] != NONE {
                self.dfs.push(self.succ[zi]);
            }
            if let Some(next) = self.row_next(zi) {
                self.dfs.push(next);
            }
        }
        false
    }

    fn row_next(&self, i: usize) -> Option<u32> {
        self.rows[self.stage[i] as usize].get(self.pos[i] as usize + 1).map(|id| id.0)
    }

    fn row_prev(&self, i: usize) -> Option<u32> {
        let q = self.pos[i] as usize;
        (q > 0).then(|| self.rows[self.stage[i] as usize][q - 1].0)
    }

    fn bump_epoch(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Times the pending swap. With a cutoff the run stops as soon as the
    /// makespan is known to reach it (`inclusive`: to exceed it).
    pub(crate) fn evaluate(&mut self, cutoff: Option<f64>, inclusive: bool) -> Trial<T> {
        let (s, p) = self.pending.expect("no pending swap");
        self.restore();
        let (y, x) = (self.rows[s][p].0, self.rows[s][p + 1].0);
        let exceeds = |v: T| match cutoff {
            None => false,
            Some(c) if inclusive => v.as_f64() > c,
            Some(c) => v.as_f64() >= c,
        };
        if self.settle(y, true, &exceeds) || self.drain(x, &exceeds) {
            self.restore();
            return Trial::Cutoff;
        }
        let makespan = self
            .rows
            .iter()
            .filter_map(|row| row.last())
            .fold(T::zero(), |m, id| m.max_of(self.finish[id.idx()]));
        if exceeds(makespan) {
            self.restore();
            return Trial::Cutoff;
        }
        self.trial_makespan = Some(makespan);
        Trial::Done(makespan)
    }

    fn restore(&mut self) {
        for &(i, s, f) in self.undo.iter().rev() {
            self.start[i as usize] = s;
            self.finish[i as usize] = f;
        }
        self.undo.clear();
        self.trial_makespan = None;
    }

    /// Re-times subtask `i` in place; returns true when the cutoff is reached.
    fn settle(&mut self, i: u32, forced: bool, exceeds: &impl Fn(T) -> bool) -> bool {
        let iu = i as usize;
        let st = self.stage[iu] as usize;
        let q = self.pos[iu] as usize;
        let row = &self.rows[st];
        let mut begin = if q > 0 { self.finish[row[q - 1].idx()] } else { T::zero() };
        let pr = self.pred[iu];
        if pr != NONE {
            begin = begin.max_of(self.finish[pr as usize] + self.lag[iu]);
        }
        if !forced && begin == self.start[iu] {
            return false;
        }
        let end = begin + self.latency[iu];
        self.undo.push((i, self.start[iu], self.finish[iu]));
        self.start[iu] = begin;
        self.finish[iu] = end;
        if exceeds(end + self.suffix[st][q + 1]) {
            return true;
        }
        if let Some(next) = row.get(q + 1) {
            let r = self.rank[next.idx()] as usize;
            self.queued[r / 64] |= 1 << (r % 64);
        }
        let nx = self.succ[iu];
        if nx != NONE {
            let r = self.rank[nx as usize] as usize;
            self.queued[r / 64] |= 1 << (r % 64);
        }
        false
    }

    /// Settles queued subtasks in rank order, starting from `x`, which
    /// precedes everything the swap can affect.
    fn drain(&mut self, x: u32, exceeds: &impl Fn(T) -> bool) -> bool {
        let mut w = self.rank[x as usize] as usize / 64;
        while w < self.queued.len() {
            let bits = self.queued[w];
            if bits == 0 {
                w += 1;
                continue;
            }
            self.queued[w] = bits & (bits - 1);
            let id = self.order[w * 64 + bits.trailing_zeros() as usize];
            if self.settle(id, id == x, exceeds) {
                self.queued[w..].iter_mut().for_each(|q| *q = 0);
                return true;
            }
        }
        false
    }

    /// Keeps the pending swap; it must have been fully evaluated.
    pub(crate) fn commit(&mut self) {
        let makespan = self.trial_makespan.take().expect("commit needs a completed evaluation");
        let (s, p) = self.pending.take().expect("no pending swap");
        self.undo.clear();
        self.makespan = makespan;
        let (y, x) = (self.rows[s][p].0, self.rows[s][p + 1].0);
        self.reorder(y, x);
    }

    /// Restores a topological order after the row edge `y -> x` has been
    /// added while `x` was ranked before `y`: what `x` reaches and what
    /// reaches `y` inside that window swap places, keeping relative order.
    fn reorder(&mut self, y: u32, x: u32) {
        let (lo, hi) = (self.rank[x as usize], self.rank[y as usize]);
        debug_assert!(lo < hi);
        self.bump_epoch();
        self.ahead.clear();
        self.dfs.clear();
        self.dfs.push(x);
        while let Some(z) = self.dfs.pop() {
            let zi = z as usize;
            if self.mark[zi] == self.epoch || self.rank[zi] > hi {
                continue;
            }
            self.mark[zi] = self.epoch;
            self.ahead.push(z);
            if self.succ[zi] != NONE {
                self.dfs.push(self.succ[zi]);
            }
            if let Some(next) = self.row_next(zi) {
                self.dfs.push(next);
            }
        }
        self.behind.clear();
        self.dfs.push(y);
        while let Some(z) = self.dfs.pop() {
            let zi = z as usize;
            if self.mark[zi] == self.epoch || self.rank[zi] < lo {
                continue;
            }
            self.mark[zi] = self.epoch;
            self.behind.push(z);
            if self.pred[zi] != NONE {
                self.dfs.push(self.pred[zi]);
            }
            if let Some(prev) = self.row_prev(zi) {
                self.dfs.push(prev);
            }
        }
        let rank = &self.rank;
        self.ahead.sort_unstable_by_key(|&z| rank[z as usize]);
        self.behind.sort_unstable_by_key(|&z| rank[z as usize]);
        self.slots.clear();
        self.slots.extend(self.behind.iter().chain(&self.ahead).map(|&z| rank[z as usize]));
        self.slots.sort_unstable();
        for (k, &z) in self.behind.iter().chain(&self.ahead).enumerate() {
            let r = self.slots[k];
            self.order[r as usize] = z;
            self.rank[z as usize] = r;
        }
    }

    /// Undoes the pending swap.
    pub(crate) fn revert(&mut self) {
        self.restore();
        let (s, p) = self.pending.take().expect("no pending swap");
        let l = self.layout;
        self.rows[s].swap(p, p + 1);
        let (x, y) = (self.rows[s][p], self.rows[s][p + 1]);
        self.pos[x.idx()] = p as u32;
        self.pos[y.idx()] = (p + 1) as u32;
        self.live[s][p + 1] = self.live[s][p] + delta(l, x);
        self.suffix[s][p + 1] = self.suffix[s][p + 2] + self.latency[y.idx()];
    }

    /// Stage of the pending swap.
    pub(crate) fn pending_stage(&self) -> usize {
        self.pending.expect("no pending swap").0
    }

    /// Peak live activation of row `s` in its current order.
    pub(crate) fn row_peak(&self, s: usize) -> f64 {
        self.live[s].iter().copied().fold(0.0, f64::max)
    }

    #[cfg(test)]
    pub(crate) fn finish_times(&self) -> &[T] {
        &self.finish
    }

    #[cfg(test)]
    fn order_is_topological(&self) -> bool {
        (0..self.order.len()).all(|i| {
            let r = self.rank[i];
            self.order[r as usize] == i as u32
                && (self.pred[i] == NONE || self.rank[self.pred[i] as usize] < r)
                && self.row_prev(i).is_none_or(|q| self.rank[q as usize] < r)
        })
    }
}

fn delta<T: Scalar>(layout: &FusionLayout<T>, id: SubtaskId) -> f64 {
    match layout.subtasks[id.idx()].direction {
        Direction::Fwd => layout.activation[id.idx()],
        Direction::Bwd => -layout.activation[id.idx()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{check_valid, FusedSchedule, PipelineSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> FusionLayout<i64> {
        FusionLayout::new(
            PipelineSpec { stages: 4, groups: 1, microbatches: 4, fwd: vec![2, 3, 2, 1], bwd: vec![4, 5, 3, 2], activation: vec![1.0; 4] },
            PipelineSpec { stages: 2, groups: 2, microbatches: 2, fwd: vec![1, 2], bwd: vec![3, 2], activation: vec![2.0; 2] },
        )
        .unwrap()
        .with_comm(1)
        .with_capacity(7.0)
    }

    fn start_rows(l: &FusionLayout<i64>) -> Vec<Vec<SubtaskId>> {
        crate::annealer::greedy_schedule(l).unwrap().rows
    }

    #[test]
    fn random_walk_agrees_with_full_checks() {
        let l = layout();
        let mut eng = SwapEngine::new(&l, start_rows(&l)).unwrap();
        let mut ev = Evaluator::new(&l);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut accepted = 0;
        for _ in 0..20_000 {
            let s = rng.random_range(0..l.n);
            let p = rng.random_range(0..eng.row_len(s) - 1);
            let mut trial = eng.rows.clone();
            trial[s].swap(p, p + 1);
            let valid = check_valid(&FusedSchedule::new(trial.clone()), &l).is_ok();
            let ok = eng.propose(s, p);
            assert_eq!(ok, valid);
            if !ok {
                continue;
            }
            let full = ev.makespan(&l, &trial).unwrap();
            let Trial::Done(m) = eng.evaluate(None, false) else { panic!("no cutoff given") };
            assert_eq!(m, full);
            if rng.random_bool(0.5) {
                eng.commit();
                accepted += 1;
                assert_eq!(eng.finish_times(), ev.finish_times());
                assert!(eng.order_is_topological());
            } else {
                eng.revert();
            }
        }
        assert!(accepted > 100);
    }

    #[test]
    fn cutoff_only_when_makespan_reaches_it() {
        let l = layout();
        let mut eng = SwapEngine::new(&l, start_rows(&l)).unwrap();
        let mut ev = Evaluator::new(&l);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5_000 {
            let s = rng.random_range(0..l.n);
            let p = rng.random_range(0..eng.row_len(s) - 1);
            if !eng.propose(s, p) {
                continue;
            }
            let full = ev.makespan(&l, &eng.rows).unwrap();
            let cut = eng.makespan();
            match eng.evaluate(Some(cut as f64), false) {
                Trial::Cutoff => assert!(full >= cut),
                Trial::Done(m) => {
                    assert_eq!(m, full);
                    assert!(m < cut);
                }
            }
            match eng.evaluate(Some(cut as f64), true) {
                Trial::Cutoff => assert!(full > cut),
                Trial::Done(m) => {
                    assert!(m <= cut);
                    eng.commit();
                    continue;
                }
            }
            eng.revert();
        }
    }
}
