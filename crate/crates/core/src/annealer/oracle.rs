use crate::error::{Error, Result};
use crate::fusion::{FusedSchedule, FusionLayout, SubtaskId};
use crate::model::Direction;
use crate::scalar::Scalar;

/// Largest instance the exhaustive search accepts.
pub const ORACLE_LIMIT: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub makespan: T,
    pub schedule: FusedSchedule,
}

/// Backtracking enumeration of row orders. Rows are extended one subtask at a
/// time in a dependency-respecting order, so finish times are exact as soon
/// as a subtask is placed. Each schedule is generated once: the next subtask
/// always extends the lowest row whose next entry is already placeable.
struct Search<'a, T> {
    layout: &'a FusionLayout<T>,
    rows: Vec<Vec<SubtaskId>>,
    placed_at: Vec<Option<usize>>,
    finish: Vec<T>,
    row_end: Vec<T>,
    live: Vec<f64>,
    remaining: Vec<T>,
    skipped: Vec<Option<usize>>,
    step: usize,
    prune: bool,
    best: Option<(T, Vec<Vec<SubtaskId>>)>,
    count: u64,
}

impl<'a, T: Scalar> Search<'a, T> {
    fn new(layout: &'a FusionLayout<T>, prune: bool) -> Self {
        let n = layout.n;
        Search {
            layout,
            rows: vec![Vec::new(); n],
            placed_at: vec![None; layout.num_subtasks()],
            finish: vec![T::zero(); layout.num_subtasks()],
            row_end: vec![T::zero(); n],
            live: vec![0.0; n],
            remaining: (0..n).map(|s| layout.stage_work(s)).collect(),
            skipped: vec![None; n],
            step: 0,
            prune,
            best: None,
            count: 0,
        }
    }

    fn run(&mut self) {
        if self.step == self.layout.num_subtasks() {
            self.count += 1;
            let makespan = self.row_end.iter().fold(T::zero(), |m, &e| m.max_of(e));
            if self.best.as_ref().is_none_or(|b| makespan < b.0) {
                self.best = Some((makespan, self.rows.clone()));
            }
            return;
        }
        if self.prune {
            if let Some((best, _)) = &self.best {
                let bound = (0..self.layout.n)
                    .map(|s| self.row_end[s] + self.remaining[s])
                    .fold(T::zero(), |m, x| m.max_of(x));
                if bound >= *best {
                    return;
                }
            }
        }
        for r in 0..self.layout.n {
            if self.rows[r].len() == self.layout.row_len(r) {
                continue;
            }
            for k in 0..self.layout.row_len(r) {
                let z = self.layout.stage_tasks(r)[k];
                if self.placed_at[z.idx()].is_some() {
                    continue;
                }
                let pred = self.layout.inter_pred(z);
                let pred_step = match pred {
                    Some(p) => match self.placed_at[p.idx()] {
                        Some(t) => Some(t),
                        None => continue,
                    },
                    None => None,
                };
                if let Some(skip) = self.skipped[r] {
                    // a row passed over at step `skip` must not have been extendable then
                    if pred_step.is_none_or(|t| t < skip) {
                        continue;
                    }
                }
                self.place(r, z, pred);
            }
        }
    }

    fn place(&mut self, r: usize, z: SubtaskId, pred: Option<SubtaskId>) {
        let l = self.layout;
        let t = l.subtask(z);
        let act = l.activation_of(z);
        let (live_before, end_before, skipped_before) = (self.live[r], self.row_end[r], self.skipped.clone());
        match t.direction {
            Direction::Fwd => {
                if self.live[r] + act > l.capacity {
                    return;
                }
                self.live[r] += act;
            }
            Direction::Bwd => self.live[r] -= act,
        }
        let mut ready = self.row_end[r];
        if let Some(p) = pred {
            ready = ready.max_of(self.finish[p.idx()] + l.edge_delay(p, z));
        }
        let end = ready + t.latency;
        self.finish[z.idx()] = end;
        self.row_end[r] = end;
        self.remaining[r] = self.remaining[r] - t.latency;
        self.placed_at[z.idx()] = Some(self.step);
        self.rows[r].push(z);
        for q in 0..r {
            if self.rows[q].len() < l.row_len(q) {
                self.skipped[q] = Some(self.step);
            }
        }
        self.skipped[r] = None;
        self.step += 1;

        self.run();

        self.step -= 1;
        self.skipped = skipped_before;
        self.rows[r].pop();
        self.placed_at[z.idx()] = None;
        self.remaining[r] = self.remaining[r] + t.latency;
        self.row_end[r] = end_before;
        self.live[r] = live_before;
    }
}

fn guard<T: Scalar>(layout: &FusionLayout<T>) -> Result<()> {
    if layout.num_subtasks() > ORACLE_LIMIT {
        return Err(Error::TooLarge { subtasks: layout.num_subtasks(), limit: ORACLE_LIMIT });
    }
    Ok(())
}

/// Optimal makespan over every valid schedule, by exhaustive search.
pub fn exhaustive_oracle<T: Scalar>(layout: &FusionLayout<T>) -> Result<OracleResult<T>> {
    guard(layout)?;
    let mut search = Search::new(layout, true);
    search.run();
    let (makespan, rows) = search
        .best
        .ok_or_else(|| Error::InfeasibleLayout("no schedule fits the activation capacity".into()))?;
    Ok(OracleResult { makespan, schedule: FusedSchedule::new(rows) })
}

/// Number of distinct valid schedules of a tiny layout.
pub fn count_valid_schedules<T: Scalar>(layout: &FusionLayout<T>) -> Result<u64> {
    guard(layout)?;
    let mut search = Search::new(layout, false);
    search.run();
    Ok(search.count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{check_valid, compute_energy, ModelId, PipelineSpec};

    /// Brute force over all row permutations, filtered by the validity checker.
    fn count_by_permutation(l: &FusionLayout<i64>) -> u64 {
        fn perms(items: &[SubtaskId]) -> Vec<Vec<SubtaskId>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let x = rest.remove(i);
                for mut p in perms(&rest) {
                    p.insert(0, x);
                    out.push(p);
                }
            }
            out
        }
        let per_row: Vec<Vec<Vec<SubtaskId>>> = (0..l.n).map(|s| perms(l.stage_tasks(s))).collect();
        let mut count = 0;
        let mut idx = vec![0usize; l.n];
        loop {
            let rows = (0..l.n).map(|s| per_row[s][idx[s]].clone()).collect();
            if check_valid(&FusedSchedule::new(rows), l).is_ok() {
                count += 1;
            }
            let mut s = 0;
            loop {
                if s == l.n {
                    return count;
                }
                idx[s] += 1;
                if idx[s] < per_row[s].len() {
                    break;
                }
                idx[s] = 0;
                s += 1;
            }
        }
    }

    #[test]
    fn enumeration_matches_permutation_filter() {
        let layouts = [
            FusionLayout::single(2, 2, vec![1i64, 2], vec![2, 3], vec![1.0; 2]).unwrap(),
            FusionLayout::new(
                PipelineSpec::uniform(2, 1, 1, 1i64, 2, 1.0),
                PipelineSpec::uniform(2, 1, 1, 2i64, 1, 1.0),
            )
            .unwrap(),
            FusionLayout::new(
                PipelineSpec::uniform(2, 1, 2, 1i64, 2, 1.0),
                PipelineSpec::uniform(1, 2, 1, 1i64, 1, 1.0),
            )
            .unwrap()
            .with_capacity(2.0),
        ];
        for l in &layouts {
            assert_eq!(count_valid_schedules(l).unwrap(), count_by_permutation(l));
        }
    }

    #[test]
    fn single_stage_optimum_is_sum() {
        let l = FusionLayout::single(1, 3, vec![2i64], vec![3], vec![1.0]).unwrap();
        let r = exhaustive_oracle(&l).unwrap();
        assert_eq!(r.makespan, 15);
        check_valid(&r.schedule, &l).unwrap();
    }

    #[test]
    fn oracle_schedule_energy_matches() {
        let l = FusionLayout::new(
            PipelineSpec::uniform(2, 1, 2, 1i64, 2, 1.0),
            PipelineSpec::uniform(1, 2, 1, 2i64, 3, 1.0),
        )
        .unwrap();
        let r = exhaustive_oracle(&l).unwrap();
        assert_eq!(compute_energy(&r.schedule, &l).unwrap(), r.makespan);
        let _ = l.id_of(ModelId::B, 1, 0, 0, Direction::Bwd);
    }

    #[test]
    fn too_large_rejected() {
        let l = FusionLayout::single(2, 5, vec![1i64; 2], vec![1; 2], vec![0.0; 2]).unwrap();
        assert!(matches!(exhaustive_oracle(&l), Err(Error::TooLarge { subtasks: 20, limit: 16 })));
    }
}
