use crate::error::{Error, Result};
use crate::fusion::{FusedSchedule, FusionLayout, ModelId, SubtaskId};
use crate::model::Direction;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct ChunkCursor {
    model: ModelId,
    group: usize,
    logical: usize,
    microbatches: usize,
    next_fwd: usize,
    next_bwd: usize,
}

/// Event-driven list scheduling. Whenever a stage goes idle it runs one of
/// the subtasks that are ready by then, preferring the larger model, then the
/// smaller micro-batch index, then backward over forward.
///
/// Forwards are admitted while the stage activation capacity allows. When
/// only one model has work the result is its 1F1B schedule.
pub fn greedy_schedule<T: Scalar>(layout: &FusionLayout<T>) -> Result<FusedSchedule> {
    if layout.pipeline(ModelId::A).microbatches == 0 || layout.pipeline(ModelId::B).microbatches == 0 {
        if serial_1f1b_peak(layout).iter().any(|&p| p > layout.capacity) {
            return Err(Error::InfeasibleLayout("1F1B exceeds the activation capacity".into()));
        }
        return Ok(serial_1f1b_schedule(layout));
    }
    let n = layout.n;
    let mut cursors: Vec<Vec<ChunkCursor>> = (0..n)
        .map(|s| {
            layout.placement[s]
                .iter()
                .filter_map(|c| {
                    let p = layout.pipeline(c.model);
                    (p.microbatches > 0).then(|| ChunkCursor {
                        model: c.model,
                        group: c.group,
                        logical: c.logical,
                        microbatches: p.microbatches,
                        next_fwd: 0,
                        next_bwd: 0,
                    })
                })
                .collect()
        })
        .collect();
    let total = layout.num_subtasks();
    let mut finish: Vec<Option<T>> = vec![None; total];
    let mut free = vec![T::zero(); n];
    let mut live = vec![0.0f64; n];
    let mut rows: Vec<Vec<SubtaskId>> = (0..n).map(|s| Vec::with_capacity(layout.row_len(s))).collect();
    let larger = layout.larger;

    for _ in 0..total {
        // (start, stage, cursor index, direction)
        let mut pick: Option<(T, usize, usize, Direction)> = None;
        for s in 0..n {
            let mut cands: Vec<(T, usize, Direction, SubtaskId)> = Vec::with_capacity(4);
            for (ci, c) in cursors[s].iter().enumerate() {
                if c.next_bwd < c.next_fwd {
                    let id = layout.id_of(c.model, c.group, c.next_bwd, c.logical, Direction::Bwd);
                    if let Some(r) = ready_time(layout, &finish, id) {
                        cands.push((r, ci, Direction::Bwd, id));
                    }
                }
                if c.next_fwd < c.microbatches {
                    let id = layout.id_of(c.model, c.group, c.next_fwd, c.logical, Direction::Fwd);
                    if live[s] + layout.activation_of(id) <= layout.capacity {
                        if let Some(r) = ready_time(layout, &finish, id) {
                            cands.push((r, ci, Direction::Fwd, id));
                        }
                    }
                }
            }
            let Some(earliest) = cands.iter().map(|c| c.0).reduce(|a, b| a.min_of(b)) else {
                continue;
            };
            let start = free[s].max_of(earliest);
            let best = cands
                .iter()
                .filter(|c| c.0 <= start)
                .min_by_key(|c| {
                    let cur = &cursors[s][c.1];
                    let mb = match c.2 {
                        Direction::Fwd => cur.next_fwd,
                        Direction::Bwd => cur.next_bwd,
                    };
                    (cur.model != larger, mb, c.2 == Direction::Fwd)
                })
                .expect("earliest candidate is eligible");
            if pick.is_none_or(|p| start < p.0) {
                pick = Some((start, s, best.1, best.2));
            }
        }
        let Some((start, s, ci, dir)) = pick else {
            return Err(Error::InfeasibleLayout(
                "activation capacity blocks every remaining forward".into(),
            ));
        };
        let c = &mut cursors[s][ci];
        let mb = match dir {
            Direction::Fwd => c.next_fwd,
            Direction::Bwd => c.next_bwd,
        };
        let id = layout.id_of(c.model, c.group, mb, c.logical, dir);
        match dir {
            Direction::Fwd => {
                c.next_fwd += 1;
                live[s] += layout.activation_of(id);
            }
            Direction::Bwd => {
                c.next_bwd += 1;
                live[s] -= layout.activation_of(id);
            }
        }
        let end = start + layout.subtask(id).latency;
        finish[id.idx()] = Some(end);
        free[s] = end;
        rows[s].push(id);
    }
    Ok(FusedSchedule::new(rows))
}

fn ready_time<T: Scalar>(layout: &FusionLayout<T>, finish: &[Option<T>], id: SubtaskId) -> Option<T> {
    match layout.inter_pred(id) {
        None => Some(T::zero()),
        Some(p) => finish[p.idx()].map(|f| f + layout.edge_delay(p, id)),
    }
}

/// Both models trained back to back, each with its own 1F1B schedule.
pub fn serial_1f1b_schedule<T: Scalar>(layout: &FusionLayout<T>) -> FusedSchedule {
    let mut rows = vec![Vec::new(); layout.n];
    for model in [ModelId::A, ModelId::B] {
        let p = layout.pipeline(model);
        if p.microbatches == 0 {
            continue;
        }
        for group in 0..p.groups {
            for logical in 0..p.stages {
                let s = layout.physical_stage(model, group, logical);
                rows[s].extend(
                    crate::baseline::order_1f1b(p.stages, p.microbatches, logical)
                        .into_iter()
                        .map(|(mb, d)| layout.id_of(model, group, mb, logical, d)),
                );
            }
        }
    }
    FusedSchedule::new(rows)
}

/// Makespan of training the two models one after the other with 1F1B.
pub fn serial_1f1b_makespan<T: Scalar>(layout: &FusionLayout<T>) -> Result<T> {
    let mut total = T::zero();
    for model in [ModelId::A, ModelId::B] {
        let p = layout.pipeline(model);
        if p.microbatches == 0 {
            continue;
        }
        let t = crate::baseline::schedule_1f1b_with_comm(p.stages, p.microbatches, &p.fwd, &p.bwd, layout.comm)?;
        total = total + t.makespan();
    }
    Ok(total)
}

/// Per-stage peak activation of the serial execution: each model's 1F1B
/// peak, whichever is larger.
pub fn serial_1f1b_peak<T: Scalar>(layout: &FusionLayout<T>) -> Vec<f64> {
    (0..layout.n)
        .map(|s| {
            layout.placement[s]
                .iter()
                .map(|c| {
                    let p = layout.pipeline(c.model);
                    (p.stages - c.logical).min(p.microbatches) as f64 * p.activation[c.logical]
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{order_1f1b, schedule_1f1b};
    use crate::fusion::{check_valid, compute_energy, PipelineSpec};

    #[test]
    fn empty_model_b_gives_canonical_1f1b() {
        for (n, m) in [(4, 4), (4, 9), (6, 3), (1, 5)] {
            let l = FusionLayout::single(n, m, vec![1i64; n], vec![2; n], vec![1.0; n]).unwrap();
            let s = greedy_schedule(&l).unwrap();
            check_valid(&s, &l).unwrap();
            for st in 0..n {
                let want: Vec<SubtaskId> = order_1f1b(n, m, st)
                    .into_iter()
                    .map(|(mb, d)| l.id_of(ModelId::A, 0, mb, st, d))
                    .collect();
                assert_eq!(s.rows[st], want, "n={n} m={m} stage {st}");
            }
            let base = schedule_1f1b(n, m, &vec![1i64; n], &vec![2; n]).unwrap();
            assert_eq!(compute_energy(&s, &l).unwrap(), base.makespan());
        }
    }

    #[test]
    fn symmetric_models_beat_serial() {
        let l = FusionLayout::new(
            PipelineSpec::uniform(4, 1, 4, 1i64, 2, 1.0),
            PipelineSpec::uniform(4, 1, 4, 1i64, 2, 1.0),
        )
        .unwrap();
        let s = greedy_schedule(&l).unwrap();
        check_valid(&s, &l).unwrap();
        assert!(compute_energy(&s, &l).unwrap() <= serial_1f1b_makespan(&l).unwrap());
    }

    #[test]
    fn serial_schedule_is_valid_and_no_slower_than_sum() {
        let l = FusionLayout::new(
            PipelineSpec::uniform(4, 1, 2, 2i64, 4, 1.0),
            PipelineSpec::uniform(2, 2, 1, 1i64, 2, 1.0),
        )
        .unwrap();
        let s = serial_1f1b_schedule(&l);
        check_valid(&s, &l).unwrap();
        assert!(compute_energy(&s, &l).unwrap() <= serial_1f1b_makespan(&l).unwrap());
    }

    #[test]
    fn tight_capacity_reported() {
        let l = FusionLayout::single(2, 2, vec![1i64; 2], vec![1; 2], vec![4.0; 2]).unwrap().with_capacity(1.0);
        assert!(matches!(greedy_schedule(&l), Err(Error::InfeasibleLayout(_))));
    }

    #[test]
    fn lone_model_with_comm_matches_serial() {
        let l = FusionLayout::single(2, 4, vec![3i64, 1], vec![2, 5], vec![1.0; 2]).unwrap().with_comm(2);
        let s = greedy_schedule(&l).unwrap();
        assert_eq!(compute_energy(&s, &l).unwrap(), serial_1f1b_makespan(&l).unwrap());
    }

    #[test]
    fn capacity_limits_in_flight() {
        let l = FusionLayout::new(
            PipelineSpec::uniform(2, 1, 4, 1i64, 2, 1.0),
            PipelineSpec::uniform(2, 1, 4, 1i64, 2, 1.0),
        )
        .unwrap()
        .with_capacity(2.0);
        let s = greedy_schedule(&l).unwrap();
        check_valid(&s, &l).unwrap();
        assert!(crate::fusion::peak_memory(&s, &l).unwrap().iter().all(|&p| p <= 2.0));
    }
}
