use std::fmt;

use crate::error::{Error, Result};
use crate::model::Direction;
use crate::scalar::Scalar;

use super::layout::{FusionLayout, SubtaskId};

/// Ordered subtask list per physical stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FusedSchedule {
    pub rows: Vec<Vec<SubtaskId>>,
}

impl FusedSchedule {
    pub fn new(rows: Vec<Vec<SubtaskId>>) -> Self {
        FusedSchedule { rows }
    }

    pub fn num_stages(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    /// Row count, duplicate, missing or misplaced subtasks.
    Malformed,
    /// A same-stage dependency appears after its dependent.
    DependencyOrder,
    /// The row orders together with the data path form a cycle.
    Cycle,
    /// Live activations exceed the stage capacity.
    Memory,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::Malformed => "malformed",
            ViolationKind::DependencyOrder => "dependency-order",
            ViolationKind::Cycle => "cycle",
            ViolationKind::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub stage: usize,
    pub position: Option<usize>,
    pub detail: String,
}

impl Violation {
    fn new(kind: ViolationKind, stage: usize, position: Option<usize>, detail: impl Into<String>) -> Self {
        Violation { kind, stage, position, detail: detail.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at stage {}", self.kind.as_str(), self.stage)?;
        if let Some(p) = self.position {
            write!(f, " position {p}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Positions of every subtask within its row, or a shape violation.
pub(crate) fn positions<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> std::result::Result<Vec<u32>, Violation> {
    if s.rows.len() != layout.n {
        return Err(Violation::new(
            ViolationKind::Malformed,
            0,
            None,
            format!("expected {} rows, found {}", layout.n, s.rows.len()),
        ));
    }
    let total = layout.num_subtasks();
    let mut pos = vec![u32::MAX; total];
    for (stage, row) in s.rows.iter().enumerate() {
        if row.len() != layout.row_len(stage) {
            return Err(Violation::new(
                ViolationKind::Malformed,
                stage,
                None,
                format!("expected {} subtasks, found {}", layout.row_len(stage), row.len()),
            ));
        }
        for (p, &id) in row.iter().enumerate() {
            if id.idx() >= total {
                return Err(Violation::new(ViolationKind::Malformed, stage, Some(p), "unknown subtask"));
            }
            if layout.subtask(id).stage != stage {
                return Err(Violation::new(
                    ViolationKind::Malformed,
                    stage,
                    Some(p),
                    format!("subtask belongs to stage {}", layout.subtask(id).stage),
                ));
            }
            if pos[id.idx()] != u32::MAX {
                return Err(Violation::new(ViolationKind::Malformed, stage, Some(p), "duplicate subtask"));
            }
            pos[id.idx()] = p as u32;
        }
    }
    Ok(pos)
}

/// Checks shape, same-stage dependency order, acyclicity and memory.
pub fn check_valid<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> std::result::Result<(), Violation> {
    let pos = positions(s, layout)?;
    for (stage, row) in s.rows.iter().enumerate() {
        for (p, &id) in row.iter().enumerate() {
            if let Some(pred) = layout.inter_pred(id) {
                if layout.subtask(pred).stage == stage && pos[pred.idx()] as usize > p {
                    return Err(Violation::new(
                        ViolationKind::DependencyOrder,
                        stage,
                        Some(p),
                        "subtask precedes its same-stage dependency",
                    ));
                }
            }
        }
    }
    if let Some(stage) = stuck_stage(s, layout) {
        return Err(Violation::new(
            ViolationKind::Cycle,
            stage,
            None,
            "row orders deadlock against the data path",
        ));
    }
    for (stage, row) in s.rows.iter().enumerate() {
        let mut live = 0.0;
        for (p, &id) in row.iter().enumerate() {
            let t = layout.subtask(id);
            if t.direction == Direction::Fwd {
                live += layout.activation_of(id);
                if live > layout.capacity {
                    return Err(Violation::new(
                        ViolationKind::Memory,
                        stage,
                        Some(p),
                        format!("{live} bytes live, capacity {}", layout.capacity),
                    ));
                }
            } else {
                live -= layout.activation_of(id);
            }
        }
    }
    Ok(())
}

/// Stage whose row cannot progress, if the schedule deadlocks.
fn stuck_stage<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> Option<usize> {
    let mut ev = Evaluator::new(layout);
    if ev.makespan(layout, &s.rows).is_some() {
        None
    } else {
        (0..layout.n).find(|&st| ev.ptr[st] < s.rows[st].len())
    }
}

/// Makespan of a schedule by memoized recursion over the dependency graph:
/// each subtask finishes at the later of its row predecessor and its data
/// predecessor plus its own latency.
pub fn compute_energy<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> Result<T> {
    let finish = finish_times(s, layout)?;
    Ok(finish.into_iter().fold(T::zero(), |m, f| m.max_of(f)))
}

fn finish_times<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> Result<Vec<T>> {
    let pos = positions(s, layout)?;
    let total = layout.num_subtasks();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; total];
    let mut finish = vec![T::zero(); total];
    let row_pred = |id: SubtaskId| -> Option<SubtaskId> {
        let t = layout.subtask(id);
        let p = pos[id.idx()] as usize;
        (p > 0).then(|| s.rows[t.stage][p - 1])
    };
    let mut stack: Vec<SubtaskId> = Vec::new();
    for root in 0..total {
        if state[root] == 2 {
            continue;
        }
        stack.push(SubtaskId(root as u32));
        while let Some(&id) = stack.last() {
            let i = id.idx();
            if state[i] == 2 {
                stack.pop();
                continue;
            }
            state[i] = 1;
            let mut pending = false;
            for dep in [row_pred(id), layout.inter_pred(id)].into_iter().flatten() {
                match state[dep.idx()] {
                    0 => {
                        stack.push(dep);
                        pending = true;
                    }
                    1 => {
                        let t = layout.subtask(id);
                        return Err(Violation::new(
                            ViolationKind::Cycle,
                            t.stage,
                            Some(pos[i] as usize),
                            "dependency cycle",
                        )
                        .into());
                    }
                    _ => {}
                }
            }
            if pending {
                continue;
            }
            let mut ready = T::zero();
            if let Some(r) = row_pred(id) {
                ready = finish[r.idx()];
            }
            if let Some(d) = layout.inter_pred(id) {
                ready = ready.max_of(finish[d.idx()] + layout.edge_delay(d, id));
            }
            finish[i] = ready + layout.subtask(id).latency;
            state[i] = 2;
            stack.pop();
        }
    }
    Ok(finish)
}

/// Start and end time of every subtask.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline<T> {
    pub start: Vec<T>,
    pub end: Vec<T>,
    pub makespan: T,
}

/// Full timeline of a schedule.
pub fn evaluate<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> Result<Timeline<T>> {
    let end = finish_times(s, layout)?;
    let start = end
        .iter()
        .zip(layout.subtasks())
        .map(|(&e, t)| e - t.latency)
        .collect();
    let makespan = end.iter().fold(T::zero(), |m, &f| m.max_of(f));
    Ok(Timeline { start, end, makespan })
}

/// Peak live activation bytes per stage. Depends only on row order.
pub fn peak_memory<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> Result<Vec<f64>> {
    positions(s, layout)?;
    Ok(s.rows.iter().map(|row| row_peak(row, layout)).collect())
}

pub(crate) fn row_peak<T: Scalar>(row: &[SubtaskId], layout: &FusionLayout<T>) -> f64 {
    let mut live = 0.0f64;
    let mut peak = 0.0f64;
    for &id in row {
        if layout.subtask(id).direction == Direction::Fwd {
            live += layout.activation_of(id);
            peak = peak.max(live);
        } else {
            live -= layout.activation_of(id);
        }
    }
    peak
}

/// Reusable makespan evaluator for search loops. Rows are swept with one
/// pointer per stage; a stage blocked on a cross-stage dependency sleeps until
/// that subtask completes. Returns `None` on deadlock.
#[derive(Debug, Clone)]
pub struct Evaluator<T> {
    finish: Vec<T>,
    done: Vec<bool>,
    ptr: Vec<usize>,
    clock: Vec<T>,
    waiting: Vec<bool>,
    stack: Vec<usize>,
}

impl<T: Scalar> Evaluator<T> {
    pub fn new(layout: &FusionLayout<T>) -> Self {
        Evaluator {
            finish: vec![T::zero(); layout.num_subtasks()],
            done: vec![false; layout.num_subtasks()],
            ptr: vec![0; layout.n],
            clock: vec![T::zero(); layout.n],
            waiting: vec![false; layout.n],
            stack: Vec::with_capacity(layout.n),
        }
    }

    /// Makespan of row orders assumed to be well formed for `layout`.
    pub fn makespan(&mut self, layout: &FusionLayout<T>, rows: &[Vec<SubtaskId>]) -> Option<T> {
        self.done.iter_mut().for_each(|d| *d = false);
        self.ptr.iter_mut().for_each(|p| *p = 0);
        self.clock.iter_mut().for_each(|c| *c = T::zero());
        self.waiting.iter_mut().for_each(|w| *w = false);
        self.stack.clear();
        self.stack.extend((0..layout.n).rev());
        let mut completed = 0usize;
        let mut makespan = T::zero();
        while let Some(s) = self.stack.pop() {
            let row = &rows[s];
            while self.ptr[s] < row.len() {
                let id = row[self.ptr[s]];
                let mut start = self.clock[s];
                if let Some(p) = layout.inter_pred[id.idx()] {
                    if !self.done[p.idx()] {
                        self.waiting[s] = true;
                        break;
                    }
                    start = start.max_of(self.finish[p.idx()] + layout.edge_delay(p, id));
                }
                let end = start + layout.subtasks[id.idx()].latency;
                self.finish[id.idx()] = end;
                self.done[id.idx()] = true;
                self.clock[s] = end;
                self.ptr[s] += 1;
                completed += 1;
                if let Some(q) = layout.inter_succ[id.idx()] {
                    let t = layout.subtasks[q.idx()].stage;
                    if t != s && self.waiting[t] && rows[t][self.ptr[t]] == q {
                        self.waiting[t] = false;
                        self.stack.push(t);
                    }
                }
            }
            makespan = makespan.max_of(self.clock[s]);
        }
        (completed == layout.num_subtasks()).then_some(makespan)
    }

    /// Finish times from the last successful [`Evaluator::makespan`] call.
    pub fn finish_times(&self) -> &[T] {
        &self.finish
    }
}

/// Makespan and peak memory of a schedule, with validation.
pub fn energy_and_peak<T: Scalar>(s: &FusedSchedule, layout: &FusionLayout<T>) -> Result<(T, f64)> {
    check_valid(s, layout).map_err(Error::from)?;
    let e = compute_energy(s, layout)?;
    let peak = peak_memory(s, layout)?.into_iter().fold(0.0, f64::max);
    Ok((e, peak))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::layout::{ModelId, PipelineSpec};
    use num_rational::Rational64;

    fn one_stage_layout() -> FusionLayout<i64> {
        FusionLayout::single(1, 2, vec![1], vec![2], vec![1.0]).unwrap()
    }

    fn row(layout: &FusionLayout<i64>, items: &[(usize, Direction)]) -> Vec<SubtaskId> {
        items.iter().map(|&(mb, d)| layout.id_of(ModelId::A, 0, mb, 0, d)).collect()
    }

    #[test]
    fn single_stage_energy_is_total_work() {
        let l = one_stage_layout();
        let s = FusedSchedule::new(vec![row(&l, &[(0, Direction::Fwd), (1, Direction::Fwd), (0, Direction::Bwd), (1, Direction::Bwd)])]);
        check_valid(&s, &l).unwrap();
        assert_eq!(compute_energy(&s, &l).unwrap(), 6);
        assert_eq!(peak_memory(&s, &l).unwrap(), vec![2.0]);
    }

    #[test]
    fn same_stage_order_violation() {
        let l = one_stage_layout();
        let s = FusedSchedule::new(vec![row(&l, &[(0, Direction::Bwd), (0, Direction::Fwd), (1, Direction::Fwd), (1, Direction::Bwd)])]);
        let v = check_valid(&s, &l).unwrap_err();
        assert_eq!(v.kind, ViolationKind::DependencyOrder);
        assert!(compute_energy(&s, &l).is_err());
    }

    #[test]
    fn malformed_rows_rejected() {
        let l = one_stage_layout();
        let s = FusedSchedule::new(vec![row(&l, &[(0, Direction::Fwd), (0, Direction::Fwd), (1, Direction::Fwd), (1, Direction::Bwd)])]);
        assert_eq!(check_valid(&s, &l).unwrap_err().kind, ViolationKind::Malformed);
        let s = FusedSchedule::new(vec![]);
        assert_eq!(check_valid(&s, &l).unwrap_err().kind, ViolationKind::Malformed);
    }

    #[test]
    fn memory_violation() {
        let l = one_stage_layout().with_capacity(1.0);
        let s = FusedSchedule::new(vec![row(&l, &[(0, Direction::Fwd), (1, Direction::Fwd), (0, Direction::Bwd), (1, Direction::Bwd)])]);
        assert_eq!(check_valid(&s, &l).unwrap_err().kind, ViolationKind::Memory);
        let s = FusedSchedule::new(vec![row(&l, &[(0, Direction::Fwd), (0, Direction::Bwd), (1, Direction::Fwd), (1, Direction::Bwd)])]);
        check_valid(&s, &l).unwrap();
    }

    #[test]
    fn cross_stage_cycle_detected() {
        let l: FusionLayout<Rational64> = FusionLayout::single(
            2,
            2,
            vec![Rational64::from(1); 2],
            vec![Rational64::from(1); 2],
            vec![1.0; 2],
        )
        .unwrap();
        let id = |mb, st, d| l.id_of(ModelId::A, 0, mb, st, d);
        use Direction::*;
        // stage 1 insists on mb1 before mb0 while stage 0 runs mb0 backward before mb1 forward
        let s = FusedSchedule::new(vec![
            vec![id(0, 0, Fwd), id(0, 0, Bwd), id(1, 0, Fwd), id(1, 0, Bwd)],
            vec![id(1, 1, Fwd), id(1, 1, Bwd), id(0, 1, Fwd), id(0, 1, Bwd)],
        ]);
        assert_eq!(check_valid(&s, &l).unwrap_err().kind, ViolationKind::Cycle);
        assert!(compute_energy(&s, &l).is_err());
        let mut ev = Evaluator::new(&l);
        assert!(ev.makespan(&l, &s.rows).is_none());
    }

    #[test]
    fn evaluator_matches_recursion_with_comm() {
        let l = FusionLayout::new(
            PipelineSpec::uniform(2, 1, 2, 3i64, 5, 1.0),
            PipelineSpec::uniform(2, 1, 2, 2i64, 4, 1.0),
        )
        .unwrap()
        .with_comm(1);
        let mut rows = Vec::new();
        for st in 0..2 {
            let mut r: Vec<SubtaskId> = l.stage_tasks(st).to_vec();
            // forwards before backwards per chunk keeps same-stage order legal
            r.sort_by_key(|&id| {
                let t = l.subtask(id);
                (t.direction == Direction::Bwd, t.model, t.microbatch)
            });
            rows.push(r);
        }
        let s = FusedSchedule::new(rows);
        check_valid(&s, &l).unwrap();
        let e = compute_energy(&s, &l).unwrap();
        let mut ev = Evaluator::new(&l);
        assert_eq!(ev.makespan(&l, &s.rows), Some(e));
        let tl = evaluate(&s, &l).unwrap();
        assert_eq!(tl.makespan, e);
        assert_eq!(tl.end.as_slice(), ev.finish_times());
    }
}
