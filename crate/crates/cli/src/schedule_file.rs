use std::fmt::Write as _;

use fuseplan::fusion::{evaluate, FusedSchedule, FusionLayout, ModelId, SubtaskId};
use fuseplan::Direction;

use crate::error::{CliError, CliResult};

pub const HEADER: &str = "fuseplan-schedule v1";

/// Serializes a valid schedule with its evaluated timeline, one line per
/// subtask sorted by stage and position.
pub fn write_schedule(schedule: &FusedSchedule, layout: &FusionLayout<f64>) -> CliResult<String> {
    let tl = evaluate(schedule, layout)?;
    let mut out = String::with_capacity(64 * layout.num_subtasks() + 32);
    out.push_str(HEADER);
    out.push('\n');
    for (stage, row) in schedule.rows.iter().enumerate() {
        for (pos, &id) in row.iter().enumerate() {
            let t = layout.subtask(id);
            writeln!(
                out,
                "{stage},{pos},{},{},{},{},{:.9},{:.9},{:.9}",
                t.model.as_str(),
                t.group,
                t.microbatch,
                t.direction.as_str(),
                t.latency,
                tl.start[id.idx()],
                tl.end[id.idx()]
            )
            .expect("writing to a string");
        }
    }
    Ok(out)
}

fn malformed(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("schedule file line {line}: {msg}"))
}

/// Parses a schedule file against the layout it was written for. Every
/// subtask's latency must match the layout exactly.
pub fn read_schedule(text: &str, layout: &FusionLayout<f64>) -> CliResult<FusedSchedule> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        _ => return Err(malformed(1, format!("expected header {HEADER:?}"))),
    }
    let mut rows: Vec<Vec<SubtaskId>> = vec![Vec::new(); layout.n];
    for (no, line) in lines {
        let no = no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(malformed(no, format!("expected 9 fields, got {}", f.len())));
        }
        let num = |i: usize, what: &str| -> CliResult<usize> {
            f[i].parse().map_err(|_| malformed(no, format!("bad {what} {:?}", f[i])))
        };
        let stage = num(0, "stage")?;
        let pos = num(1, "position")?;
        let model = match f[2] {
            "A" => ModelId::A,
            "B" => ModelId::B,
            other => return Err(malformed(no, format!("bad model {other:?}"))),
        };
        let group = num(3, "group")?;
        let mb = num(4, "microbatch")?;
        let dir = match f[5] {
            "fwd" => Direction::Fwd,
            "bwd" => Direction::Bwd,
            other => return Err(malformed(no, format!("bad direction {other:?}"))),
        };
        let latency: f64 = f[6].parse().map_err(|_| malformed(no, format!("bad latency {:?}", f[6])))?;
        if stage >= layout.n {
            return Err(malformed(no, format!("stage {stage} outside 0..{}", layout.n)));
        }
        if pos != rows[stage].len() {
            return Err(malformed(no, format!("stage {stage} position {pos} out of order")));
        }
        let chunk = layout.placement[stage]
            .iter()
            .find(|c| c.model == model && c.group == group)
            .ok_or_else(|| malformed(no, format!("stage {stage} hosts no group {group} of model {}", model.as_str())))?;
        if mb >= layout.pipeline(model).microbatches {
            return Err(malformed(no, format!("micro-batch {mb} out of range")));
        }
        let id = layout.id_of(model, group, mb, chunk.logical, dir);
        if layout.subtask(id).latency != latency {
            return Err(malformed(
                no,
                format!("latency {latency} differs from the layout's {}", layout.subtask(id).latency),
            ));
        }
        rows[stage].push(id);
    }
    Ok(FusedSchedule::new(rows))
}
