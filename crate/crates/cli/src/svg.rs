use std::fmt::Write as _;

use fuseplan::annealer::serial_1f1b_peak;
use fuseplan::fusion::{evaluate, FusedSchedule, FusionLayout, ModelId};
use fuseplan::Direction;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub stage: usize,
    pub start: f64,
    pub end: f64,
    pub model: ModelId,
    pub direction: Direction,
    pub label: String,
}

/// Everything the two-panel chart draws.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GanttInput {
    pub stages: usize,
    pub bars: Vec<Bar>,
    /// Per stage: (time, live bytes) after each change, starting at zero.
    pub memory: Vec<Vec<(f64, f64)>>,
    /// Per-stage peak of the serial 1F1B execution.
    pub reference: Vec<f64>,
}

impl GanttInput {
    pub fn from_schedule(schedule: &FusedSchedule, layout: &FusionLayout<f64>) -> CliResult<Self> {
        let tl = evaluate(schedule, layout)?;
        let mut bars = Vec::with_capacity(layout.num_subtasks());
        let mut memory = Vec::with_capacity(layout.n);
        for (stage, row) in schedule.rows.iter().enumerate() {
            let mut live = 0.0;
            let mut steps = vec![(0.0, 0.0)];
            for &id in row {
                let t = layout.subtask(id);
                bars.push(Bar {
                    stage,
                    start: tl.start[id.idx()],
                    end: tl.end[id.idx()],
                    model: t.model,
                    direction: t.direction,
                    label: format!("{}{}:{}", t.model.as_str(), t.group, t.microbatch),
                });
                match t.direction {
                    // activation is allocated when a forward starts and freed when its backward ends
                    Direction::Fwd => {
                        live += layout.activation_of(id);
                        steps.push((tl.start[id.idx()], live));
                    }
                    Direction::Bwd => {
                        live -= layout.activation_of(id);
                        steps.push((tl.end[id.idx()], live));
                    }
                }
            }
            memory.push(steps);
        }
        Ok(GanttInput { stages: layout.n, bars, memory, reference: serial_1f1b_peak(layout) })
    }
}

const WIDTH: f64 = 1200.0;
const LEFT: f64 = 70.0;
const ROW: f64 = 18.0;
const MEM_ROW: f64 = 36.0;
const GAP: f64 = 40.0;

fn fill(model: ModelId, dir: Direction) -> &'static str {
    match (model, dir) {
        (ModelId::A, Direction::Fwd) => "#9ecae1",
        (ModelId::A, Direction::Bwd) => "#2171b5",
        (ModelId::B, Direction::Fwd) => "#fdae6b",
        (ModelId::B, Direction::Bwd) => "#d94801",
    }
}

/// Self-contained SVG: a Gantt chart with one row per stage and, below it,
/// each stage's live activation over time against the serial 1F1B peak.
pub fn render_gantt(input: &GanttInput) -> String {
    let span = input.bars.iter().map(|b| b.end).fold(0.0, f64::max);
    let scale = if span > 0.0 { (WIDTH - LEFT - 10.0) / span } else { 0.0 };
    let gantt_h = input.stages as f64 * ROW;
    let mem_top = 30.0 + gantt_h + GAP;
    let height = mem_top + input.stages as f64 * MEM_ROW + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height:.1}" viewBox="0 0 {WIDTH} {height:.1}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="14">execution timeline, makespan {span:.6} s</text>"#);
    s.push_str("<g id=\"gantt\">\n");
    for st in 0..input.stages {
        let y = 24.0 + st as f64 * ROW;
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">stage {st}</text>"#, y + ROW * 0.7);
    }
    for b in &input.bars {
        let x = LEFT + b.start * scale;
        let w = ((b.end - b.start) * scale).max(0.0);
        let y = 24.0 + b.stage as f64 * ROW;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.3}" y="{:.1}" width="{w:.3}" height="{:.1}" fill="{}" stroke="#333" stroke-width="0.3"><title>{} {} {:.9}-{:.9}</title></rect>"##,
            y + 1.0,
            ROW - 2.0,
            fill(b.model, b.direction),
            b.label,
            b.direction.as_str(),
            b.start,
            b.end
        );
    }
    s.push_str("</g>\n<g id=\"memory\">\n");
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.1}">live activation per stage; dashed: serial 1F1B peak</text>"#,
        mem_top - 8.0
    );
    for st in 0..input.stages {
        let top = mem_top + st as f64 * MEM_ROW;
        let steps = input.memory.get(st).map(Vec::as_slice).unwrap_or(&[]);
        let reference = input.reference.get(st).copied().unwrap_or(0.0);
        let peak = steps.iter().map(|p| p.1).fold(reference, f64::max);
        let vscale = if peak > 0.0 { (MEM_ROW - 6.0) / peak } else { 0.0 };
        let base = top + MEM_ROW - 3.0;
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">stage {st}</text>"#, base - 4.0);
        let mut path = format!("M{LEFT:.3},{base:.3}");
        let mut last = 0.0;
        for &(t, v) in steps {
            let x = LEFT + t * scale;
            let _ = write!(path, " L{x:.3},{:.3} L{x:.3},{:.3}", base - last * vscale, base - v * vscale);
            last = v;
        }
        let _ = write!(path, " L{:.3},{:.3}", LEFT + span * scale, base - last * vscale);
        let _ = writeln!(s, r##"<path d="{path}" fill="none" stroke="#238b45" stroke-width="1"/>"##);
        let ry = base - reference * vscale;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{ry:.3}" x2="{:.3}" y2="{ry:.3}" stroke="#cb181d" stroke-dasharray="4 3" stroke-width="0.8"/>"##,
            LEFT + span * scale
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use fuseplan::annealer::greedy_schedule;
    use fuseplan::fusion::PipelineSpec;

    #[test]
    fn empty_input_is_valid_scaffold() {
        let svg = render_gantt(&GanttInput::default());
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 0);
    }

    #[test]
    fn one_rectangle_per_subtask_and_deterministic() {
        let l = FusionLayout::new(
            PipelineSpec::uniform(4, 1, 4, 1.0, 2.0, 1.0),
            PipelineSpec::uniform(2, 2, 2, 1.5, 3.0, 2.0),
        )
        .unwrap();
        let s = greedy_schedule(&l).unwrap();
        let input = GanttInput::from_schedule(&s, &l).unwrap();
        let svg = render_gantt(&input);
        assert_eq!(svg.matches("<rect x=").count(), l.num_subtasks());
        assert_eq!(svg.matches("stroke-dasharray").count(), l.n);
        assert_eq!(svg, render_gantt(&GanttInput::from_schedule(&s, &l).unwrap()));
    }
}
