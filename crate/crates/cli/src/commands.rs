use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fuseplan::annealer::{
    exhaustive_oracle, greedy_schedule, lower_bound, multi_seed_search, optimize_memory, serial_1f1b_makespan,
    serial_1f1b_peak,
};
use fuseplan::baseline::{bubble_fraction, schedule_1f1b_with_comm};
use fuseplan::fusion::{compute_energy, peak_memory, ModelId};
use fuseplan::genfuse::{format_events, sample_lengths, simulate_fused, sweep_threshold};
use fuseplan::numerics::{gae_matrix, gae_recursive, GaeInputs};
use fuseplan::workflow::{simulate_iteration_report, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::schedule_file::write_schedule;
use crate::svg::{render_gantt, GanttInput};

/// Files a command produces, written only once the command has succeeded.
#[derive(Debug, Default)]
pub struct Output {
    pub files: Vec<(String, String)>,
    pub summary: String,
}

impl Output {
    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    /// Writes every file to a temporary name, then renames them all into
    /// place; on failure the temporaries are removed.
    pub fn commit(&self, dir: &Path) -> CliResult<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut staged = Vec::with_capacity(self.files.len());
        let result = (|| -> CliResult<()> {
            for (name, contents) in &self.files {
                let tmp = dir.join(format!(".{name}.tmp"));
                std::fs::write(&tmp, contents)?;
                staged.push((tmp, dir.join(name)));
            }
            Ok(())
        })();
        if let Err(e) = result {
            for (tmp, _) in &staged {
                let _ = std::fs::remove_file(tmp);
            }
            return Err(e);
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, dst) in staged {
            std::fs::rename(&tmp, &dst)?;
            written.push(dst);
        }
        Ok(written)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
}

fn fmt_peaks(p: &[f64]) -> String {
    p.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join(" ")
}

pub fn cmd_schedule(cfg: &RunConfig, ov: Overrides) -> CliResult<Output> {
    let layout = cfg.layout()?;
    let mut params = cfg.anneal.params();
    let mut memory_params = cfg.anneal.memory_params();
    if let Some(seed) = ov.seed {
        params.rng_seed = seed;
        memory_params.rng_seed = seed;
    }
    let chains = ov.chains.unwrap_or(cfg.anneal.chains);
    let greedy = greedy_schedule(&layout)?;
    let greedy_energy = compute_energy(&greedy, &layout)?;
    let (best, report) = multi_seed_search(&greedy, &layout, &params, chains)?;
    let (schedule, energy) = if cfg.anneal.memory_pass {
        let m = optimize_memory(&best, &layout, &memory_params)?;
        (m.schedule, m.makespan)
    } else {
        (best, report.best_energy)
    };
    let lb = lower_bound(&layout);
    let serial = serial_1f1b_makespan(&layout)?;
    let peaks = peak_memory(&schedule, &layout)?;
    let greedy_peaks = peak_memory(&greedy, &layout)?;
    let serial_peaks = serial_1f1b_peak(&layout);

    let mut stats = String::new();
    let _ = writeln!(stats, "stages {} subtasks {}", layout.n, layout.num_subtasks());
    let _ = writeln!(stats, "energy {energy:.9}");
    let _ = writeln!(stats, "lower_bound {lb:.9}");
    let _ = writeln!(stats, "gap {:.6}", (energy - lb) / lb);
    let _ = writeln!(stats, "greedy_energy {greedy_energy:.9}");
    let _ = writeln!(stats, "serial_1f1b {serial:.9}");
    let _ = writeln!(stats, "speedup {:.4}", serial / energy);
    let _ = writeln!(stats, "greedy_speedup {:.4}", serial / greedy_energy);
    let _ = writeln!(stats, "peak_max {:.0}", peaks.iter().copied().fold(0.0, f64::max));
    let _ = writeln!(stats, "serial_peak_max {:.0}", serial_peaks.iter().copied().fold(0.0, f64::max));
    let _ = writeln!(stats, "peak {}", fmt_peaks(&peaks));
    let _ = writeln!(stats, "greedy_peak {}", fmt_peaks(&greedy_peaks));
    let _ = writeln!(stats, "serial_peak {}", fmt_peaks(&serial_peaks));
    stats.push_str(&report.to_string());

    let mut out = Output::default();
    out.summary = format!(
        "energy {energy:.6} s, lower bound {lb:.6} s, gap {:.4}%, speedup {:.3} over serial 1F1B",
        100.0 * (energy - lb) / lb,
        serial / energy
    );
    out.file("schedule.txt", write_schedule(&schedule, &layout)?);
    out.file("schedule.svg", render_gantt(&GanttInput::from_schedule(&schedule, &layout)?));
    out.file("stats.txt", stats);
    Ok(out)
}

pub fn cmd_sweep_rt(cfg: &RunConfig) -> CliResult<Output> {
    let g = cfg.generation()?;
    let setup = cfg.gen_setup()?;
    let lengths = sample_lengths(&cfg.lengths(&g.lengths)?, g.batch, g.seed)?;
    let batch = setup.batch(&lengths);
    let sweep = sweep_threshold(&batch, &setup, &g.grid)?;
    let mut csv = String::from("ratio,r_t,m,overhead,gen_end,total\n");
    let _ = writeln!(csv, "0.00,0,0,0.000000000,{:.9},{:.9}", sweep.serial_gen_end, sweep.serial_total);
    for p in &sweep.curve {
        let _ = writeln!(csv, "{:.2},{},{},{:.9},{:.9},{:.9}", p.ratio, p.r_t, p.m, p.overhead, p.gen_end, p.total);
    }
    let best = sweep.best_point();
    let timeline = simulate_fused(&batch, &setup, best.r_t)?;
    let mut report = String::new();
    let _ = writeln!(report, "serial {:.6}", sweep.serial_total);
    let _ = writeln!(report, "best_ratio {:.2}", best.ratio);
    let _ = writeln!(report, "best_r_t {}", best.r_t);
    let _ = writeln!(report, "best_total {:.6}", best.total);
    let _ = writeln!(report, "speedup {:.4}", sweep.serial_total / best.total);
    if let Some(p) = &timeline.plan {
        let _ = writeln!(report, "destinations {:?}", p.destinations);
        let _ = writeln!(report, "mechanism {}", p.mechanism.as_str());
        let _ = writeln!(report, "migrated {}", p.migrated.len());
        let _ = writeln!(report, "overhead {:.6}", p.overhead);
    }
    let mut out = Output::default();
    out.summary = format!(
        "best migration ratio {:.2} (R_t = {}): {:.3} s vs serial {:.3} s",
        best.ratio, best.r_t, best.total, sweep.serial_total
    );
    out.file("sweep.csv", csv);
    out.file("sweep.txt", report);
    out.file("events.csv", format_events(&timeline.events));
    Ok(out)
}

pub fn cmd_iterate(cfg: &RunConfig, mode: Option<Mode>) -> CliResult<Output> {
    let mut it = cfg.iteration_config()?;
    it.anneal = cfg.anneal.params();
    let modes: Vec<Mode> = mode.map_or(vec![Mode::Base, Mode::Fused], |m| vec![m]);
    let mut text = String::new();
    let mut json = serde_json::Map::new();
    let mut reports = Vec::new();
    for m in modes {
        let r = simulate_iteration_report(&it, m)?;
        let _ = writeln!(text, "[{}]\n{}\n", m.as_str(), r.breakdown);
        json.insert(m.as_str().into(), serde_json::to_value(r.breakdown).map_err(|e| CliError::Internal(e.to_string()))?);
        reports.push((m, r));
    }
    let mut summary = String::new();
    if let [(_, base), (_, fused)] = reports.as_slice() {
        let (b, f) = (base.breakdown, fused.breakdown);
        let speed = serde_json::json!({
            "gen_plus_inf": b.gen_plus_inf / f.gen_plus_inf,
            "train": b.train / f.train,
            "total": b.total() / f.total(),
        });
        let _ = writeln!(
            text,
            "speedup Gen.+Inf. {:.3}  Train {:.3}  Total {:.3}",
            b.gen_plus_inf / f.gen_plus_inf,
            b.train / f.train,
            b.total() / f.total()
        );
        if let Some(r) = fused.migration_ratio {
            let _ = writeln!(text, "migration ratio {r:.2}");
        }
        json.insert("speedup".into(), speed);
        summary = format!("iteration speedup {:.3}", b.total() / f.total());
    } else if let Some((m, r)) = reports.first() {
        summary = format!("{} iteration {:.3} s", m.as_str(), r.breakdown.total());
    }
    let mut out = Output::default();
    out.summary = summary;
    out.file("breakdown.txt", text);
    out.file(
        "breakdown.json",
        serde_json::to_string_pretty(&json).map_err(|e| CliError::Internal(e.to_string()))? + "\n",
    );
    Ok(out)
}

pub fn cmd_baselines(cfg: &RunConfig) -> CliResult<Output> {
    let layout = cfg.layout()?;
    let mut text = String::new();
    let mut serial = 0.0;
    for model in [ModelId::A, ModelId::B] {
        let p = layout.pipeline(model);
        if p.microbatches == 0 {
            continue;
        }
        let t = schedule_1f1b_with_comm(p.stages, p.microbatches, &p.fwd, &p.bwd, layout.comm)?;
        serial += t.makespan();
        let b = bubble_fraction(p.stages as u64, p.microbatches as u64, 1);
        let _ = writeln!(
            text,
            "model {} stages {} groups {} microbatches {} 1f1b {:.9} bubble {}/{} ({:.4})",
            model.as_str(),
            p.stages,
            p.groups,
            p.microbatches,
            t.makespan(),
            b.numer(),
            b.denom(),
            *b.numer() as f64 / *b.denom() as f64
        );
    }
    let greedy = compute_energy(&greedy_schedule(&layout)?, &layout)?;
    let lb = lower_bound(&layout);
    let _ = writeln!(text, "serial_1f1b {serial:.9}");
    let _ = writeln!(text, "greedy {greedy:.9}");
    let _ = writeln!(text, "lower_bound {lb:.9}");
    let _ = writeln!(text, "greedy_speedup {:.4}", serial / greedy);
    let mut out = Output::default();
    out.summary = format!("serial {serial:.6} s, greedy {greedy:.6} s, lower bound {lb:.6} s");
    out.file("baselines.txt", text);
    Ok(out)
}

pub fn cmd_oracle(cfg: &RunConfig) -> CliResult<Output> {
    let layout = cfg.layout()?;
    let r = exhaustive_oracle(&layout)?;
    let lb = lower_bound(&layout);
    let greedy = compute_energy(&greedy_schedule(&layout)?, &layout)?;
    let mut text = String::new();
    let _ = writeln!(text, "optimum {:.9}", r.makespan);
    let _ = writeln!(text, "lower_bound {lb:.9}");
    let _ = writeln!(text, "greedy {greedy:.9}");
    let mut out = Output::default();
    out.summary = format!("optimal makespan {:.6} s", r.makespan);
    out.file("oracle.txt", text);
    out.file("oracle_schedule.txt", write_schedule(&r.schedule, &layout)?);
    Ok(out)
}

/// Largest relative difference between the two advantage computations.
pub fn gae_max_relative_error(cases: usize, max_steps: usize, seed: u64) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = rng.random_range(1..=max_steps.max(1));
        let rewards: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..=t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = GaeInputs::new(rewards, values, rng.random_range(0.9..=1.0), rng.random_range(0.8..=1.0))?;
        let a = gae_recursive(&g)?;
        let b = gae_matrix(&g)?;
        let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    Ok(worst)
}

pub fn cmd_gae_check(cfg: &RunConfig) -> CliResult<Output> {
    let g = &cfg.gae;
    let hand = GaeInputs::new(vec![1.0, 1.0], vec![0.0; 3], 0.9, 0.95)?;
    let hand_rec = gae_recursive(&hand)?;
    let hand_mat = gae_matrix(&hand)?;
    let worst = gae_max_relative_error(g.cases, g.max_steps, g.seed)?;
    let mut text = String::new();
    let _ = writeln!(text, "hand_recursive {:?}", hand_rec);
    let _ = writeln!(text, "hand_matrix {:?}", hand_mat);
    let _ = writeln!(text, "cases {} max_steps {}", g.cases, g.max_steps);
    let _ = writeln!(text, "max_relative_error {worst:.3e}");
    if worst > 1e-10 {
        return Err(CliError::Internal(format!("matrix and recursive advantages differ by {worst:.3e}")));
    }
    let mut out = Output::default();
    out.summary = format!("{} cases agree, max relative error {worst:.3e}", g.cases);
    out.file("gae.txt", text);
    Ok(out)
}
