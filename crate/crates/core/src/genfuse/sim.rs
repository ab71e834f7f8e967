use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::plan::plan_migration;
use super::{EventKind, GenEvent, GenInstance, GenSample, GenSetup, GenState, MigrationPlan};

/// Slack when deciding that a sample has produced its last token.
const TOKEN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<GenEvent>,
    /// Time each sample produced its last token.
    pub finish: Vec<f64>,
    pub gen_end: f64,
    pub inference_end: f64,
    pub total: f64,
    /// GPU-seconds of inference performed.
    pub inference_work: f64,
    pub plan: Option<MigrationPlan>,
}

impl Timeline {
    pub fn overhead(&self) -> f64 {
        self.plan.as_ref().map_or(0.0, |p| p.overhead)
    }
}

#[derive(Debug, Clone, Copy)]
enum Arrival {
    Decoding { remaining: f64 },
    Prefilling { remaining: f64 },
    Queued,
}

#[derive(Debug, Default)]
struct Inst {
    /// Tokens produced so far by a sample decoding since time zero.
    v: f64,
    /// (sample, value of `v` at which it finishes)
    decoding: Vec<(usize, f64)>,
    /// (sample, time its decoding starts)
    prefilling: Vec<(usize, f64)>,
    queue: VecDeque<usize>,
    kv_used: f64,
    /// Set once the instance has left generation.
    released: bool,
    destination: bool,
}

impl Inst {
    fn rate(&self, step: f64, bs_max: u64) -> f64 {
        let b = self.decoding.len() as f64;
        1.0 / (step * (b / bs_max as f64).max(1.0))
    }

    fn is_empty(&self) -> bool {
        self.decoding.is_empty() && self.prefilling.is_empty() && self.queue.is_empty()
    }
}

struct Engine<'a> {
    setup: &'a GenSetup,
    batch: &'a [GenSample],
    inst: Vec<Inst>,
    reserve: Vec<f64>,
    prefill: f64,
    arrivals: Vec<(f64, usize, usize, Arrival)>,
    finish: Vec<f64>,
    events: Vec<GenEvent>,
    /// (time, gpus) joining the inference pool
    joins: Vec<(f64, f64)>,
    remaining: usize,
    t: f64,
}

impl<'a> Engine<'a> {
    fn new(setup: &'a GenSetup, batch: &'a [GenSample]) -> Result<Self> {
        setup.validate()?;
        if batch.is_empty() {
            return Err(Error::invalid("batch is empty"));
        }
        let kvpt = setup.kv_per_token();
        let reserve: Vec<f64> =
            batch.iter().map(|s| (s.prompt_len + s.target_output_len) as f64 * kvpt).collect();
        for (s, &r) in batch.iter().zip(&reserve) {
            if s.id >= batch.len() || batch[s.id].id != s.id {
                return Err(Error::invalid("sample ids must be 0..n in order"));
            }
            if s.target_output_len == 0 || s.generated != 0 {
                return Err(Error::invalid(format!("sample {} must start fresh with a positive target", s.id)));
            }
            if r > setup.cluster.kv_capacity {
                return Err(Error::invalid(format!(
                    "sample {} needs {r:.3e} bytes of KV, an instance holds {:.3e}",
                    s.id, setup.cluster.kv_capacity
                )));
            }
        }
        let n = setup.num_instances;
        let mut inst: Vec<Inst> = (0..n).map(|_| Inst::default()).collect();
        for s in batch {
            inst[s.id % n].queue.push_back(s.id);
        }
        Ok(Engine {
            setup,
            batch,
            inst,
            reserve,
            prefill: setup.prefill_latency(setup.prompt_len)?,
            arrivals: Vec::new(),
            finish: vec![f64::NAN; batch.len()],
            events: Vec::new(),
            joins: Vec::new(),
            remaining: batch.len(),
            t: 0.0,
        })
    }

    fn event(&mut self, time: f64, instance: Option<usize>, kind: EventKind, sample: Option<usize>) {
        self.events.push(GenEvent { time, instance, kind, sample });
    }

    fn admit(&mut self, i: usize) {
        while let Some(&s) = self.inst[i].queue.front() {
            if self.inst[i].kv_used + self.reserve[s] > self.setup.cluster.kv_capacity {
                break;
            }
            self.inst[i].queue.pop_front();
            self.inst[i].kv_used += self.reserve[s];
            let ready = self.t + self.prefill;
            self.inst[i].prefilling.push((s, ready));
            self.event(self.t, Some(i), EventKind::Admit, Some(s));
        }
    }

    fn next_time(&self) -> Option<f64> {
        let (step, bs) = (self.setup.cost.decode_step_base, self.setup.cluster.bs_max);
        let mut next = f64::INFINITY;
        for st in &self.inst {
            if let Some(vt) = st.decoding.iter().map(|d| d.1).reduce(f64::min) {
                next = next.min(self.t + (vt - st.v).max(0.0) / st.rate(step, bs));
            }
            for p in &st.prefilling {
                next = next.min(p.1);
            }
        }
        for a in &self.arrivals {
            next = next.min(a.0);
        }
        next.is_finite().then_some(next)
    }

    fn advance(&mut self, to: f64) {
        let (step, bs) = (self.setup.cost.decode_step_base, self.setup.cluster.bs_max);
        let dt = to - self.t;
        for st in &mut self.inst {
            if !st.decoding.is_empty() {
                st.v += st.rate(step, bs) * dt;
            }
        }
        self.t = to;
    }

    fn process(&mut self) {
        let t = self.t;
        let mut k = 0;
        while k < self.arrivals.len() {
            if self.arrivals[k].0 <= t {
                let (_, d, s, a) = self.arrivals.remove(k);
                self.event(t, Some(d), EventKind::MigrateIn, Some(s));
                match a {
                    Arrival::Decoding { remaining } => {
                        let st = &mut self.inst[d];
                        st.kv_used += self.reserve[s];
                        st.decoding.push((s, st.v + remaining));
                    }
                    Arrival::Prefilling { remaining } => {
                        self.inst[d].kv_used += self.reserve[s];
                        self.inst[d].prefilling.push((s, t + remaining));
                    }
                    Arrival::Queued => self.inst[d].queue.push_back(s),
                }
            } else {
                k += 1;
            }
        }
        for i in 0..self.inst.len() {
            let mut started = Vec::new();
            self.inst[i].prefilling.retain(|&(s, ready)| {
                let done = ready <= t;
                if done {
                    started.push(s);
                }
                !done
            });
            for s in started {
                let st = &mut self.inst[i];
                st.decoding.push((s, st.v + self.batch[s].target_output_len as f64));
                self.event(t, Some(i), EventKind::DecodeStart, Some(s));
            }
            let v = self.inst[i].v;
            let mut done = Vec::new();
            self.inst[i].decoding.retain(|&(s, vt)| {
                let f = vt <= v + TOKEN_EPS;
                if f {
                    done.push(s);
                }
                !f
            });
            for s in done {
                self.finish[s] = t;
                self.inst[i].kv_used -= self.reserve[s];
                self.remaining -= 1;
                self.event(t, Some(i), EventKind::Finish, Some(s));
            }
            if self.inst[i].kv_used.abs() < 1e-6 && self.inst[i].is_empty() {
                self.inst[i].kv_used = 0.0;
            }
        }
        for i in 0..self.inst.len() {
            self.admit(i);
        }
        let pending: Vec<usize> = self.arrivals.iter().map(|a| a.1).collect();
        for i in 0..self.inst.len() {
            let st = &self.inst[i];
            if st.destination && !st.released && st.is_empty() && !pending.contains(&i) {
                self.inst[i].released = true;
                self.joins.push((t, self.setup.gpus_per_instance as f64));
                self.event(t, Some(i), EventKind::JoinInference, None);
            }
        }
    }

    fn snapshot(&self) -> GenState {
        let kvpt = self.setup.kv_per_token();
        let mut samples = self.batch.to_vec();
        let mut instances = Vec::with_capacity(self.inst.len());
        for (i, st) in self.inst.iter().enumerate() {
            let mut inflight = Vec::new();
            for &(s, vt) in &st.decoding {
                let g = &mut samples[s];
                let left = (vt - st.v).max(0.0);
                g.generated = ((g.target_output_len as f64 - left).floor().max(0.0) as u32).min(g.target_output_len);
                g.kv_bytes = (g.prompt_len + g.generated) as f64 * kvpt;
                inflight.push(s);
            }
            for &(s, _) in &st.prefilling {
                samples[s].kv_bytes = samples[s].prompt_len as f64 * kvpt;
                inflight.push(s);
            }
            for &s in &st.queue {
                samples[s].kv_bytes = 0.0;
                inflight.push(s);
            }
            inflight.sort_unstable();
            instances.push(GenInstance {
                id: i,
                inflight,
                bs_max: self.setup.cluster.bs_max,
                kv_capacity: self.setup.cluster.kv_capacity,
                decode_step: self.setup.cost.decode_step_base,
            });
        }
        GenState { time: self.t, samples, instances }
    }

    fn apply(&mut self, plan: &MigrationPlan) {
        let t = self.t;
        self.event(t, None, EventKind::Trigger, None);
        let arrive = t + plan.overhead;
        for &d in &plan.destinations {
            self.inst[d].destination = true;
        }
        for (&s, &d) in plan.migrated.iter().zip(&plan.assignment) {
            let src = (0..self.inst.len())
                .find(|&i| {
                    let st = &self.inst[i];
                    st.decoding.iter().any(|x| x.0 == s)
                        || st.prefilling.iter().any(|x| x.0 == s)
                        || st.queue.contains(&s)
                })
                .expect("migrated sample is still generating");
            let st = &mut self.inst[src];
            let a = if let Some(k) = st.decoding.iter().position(|x| x.0 == s) {
                let (_, vt) = st.decoding.remove(k);
                Arrival::Decoding { remaining: (vt - st.v).max(0.0) }
            } else if let Some(k) = st.prefilling.iter().position(|x| x.0 == s) {
                let (_, ready) = st.prefilling.remove(k);
                Arrival::Prefilling { remaining: (ready - t).max(0.0) }
            } else {
                let k = st.queue.iter().position(|&x| x == s).expect("found above");
                st.queue.remove(k);
                Arrival::Queued
            };
            if !matches!(a, Arrival::Queued) {
                st.kv_used -= self.reserve[s];
            }
            self.event(t, Some(src), EventKind::MigrateOut, Some(s));
            self.arrivals.push((arrive, d, s, a));
        }
        for i in 0..self.inst.len() {
            if !self.inst[i].destination {
                let st = &mut self.inst[i];
                debug_assert!(st.is_empty());
                st.released = true;
                st.kv_used = 0.0;
                self.joins.push((arrive, self.setup.gpus_per_instance as f64));
                self.event(arrive, Some(i), EventKind::JoinInference, None);
            }
        }
    }

    fn run(mut self, r_t: usize) -> Result<Timeline> {
        let mut plan = None;
        for i in 0..self.inst.len() {
            self.admit(i);
        }
        let check_trigger = |eng: &mut Self, plan: &mut Option<MigrationPlan>| -> Result<()> {
            if plan.is_none() && r_t > 0 && eng.remaining > 0 && eng.remaining < r_t {
                let p = plan_migration(&eng.snapshot(), r_t, eng.setup)?;
                if !p.is_noop() {
                    eng.apply(&p);
                }
                *plan = Some(p);
            }
            Ok(())
        };
        check_trigger(&mut self, &mut plan)?;
        while self.remaining > 0 {
            let Some(next) = self.next_time() else {
                return Err(Error::invalid("generation stalled with samples left"));
            };
            self.advance(next);
            self.process();
            check_trigger(&mut self, &mut plan)?;
        }
        let gen_end = self.finish.iter().copied().fold(0.0, f64::max);
        let gpi = self.setup.gpus_per_instance as f64;
        for i in 0..self.inst.len() {
            if !self.inst[i].released {
                self.inst[i].released = true;
                self.joins.push((gen_end, gpi));
                self.event(gen_end, Some(i), EventKind::JoinInference, None);
            }
        }
        let streamed = plan.as_ref().is_some_and(|p| !p.is_noop());
        let work: Vec<(f64, f64)> = self
            .batch
            .iter()
            .map(|s| {
                let at = if streamed { self.finish[s.id] } else { gen_end };
                (at, self.setup.inference_work(s.prompt_len + s.target_output_len))
            })
            .collect();
        let inference_work = work.iter().map(|w| w.1).sum();
        let inference_end = fluid_queue(&work, &self.joins);
        self.event(inference_end, None, EventKind::InferenceDone, None);
        let mut events = std::mem::take(&mut self.events);
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Timeline {
            events,
            finish: self.finish,
            gen_end,
            inference_end,
            total: gen_end.max(inference_end),
            inference_work,
            plan,
        })
    }
}

/// Completion time of a work-conserving pool that receives `work` (arrival
/// time, GPU-seconds) and gains GPUs at the `joins` times.
fn fluid_queue(work: &[(f64, f64)], joins: &[(f64, f64)]) -> f64 {
    let mut points: Vec<(f64, f64, f64)> = work.iter().map(|&(t, w)| (t, w, 0.0)).collect();
    points.extend(joins.iter().map(|&(t, g)| (t, 0.0, g)));
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut t, mut backlog, mut gpus) = (0.0, 0.0, 0.0);
    for (at, w, g) in points {
        if gpus > 0.0 {
            backlog = (backlog - gpus * (at - t)).max(0.0);
        }
        t = at;
        backlog += w;
        gpus += g;
    }
    if backlog > 0.0 {
        t + backlog / gpus
    } else {
        t
    }
}

/// Generation to completion, then inference on the whole pool.
pub fn simulate_serial(batch: &[GenSample], setup: &GenSetup) -> Result<Timeline> {
    Engine::new(setup, batch)?.run(0)
}

/// Generation with one migration once fewer than `r_t` samples remain.
/// `r_t = 0` disables migration.
pub fn simulate_fused(batch: &[GenSample], setup: &GenSetup, r_t: usize) -> Result<Timeline> {
    Engine::new(setup, batch)?.run(r_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub r_t: usize,
    pub total: f64,
    pub gen_end: f64,
    pub m: usize,
    pub overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub serial_total: f64,
    pub serial_gen_end: f64,
    pub curve: Vec<SweepPoint>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_point(&self) -> &SweepPoint {
        &self.curve[self.best]
    }
}

/// Default grid: 5% to 95% of the batch in steps of 5%.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// Fused time for each threshold `ratio * batch`; ties go to the smaller ratio.
pub fn sweep_threshold(batch: &[GenSample], setup: &GenSetup, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    if let Some(r) = grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::invalid(format!("migration ratio {r} outside [0, 1]")));
    }
    let serial = simulate_serial(batch, setup)?;
    let curve = grid
        .par_iter()
        .map(|&ratio| {
            let r_t = (ratio * batch.len() as f64).round() as usize;
            let tl = simulate_fused(batch, setup, r_t)?;
            Ok(SweepPoint {
                ratio,
                r_t,
                total: tl.total,
                gen_end: tl.gen_end,
                m: tl.plan.as_ref().map_or(0, |p| p.m),
                overhead: tl.overhead(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = (0..curve.len())
        .min_by(|&a, &b| curve[a].total.total_cmp(&curve[b].total).then(a.cmp(&b)))
        .expect("non-empty grid");
    Ok(SweepResult { serial_total: serial.total, serial_gen_end: serial.gen_end, curve, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfuse::{sample_lengths, InferenceTask, LengthDistribution};
    use crate::model::{ClusterSpec, CostModel, ModelSpec};

    fn setup(n: usize) -> GenSetup {
        let mut cluster = ClusterSpec::unbounded(8 * n as u64, 8);
        cluster.kv_capacity = 64e9;
        GenSetup {
            actor: ModelSpec::llama_13b(),
            inference: vec![
                InferenceTask { name: "ref".into(), spec: ModelSpec::llama_13b() },
                InferenceTask { name: "critic".into(), spec: ModelSpec::llama_13b() },
            ],
            num_instances: n,
            gpus_per_instance: 8,
            prompt_len: 256,
            cluster,
            cost: CostModel::default(),
        }
    }

    fn lognormal_batch(s: &GenSetup, n: usize, seed: u64) -> Vec<GenSample> {
        let d = LengthDistribution::lognormal(200.0, 10.0, 1024).unwrap();
        s.batch(&sample_lengths(&d, n, seed).unwrap())
    }

    #[test]
    fn single_sample_time() {
        let s = setup(1);
        let b = s.batch(&[37]);
        let tl = simulate_serial(&b, &s).unwrap();
        let want = s.prefill_latency(256).unwrap() + 37.0 * s.cost.decode_step_base;
        assert!((tl.gen_end - want).abs() < 1e-9);
        let work = s.inference_work(256 + 37);
        assert!((tl.total - (want + work / 8.0)).abs() < 1e-9);
    }

    #[test]
    fn batch_above_plateau_slows_linearly() {
        let mut s = setup(1);
        s.cluster.bs_max = 2;
        let b = s.batch(&[10, 10, 10, 10]);
        let tl = simulate_serial(&b, &s).unwrap();
        let want = s.prefill_latency(256).unwrap() + 10.0 * 2.0 * s.cost.decode_step_base;
        assert!((tl.gen_end - want).abs() < 1e-9);
    }

    #[test]
    fn gen_end_is_latest_instance() {
        let s = setup(3);
        let b = s.batch(&[5, 9, 2, 40, 1, 3]);
        let tl = simulate_serial(&b, &s).unwrap();
        let per_inst: Vec<f64> = (0..3)
            .map(|i| b.iter().filter(|x| x.id % 3 == i).map(|x| tl.finish[x.id]).fold(0.0, f64::max))
            .collect();
        assert_eq!(tl.gen_end, per_inst.iter().copied().fold(0.0, f64::max));
        assert!((tl.gen_end - s.prefill_latency(256).unwrap() - 40.0 * 0.03).abs() < 1e-9);
    }

    #[test]
    fn kv_pressure_queues_instead_of_failing() {
        let mut s = setup(1);
        s.cluster.kv_capacity = (256 + 20) as f64 * s.kv_per_token() * 2.0;
        let b = s.batch(&[20, 20, 20, 20]);
        let tl = simulate_serial(&b, &s).unwrap();
        let one = s.prefill_latency(256).unwrap() + 20.0 * 0.03;
        assert!((tl.gen_end - 2.0 * one).abs() < 1e-9);
    }

    #[test]
    fn zero_threshold_is_serial() {
        let s = setup(4);
        let b = lognormal_batch(&s, 128, 5);
        assert_eq!(simulate_fused(&b, &s, 0).unwrap(), simulate_serial(&b, &s).unwrap());
    }

    #[test]
    fn conservation_and_preservation() {
        let s = setup(8);
        let b = lognormal_batch(&s, 512, 11);
        let serial = simulate_serial(&b, &s).unwrap();
        for r_t in [26, 77, 128, 256, 400] {
            let tl = simulate_fused(&b, &s, r_t).unwrap();
            let finishes = tl.events.iter().filter(|e| e.kind == EventKind::Finish).count();
            assert_eq!(finishes, 512);
            assert!((tl.inference_work - serial.inference_work).abs() < 1e-9 * serial.inference_work);
            assert!(tl.gen_end <= serial.gen_end + tl.overhead() + 1e-9, "r_t={r_t}");
        }
    }

    #[test]
    fn sweep_zero_matches_serial() {
        let s = setup(4);
        let b = lognormal_batch(&s, 128, 2);
        let r = sweep_threshold(&b, &s, &[0.0, 0.1, 0.5]).unwrap();
        assert_eq!(r.curve[0].total, r.serial_total);
        assert!(sweep_threshold(&b, &s, &[]).is_err());
    }

    #[test]
    fn fluid_queue_cases() {
        assert_eq!(fluid_queue(&[(0.0, 8.0)], &[(1.0, 4.0)]), 3.0);
        assert_eq!(fluid_queue(&[(0.0, 4.0), (10.0, 4.0)], &[(0.0, 4.0)]), 11.0);
        assert_eq!(fluid_queue(&[(0.0, 4.0)], &[(0.0, 2.0), (1.0, 2.0)]), 1.5);
    }
}
