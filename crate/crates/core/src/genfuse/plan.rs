use crate::error::Result;

use super::{GenSetup, GenState, Mechanism, MigrationPlan};

/// Fewest destinations that hold `r_t` samples within both the decoding
/// batch plateau and the KV budget.
pub fn required_destinations(r_t: usize, bs_max: u64, kv_per_sample_max: f64, kv_capacity: f64) -> usize {
    let by_batch = r_t.div_ceil(bs_max as usize);
    let by_kv = if kv_capacity.is_infinite() {
        0
    } else {
        (r_t as f64 * kv_per_sample_max / kv_capacity).ceil() as usize
    };
    by_batch.max(by_kv).max(1)
}

/// Decides where the remaining samples go once fewer than `r_t` are left.
///
/// Destinations are the `m` instances with the most remaining samples. Every
/// other sample moves, largest reservation first, to the destination with the
/// fewest samples that still has KV room. When none has room `m` grows by one;
/// needing every instance yields a no-op plan.
pub fn plan_migration(state: &GenState, r_t: usize, setup: &GenSetup) -> Result<MigrationPlan> {
    let n = state.instances.len();
    let kvpt = setup.kv_per_token();
    let reserve = |s: usize| {
        let g = &state.samples[s];
        (g.prompt_len + g.target_output_len) as f64 * kvpt
    };
    let kv_max = state.instances.iter().flat_map(|i| i.inflight.iter()).map(|&s| reserve(s)).fold(0.0, f64::max);
    let cap = setup.cluster.kv_capacity;
    let noop = |m: usize| MigrationPlan {
        trigger_time: state.time,
        r_t,
        m,
        destinations: Vec::new(),
        mechanism: Mechanism::KvTransfer,
        migrated: Vec::new(),
        assignment: Vec::new(),
        overhead: 0.0,
    };

    let mut by_count: Vec<usize> = (0..n).collect();
    by_count.sort_by_key(|&i| (std::cmp::Reverse(state.instances[i].inflight.len()), i));

    let mut m = required_destinations(r_t, setup.cluster.bs_max, kv_max, cap);
    'grow: loop {
        if m >= n {
            return Ok(noop(m));
        }
        let mut destinations = by_count[..m].to_vec();
        destinations.sort_unstable();
        let mut count: Vec<usize> = destinations.iter().map(|&d| state.instances[d].inflight.len()).collect();
        let mut used: Vec<f64> =
            destinations.iter().map(|&d| state.instances[d].inflight.iter().map(|&s| reserve(s)).sum()).collect();

        let mut migrated: Vec<usize> = by_count[m..].iter().flat_map(|&i| state.instances[i].inflight.iter().copied()).collect();
        migrated.sort_by(|&a, &b| reserve(b).total_cmp(&reserve(a)).then(a.cmp(&b)));

        let mut assignment = Vec::with_capacity(migrated.len());
        for &s in &migrated {
            let r = reserve(s);
            let Some(k) = (0..m).filter(|&k| used[k] + r <= cap).min_by_key(|&k| (count[k], k)) else {
                m += 1;
                continue 'grow;
            };
            count[k] += 1;
            used[k] += r;
            assignment.push(destinations[k]);
        }

        let transfer: f64 = migrated.iter().map(|&s| state.samples[s].kv_bytes).sum::<f64>()
            / setup.cluster.interconnect_bandwidth;
        let mut recompute_per_dest = vec![0.0; m];
        for (&s, &d) in migrated.iter().zip(&assignment) {
            let g = &state.samples[s];
            let tokens = if g.kv_bytes > 0.0 { g.prompt_len + g.generated } else { 0 };
            let k = destinations.binary_search(&d).expect("assigned to a destination");
            recompute_per_dest[k] += setup.prefill_latency(tokens)?;
        }
        let recompute = recompute_per_dest.iter().copied().fold(0.0, f64::max);
        let (mechanism, overhead) = if transfer <= recompute {
            (Mechanism::KvTransfer, transfer)
        } else {
            (Mechanism::RecomputePrefill, recompute)
        };
        return Ok(MigrationPlan {
            trigger_time: state.time,
            r_t,
            m,
            destinations,
            mechanism,
            migrated,
            assignment,
            overhead,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfuse::{GenInstance, GenSample, InferenceTask};
    use crate::model::{ClusterSpec, CostModel, ModelSpec};

    fn setup(n: usize, bw: f64) -> GenSetup {
        let mut cluster = ClusterSpec::unbounded(8 * n as u64, 8);
        cluster.interconnect_bandwidth = bw;
        GenSetup {
            actor: ModelSpec::llama_13b(),
            inference: vec![InferenceTask { name: "ref".into(), spec: ModelSpec::llama_13b() }],
            num_instances: n,
            gpus_per_instance: 8,
            prompt_len: 128,
            cluster,
            cost: CostModel::default(),
        }
    }

    fn state(counts: &[usize], setup: &GenSetup) -> GenState {
        let mut samples = Vec::new();
        let mut instances = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            let mut inflight = Vec::new();
            for _ in 0..c {
                let id = samples.len();
                samples.push(GenSample {
                    id,
                    prompt_len: setup.prompt_len,
                    target_output_len: 500,
                    generated: 100,
                    kv_bytes: (setup.prompt_len + 100) as f64 * setup.kv_per_token(),
                });
                inflight.push(id);
            }
            instances.push(GenInstance {
                id: i,
                inflight,
                bs_max: setup.cluster.bs_max,
                kv_capacity: setup.cluster.kv_capacity,
                decode_step: setup.cost.decode_step_base,
            });
        }
        GenState { time: 1.0, samples, instances }
    }

    #[test]
    fn destination_count_from_constraints() {
        assert_eq!(required_destinations(256, 128, 0.5e9, 80e9), 2);
        assert_eq!(required_destinations(10, 128, 10e9, 80e9), 2);
        assert_eq!(required_destinations(0, 128, 1.0, 1.0), 1);
        assert_eq!(required_destinations(300, 256, 1e9, f64::INFINITY), 2);
    }

    #[test]
    fn top_m_minimizes_migration() {
        let s = setup(4, 25e9);
        let st = state(&[30, 5, 4, 1], &s);
        let mut cl = s.clone();
        cl.cluster.bs_max = 20;
        let plan = plan_migration(&st, 40, &cl).unwrap();
        assert_eq!(plan.m, 2);
        assert_eq!(plan.destinations, vec![0, 1]);
        // every other 2-subset moves more samples
        let counts = [30usize, 5, 4, 1];
        let best = (0..4)
            .flat_map(|a| (a + 1..4).map(move |b| (a, b)))
            .map(|(a, b)| 40 - counts[a] - counts[b])
            .min()
            .unwrap();
        assert_eq!(plan.migrated.len(), best);
        assert!(plan.assignment.iter().all(|d| plan.destinations.contains(d)));
    }

    #[test]
    fn infinite_bandwidth_moves_cache_for_free() {
        let s = setup(4, f64::INFINITY);
        let plan = plan_migration(&state(&[3, 2, 2, 1], &s), 9, &s).unwrap();
        assert_eq!(plan.mechanism, Mechanism::KvTransfer);
        assert_eq!(plan.overhead, 0.0);
    }

    #[test]
    fn slow_link_prefers_recompute() {
        let s = setup(4, 1e3);
        let plan = plan_migration(&state(&[3, 2, 2, 1], &s), 9, &s).unwrap();
        assert_eq!(plan.mechanism, Mechanism::RecomputePrefill);
        assert!(plan.overhead > 0.0);
    }

    #[test]
    fn needing_every_instance_is_noop() {
        let mut s = setup(2, 25e9);
        s.cluster.bs_max = 2;
        let plan = plan_migration(&state(&[3, 2], &s), 6, &s).unwrap();
        assert!(plan.is_noop());
        assert!(plan.migrated.is_empty());
    }

    #[test]
    fn kv_room_grows_destinations() {
        let mut s = setup(4, 25e9);
        let per = 628.0 * s.kv_per_token();
        s.cluster.kv_capacity = per * 4.5;
        let plan = plan_migration(&state(&[4, 2, 1, 1], &s), 9, &s).unwrap();
        assert_eq!(plan.m, 2);
        assert_eq!(plan.destinations, vec![0, 1]);
        s.cluster.kv_capacity = per * 4.0;
        let plan = plan_migration(&state(&[4, 2, 1, 1], &s), 9, &s).unwrap();
        assert!(plan.m >= 3);
    }
}
