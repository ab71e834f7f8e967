use fuseplan::annealer::{anneal, compute_neighbor, greedy_schedule, lower_bound, optimize_memory, AnnealParams};
use fuseplan::fusion::{check_valid, compute_energy, peak_memory, FusionLayout, PipelineSpec};
use fuseplan::genfuse::{
    sample_lengths, simulate_fused, simulate_serial, EventKind, GenSetup, InferenceTask, LengthDistribution,
};
use fuseplan::numerics::{gae_matrix, gae_recursive, GaeInputs};
use fuseplan::workflow::balance_minibatch;
use fuseplan::{ClusterSpec, CostModel, ModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout_from_seed(seed: u64) -> FusionLayout<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (N1, K1, N2, K2) with K1, K2 coprime and N1*K1 = N2*K2
    let shapes = [(2, 1, 2, 1), (4, 1, 2, 2), (3, 1, 3, 1), (6, 1, 3, 2), (4, 1, 4, 1), (2, 2, 4, 1)];
    let (n1, k1, n2, k2) = shapes[rng.random_range(0..shapes.len())];
    let t = k1 * k2 * rng.random_range(1..=3);
    let mut pipe = |stages: usize, groups: usize, mb: usize| PipelineSpec {
        stages,
        groups,
        microbatches: mb,
        fwd: (0..stages).map(|_| rng.random_range(1..=5)).collect(),
        bwd: (0..stages).map(|_| rng.random_range(1..=9)).collect(),
        activation: (0..stages).map(|_| rng.random_range(1..=3) as f64).collect(),
    };
    let a = pipe(n1, k1, t / k1);
    let b = pipe(n2, k2, t / k2);
    FusionLayout::new(a, b).unwrap().with_comm(rng.random_range(0..=2))
}

fn gen_setup(kv_capacity: f64) -> GenSetup {
    let mut cluster = ClusterSpec::unbounded(32, 8);
    cluster.kv_capacity = kv_capacity;
    cluster.bs_max = 16;
    GenSetup {
        actor: ModelSpec::llama_13b(),
        inference: vec![InferenceTask { name: "critic".into(), spec: ModelSpec::llama_13b() }],
        num_instances: 4,
        gpus_per_instance: 8,
        prompt_len: 128,
        cluster,
        cost: CostModel::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_walks_stay_valid_and_above_the_bound(seed in any::<u64>(), steps in 1usize..200) {
        let l = layout_from_seed(seed);
        let lb = lower_bound(&l);
        let mut s = greedy_schedule(&l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..steps {
            s = compute_neighbor(&s, &l, &mut rng, 1000).unwrap();
            prop_assert!(check_valid(&s, &l).is_ok());
            prop_assert!(compute_energy(&s, &l).unwrap() >= lb);
        }
    }

    #[test]
    fn anneal_and_memory_pass_never_regress(seed in any::<u64>()) {
        let l = layout_from_seed(seed);
        let g = greedy_schedule(&l).unwrap();
        let p = AnnealParams::default().with_seed(seed);
        let a = anneal(&g, &l, &p).unwrap();
        prop_assert!(check_valid(&a.schedule, &l).is_ok());
        prop_assert!(a.energy <= compute_energy(&g, &l).unwrap());
        prop_assert_eq!(a.energy, compute_energy(&a.schedule, &l).unwrap());
        let m = optimize_memory(&a.schedule, &l, &p).unwrap();
        prop_assert!(check_valid(&m.schedule, &l).is_ok());
        prop_assert!(m.makespan <= a.energy);
        let before = peak_memory(&a.schedule, &l).unwrap().into_iter().fold(0.0, f64::max);
        prop_assert!(m.peak <= before);
    }

    #[test]
    fn generation_conserves_samples_and_work(seed in any::<u64>(), n in 1usize..96, ratio in 0.0f64..1.0) {
        let setup = gen_setup(8e9);
        let d = LengthDistribution::lognormal(50.0, 10.0, 256).unwrap();
        let batch = setup.batch(&sample_lengths(&d, n, seed).unwrap());
        let serial = simulate_serial(&batch, &setup).unwrap();
        let r_t = (ratio * n as f64).round() as usize;
        let tl = simulate_fused(&batch, &setup, r_t).unwrap();
        let finishes = tl.events.iter().filter(|e| e.kind == EventKind::Finish).count();
        prop_assert_eq!(finishes, n);
        prop_assert!((tl.inference_work - serial.inference_work).abs() <= 1e-9 * serial.inference_work);
        prop_assert!(tl.gen_end <= serial.gen_end + tl.overhead() + 1e-9 * serial.gen_end);
        prop_assert!(tl.finish.iter().all(|&f| f <= tl.gen_end));
        prop_assert!(tl.total >= tl.gen_end);
    }

    #[test]
    fn lpt_balance_is_a_partition_within_graham_bound(
        lengths in prop::collection::vec(1u32..4096, 1..200),
        dp in 1usize..9,
    ) {
        let parts = balance_minibatch(&lengths, dp);
        prop_assert_eq!(parts.len(), dp);
        let mut seen: Vec<usize> = parts.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        let total: u64 = lengths.iter().map(|&l| l as u64).sum();
        let longest = *lengths.iter().max().unwrap() as f64;
        let worst = parts.iter().map(|p| p.iter().map(|&i| lengths[i] as u64).sum::<u64>()).max().unwrap() as f64;
        prop_assert!(worst <= total as f64 / dp as f64 + longest);
    }

    #[test]
    fn gae_forms_agree(
        rewards in prop::collection::vec(-5.0f64..5.0, 1..300),
        bootstrap in prop::collection::vec(-5.0f64..5.0, 301),
        gamma in 0.0f64..=1.0,
        lam in 0.0f64..=1.0,
    ) {
        let values = bootstrap[..=rewards.len()].to_vec();
        let g = GaeInputs::new(rewards, values, gamma, lam).unwrap();
        let a = gae_recursive(&g).unwrap();
        let b = gae_matrix(&g).unwrap();
        let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
        if gamma * lam == 0.0 {
            for (x, d) in a.iter().zip(g.residuals()) {
                prop_assert!((x - d).abs() <= 1e-12 * scale);
            }
        }
    }
}
