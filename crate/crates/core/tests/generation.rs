use fuseplan::genfuse::{sample_lengths, simulate_serial, GenSetup, InferenceTask, LengthDistribution};
use fuseplan::{ClusterSpec, CostModel, ModelSpec};

fn setup() -> GenSetup {
    let mut cluster = ClusterSpec::unbounded(64, 8);
    cluster.kv_capacity = 80e9;
    cluster.bs_max = 256;
    GenSetup {
        actor: ModelSpec::llama_13b(),
        inference: vec![InferenceTask { name: "critic".into(), spec: ModelSpec::llama_33b() }],
        num_instances: 8,
        gpus_per_instance: 8,
        prompt_len: 1024,
        cluster,
        cost: CostModel::default(),
    }
}

#[test]
fn long_tail_dominates_generation_time() {
    let s = setup();
    let d = LengthDistribution::lognormal(200.0, 10.0, 2048).unwrap();
    for seed in 0..3 {
        let tl = simulate_serial(&s.batch(&sample_lengths(&d, 512, seed).unwrap()), &s).unwrap();
        let mut finish = tl.finish.clone();
        finish.sort_by(f64::total_cmp);
        let t90 = finish[(0.9 * finish.len() as f64).ceil() as usize - 1];
        let tail = (tl.gen_end - t90) / tl.gen_end;
        assert!(tail > 0.5, "seed {seed}: tail share {tail:.3}");
    }
}
