use crate::fusion::FusionLayout;
use crate::scalar::Scalar;

/// Makespan lower bound. For every stage: the earliest time any hosted chunk
/// can receive work, plus all hosted work, plus the shortest backward chain
/// that must still run upstream after the stage finishes. The same bound is
/// also taken per hosted chunk, which captures the critical path of a deep
/// pipeline on its own.
pub fn lower_bound<T: Scalar>(layout: &FusionLayout<T>) -> T {
    let mut lb = T::zero();
    for s in 0..layout.n {
        let mut arrival: Option<T> = None;
        let mut suffix: Option<T> = None;
        let mut work = T::zero();
        for c in &layout.placement[s] {
            let p = layout.pipeline(c.model);
            if p.microbatches == 0 {
                continue;
            }
            let mut a = T::zero();
            let mut z = T::zero();
            for l in 0..c.logical {
                a = a + p.fwd[l] + layout.comm;
                z = z + p.bwd[l] + layout.comm;
            }
            let mut w = T::zero();
            for _ in 0..p.microbatches {
                w = w + p.fwd[c.logical] + p.bwd[c.logical];
            }
            lb = lb.max_of(a + w + z);
            work = work + w;
            arrival = Some(arrival.map_or(a, |x| x.min_of(a)));
            suffix = Some(suffix.map_or(z, |x| x.min_of(z)));
        }
        if let (Some(a), Some(z)) = (arrival, suffix) {
            lb = lb.max_of(a + work + z);
        }
    }
    lb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::PipelineSpec;

    #[test]
    fn uniform_single_model() {
        let l = FusionLayout::single(4, 4, vec![1i64; 4], vec![1; 4], vec![0.0; 4]).unwrap();
        assert_eq!(lower_bound(&l), 14);
    }

    #[test]
    fn single_stage_is_total_work() {
        let l = FusionLayout::new(
            PipelineSpec { stages: 1, groups: 1, microbatches: 2, fwd: vec![2i64], bwd: vec![3], activation: vec![1.0] },
            PipelineSpec { stages: 1, groups: 1, microbatches: 2, fwd: vec![1i64], bwd: vec![1], activation: vec![1.0] },
        )
        .unwrap();
        assert_eq!(lower_bound(&l), l.total_work());
    }
}
