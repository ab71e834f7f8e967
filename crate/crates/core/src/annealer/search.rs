use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::incremental::{SwapEngine, Trial};
use crate::fusion::{check_valid, row_peak, FusedSchedule, FusionLayout};
use crate::scalar::Scalar;

use super::bound::lower_bound;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealParams {
    /// Temperature decay per step, in (0, 1).
    pub alpha: f64,
    /// Stopping temperature as a fraction of the initial energy.
    pub epsilon: f64,
    /// Swap attempts before a state counts as frozen.
    pub swap_retry_limit: usize,
    pub rng_seed: u64,
}

impl Default for AnnealParams {
    fn default() -> Self {
        AnnealParams { alpha: 0.98, epsilon: 1e-4, swap_retry_limit: 1000, rng_seed: 0 }
    }
}

impl AnnealParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.swap_retry_limit == 0 {
            return Err(Error::invalid("swap_retry_limit must be positive"));
        }
        Ok(())
    }

    /// Temperature steps one run performs.
    pub fn steps(&self) -> usize {
        (self.epsilon.ln() / self.alpha.ln()).ceil().max(0.0) as usize
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

/// Proposes random adjacent swaps until one passes every validity check.
fn propose<T: Scalar>(eng: &mut SwapEngine<'_, T>, rng: &mut ChaCha8Rng, attempts: &mut usize) -> bool {
    let n = eng.num_stages();
    while *attempts > 0 {
        *attempts -= 1;
        let s = rng.random_range(0..n);
        let len = eng.row_len(s);
        if len < 2 {
            continue;
        }
        let p = rng.random_range(0..len - 1);
        if eng.propose(s, p) {
            return true;
        }
    }
    false
}

/// Energy below which a neighbor is accepted: `e_cur - T ln(u)` is the
/// Metropolis rule `u < exp((e_cur - e_nb) / T)` solved for `e_nb`.
fn acceptance_threshold(e_cur: f64, t: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    e_cur - t * u.ln()
}

/// One random valid neighbor of `s`: swaps two adjacent subtasks of a random
/// stage, retrying until the result passes validation.
pub fn compute_neighbor<T: Scalar>(
    s: &FusedSchedule,
    layout: &FusionLayout<T>,
    rng: &mut impl Rng,
    retry_limit: usize,
) -> Result<FusedSchedule> {
    let n = s.rows.len();
    let mut next = s.clone();
    for _ in 0..retry_limit {
        let i = rng.random_range(0..n);
        let len = next.rows[i].len();
        if len < 2 {
            continue;
        }
        let j = rng.random_range(0..len - 1);
        next.rows[i].swap(j, j + 1);
        if check_valid(&next, layout).is_ok() {
            return Ok(next);
        }
        next.rows[i].swap(j, j + 1);
    }
    Err(Error::FrozenState(retry_limit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealOutcome<T> {
    pub schedule: FusedSchedule,
    pub energy: T,
    pub steps: usize,
    pub accepted: usize,
}

/// Simulated annealing over adjacent swaps, starting at the energy of `s0`
/// as temperature and cooling by `alpha` each step until `epsilon * T0`.
///
/// A run stops early once the best energy reaches the layout's lower bound,
/// since no later step can improve on it.
pub fn anneal<T: Scalar>(s0: &FusedSchedule, layout: &FusionLayout<T>, params: &AnnealParams) -> Result<AnnealOutcome<T>> {
    params.validate()?;
    check_valid(s0, layout)?;
    let floor = lower_bound(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut eng = SwapEngine::new(layout, s0.rows.clone()).expect("valid schedule evaluates");
    let mut e_cur = eng.makespan();
    let mut best = (eng.rows.clone(), e_cur);
    let mut t = e_cur.as_f64();
    let stop = params.epsilon * t;
    let (mut steps, mut accepted) = (0, 0);
    while t > stop && best.1 > floor {
        let mut attempts = params.swap_retry_limit;
        if !propose(&mut eng, &mut rng, &mut attempts) {
            return Err(Error::FrozenState(params.swap_retry_limit));
        }
        steps += 1;
        let theta = acceptance_threshold(e_cur.as_f64(), t, &mut rng);
        match eng.evaluate(Some(theta), false) {
            Trial::Done(e_nb) => {
                eng.commit();
                if e_nb < best.1 {
                    best = (eng.rows.clone(), e_nb);
                }
                e_cur = e_nb;
                accepted += 1;
            }
            Trial::Cutoff => eng.revert(),
        }
        t *= params.alpha;
    }
    Ok(AnnealOutcome { schedule: FusedSchedule::new(best.0), energy: best.1, steps, accepted })
}

/// Memory objective: the worst stage peak, with the sum of stage peaks as a
/// small tie-breaker so the search can move across flat regions.
struct MemoryEnergy {
    peaks: Vec<f64>,
    scale: f64,
}

impl MemoryEnergy {
    fn max(&self) -> f64 {
        self.peaks.iter().copied().fold(0.0, f64::max)
    }

    fn value(&self) -> f64 {
        self.max() + self.scale * self.peaks.iter().sum::<f64>() / self.peaks.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryOutcome<T> {
    pub schedule: FusedSchedule,
    pub makespan: T,
    pub peak: f64,
    pub steps: usize,
}

/// Second annealing pass minimizing peak activation memory. Only neighbors
/// whose makespan does not exceed that of `s_star` are visited.
pub fn optimize_memory<T: Scalar>(
    s_star: &FusedSchedule,
    layout: &FusionLayout<T>,
    params: &AnnealParams,
) -> Result<MemoryOutcome<T>> {
    optimize_memory_within(s_star, layout, params, None)
}

/// As [`optimize_memory`], visiting neighbors up to `limit` instead of the
/// makespan of `s_start`.
pub fn optimize_memory_within<T: Scalar>(
    s_start: &FusedSchedule,
    layout: &FusionLayout<T>,
    params: &AnnealParams,
    limit: Option<T>,
) -> Result<MemoryOutcome<T>> {
    params.validate()?;
    check_valid(s_start, layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed ^ 0x6d65_6d6f_7279);
    let mut eng = SwapEngine::new(layout, s_start.rows.clone()).expect("valid schedule evaluates");
    let limit = match limit {
        Some(l) if l < eng.makespan() => return Err(Error::invalid("the starting schedule exceeds the makespan limit")),
        Some(l) => l,
        None => eng.makespan(),
    };
    let mut energy = MemoryEnergy { peaks: (0..layout.n).map(|s| eng.row_peak(s)).collect(), scale: 1.0 / (layout.n as f64 + 1.0) };
    let mut e_cur = energy.value();
    let mut best = (eng.rows.clone(), e_cur, energy.max(), eng.makespan());
    let mut t = e_cur;
    let stop = params.epsilon * t;
    let mut steps = 0;
    'search: while t > stop && t > 0.0 {
        let mut attempts = params.swap_retry_limit;
        let makespan = loop {
            if !propose(&mut eng, &mut rng, &mut attempts) {
                // every admissible move is blocked: the schedule is pinned
                break 'search;
            }
            match eng.evaluate(Some(limit.as_f64()), true) {
                Trial::Done(m) if m <= limit => break m,
                _ => eng.revert(),
            }
        };
        steps += 1;
        let s = eng.pending_stage();
        let old_peak = energy.peaks[s];
        energy.peaks[s] = eng.row_peak(s);
        let e_nb = energy.value();
        if e_nb < acceptance_threshold(e_cur, t, &mut rng) {
            eng.commit();
            e_cur = e_nb;
            if e_nb < best.1 {
                best = (eng.rows.clone(), e_nb, energy.max(), makespan);
            }
        } else {
            eng.revert();
            energy.peaks[s] = old_peak;
        }
        t *= params.alpha;
    }
    Ok(MemoryOutcome { schedule: FusedSchedule::new(best.0), makespan: best.3, peak: best.2, steps })
}

/// Seed of chain `k`, decorrelated from neighboring chains.
pub fn chain_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add((k.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult<T> {
    pub chain: usize,
    pub seed: u64,
    pub energy: T,
    pub peak: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport<T> {
    pub chains: Vec<ChainResult<T>>,
    pub best_chain: usize,
    pub best_energy: T,
    pub lower_bound: T,
}

impl<T: Scalar> SearchReport<T> {
    /// Relative distance of the best energy above the lower bound.
    pub fn gap(&self) -> f64 {
        let lb = self.lower_bound.as_f64();
        (self.best_energy.as_f64() - lb) / lb
    }
}

impl<T: Scalar> std::fmt::Display for SearchReport<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.chains {
            writeln!(
                f,
                "chain {} seed {:#018x} energy {:.9} peak {:.0} steps {}",
                c.chain,
                c.seed,
                c.energy.as_f64(),
                c.peak,
                c.steps
            )?;
        }
        writeln!(f, "best chain {} energy {:.9}", self.best_chain, self.best_energy.as_f64())?;
        writeln!(f, "lower bound {:.9}", self.lower_bound.as_f64())?;
        writeln!(f, "gap {:.6}", self.gap())
    }
}

/// Independent annealing chains from the same initial schedule; the best
/// result wins, ties going to lower peak memory and then the lower seed.
pub fn multi_seed_search<T: Scalar>(
    s0: &FusedSchedule,
    layout: &FusionLayout<T>,
    params: &AnnealParams,
    num_chains: usize,
) -> Result<(FusedSchedule, SearchReport<T>)> {
    if num_chains == 0 {
        return Err(Error::invalid("need at least one chain"));
    }
    let runs: Vec<Result<(AnnealOutcome<T>, u64, f64)>> = (0..num_chains)
        .into_par_iter()
        .map(|k| {
            let seed = chain_seed(params.rng_seed, k as u64);
            let out = anneal(s0, layout, &params.with_seed(seed))?;
            let peak = out
                .schedule
                .rows
                .iter()
                .map(|r| row_peak(r, layout))
                .fold(0.0, f64::max);
            Ok((out, seed, peak))
        })
        .collect();
    let mut chains = Vec::with_capacity(num_chains);
    let mut schedules = Vec::with_capacity(num_chains);
    for (k, r) in runs.into_iter().enumerate() {
        let (out, seed, peak) = r?;
        chains.push(ChainResult { chain: k, seed, energy: out.energy, peak, steps: out.steps });
        schedules.push(out.schedule);
    }
    let best = chains
        .iter()
        .min_by(|a, b| {
            a.energy
                .partial_cmp(&b.energy)
                .expect("comparable energies")
                .then(a.peak.total_cmp(&b.peak))
                .then(a.seed.cmp(&b.seed))
        })
        .expect("at least one chain")
        .chain;
    let report = SearchReport {
        best_energy: chains[best].energy,
        best_chain: best,
        chains,
        lower_bound: lower_bound(layout),
    };
    Ok((schedules.swap_remove(best), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annealer::greedy_schedule;
    use crate::model::Direction;
    use crate::fusion::{compute_energy, peak_memory, ModelId, PipelineSpec};

    fn layout() -> FusionLayout<i64> {
        FusionLayout::new(
            PipelineSpec::uniform(4, 1, 4, 2i64, 4, 1.0),
            PipelineSpec::uniform(2, 2, 2, 1i64, 2, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn default_params_match_design() {
        let p = AnnealParams::default();
        assert_eq!((p.alpha, p.epsilon, p.swap_retry_limit), (0.98, 1e-4, 1000));
        assert_eq!(p.steps(), 456);
        assert!(AnnealParams { alpha: 1.0, ..p }.validate().is_err());
        assert!(AnnealParams { epsilon: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn single_row_pair_has_one_neighbor() {
        let l = FusionLayout::single(1, 1, vec![1i64], vec![1], vec![0.0]).unwrap();
        let a = l.id_of(ModelId::A, 0, 0, 0, Direction::Fwd);
        let b = l.id_of(ModelId::A, 0, 0, 0, Direction::Bwd);
        // forward/backward of one micro-batch cannot swap
        let s = FusedSchedule::new(vec![vec![a, b]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(compute_neighbor(&s, &l, &mut rng, 10), Err(Error::FrozenState(10))));

        let l = FusionLayout::single(1, 2, vec![1i64], vec![1], vec![0.0]).unwrap();
        let id = |mb, d| l.id_of(ModelId::A, 0, mb, 0, d);
        let s = FusedSchedule::new(vec![vec![id(0, Direction::Fwd), id(1, Direction::Fwd), id(1, Direction::Bwd), id(0, Direction::Bwd)]]);
        let nb = compute_neighbor(&s, &l, &mut rng, 100).unwrap();
        check_valid(&nb, &l).unwrap();
        assert_ne!(nb, s);
    }

    #[test]
    fn anneal_never_regresses_and_is_deterministic() {
        let l = layout();
        let g = greedy_schedule(&l).unwrap();
        let p = AnnealParams::default().with_seed(7);
        let a = anneal(&g, &l, &p).unwrap();
        let b = anneal(&g, &l, &p).unwrap();
        assert_eq!(a, b);
        check_valid(&a.schedule, &l).unwrap();
        assert_eq!(compute_energy(&a.schedule, &l).unwrap(), a.energy);
        assert!(a.energy <= compute_energy(&g, &l).unwrap());
        assert!(a.energy >= lower_bound(&l));
    }

    #[test]
    fn memory_pass_keeps_makespan() {
        let l = layout();
        let g = greedy_schedule(&l).unwrap();
        let e = compute_energy(&g, &l).unwrap();
        let before = peak_memory(&g, &l).unwrap().into_iter().fold(0.0, f64::max);
        let out = optimize_memory(&g, &l, &AnnealParams::default()).unwrap();
        check_valid(&out.schedule, &l).unwrap();
        assert!(compute_energy(&out.schedule, &l).unwrap() <= e);
        assert!(out.peak <= before);
    }

    #[test]
    fn one_chain_equals_anneal_with_chain_seed() {
        let l = layout();
        let g = greedy_schedule(&l).unwrap();
        let p = AnnealParams::default().with_seed(3);
        let (s, rep) = multi_seed_search(&g, &l, &p, 1).unwrap();
        let a = anneal(&g, &l, &p.with_seed(chain_seed(3, 0))).unwrap();
        assert_eq!(s, a.schedule);
        assert_eq!(rep.best_energy, a.energy);
        let (_, rep8) = multi_seed_search(&g, &l, &p, 8).unwrap();
        assert!(rep8.best_energy <= rep.best_energy);
        assert_eq!(rep8.chains.len(), 8);
        assert!(rep8.to_string().lines().count() >= 11);
    }

    #[test]
    fn chain_seeds_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|k| chain_seed(42, k)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
