//! Search for fused schedules: greedy construction, simulated annealing over
//! adjacent swaps, a memory-reducing second pass, bounds and an exhaustive
//! oracle for tiny layouts.

mod bound;
mod greedy;
mod oracle;
mod search;

pub use bound::lower_bound;
pub use greedy::{greedy_schedule, serial_1f1b_makespan, serial_1f1b_peak, serial_1f1b_schedule};
pub use oracle::{count_valid_schedules, exhaustive_oracle, OracleResult, ORACLE_LIMIT};
pub use search::{
    anneal, chain_seed, compute_neighbor, multi_seed_search, optimize_memory, optimize_memory_within, AnnealOutcome,
    AnnealParams, ChainResult, MemoryOutcome, SearchReport,
};
