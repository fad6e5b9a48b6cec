//! Experiment protocols: compression sweeps, capacity–fidelity
//! correlation, streaming eviction, log-det oracles, τ sweeps and runtime
//! scaling.
//!
//! Independent grid cells run on the rayon pool and are collected in config
//! order, so every table is a function of its inputs, config and seed only.

mod bench;
mod correlation;
mod oracle;
mod output;
mod stream;
mod sweep;

pub use bench::{runtime_bench, BenchRow, DEFAULT_REPEATS};
pub use correlation::{
    capacity_performance_correlation, permutation_p_value, spearman, CorrelationResult, CorrelationRow, ProxyCorrelations,
    MAX_EXACT_PERMUTATION_POINTS,
};
pub use oracle::{
    exhaustive_logdet_select, greedy_logdet_select, logdet_objective, one_shot_select, random_oracle_instance, Selection,
    MAX_EXHAUSTIVE_SUBSETS,
};
pub use output::{write_csv, write_jsonl, Stamp, TableRow};
pub use stream::{streaming_simulation, EvictionEvent, StepRecord, StreamConfig, StreamTrace, TokenGenerator};
pub use sweep::{
    compression_sweep, synthetic_sweep, tau_sweep, SweepConfig, SweepInput, SweepRow, TauRow, DEFAULT_RATIOS,
    DEFAULT_TAUS, REFERENCE_POLICY,
};

/// Mixes a base seed with a path of indices (splitmix64 finalizer per
/// step), giving independent streams for replicates, layers and heads.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
