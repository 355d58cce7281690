//! Small random workloads for simulator properties.

use leopard_core::simulator::{synthetic_trace, ScoreDistribution, SyntheticSpec, WorkloadTrace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_spec(seed: u64) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq_len = rng.random_range(2..24);
    SyntheticSpec {
        layers: rng.random_range(1..3),
        heads: rng.random_range(1..3),
        seq_len,
        valid_len: if rng.random_bool(0.3) { Some(rng.random_range(1..=seq_len)) } else { None },
        d: rng.random_range(2..16),
        d_v: rng.random_range(1..6),
        q_bits: 12,
        k_bits: 12,
        v_bits: 16,
        target_pruning: rng.random_range(0.0..1.0),
        distribution: if rng.random_bool(0.5) {
            ScoreDistribution::Gaussian
        } else {
            ScoreDistribution::Clustered { signal: rng.random_range(0.0..3.0) }
        },
        scaled_scores: rng.random_bool(0.5),
        seed,
    }
}

/// A random trace; seeds whose target is blocked by ties are skipped.
pub fn random_trace(seed: u64) -> WorkloadTrace {
    (0..)
        .find_map(|k| synthetic_trace(&random_spec(seed.wrapping_mul(1_000).wrapping_add(k))).ok())
        .unwrap()
}
