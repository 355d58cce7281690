//! Independent integer oracles for the fixed-point engine.
//!
//! Scores are recomputed with arbitrary-precision integers straight from the
//! signed codes, never through the engine's own planes or accumulators.

use leopard_core::bitserial::{run_dot, run_dot_traced, CodeThreshold, DotOutcome, SerialConfig};
use leopard_core::fxp::{FixedPointValue, QuantSpec};
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn big_dot(q: &[i64], k: &[i64]) -> BigInt {
    q.iter().zip(k).map(|(&a, &b)| BigInt::from(a) * BigInt::from(b)).sum()
}

pub fn fixed(codes: &[i64], spec: QuantSpec) -> Vec<FixedPointValue> {
    codes
        .iter()
        .map(|&c| FixedPointValue::from_signed(c, spec).unwrap())
        .collect()
}

/// Codes with a mix of small, large and zero magnitudes.
pub fn random_codes(rng: &mut ChaCha8Rng, d: usize, spec: QuantSpec) -> Vec<i64> {
    let max = spec.max_magnitude() as i64;
    let shape = rng.random_range(0..3);
    (0..d)
        .map(|_| match shape {
            0 => rng.random_range(-max..=max),
            1 => rng.random_range(-max / 16..=max / 16),
            _ => {
                if rng.random_bool(0.3) {
                    0
                } else {
                    rng.random_range(-max..=max)
                }
            }
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SoundnessReport {
    pub instances: usize,
    pub pruned: usize,
    pub false_prunes: usize,
    pub missed_prunes: usize,
    pub score_mismatches: usize,
    pub cycle_violations: usize,
}

impl SoundnessReport {
    pub fn clean(&self) -> bool {
        self.false_prunes == 0 && self.missed_prunes == 0 && self.score_mismatches == 0 && self.cycle_violations == 0
    }

    fn record(&mut self, outcome: DotOutcome, exact: &BigInt, th: CodeThreshold, cfg: &SerialConfig) {
        self.instances += 1;
        if outcome.cycles() > cfg.full_cycles() {
            self.cycle_violations += 1;
        }
        match outcome {
            DotOutcome::Pruned { .. } => {
                self.pruned += 1;
                if *exact >= BigInt::from(th.0) {
                    self.false_prunes += 1;
                }
            }
            DotOutcome::Completed { score, .. } => {
                if BigInt::from(score.code) != *exact {
                    self.score_mismatches += 1;
                }
                // A completed score below the threshold would have been caught
                // at the last plane, where the margin is zero.
                if *exact < BigInt::from(th.0) {
                    self.missed_prunes += 1;
                }
            }
        }
    }
}

fn twelve_bit() -> QuantSpec {
    QuantSpec::unit(12).unwrap()
}

/// `instances` random `(q, k, th)` triples at `d = 64`, 12-bit, each run at
/// every `B` in `bits`.
pub fn soundness_suite(instances: usize, bits: &[u32], seed: u64) -> SoundnessReport {
    let spec = twelve_bit();
    let cfgs: Vec<SerialConfig> = bits.iter().map(|&b| SerialConfig::new(b, spec, spec).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SoundnessReport::default();
    for _ in 0..instances {
        let qc = random_codes(&mut rng, 64, spec);
        let kc = random_codes(&mut rng, 64, spec);
        let exact = big_dot(&qc, &kc);
        let e: i128 = exact.clone().try_into().unwrap();
        // Thresholds spread around the score so both outcomes are common.
        let spread = 1i128 << rng.random_range(0..22);
        let th = CodeThreshold(e + rng.random_range(-spread..=spread));
        let (q, k) = (fixed(&qc, spec), fixed(&kc, spec));
        for cfg in &cfgs {
            report.record(run_dot(&q, &k, th, cfg).unwrap(), &exact, th, cfg);
        }
    }
    report
}

/// Thresholds within one score LSB of the exact score.
pub fn adversarial_suite(instances: usize, bits: &[u32], seed: u64) -> SoundnessReport {
    let spec = twelve_bit();
    let cfgs: Vec<SerialConfig> = bits.iter().map(|&b| SerialConfig::new(b, spec, spec).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SoundnessReport::default();
    for i in 0..instances {
        let qc = random_codes(&mut rng, 64, spec);
        let kc = random_codes(&mut rng, 64, spec);
        let exact = big_dot(&qc, &kc);
        let e: i128 = exact.clone().try_into().unwrap();
        let th = CodeThreshold(e + (i % 3) as i128 - 1);
        let (q, k) = (fixed(&qc, spec), fixed(&kc, spec));
        for cfg in &cfgs {
            report.record(run_dot(&q, &k, th, cfg).unwrap(), &exact, th, cfg);
        }
    }
    report
}

/// Per-step register invariants of one run, as a list of violations.
pub fn step_invariant_violations(qc: &[i64], kc: &[i64], th: CodeThreshold, cfg: &SerialConfig) -> Vec<String> {
    let (q, k) = (fixed(qc, cfg.q_spec), fixed(kc, cfg.k_spec));
    let exact: i128 = big_dot(qc, kc).try_into().unwrap();
    let s: i128 = qc
        .iter()
        .zip(kc)
        .filter(|(&a, &b)| (a >= 0) == (b >= 0))
        .map(|(&a, _)| a.abs() as i128)
        .sum();
    let planes = cfg.k_spec.magnitude_bits() as usize;
    let (_, states) = run_dot_traced(&q, &k, th, cfg).unwrap();
    let mut out = Vec::new();
    let mut prev_bound = i128::MAX;
    for st in &states {
        let done = st.planes_done().min(planes);
        let remaining = (1i128 << (planes - done)) - 1;
        if st.margin != s * remaining {
            out.push(format!("margin {} != S*{remaining} after {done} planes", st.margin));
        }
        if st.margin < 0 {
            out.push("negative margin".into());
        }
        if st.bound() < exact {
            out.push(format!("bound {} below exact {exact}", st.bound()));
        }
        if st.bound() > prev_bound {
            out.push("bound increased".into());
        }
        prev_bound = st.bound();
    }
    if let Some(last) = states.last() {
        if last.is_finished() && last.margin != 0 {
            out.push("non-zero margin after the last plane".into());
        }
    }
    out
}
