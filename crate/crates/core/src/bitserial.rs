//! Bit-serial dot product with exact early termination.
//!
//! The query stays at full precision while the key is consumed `B` magnitude
//! bits per cycle, MSB first, after one sign cycle. The engine keeps a partial
//! sum `P` and a conservative margin `M` that bounds what the unprocessed
//! planes can still add; once `P + M` drops below the threshold the score is
//! pruned. All arithmetic is integer, in units of `2^-(q_frac + k_frac)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::fxp::{
    exact_fxp_dot, to_bit_planes, BitPlaneMatrix, ExactDot, FixedPointValue, QuantSpec,
};

/// Bit-serial engine geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerialConfig {
    /// Key bits consumed per cycle (`B`).
    pub bits_per_cycle: u32,
    /// Key spec: one sign bit plus `magnitude_bits` serial planes.
    pub k_spec: QuantSpec,
    /// Query spec; the query is never serialized.
    pub q_spec: QuantSpec,
}

impl SerialConfig {
    pub fn new(bits_per_cycle: u32, q_spec: QuantSpec, k_spec: QuantSpec) -> Result<Self> {
        let cfg = Self {
            bits_per_cycle,
            k_spec,
            q_spec,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.q_spec.validate()?;
        self.k_spec.validate()?;
        if self.bits_per_cycle == 0 {
            return Err(Error::Config("bits_per_cycle must be at least 1".into()));
        }
        Ok(())
    }

    pub fn magnitude_bits(&self) -> u32 {
        self.k_spec.magnitude_bits()
    }

    /// `B` covers the whole key word (sign included): no serial processing,
    /// one cycle per score.
    pub fn is_full_word(&self) -> bool {
        self.bits_per_cycle >= self.k_spec.total_bits
    }

    /// Magnitude cycles (zero-padded at the LSB end when `B` does not divide).
    pub fn magnitude_cycles(&self) -> u32 {
        self.magnitude_bits().div_ceil(self.bits_per_cycle)
    }

    /// Cycles for a score that runs to completion.
    pub fn full_cycles(&self) -> u32 {
        if self.is_full_word() {
            1
        } else {
            1 + self.magnitude_cycles()
        }
    }

    /// Real value of one unit of the integer score domain.
    pub fn score_unit(&self) -> f64 {
        (-((self.q_spec.frac_bits + self.k_spec.frac_bits) as f64)).exp2()
    }

    pub fn score_frac_bits(&self) -> u32 {
        self.q_spec.frac_bits + self.k_spec.frac_bits
    }
}

/// Threshold expressed in the integer score domain: a score is kept iff `code >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CodeThreshold(pub i128);

impl CodeThreshold {
    /// Keeps everything.
    pub const NEG_INF: Self = Self(i128::MIN);
    /// Prunes everything.
    pub const POS_INF: Self = Self(i128::MAX);

    /// Converts a real threshold given in units where one score code is `unit`.
    ///
    /// Scores are integers, so `code < th / unit` is the same test as
    /// `code < ceil(th / unit)`.
    pub fn from_real(th: f64, unit: f64) -> Self {
        if th.is_nan() {
            return Self::NEG_INF;
        }
        let scaled = (th / unit).ceil();
        if scaled <= i128::MIN as f64 {
            Self::NEG_INF
        } else if scaled >= i128::MAX as f64 {
            Self::POS_INF
        } else {
            Self(scaled as i128)
        }
    }

    pub fn prunes(&self, value: i128) -> bool {
        value < self.0
    }
}

/// Register state of one QK-DPU while it works on a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarginState {
    /// Partial sum `P`.
    pub partial: i128,
    /// Conservative margin `M`.
    pub margin: i128,
    /// Concordant-sign sum `S`.
    pub concordant_sum: i128,
    /// Next plane to process, 1-based.
    pub plane_index: usize,
    pub terminated: bool,
    pub cycles_used: u32,
    frac_bits: u32,
    plane_count: usize,
}

impl MarginState {
    pub fn partial_value(&self) -> f64 {
        self.partial as f64 * (-(self.frac_bits as f64)).exp2()
    }

    pub fn margin_value(&self) -> f64 {
        self.margin as f64 * (-(self.frac_bits as f64)).exp2()
    }

    /// Upper bound on the final score.
    pub fn bound(&self) -> i128 {
        self.partial + self.margin
    }

    pub fn is_finished(&self) -> bool {
        self.plane_index > self.plane_count
    }

    /// Magnitude planes already consumed.
    pub fn planes_done(&self) -> usize {
        self.plane_index - 1
    }
}

/// Sum of plane weights `index..=plane_count`, in key LSB units.
fn remaining_weight(plane_count: usize, index: usize) -> i128 {
    if index > plane_count {
        0
    } else {
        (1i128 << (plane_count - index + 1)) - 1
    }
}

/// Sign cycle: accumulates `|q_i|` over sign-concordant pairs and loads the margin.
pub fn init_margin(
    q: &[FixedPointValue],
    keys: &BitPlaneMatrix,
    th: CodeThreshold,
) -> Result<MarginState> {
    dim_check(q.len() == keys.len(), || {
        format!("q has {} elements, k has {}", q.len(), keys.len())
    })?;
    let q_frac = q.first().map(|v| v.spec().frac_bits).unwrap_or(0);
    let concordant_sum: i128 = q
        .iter()
        .zip(keys.signs())
        .filter(|(qi, &ks)| qi.sign().concordant(ks))
        .map(|(qi, _)| qi.magnitude() as i128)
        .sum();
    let plane_count = keys.plane_count();
    let margin = concordant_sum * remaining_weight(plane_count, 1);
    let mut state = MarginState {
        partial: 0,
        margin,
        concordant_sum,
        plane_index: 1,
        terminated: false,
        cycles_used: 1,
        frac_bits: q_frac + keys.spec().frac_bits,
        plane_count,
    };
    state.terminated = th.prunes(state.bound());
    Ok(state)
}

/// `sum_i sign(q_i k_i) |q_i| bit_ij` for plane `index`.
pub fn plane_signed_dot(q: &[FixedPointValue], keys: &BitPlaneMatrix, index: usize) -> i128 {
    q.iter()
        .zip(keys.signs())
        .zip(keys.plane(index))
        .filter(|(_, &bit)| bit)
        .map(|((qi, &ks), _)| {
            let m = qi.magnitude() as i128;
            if qi.sign().concordant(ks) {
                m
            } else {
                -m
            }
        })
        .sum()
}

/// One magnitude cycle: consumes up to `B` planes, then compares `P + M` with the threshold.
pub fn step(
    state: &MarginState,
    q: &[FixedPointValue],
    keys: &BitPlaneMatrix,
    cfg: &SerialConfig,
    th: CodeThreshold,
) -> Result<MarginState> {
    if state.terminated {
        return Err(Error::Usage(
            "step called on a terminated dot product".into(),
        ));
    }
    if state.is_finished() {
        return Err(Error::Usage("step called after the last bit plane".into()));
    }
    dim_check(q.len() == keys.len(), || {
        format!("q has {} elements, k has {}", q.len(), keys.len())
    })?;
    let mut next = *state;
    let last = (state.plane_index + cfg.bits_per_cycle as usize - 1).min(state.plane_count);
    for j in state.plane_index..=last {
        next.partial += keys.plane_weight_code(j) as i128 * plane_signed_dot(q, keys, j);
    }
    next.plane_index = last + 1;
    next.margin = state.concordant_sum * remaining_weight(state.plane_count, next.plane_index);
    next.cycles_used += 1;
    next.terminated = th.prunes(next.bound());
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DotOutcome {
    Pruned {
        terminated_after_cycle: u32,
        /// Key bits consumed, sign included.
        bits_processed: u32,
    },
    Completed {
        score: ExactDot,
        cycles: u32,
    },
}

impl DotOutcome {
    pub fn cycles(&self) -> u32 {
        match *self {
            DotOutcome::Pruned {
                terminated_after_cycle,
                ..
            } => terminated_after_cycle,
            DotOutcome::Completed { cycles, .. } => cycles,
        }
    }

    pub fn is_pruned(&self) -> bool {
        matches!(self, DotOutcome::Pruned { .. })
    }

    pub fn score(&self) -> Option<ExactDot> {
        match *self {
            DotOutcome::Completed { score, .. } => Some(score),
            DotOutcome::Pruned { .. } => None,
        }
    }
}

fn bits_after(state: &MarginState, keys: &BitPlaneMatrix) -> u32 {
    1 + state.planes_done().min(keys.plane_count()) as u32
}

fn check_specs(q: &[FixedPointValue], keys: &BitPlaneMatrix, cfg: &SerialConfig) -> Result<()> {
    if keys.spec() != cfg.k_spec {
        return Err(Error::Config(
            "key spec differs from the engine configuration".into(),
        ));
    }
    if q.iter().any(|v| v.spec() != cfg.q_spec) {
        return Err(Error::Config(
            "query spec differs from the engine configuration".into(),
        ));
    }
    Ok(())
}

/// Runs one score to termination or completion.
pub fn run_dot(
    q: &[FixedPointValue],
    k: &[FixedPointValue],
    th: CodeThreshold,
    cfg: &SerialConfig,
) -> Result<DotOutcome> {
    let keys = to_bit_planes(k)?;
    run_dot_planes(q, &keys, th, cfg)
}

/// [`run_dot`] on a key already laid out in bit planes.
pub fn run_dot_planes(
    q: &[FixedPointValue],
    keys: &BitPlaneMatrix,
    th: CodeThreshold,
    cfg: &SerialConfig,
) -> Result<DotOutcome> {
    trace_dot(q, keys, th, cfg, |_| ())
}

/// Like [`run_dot`], also returning the register state after every cycle.
pub fn run_dot_traced(
    q: &[FixedPointValue],
    k: &[FixedPointValue],
    th: CodeThreshold,
    cfg: &SerialConfig,
) -> Result<(DotOutcome, Vec<MarginState>)> {
    let keys = to_bit_planes(k)?;
    let mut states = Vec::new();
    let outcome = trace_dot(q, &keys, th, cfg, |s| states.push(*s))?;
    Ok((outcome, states))
}

fn trace_dot(
    q: &[FixedPointValue],
    keys: &BitPlaneMatrix,
    th: CodeThreshold,
    cfg: &SerialConfig,
    mut observe: impl FnMut(&MarginState),
) -> Result<DotOutcome> {
    check_specs(q, keys, cfg)?;
    if cfg.is_full_word() {
        let k = keys.reconstruct();
        let score = exact_fxp_dot(q, &k)?;
        return Ok(if th.prunes(score.code) {
            DotOutcome::Pruned {
                terminated_after_cycle: 1,
                bits_processed: cfg.k_spec.total_bits,
            }
        } else {
            DotOutcome::Completed { score, cycles: 1 }
        });
    }
    let mut state = init_margin(q, keys, th)?;
    observe(&state);
    loop {
        if state.terminated {
            return Ok(DotOutcome::Pruned {
                terminated_after_cycle: state.cycles_used,
                bits_processed: bits_after(&state, keys),
            });
        }
        if state.is_finished() {
            return Ok(DotOutcome::Completed {
                score: ExactDot {
                    code: state.partial,
                    frac_bits: state.frac_bits,
                },
                cycles: state.cycles_used,
            });
        }
        state = step(&state, q, keys, cfg, th)?;
        observe(&state);
    }
}

/// Behavioral model of the QK-DPU index counter: the IDX counter advances
/// once per finished score and its value is pushed whenever the score
/// survived.
#[derive(Debug, Default, Clone)]
pub struct IndexCounter {
    idx: usize,
}

impl IndexCounter {
    pub fn finish(&mut self, outcome: &DotOutcome) -> Option<(usize, ExactDot)> {
        let idx = self.idx;
        self.idx += 1;
        outcome.score().map(|s| (idx, s))
    }
}

/// Surviving `(column index, score)` pairs of an in-order outcome stream.
pub fn score_index_tracking<'a>(
    outcomes: impl IntoIterator<Item = &'a DotOutcome>,
) -> Vec<(usize, ExactDot)> {
    let mut counter = IndexCounter::default();
    outcomes
        .into_iter()
        .filter_map(|o| counter.finish(o))
        .collect()
}
