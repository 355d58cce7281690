//! Deterministic synthetic workloads with a prescribed pruning rate.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::trace::{HeadTrace, LayerTrace, TraceMetadata, WorkloadTrace};
use crate::error::{Error, Result};
use crate::fxp::QuantSpec;

/// How query and key vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreDistribution {
    /// Independent standard normal entries.
    Gaussian,
    /// Queries and keys share one direction per head; each key's loading on
    /// it is `N(0, signal)`. A few keys stand out and most scores sit far
    /// below the threshold, so larger `signal` means earlier termination.
    Clustered { signal: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    /// Tokens that are not padding; defaults to `seq_len`.
    pub valid_len: Option<usize>,
    pub d: usize,
    pub d_v: usize,
    pub q_bits: u32,
    pub k_bits: u32,
    pub v_bits: u32,
    pub target_pruning: f64,
    pub distribution: ScoreDistribution,
    pub scaled_scores: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            layers: 1,
            heads: 1,
            seq_len: 64,
            valid_len: None,
            d: 64,
            d_v: 64,
            q_bits: 12,
            k_bits: 12,
            v_bits: 16,
            target_pruning: 0.5,
            distribution: ScoreDistribution::Gaussian,
            scaled_scores: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Memory-network-like geometry: 50 tokens, 20-dimensional heads, most
    /// scores pruned after a couple of key bits.
    pub fn memn2n() -> Self {
        Self {
            seq_len: 50,
            d: 20,
            d_v: 20,
            target_pruning: 0.917,
            distribution: ScoreDistribution::Clustered { signal: 0.1 },
            ..Self::default()
        }
    }

    /// Long sequences with few pruned scores; keeps the back end busy.
    pub fn low_pruning() -> Self {
        Self {
            seq_len: 128,
            target_pruning: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("d", self.d),
            ("d_v", self.d_v),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        let valid = self.valid_len.unwrap_or(self.seq_len);
        if valid == 0 || valid > self.seq_len {
            return Err(Error::Parameter(format!(
                "valid_len {valid} must be in 1..={}",
                self.seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.target_pruning) {
            return Err(Error::Parameter(format!(
                "target pruning rate {} outside [0, 1]",
                self.target_pruning
            )));
        }
        if let ScoreDistribution::Clustered { signal } = self.distribution {
            if signal < 0.0 || !signal.is_finite() {
                return Err(Error::Parameter(format!("signal {signal} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn quantize_matrix(x: &Array2<f64>, spec: QuantSpec) -> (Array2<i32>, f64) {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max } else { 1.0 };
    let top = spec.max_magnitude() as f64;
    let codes = x.mapv(|v| ((v / scale / spec.lsb()).round()).clamp(-top, top) as i32);
    (codes, scale)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn make_head(spec: &SyntheticSpec, q_spec: QuantSpec, k_spec: QuantSpec, v_spec: QuantSpec, rng: &mut ChaCha8Rng) -> HeadTrace {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (s, d) = (spec.seq_len, spec.d);
    let mut q = gaussian(s, d, rng, &normal);
    let mut k = gaussian(s, d, rng, &normal);
    if let ScoreDistribution::Clustered { signal } = spec.distribution {
        let u: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for i in 0..s {
            let a = signal * normal.sample(rng);
            for c in 0..d {
                q[[i, c]] += u[c];
                k[[i, c]] += a * u[c];
            }
        }
    }
    let v = gaussian(s, spec.d_v, rng, &normal);
    let (q, q_scale) = quantize_matrix(&q, q_spec);
    let (k, k_scale) = quantize_matrix(&k, k_spec);
    let (v, v_scale) = quantize_matrix(&v, v_spec);
    HeadTrace {
        valid_len: spec.valid_len.unwrap_or(s),
        q,
        k,
        v,
        q_scale,
        k_scale,
        v_scale,
    }
}

/// Real-valued scores of the valid tokens, in the threshold domain.
fn valid_scores(trace: &WorkloadTrace, h: &HeadTrace) -> Vec<f64> {
    let n = h.valid_len;
    let unit = trace.score_unit(h);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let code: i64 = h
                .q
                .row(i)
                .iter()
                .zip(h.k.row(j))
                .map(|(&a, &b)| a as i64 * b as i64)
                .sum();
            out.push(code as f64 * unit);
        }
    }
    out
}

/// Fraction of valid scores strictly below their layer threshold.
pub fn ideal_pruning_rate(trace: &WorkloadTrace) -> f64 {
    let (mut pruned, mut total) = (0usize, 0usize);
    for l in &trace.layers {
        for h in &l.heads {
            let scores = valid_scores(trace, h);
            pruned += scores.iter().filter(|&&x| x < l.threshold).count();
            total += scores.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        pruned as f64 / total as f64
    }
}

/// Threshold that prunes a fraction of `scores` as close to `target` as the
/// ties allow, within one percentage point.
fn quantile_threshold(mut scores: Vec<f64>, target: f64) -> Result<f64> {
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let lo = scores[0];
    let hi = scores[n - 1];
    let pad = (hi - lo).abs().max(1.0);
    let wanted = (target * n as f64).round() as usize;
    let mut candidates: Vec<usize> = (0..=n).collect();
    candidates.sort_by_key(|&m| m.abs_diff(wanted));
    for m in candidates {
        if (m as f64 / n as f64 - target).abs() > 0.01 {
            break;
        }
        if m == 0 {
            return Ok(lo - pad);
        }
        if m == n {
            return Ok(hi + pad);
        }
        if scores[m - 1] < scores[m] {
            return Ok(0.5 * (scores[m - 1] + scores[m]));
        }
    }
    Err(Error::Parameter(format!(
        "pruning rate {target} is not reachable: too many tied scores"
    )))
}

/// Generates a trace whose per-layer thresholds prune `target_pruning` of
/// the valid scores.
pub fn synthetic_trace(spec: &SyntheticSpec) -> Result<WorkloadTrace> {
    spec.validate()?;
    let q_spec = QuantSpec::unit(spec.q_bits)?;
    let k_spec = QuantSpec::unit(spec.k_bits)?;
    let v_spec = QuantSpec::unit(spec.v_bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trace = WorkloadTrace {
        metadata: TraceMetadata {
            model: "synthetic".into(),
            task: format!("{:?}", spec.distribution),
        },
        q_spec,
        k_spec,
        v_spec,
        scaled_scores: spec.scaled_scores,
        layers: Vec::with_capacity(spec.layers),
    };
    for _ in 0..spec.layers {
        let heads = (0..spec.heads)
            .map(|_| make_head(spec, q_spec, k_spec, v_spec, &mut rng))
            .collect();
        trace.layers.push(LayerTrace { threshold: 0.0, heads });
    }
    for l in 0..spec.layers {
        let scores = trace.layers[l]
            .heads
            .iter()
            .flat_map(|h| valid_scores(&trace, h))
            .collect();
        trace.layers[l].threshold = quantile_threshold(scores, spec.target_pruning)?;
    }
    trace.validate()?;
    Ok(trace)
}
