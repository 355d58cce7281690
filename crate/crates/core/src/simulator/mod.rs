//! Cycle-level, energy-annotated model of one accelerator tile.
//!
//! The front end holds `n_qk` bit-serial QK-DPUs. A query row is broadcast
//! to all of them and key columns are dealt out round-robin; every DPU runs
//! the early-termination engine on its columns one after the other. Scores
//! that survive go into the score/index FIFO at the end of their last cycle,
//! and the back end pops at most one per cycle (softmax, `xV`, value-buffer
//! read). The front end may start query row `i + 1` only after the back end
//! has finished row `i - 1`; a full FIFO stalls the DPU holding a score.
//!
//! The baseline is the same machine with one full-word DPU and no pruning.

mod synthetic;
mod trace;

pub use synthetic::{ideal_pruning_rate, synthetic_trace, ScoreDistribution, SyntheticSpec};
pub use trace::{
    dequantize_codes, HeadTrace, LayerTrace, TraceMetadata, WorkloadTrace, TRACE_FORMAT, TRACE_MAGIC,
    TRACE_VERSION,
};

use std::collections::VecDeque;
use std::ops::RangeInclusive;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitserial::{run_dot_planes, CodeThreshold, DotOutcome, SerialConfig};
use crate::error::{Error, Result};
use crate::fxp::{to_bit_planes, QuantSpec};

/// Tile geometry and datapath widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub n_qk: usize,
    /// Key bits per cycle `B`; `B >= k_bits` means one full-word cycle per score.
    pub bits_per_cycle: u32,
    /// DPU taps; a head's dimension must not exceed it.
    pub d: usize,
    pub q_bits: u32,
    pub k_bits: u32,
    pub v_bits: u32,
    pub softmax_in_bits: u32,
    pub softmax_out_bits: u32,
    pub score_fifo_depth: usize,
    pub idx_fifo_depth: usize,
    pub key_buffer_kb: usize,
    pub value_buffer_kb: usize,
    /// With pruning off every score runs to completion.
    pub pruning: bool,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self::ae()
    }
}

impl TileConfig {
    /// Area-efficient configuration.
    pub fn ae() -> Self {
        Self {
            n_qk: 6,
            bits_per_cycle: 2,
            d: 64,
            q_bits: 12,
            k_bits: 12,
            v_bits: 16,
            softmax_in_bits: 24,
            softmax_out_bits: 16,
            score_fifo_depth: 512,
            idx_fifo_depth: 512,
            key_buffer_kb: 48,
            value_buffer_kb: 64,
            pruning: true,
        }
    }

    /// High-performance configuration.
    pub fn hp() -> Self {
        Self {
            n_qk: 8,
            ..Self::ae()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ae" => Ok(Self::ae()),
            "hp" => Ok(Self::hp()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected ae or hp)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_qk", self.n_qk),
            ("bits_per_cycle", self.bits_per_cycle as usize),
            ("d", self.d),
            ("q_bits", self.q_bits as usize),
            ("k_bits", self.k_bits as usize),
            ("v_bits", self.v_bits as usize),
            ("softmax_in_bits", self.softmax_in_bits as usize),
            ("softmax_out_bits", self.softmax_out_bits as usize),
            ("score_fifo_depth", self.score_fifo_depth),
            ("idx_fifo_depth", self.idx_fifo_depth),
            ("key_buffer_kb", self.key_buffer_kb),
            ("value_buffer_kb", self.value_buffer_kb),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// The no-pruning reference: one full-word DPU, same back end.
    pub fn baseline(&self) -> Self {
        Self {
            n_qk: 1,
            bits_per_cycle: self.k_bits,
            pruning: false,
            ..*self
        }
    }

    fn fifo_capacity(&self) -> usize {
        self.score_fifo_depth.min(self.idx_fifo_depth)
    }

    /// Checks that every head of `trace` fits this tile.
    pub fn check_trace(&self, trace: &WorkloadTrace) -> Result<()> {
        let widths = [
            ("q", trace.q_spec, self.q_bits),
            ("k", trace.k_spec, self.k_bits),
            ("v", trace.v_spec, self.v_bits),
        ];
        for (name, spec, bits) in widths {
            if spec.total_bits > bits {
                return Err(Error::Config(format!(
                    "trace {name} codes have {} bits, the tile datapath {bits}",
                    spec.total_bits
                )));
            }
        }
        for (li, hi, h) in trace.heads() {
            if h.head_dim() > self.d {
                return Err(Error::Config(format!(
                    "layer {li} head {hi}: dimension {} exceeds {} DPU taps",
                    h.head_dim(),
                    self.d
                )));
            }
            let key_bits = (h.valid_len * h.head_dim()) as u64 * self.k_bits as u64;
            let value_bits = (h.valid_len * h.value_dim()) as u64 * self.v_bits as u64;
            if key_bits > self.key_buffer_kb as u64 * 8192 || value_bits > self.value_buffer_kb as u64 * 8192 {
                return Err(Error::Config(format!(
                    "layer {li} head {hi}: keys or values of {} tokens do not fit the on-chip buffers",
                    h.valid_len
                )));
            }
        }
        Ok(())
    }

    fn serial(&self, trace: &WorkloadTrace) -> Result<SerialConfig> {
        SerialConfig::new(self.bits_per_cycle, trace.q_spec, trace.k_spec)
    }
}

/// Per-event energy in abstract units. Front-end and V-row costs are per
/// vector element, so the breakdown does not drift with the head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyTable {
    /// Per DPU cycle per tap: latching, accumulation and margin update.
    pub qk_serial_cycle: f64,
    /// Per key bit per tap.
    pub qk_bit: f64,
    /// Per slice read per element.
    pub key_buffer_read: f64,
    /// Per key bit read per element.
    pub key_buffer_bit: f64,
    /// Per consumed score.
    pub softmax_op: f64,
    /// Per element of an accumulated V row.
    pub v_mac_cycle: f64,
    /// Per element of a V row read.
    pub value_buffer_read: f64,
    pub fifo_push: f64,
    pub fifo_pop: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            qk_serial_cycle: 0.55,
            qk_bit: 0.6,
            key_buffer_read: 0.15,
            key_buffer_bit: 0.4,
            softmax_op: 19.5,
            v_mac_cycle: 12.0,
            value_buffer_read: 10.8,
            fifo_push: 0.5,
            fifo_pop: 0.5,
        }
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.qk_serial_cycle,
            self.qk_bit,
            self.key_buffer_read,
            self.key_buffer_bit,
            self.softmax_op,
            self.v_mac_cycle,
            self.value_buffer_read,
            self.fifo_push,
            self.fifo_pop,
        ];
        if all.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::Config("energy costs must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Raw event tallies of a simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub valid_scores: u64,
    pub pruned_scores: u64,
    pub completed_scores: u64,
    /// DPU cycles summed over scores.
    pub dpu_cycles: u64,
    /// `dpu_cycles` weighted by the head dimension.
    pub tap_cycles: u64,
    /// Key bits processed (sign included) summed over scores.
    pub key_bits: u64,
    pub tap_bits: u64,
    pub pruned_bits: u64,
    pub softmax_ops: u64,
    pub v_elements: u64,
    pub fifo_pushes: u64,
    pub fifo_pops: u64,
    pub total_cycles: u64,
    pub frontend_active_cycles: u64,
    pub frontend_stall_cycles: u64,
    pub backend_busy_cycles: u64,
}

impl EventCounts {
    fn add(&mut self, o: &EventCounts) {
        self.valid_scores += o.valid_scores;
        self.pruned_scores += o.pruned_scores;
        self.completed_scores += o.completed_scores;
        self.dpu_cycles += o.dpu_cycles;
        self.tap_cycles += o.tap_cycles;
        self.key_bits += o.key_bits;
        self.tap_bits += o.tap_bits;
        self.pruned_bits += o.pruned_bits;
        self.softmax_ops += o.softmax_ops;
        self.v_elements += o.v_elements;
        self.fifo_pushes += o.fifo_pushes;
        self.fifo_pops += o.fifo_pops;
        self.total_cycles += o.total_cycles;
        self.frontend_active_cycles += o.frontend_active_cycles;
        self.frontend_stall_cycles += o.frontend_stall_cycles;
        self.backend_busy_cycles += o.backend_busy_cycles;
    }

    pub fn energy(&self, et: &EnergyTable) -> EnergyBreakdown {
        let qk_compute = self.tap_cycles as f64 * et.qk_serial_cycle + self.tap_bits as f64 * et.qk_bit;
        let key_buffer = self.tap_cycles as f64 * et.key_buffer_read + self.tap_bits as f64 * et.key_buffer_bit;
        let softmax = self.softmax_ops as f64 * et.softmax_op;
        let v_compute = self.v_elements as f64 * et.v_mac_cycle;
        let value_buffer = self.v_elements as f64 * et.value_buffer_read;
        let fifo = self.fifo_pushes as f64 * et.fifo_push + self.fifo_pops as f64 * et.fifo_pop;
        EnergyBreakdown {
            qk_compute,
            key_buffer,
            softmax,
            v_compute,
            value_buffer,
            fifo,
            total: qk_compute + key_buffer + softmax + v_compute + value_buffer + fifo,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub qk_compute: f64,
    pub key_buffer: f64,
    pub softmax: f64,
    pub v_compute: f64,
    pub value_buffer: f64,
    pub fifo: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn frontend(&self) -> f64 {
        self.qk_compute + self.key_buffer
    }

    pub fn backend(&self) -> f64 {
        self.softmax + self.v_compute + self.value_buffer
    }

    /// Back-end share of the total; zero for an empty run.
    pub fn backend_share(&self) -> f64 {
        if self.total > 0.0 {
            self.backend() / self.total
        } else {
            0.0
        }
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_cycles: u64,
    pub baseline_cycles: u64,
    /// `baseline_cycles / total_cycles` (1 for an empty trace).
    pub speedup: f64,
    pub energy: EnergyBreakdown,
    pub baseline_energy: EnergyBreakdown,
    /// `baseline_energy.total / energy.total` (1 for an empty trace).
    pub energy_reduction: f64,
    pub pruning_rate: f64,
    pub avg_bits_per_pruned_score: f64,
    pub avg_bits_per_score: f64,
    /// Surviving scores the `n_qk` DPUs hand the back end per cycle when none
    /// of them idles; above 1 the V-PU is over-subscribed.
    pub vpu_utilization: f64,
    /// Back-end busy cycles over total cycles.
    pub vpu_busy_fraction: f64,
    pub frontend_stall_cycles: u64,
    pub counts: EventCounts,
}

impl SimReport {
    pub fn from_counts(counts: EventCounts, baseline: EventCounts, n_qk: usize, et: &EnergyTable) -> Self {
        let energy = counts.energy(et);
        let baseline_energy = baseline.energy(et);
        Self {
            total_cycles: counts.total_cycles,
            baseline_cycles: baseline.total_cycles,
            speedup: if counts.total_cycles == 0 {
                1.0
            } else {
                baseline.total_cycles as f64 / counts.total_cycles as f64
            },
            energy,
            baseline_energy,
            energy_reduction: if energy.total > 0.0 {
                baseline_energy.total / energy.total
            } else {
                1.0
            },
            pruning_rate: ratio(counts.pruned_scores as f64, counts.valid_scores as f64),
            avg_bits_per_pruned_score: ratio(counts.pruned_bits as f64, counts.pruned_scores as f64),
            avg_bits_per_score: ratio(counts.key_bits as f64, counts.valid_scores as f64),
            vpu_utilization: ratio((n_qk as u64 * counts.completed_scores) as f64, counts.dpu_cycles as f64),
            vpu_busy_fraction: ratio(counts.backend_busy_cycles as f64, counts.total_cycles as f64),
            frontend_stall_cycles: counts.frontend_stall_cycles,
            counts,
        }
    }
}

/// A score that reached the back end, in consumption order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Survivor {
    pub row: usize,
    pub col: usize,
    /// Exact score in units of `2^-(q_frac + k_frac)`.
    pub code: i128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadRun {
    pub counts: EventCounts,
    pub survivors: Vec<Survivor>,
    /// Pruned scores by key bits processed; index 0 is unused.
    pub pruned_by_bits: Vec<u64>,
}

/// Engine outcome of every valid `(row, col)` score of one head.
pub fn head_outcomes(
    trace: &WorkloadTrace,
    layer: usize,
    head: usize,
    cfg: &TileConfig,
) -> Result<Vec<Vec<DotOutcome>>> {
    let l = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::Dimension(format!("no layer {layer}")))?;
    let h = l
        .heads
        .get(head)
        .ok_or_else(|| Error::Dimension(format!("layer {layer} has no head {head}")))?;
    let serial = cfg.serial(trace)?;
    let th = if cfg.pruning {
        trace.code_threshold(l.threshold, h)
    } else {
        CodeThreshold::NEG_INF
    };
    let n = h.valid_len;
    let qs = trace::fixed_rows(h.q.view(), n, trace.q_spec);
    let keys = trace::fixed_rows(h.k.view(), n, trace.k_spec)
        .iter()
        .map(|k| to_bit_planes(k))
        .collect::<Result<Vec<_>>>()?;
    qs.iter()
        .map(|q| keys.iter().map(|k| run_dot_planes(q, k, th, &serial)).collect())
        .collect()
}

fn outcome_bits(o: &DotOutcome, k_spec: QuantSpec) -> u32 {
    match *o {
        DotOutcome::Pruned { bits_processed, .. } => bits_processed,
        DotOutcome::Completed { .. } => k_spec.total_bits,
    }
}

#[derive(Default)]
struct Dpu {
    queue: VecDeque<usize>,
    current: Option<(usize, u32)>,
    blocked: Option<usize>,
}

impl Dpu {
    fn idle(&self) -> bool {
        self.queue.is_empty() && self.current.is_none() && self.blocked.is_none()
    }
}

/// Runs one head through the tile, cycle by cycle.
pub fn simulate_head(trace: &WorkloadTrace, layer: usize, head: usize, cfg: &TileConfig) -> Result<HeadRun> {
    cfg.validate()?;
    let outcomes = head_outcomes(trace, layer, head, cfg)?;
    let h = &trace.layers[layer].heads[head];
    let (d, d_v) = (h.head_dim() as u64, h.value_dim() as u64);
    let rows = outcomes.len();
    let k_bits = trace.k_spec.total_bits as usize;

    let mut counts = EventCounts::default();
    let mut pruned_by_bits = vec![0u64; k_bits + 1];
    for o in outcomes.iter().flatten() {
        let bits = outcome_bits(o, trace.k_spec);
        counts.valid_scores += 1;
        counts.dpu_cycles += o.cycles() as u64;
        counts.key_bits += bits as u64;
        if o.is_pruned() {
            counts.pruned_scores += 1;
            counts.pruned_bits += bits as u64;
            pruned_by_bits[bits as usize] += 1;
        } else {
            counts.completed_scores += 1;
        }
    }
    counts.tap_cycles = counts.dpu_cycles * d;
    counts.tap_bits = counts.key_bits * d;
    let row_survivors: Vec<usize> = outcomes
        .iter()
        .map(|r| r.iter().filter(|o| !o.is_pruned()).count())
        .collect();

    let cap = cfg.fifo_capacity();
    let mut dpus: Vec<Dpu> = (0..cfg.n_qk).map(|_| Dpu::default()).collect();
    let mut fifo: VecDeque<Survivor> = VecDeque::with_capacity(cap.min(rows * rows + 1));
    let mut consumed = vec![0usize; rows];
    let mut survivors = Vec::with_capacity(counts.completed_scores as usize);
    let (mut fe_row, mut next_row, mut fe_rows_done, mut be_rows_done) = (None::<usize>, 0usize, 0usize, 0usize);
    let mut t: u64 = 0;

    while fe_rows_done < rows || !fifo.is_empty() {
        // Row start, seeing the back end as of the end of the previous cycle.
        if fe_row.is_none() && next_row < rows {
            if next_row < 2 || be_rows_done + 1 >= next_row {
                for c in 0..rows {
                    dpus[c % cfg.n_qk].queue.push_back(c);
                }
                fe_row = Some(next_row);
                next_row += 1;
            } else {
                counts.frontend_stall_cycles += 1;
            }
        }

        // Back end: one score per cycle from entries pushed in earlier cycles.
        if let Some(s) = fifo.pop_front() {
            counts.backend_busy_cycles += 1;
            counts.fifo_pops += 1;
            counts.softmax_ops += 1;
            counts.v_elements += d_v;
            consumed[s.row] += 1;
            survivors.push(s);
        }

        // Front end.
        if let Some(r) = fe_row {
            let (mut active, mut blocked) = (false, false);
            for dpu in &mut dpus {
                if let Some(col) = dpu.blocked {
                    if fifo.len() < cap {
                        let code = outcomes[r][col].score().expect("blocked scores survived").code;
                        fifo.push_back(Survivor { row: r, col, code });
                        counts.fifo_pushes += 1;
                        dpu.blocked = None;
                    } else {
                        blocked = true;
                    }
                    continue;
                }
                if dpu.current.is_none() {
                    dpu.current = dpu.queue.pop_front().map(|c| (c, outcomes[r][c].cycles()));
                }
                if let Some((col, rem)) = dpu.current.as_mut() {
                    active = true;
                    *rem -= 1;
                    if *rem == 0 {
                        let col = *col;
                        dpu.current = None;
                        if let Some(score) = outcomes[r][col].score() {
                            if fifo.len() < cap {
                                fifo.push_back(Survivor {
                                    row: r,
                                    col,
                                    code: score.code,
                                });
                                counts.fifo_pushes += 1;
                            } else {
                                dpu.blocked = Some(col);
                                blocked = true;
                            }
                        }
                    }
                }
            }
            counts.frontend_active_cycles += active as u64;
            counts.frontend_stall_cycles += blocked as u64;
            if dpus.iter().all(Dpu::idle) {
                fe_row = None;
                fe_rows_done = r + 1;
            }
        }

        while be_rows_done < fe_rows_done && consumed[be_rows_done] == row_survivors[be_rows_done] {
            be_rows_done += 1;
        }
        t += 1;
    }
    counts.total_cycles = t;
    Ok(HeadRun {
        counts,
        survivors,
        pruned_by_bits,
    })
}

/// Event counts of the whole trace; heads run concurrently and are summed.
pub fn simulate_counts(trace: &WorkloadTrace, cfg: &TileConfig) -> Result<EventCounts> {
    trace.validate()?;
    cfg.validate()?;
    cfg.check_trace(trace)?;
    let index: Vec<(usize, usize)> = trace.heads().map(|(l, h, _)| (l, h)).collect();
    let runs = index
        .par_iter()
        .map(|&(l, h)| simulate_head(trace, l, h, cfg).map(|r| r.counts))
        .collect::<Result<Vec<_>>>()?;
    let mut total = EventCounts::default();
    runs.iter().for_each(|c| total.add(c));
    Ok(total)
}

pub fn simulate_tile(trace: &WorkloadTrace, cfg: &TileConfig, et: &EnergyTable) -> Result<SimReport> {
    et.validate()?;
    let counts = simulate_counts(trace, cfg)?;
    let baseline = simulate_counts(trace, &cfg.baseline())?;
    Ok(SimReport::from_counts(counts, baseline, cfg.n_qk, et))
}

pub fn simulate_baseline(trace: &WorkloadTrace, cfg: &TileConfig, et: &EnergyTable) -> Result<SimReport> {
    et.validate()?;
    let baseline = simulate_counts(trace, &cfg.baseline())?;
    Ok(SimReport::from_counts(baseline, baseline, 1, et))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NqkPoint {
    pub n_qk: usize,
    pub vpu_utilization: f64,
    pub vpu_busy_fraction: f64,
    pub total_cycles: u64,
    pub speedup: f64,
    pub frontend_stall_cycles: u64,
}

pub fn sweep_nqk(
    trace: &WorkloadTrace,
    cfg: &TileConfig,
    range: RangeInclusive<usize>,
    et: &EnergyTable,
) -> Result<Vec<NqkPoint>> {
    et.validate()?;
    let baseline = simulate_counts(trace, &cfg.baseline())?;
    let points: Vec<usize> = range.collect();
    points
        .par_iter()
        .map(|&n| {
            let c = TileConfig { n_qk: n, ..*cfg };
            let r = SimReport::from_counts(simulate_counts(trace, &c)?, baseline, n, et);
            Ok(NqkPoint {
                n_qk: n,
                vpu_utilization: r.vpu_utilization,
                vpu_busy_fraction: r.vpu_busy_fraction,
                total_cycles: r.total_cycles,
                speedup: r.speedup,
                frontend_stall_cycles: r.frontend_stall_cycles,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitPoint {
    pub bits_per_cycle: u32,
    pub qk_logic_per_score: f64,
    pub key_buffer_per_score: f64,
    pub frontend_per_score: f64,
    pub total_per_score: f64,
    /// Front-end energy per score relative to full-word execution.
    pub normalized_frontend: f64,
    pub normalized_total: f64,
    pub pruning_rate: f64,
    pub avg_bits_per_pruned_score: f64,
}

/// Energy per valid score for each `B`, normalized to `B = k_bits`.
pub fn sweep_bit_granularity(
    trace: &WorkloadTrace,
    cfg: &TileConfig,
    bits: &[u32],
    et: &EnergyTable,
) -> Result<Vec<BitPoint>> {
    et.validate()?;
    let run = |b: u32| -> Result<SimReport> {
        let c = TileConfig {
            bits_per_cycle: b,
            ..*cfg
        };
        let counts = simulate_counts(trace, &c)?;
        Ok(SimReport::from_counts(counts, counts, c.n_qk, et))
    };
    let anchor = run(cfg.k_bits)?;
    let reports = bits.par_iter().map(|&b| run(b)).collect::<Result<Vec<_>>>()?;
    Ok(bits
        .iter()
        .zip(reports)
        .map(|(&b, r)| {
            let n = r.counts.valid_scores as f64;
            BitPoint {
                bits_per_cycle: b,
                qk_logic_per_score: ratio(r.energy.qk_compute, n),
                key_buffer_per_score: ratio(r.energy.key_buffer, n),
                frontend_per_score: ratio(r.energy.frontend(), n),
                total_per_score: ratio(r.energy.total, n),
                normalized_frontend: ratio(r.energy.frontend(), anchor.energy.frontend()),
                normalized_total: ratio(r.energy.total, anchor.energy.total),
                pruning_rate: r.pruning_rate,
                avg_bits_per_pruned_score: r.avg_bits_per_pruned_score,
            }
        })
        .collect())
}

/// `B` with the lowest total energy per score (first one on ties).
pub fn best_bit_granularity(points: &[BitPoint]) -> Option<u32> {
    points
        .iter()
        .min_by(|a, b| a.total_per_score.total_cmp(&b.total_per_score))
        .map(|p| p.bits_per_cycle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bits: u32,
    /// Fraction of all valid scores pruned after at most `bits` key bits.
    pub pruning_rate: f64,
}

/// Cumulative pruning rate against key bits processed, for `bits = 1..=k_bits`.
pub fn cumulative_pruning_curve(trace: &WorkloadTrace, cfg: &TileConfig) -> Result<Vec<CurvePoint>> {
    trace.validate()?;
    cfg.validate()?;
    let k_bits = trace.k_spec.total_bits as usize;
    let mut hist = vec![0u64; k_bits + 1];
    let mut valid = 0u64;
    for (l, h, _) in trace.heads() {
        for o in head_outcomes(trace, l, h, cfg)?.iter().flatten() {
            valid += 1;
            if o.is_pruned() {
                hist[outcome_bits(o, trace.k_spec) as usize] += 1;
            }
        }
    }
    let mut acc = 0u64;
    Ok((1..=k_bits)
        .map(|b| {
            acc += hist[b];
            CurvePoint {
                bits: b as u32,
                pruning_rate: ratio(acc as f64, valid as f64),
            }
        })
        .collect())
}

/// Attention output rebuilt from the back end's survivor stream, in the
/// dequantized domain. Rows with no survivor attend to the diagonal, padded
/// rows are zero.
pub fn survivor_attention(trace: &WorkloadTrace, layer: usize, head: usize, survivors: &[Survivor]) -> Result<Array2<f64>> {
    let h = trace
        .layers
        .get(layer)
        .and_then(|l| l.heads.get(head))
        .ok_or_else(|| Error::Dimension(format!("no head {head} in layer {layer}")))?;
    let n = h.valid_len;
    let unit = trace.score_unit(h);
    let v = dequantize_codes(h.v.view(), trace.v_spec, h.v_scale);
    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for s in survivors {
        if s.row >= n || s.col >= n {
            return Err(Error::Dimension(format!("survivor ({}, {}) outside {n} valid tokens", s.row, s.col)));
        }
        by_row[s.row].push((s.col, s.code as f64 * unit));
    }
    let mut out = Array2::zeros((h.seq_len(), h.value_dim()));
    for (i, row) in by_row.iter().enumerate() {
        let mut acc = out.row_mut(i);
        if row.is_empty() {
            acc.assign(&v.row(i.min(n - 1)));
            continue;
        }
        let max = row.iter().map(|&(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &(c, x) in row {
            let w = (x - max).exp();
            denom += w;
            acc.scaled_add(w, &v.row(c));
        }
        acc /= denom;
    }
    Ok(out)
}
