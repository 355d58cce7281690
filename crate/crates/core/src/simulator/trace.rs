//! Quantized attention workloads and their on-disk container.
//!
//! File layout: 8 magic bytes, a little-endian `u32` header length, a JSON
//! header, then the payload. The payload holds, for every layer and head in
//! header order, the Q, K and V code matrices row-major as little-endian
//! `i32` signed codes (`sign * magnitude`).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bitserial::CodeThreshold;
use crate::error::{Error, Result};
use crate::fxp::{FixedPointValue, QuantSpec};

pub const TRACE_MAGIC: [u8; 8] = *b"LEOPTRC\0";
pub const TRACE_FORMAT: &str = "leopard-workload-trace";
pub const TRACE_VERSION: u32 = 1;

fn trace_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Trace {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub model: String,
    pub task: String,
}

/// One attention head of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    /// Rows at or beyond `valid_len` are padding and never processed.
    pub valid_len: usize,
    pub q: Array2<i32>,
    pub k: Array2<i32>,
    pub v: Array2<i32>,
    pub q_scale: f64,
    pub k_scale: f64,
    pub v_scale: f64,
}

impl HeadTrace {
    pub fn seq_len(&self) -> usize {
        self.q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Pruning threshold on (optionally `1/sqrt(d)`-scaled) real scores.
    pub threshold: f64,
    pub heads: Vec<HeadTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTrace {
    pub metadata: TraceMetadata,
    pub q_spec: QuantSpec,
    pub k_spec: QuantSpec,
    pub v_spec: QuantSpec,
    /// Thresholds apply to scores divided by `sqrt(d)`.
    pub scaled_scores: bool,
    pub layers: Vec<LayerTrace>,
}

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    seq_len: usize,
    valid_len: usize,
    d: usize,
    d_v: usize,
    q_scale: f64,
    k_scale: f64,
    v_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    threshold: f64,
    heads: Vec<HeadHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    endianness: String,
    payload_dtype: String,
    metadata: TraceMetadata,
    q_spec: QuantSpec,
    k_spec: QuantSpec,
    v_spec: QuantSpec,
    scaled_scores: bool,
    layers: Vec<LayerHeader>,
}

fn check_codes(m: &Array2<i32>, spec: QuantSpec, field: &str) -> Result<()> {
    let max = spec.max_magnitude() as u64;
    match m.iter().find(|&&c| c.unsigned_abs() as u64 > max) {
        Some(c) => Err(trace_err(
            field,
            format!("code {c} exceeds {} magnitude bits", spec.magnitude_bits()),
        )),
        None => Ok(()),
    }
}

fn check_scale(x: f64, field: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(trace_err(field, format!("scale must be positive and finite, got {x}")))
    }
}

impl WorkloadTrace {
    pub fn head_count(&self) -> usize {
        self.layers.iter().map(|l| l.heads.len()).sum()
    }

    pub fn heads(&self) -> impl Iterator<Item = (usize, usize, &HeadTrace)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(li, l)| l.heads.iter().enumerate().map(move |(hi, h)| (li, hi, h)))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, spec) in [("q_spec", self.q_spec), ("k_spec", self.k_spec), ("v_spec", self.v_spec)] {
            spec.validate().map_err(|e| trace_err(name, e.to_string()))?;
        }
        for (li, layer) in self.layers.iter().enumerate() {
            if !layer.threshold.is_finite() {
                return Err(trace_err(
                    format!("layers[{li}].threshold"),
                    format!("must be finite, got {}", layer.threshold),
                ));
            }
            for (hi, h) in layer.heads.iter().enumerate() {
                let at = |f: &str| format!("layers[{li}].heads[{hi}].{f}");
                let s = h.seq_len();
                if h.k.dim() != h.q.dim() {
                    return Err(trace_err(at("k"), format!("shape {:?} differs from q {:?}", h.k.dim(), h.q.dim())));
                }
                if h.v.nrows() != s {
                    return Err(trace_err(at("v"), format!("{} rows, expected {s}", h.v.nrows())));
                }
                if h.valid_len > s {
                    return Err(trace_err(at("valid_len"), format!("{} exceeds seq_len {s}", h.valid_len)));
                }
                if h.valid_len > 0 && (h.head_dim() == 0 || h.value_dim() == 0) {
                    return Err(trace_err(at("d"), "head dimension must be positive"));
                }
                check_codes(&h.q, self.q_spec, &at("q"))?;
                check_codes(&h.k, self.k_spec, &at("k"))?;
                check_codes(&h.v, self.v_spec, &at("v"))?;
                check_scale(h.q_scale, &at("q_scale"))?;
                check_scale(h.k_scale, &at("k_scale"))?;
                check_scale(h.v_scale, &at("v_scale"))?;
            }
        }
        Ok(())
    }

    /// Real value of one integer score unit of `head`, including the
    /// `1/sqrt(d)` factor when thresholds are on scaled scores.
    pub fn score_unit(&self, head: &HeadTrace) -> f64 {
        let base = self.q_spec.lsb() * self.k_spec.lsb() * head.q_scale * head.k_scale;
        if self.scaled_scores {
            base / (head.head_dim() as f64).sqrt()
        } else {
            base
        }
    }

    pub fn code_threshold(&self, threshold: f64, head: &HeadTrace) -> CodeThreshold {
        CodeThreshold::from_real(threshold, self.score_unit(head))
    }

    /// Replaces every layer threshold, e.g. with learned per-layer values.
    pub fn set_thresholds(&mut self, thresholds: &[f64]) -> Result<()> {
        if thresholds.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "{} thresholds for {} layers",
                thresholds.len(),
                self.layers.len()
            )));
        }
        for (l, &t) in self.layers.iter_mut().zip(thresholds) {
            l.threshold = t;
        }
        Ok(())
    }

    /// Valid scores over all heads.
    pub fn valid_score_count(&self) -> u64 {
        self.heads().map(|(_, _, h)| (h.valid_len * h.valid_len) as u64).sum()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.validate()?;
        let header = Header {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            endianness: "little".into(),
            payload_dtype: "i32".into(),
            metadata: self.metadata.clone(),
            q_spec: self.q_spec,
            k_spec: self.k_spec,
            v_spec: self.v_spec,
            scaled_scores: self.scaled_scores,
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    threshold: l.threshold,
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadHeader {
                            seq_len: h.seq_len(),
                            valid_len: h.valid_len,
                            d: h.head_dim(),
                            d_v: h.value_dim(),
                            q_scale: h.q_scale,
                            k_scale: h.k_scale,
                            v_scale: h.v_scale,
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| trace_err("header", "header longer than 4 GiB"))?;
        w.write_all(&TRACE_MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, h) in self.heads() {
            for m in [&h.q, &h.k, &h.v] {
                let mut buf = Vec::with_capacity(m.len() * 4);
                for &c in m.iter() {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| trace_err("magic", "file too short"))?;
        if magic != TRACE_MAGIC {
            return Err(trace_err("magic", "not a workload trace"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|_| trace_err("header", "missing header length"))?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)
            .map_err(|_| trace_err("header", "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| trace_err("header", e.to_string()))?;
        if header.format != TRACE_FORMAT {
            return Err(trace_err("format", format!("unknown format `{}`", header.format)));
        }
        if header.version != TRACE_VERSION {
            return Err(trace_err(
                "version",
                format!("unsupported version {} (expected {TRACE_VERSION})", header.version),
            ));
        }
        if header.endianness != "little" {
            return Err(trace_err("endianness", format!("unsupported `{}`", header.endianness)));
        }
        if header.payload_dtype != "i32" {
            return Err(trace_err("payload_dtype", format!("unsupported `{}`", header.payload_dtype)));
        }
        let mut read_matrix = |rows: usize, cols: usize, field: String| -> Result<Array2<i32>> {
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| trace_err(field.clone(), "dimensions overflow"))?;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| trace_err(field.clone(), "payload truncated"))?;
            let codes = buf
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Array2::from_shape_vec((rows, cols), codes).expect("length checked"))
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for (li, lh) in header.layers.into_iter().enumerate() {
            let mut heads = Vec::with_capacity(lh.heads.len());
            for (hi, hh) in lh.heads.into_iter().enumerate() {
                let at = |f: &str| format!("layers[{li}].heads[{hi}].{f}");
                heads.push(HeadTrace {
                    valid_len: hh.valid_len,
                    q: read_matrix(hh.seq_len, hh.d, at("q"))?,
                    k: read_matrix(hh.seq_len, hh.d, at("k"))?,
                    v: read_matrix(hh.seq_len, hh.d_v, at("v"))?,
                    q_scale: hh.q_scale,
                    k_scale: hh.k_scale,
                    v_scale: hh.v_scale,
                });
            }
            layers.push(LayerTrace {
                threshold: lh.threshold,
                heads,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(trace_err("payload", format!("{} trailing bytes", rest.len())));
        }
        let trace = WorkloadTrace {
            metadata: header.metadata,
            q_spec: header.q_spec,
            k_spec: header.k_spec,
            v_spec: header.v_spec,
            scaled_scores: header.scaled_scores,
            layers,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub(crate) fn fixed_rows(m: ArrayView2<i32>, rows: usize, spec: QuantSpec) -> Vec<Vec<FixedPointValue>> {
    m.slice(s![..rows, ..])
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .map(|&c| FixedPointValue::from_signed(c as i64, spec).expect("validated trace codes"))
                .collect()
        })
        .collect()
}

/// Dequantizes a code matrix to reals.
pub fn dequantize_codes(m: ArrayView2<i32>, spec: QuantSpec, scale: f64) -> Array2<f64> {
    let unit = spec.lsb() * scale;
    m.mapv(|c| c as f64 * unit)
}
