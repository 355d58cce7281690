//! Real-valued reference attention and the ideal threshold-pruning oracle.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{dim_check, Error, Result};
use crate::scalar::Scalar;

/// Per-head projection weights, each `d_w x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
}

/// Token embeddings plus the weights of one multi-head attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput<T> {
    /// `s x d_w` embeddings.
    pub x: Array2<T>,
    pub heads: Vec<HeadWeights<T>>,
    /// `(d * h) x d_w` output projection.
    pub wo: Array2<T>,
}

impl<T: Scalar> AttentionInput<T> {
    pub fn seq_len(&self) -> usize {
        self.x.nrows()
    }

    pub fn model_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.heads.first().map(|h| h.wq.ncols()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Dimension("at least one head is required".into()));
        }
        let (dw, d) = (self.model_dim(), self.head_dim());
        for (i, h) in self.heads.iter().enumerate() {
            for (name, w) in [("wq", &h.wq), ("wk", &h.wk), ("wv", &h.wv)] {
                dim_check(w.dim() == (dw, d), || {
                    format!("head {i} {name} is {:?}, expected ({dw}, {d})", w.dim())
                })?;
            }
        }
        dim_check(self.wo.dim() == (d * self.heads.len(), dw), || {
            format!(
                "wo is {:?}, expected ({}, {dw})",
                self.wo.dim(),
                d * self.heads.len()
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection<T> {
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    pub scores: Array2<T>,
    /// Whether the `1/sqrt(d)` factor has been applied.
    pub scaled: bool,
}

/// Row-stochastic matrix. Rows whose every entry was pruned are listed in
/// `degenerate_rows` and put all their mass on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix<T> {
    pub probs: Array2<T>,
    pub degenerate_rows: Vec<usize>,
}

pub fn project_qkv<T: Scalar>(input: &AttentionInput<T>) -> Result<Vec<HeadProjection<T>>> {
    input.validate()?;
    Ok(input
        .heads
        .iter()
        .map(|h| HeadProjection {
            q: input.x.dot(&h.wq),
            k: input.x.dot(&h.wk),
            v: input.x.dot(&h.wv),
        })
        .collect())
}

pub fn compute_scores<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    scale: bool,
) -> Result<ScoreMatrix<T>> {
    dim_check(q.ncols() == k.ncols(), || {
        format!("q has width {}, k has width {}", q.ncols(), k.ncols())
    })?;
    let mut scores = q.dot(&k.t());
    if scale && q.ncols() > 0 {
        let factor = T::one() / T::of(q.ncols() as f64).sqrt();
        scores.mapv_inplace(|x| x * factor);
    }
    Ok(ScoreMatrix {
        scores,
        scaled: scale,
    })
}

/// Numerically stable row softmax; `-inf` entries get probability zero.
pub fn softmax_rows<T: Scalar>(scores: &ScoreMatrix<T>) -> ProbMatrix<T> {
    let (rows, cols) = scores.scores.dim();
    let mut probs = Array2::zeros((rows, cols));
    let mut degenerate_rows = Vec::new();
    for (i, (row, mut out)) in scores
        .scores
        .axis_iter(Axis(0))
        .zip(probs.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            if cols > 0 {
                degenerate_rows.push(i);
                out[i.min(cols - 1)] = T::one();
            }
            continue;
        }
        let mut sum = T::zero();
        for (o, &x) in out.iter_mut().zip(row.iter()) {
            *o = (x - max).exp();
            sum += *o;
        }
        out.mapv_inplace(|p| p / sum);
    }
    ProbMatrix {
        probs,
        degenerate_rows,
    }
}

pub fn attend<T: Scalar>(p: &ProbMatrix<T>, v: ArrayView2<T>) -> Result<Array2<T>> {
    dim_check(p.probs.ncols() == v.nrows(), || {
        format!(
            "P has {} columns, V has {} rows",
            p.probs.ncols(),
            v.nrows()
        )
    })?;
    Ok(p.probs.dot(&v))
}

/// Full multi-head layer: per-head scaled attention, concatenation, output projection.
pub fn multi_head_attention<T: Scalar>(input: &AttentionInput<T>) -> Result<Array2<T>> {
    let heads = project_qkv(input)?
        .into_iter()
        .map(|h| {
            let scores = compute_scores(h.q.view(), h.k.view(), true)?;
            attend(&softmax_rows(&scores), h.v.view())
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = heads.iter().map(|a| a.view()).collect();
    let concat = concatenate(Axis(1), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(concat.dot(&input.wo))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneOptions {
    /// Apply `1/sqrt(d)` before comparing with the threshold.
    pub scale: bool,
    /// Number of real (non-padded) tokens; `None` means all `s`.
    pub valid_len: Option<usize>,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            scale: true,
            valid_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedAttention<T> {
    /// `s x d`; padded query rows are zero.
    pub output: Array2<T>,
    /// `true` where a valid score fell below the threshold.
    pub mask: Array2<bool>,
    /// Pruned fraction of the `valid_len^2` valid scores.
    pub pruning_rate: f64,
    pub degenerate_rows: Vec<usize>,
}

/// Hard threshold pruning: scores strictly below `th` are removed before the softmax.
pub fn ideal_pruned_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    th: T,
    opts: PruneOptions,
) -> Result<PrunedAttention<T>> {
    let s = q.nrows();
    dim_check(k.nrows() == s && v.nrows() == s, || {
        format!("q, k, v have {}, {}, {} rows", s, k.nrows(), v.nrows())
    })?;
    let valid = opts.valid_len.unwrap_or(s);
    if valid > s {
        return Err(Error::Dimension(format!(
            "valid_len {valid} exceeds sequence length {s}"
        )));
    }
    let scores = compute_scores(
        q.slice(s![..valid, ..]),
        k.slice(s![..valid, ..]),
        opts.scale,
    )?;
    let mask = scores.scores.mapv(|x| x < th);
    let pruned = mask.iter().filter(|&&m| m).count();
    let masked = ScoreMatrix {
        scores: ndarray::Zip::from(&scores.scores)
            .and(&mask)
            .map_collect(|&x, &m| if m { T::neg_infinity() } else { x }),
        scaled: scores.scaled,
    };
    let probs = softmax_rows(&masked);
    let mut output = Array2::zeros((s, v.ncols()));
    output
        .slice_mut(s![..valid, ..])
        .assign(&attend(&probs, v.slice(s![..valid, ..]))?);
    let mut full_mask = Array2::from_elem((s, s), false);
    full_mask.slice_mut(s![..valid, ..valid]).assign(&mask);
    Ok(PrunedAttention {
        output,
        mask: full_mask,
        pruning_rate: if valid == 0 {
            0.0
        } else {
            pruned as f64 / (valid * valid) as f64
        },
        degenerate_rows: probs.degenerate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_projection() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let eye = Array2::<f64>::eye(2);
        let input = AttentionInput {
            x: x.clone(),
            heads: vec![HeadWeights {
                wq: eye.clone(),
                wk: eye.clone(),
                wv: eye.clone(),
            }],
            wo: eye,
        };
        let p = project_qkv(&input).unwrap();
        assert_eq!(p[0].q, x);
    }

    #[test]
    fn hand_multiplied_projection() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let w = array![[0.5, -1.0], [2.0, 0.0]];
        let input = AttentionInput {
            x,
            heads: vec![HeadWeights {
                wq: w.clone(),
                wk: w.clone(),
                wv: w,
            }],
            wo: Array2::eye(2),
        };
        let p = project_qkv(&input).unwrap();
        assert_eq!(p[0].k, array![[4.5, -1.0], [9.5, -3.0]]);
    }

    #[test]
    fn zero_embeddings_project_to_zero() {
        let input = AttentionInput {
            x: Array2::<f32>::zeros((3, 4)),
            heads: vec![HeadWeights {
                wq: Array2::ones((4, 2)),
                wk: Array2::ones((4, 2)),
                wv: Array2::ones((4, 2)),
            }],
            wo: Array2::ones((2, 4)),
        };
        let p = project_qkv(&input).unwrap();
        assert!(p[0].q.iter().chain(p[0].v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn projection_dimension_errors() {
        let input = AttentionInput {
            x: Array2::<f64>::zeros((3, 4)),
            heads: vec![HeadWeights {
                wq: Array2::ones((4, 2)),
                wk: Array2::ones((3, 2)),
                wv: Array2::ones((4, 2)),
            }],
            wo: Array2::ones((2, 4)),
        };
        assert!(matches!(project_qkv(&input), Err(Error::Dimension(_))));
        let empty = AttentionInput::<f64> {
            x: Array2::zeros((3, 4)),
            heads: vec![],
            wo: Array2::zeros((0, 4)),
        };
        assert!(multi_head_attention(&empty).is_err());
    }

    #[test]
    fn one_hot_score() {
        let q = array![[0.0, 1.0, 0.0, 0.0]];
        let sc = compute_scores(q.view(), q.view(), false).unwrap();
        assert_eq!(sc.scores[[0, 0]], 1.0);
    }

    #[test]
    fn scaling_by_inverse_sqrt_d() {
        let q = Array2::<f64>::ones((1, 64));
        let raw = compute_scores(q.view(), q.view(), false).unwrap();
        let scaled = compute_scores(q.view(), q.view(), true).unwrap();
        assert_eq!(scaled.scores[[0, 0]], raw.scores[[0, 0]] * 0.125);
        let k = Array2::<f64>::ones((1, 3));
        assert!(compute_scores(q.view(), k.view(), false).is_err());
    }

    #[test]
    fn softmax_examples() {
        let sm = |row: Array2<f64>| {
            softmax_rows(&ScoreMatrix {
                scores: row,
                scaled: false,
            })
        };
        assert_eq!(sm(array![[0.0, 0.0]]).probs, array![[0.5, 0.5]]);
        assert_eq!(
            sm(array![[3.0, f64::NEG_INFINITY]]).probs,
            array![[1.0, 0.0]]
        );
        let p = sm(array![[1.0, 2.0, 3.0]]).probs;
        for (got, want) in p.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-4);
        }
    }

    #[test]
    fn all_pruned_row_goes_to_diagonal() {
        let ninf = f64::NEG_INFINITY;
        let p = softmax_rows(&ScoreMatrix {
            scores: array![[ninf, ninf], [0.0, ninf]],
            scaled: false,
        });
        assert_eq!(p.probs, array![[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(p.degenerate_rows, vec![0]);
    }

    #[test]
    fn attend_identity_and_one_hot() {
        let v = array![[1.0, 2.0], [3.0, 4.0]];
        let eye = ProbMatrix {
            probs: Array2::eye(2),
            degenerate_rows: vec![],
        };
        assert_eq!(attend(&eye, v.view()).unwrap(), v);
        let pick = ProbMatrix {
            probs: array![[0.0, 1.0]],
            degenerate_rows: vec![],
        };
        assert_eq!(attend(&pick, v.view()).unwrap(), array![[3.0, 4.0]]);
        assert!(attend(&pick, Array2::<f64>::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn worked_example_score_is_pruned() {
        // A 1x4 instance whose only score is 1.5; threshold 5.
        let q = array![[9.0, 5.0, 7.0, 2.0]];
        let k = array![[0.125, 0.875, -0.5, -0.25]];
        let v = array![[1.0]];
        let opts = PruneOptions {
            scale: false,
            valid_len: None,
        };
        let r = ideal_pruned_attention(q.view(), k.view(), v.view(), 5.0, opts).unwrap();
        assert!(r.mask[[0, 0]]);
        assert_eq!(r.pruning_rate, 1.0);
        assert_eq!(r.degenerate_rows, vec![0]);
        let r = ideal_pruned_attention(q.view(), k.view(), v.view(), 1.5, opts).unwrap();
        assert!(!r.mask[[0, 0]]);
    }

    #[test]
    fn padding_is_not_counted() {
        let q = array![[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]];
        let v = array![[1.0], [2.0], [3.0]];
        let opts = PruneOptions {
            scale: false,
            valid_len: Some(2),
        };
        let r = ideal_pruned_attention(q.view(), q.view(), v.view(), 0.5, opts).unwrap();
        // Off-diagonal valid scores are 0 < 0.5; diagonal 1 survives.
        assert_eq!(r.pruning_rate, 0.5);
        assert_eq!(r.output.row(2).to_vec(), vec![0.0]);
        assert!(!r.mask[[2, 2]]);
        let bad = PruneOptions {
            scale: false,
            valid_len: Some(4),
        };
        assert!(ideal_pruned_attention(q.view(), q.view(), v.view(), 0.5, bad).is_err());
    }
}
