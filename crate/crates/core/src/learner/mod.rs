//! Learned per-layer pruning thresholds.
//!
//! Scores pass through a soft threshold during training so that gradients
//! reach both the model weights and the threshold itself; a sigmoid-sum
//! surrogate of the survivor count is added to the loss to push sparsity up.

mod toy;

pub use toy::{
    fine_tune, make_dataset, pretrain, select_lambda, Dataset, EpochRecord, ForwardMode,
    LambdaSearch, ModelGrads, Sample, ToyLayer, ToyModel, ToyModelConfig, ToySetup, ToyTaskConfig,
    TrainOptions, TrainStats,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Constants of the soft threshold, the surrogate count and the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams<T> {
    /// Soft-threshold sharpness `s`.
    pub sharpness: T,
    /// Clip magnitude `c`; pruned scores map to about `-c`.
    pub clip: T,
    /// Surrogate sigmoid sharpness `k`.
    pub surrogate_sharpness: T,
    /// Surrogate offset `alpha`.
    pub surrogate_offset: T,
    /// Regularizer weight `lambda`.
    pub lambda: T,
    pub lr_threshold: T,
    pub lr_params: T,
}

impl<T: Scalar> Default for HyperParams<T> {
    fn default() -> Self {
        Self {
            sharpness: T::of(10.0),
            clip: T::of(1000.0),
            surrogate_sharpness: T::of(100.0),
            surrogate_offset: T::one(),
            lambda: T::of(DEFAULT_LAMBDA),
            lr_threshold: T::of(1e-2),
            lr_params: T::of(5e-4),
        }
    }
}

/// Picked from [`LAMBDA_GRID`] on the bundled toy task.
pub const DEFAULT_LAMBDA: f64 = 1e-1;

pub const LAMBDA_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

impl<T: Scalar> HyperParams<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sharpness", self.sharpness),
            ("clip", self.clip),
            ("surrogate_sharpness", self.surrogate_sharpness),
        ];
        for (name, v) in positive {
            if v <= T::zero() || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda < T::zero() || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        for (name, v) in [
            ("lr_threshold", self.lr_threshold),
            ("lr_params", self.lr_params),
        ] {
            if v < T::zero() || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_lambda(mut self, lambda: T) -> Self {
        self.lambda = lambda;
        self
    }
}

/// One threshold per attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams<T> {
    pub th: Vec<T>,
}

impl<T: Scalar> ThresholdParams<T> {
    pub fn zeros(layers: usize) -> Self {
        Self {
            th: vec![T::zero(); layers],
        }
    }
}

fn sech2<T: Scalar>(u: T) -> T {
    let c = u.cosh();
    if c.is_infinite() {
        T::zero()
    } else {
        T::one() / (c * c)
    }
}

/// `x tanh(s(x - th))` for `x >= th`, `c tanh(s(x - th))` below.
pub fn soft_threshold<T: Scalar>(x: T, th: T, hp: &HyperParams<T>) -> T {
    let t = (hp.sharpness * (x - th)).tanh();
    if x >= th {
        x * t
    } else {
        hp.clip * t
    }
}

/// `(d/dx, d/dth)` of [`soft_threshold`]; at `x == th` the upper branch applies.
pub fn soft_threshold_grad<T: Scalar>(x: T, th: T, hp: &HyperParams<T>) -> (T, T) {
    let u = hp.sharpness * (x - th);
    let sech = sech2(u);
    if x >= th {
        let d_th = -hp.sharpness * sech * x;
        (u.tanh() + hp.sharpness * x * sech, d_th)
    } else {
        let d = hp.clip * hp.sharpness * sech;
        (d, -d)
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

fn surrogate_arg<T: Scalar>(score: T, hp: &HyperParams<T>) -> T {
    hp.surrogate_sharpness * (score + hp.clip - hp.surrogate_offset)
}

/// Smooth survivor count `sum sigmoid(k(score + c - alpha))` over soft-thresholded scores.
pub fn surrogate_l0<T: Scalar>(scores: &[T], hp: &HyperParams<T>) -> T {
    scores
        .iter()
        .fold(T::zero(), |acc, &z| acc + sigmoid(surrogate_arg(z, hp)))
}

/// Per-score derivative of [`surrogate_l0`].
pub fn surrogate_l0_grad<T: Scalar>(scores: &[T], hp: &HyperParams<T>) -> Vec<T> {
    scores
        .iter()
        .map(|&z| surrogate_point_grad(z, hp))
        .collect()
}

pub(crate) fn surrogate_point_grad<T: Scalar>(z: T, hp: &HyperParams<T>) -> T {
    let sg = sigmoid(surrogate_arg(z, hp));
    hp.surrogate_sharpness * sg * (T::one() - sg)
}

/// Hard survivor count: scores strictly above `-c`.
pub fn exact_l0<T: Scalar>(scores: &[T], clip: T) -> usize {
    scores.iter().filter(|&&z| z > -clip).count()
}

/// `task_loss + lambda * sum over layers of surrogate_l0(layer scores)`.
pub fn total_loss<T: Scalar>(task_loss: T, layers: &[&[T]], hp: &HyperParams<T>) -> T {
    let count = layers
        .iter()
        .fold(T::zero(), |acc, scores| acc + surrogate_l0(scores, hp));
    task_loss + hp.lambda * count
}

/// Gradient of [`total_loss`] with respect to every score (the task-loss
/// derivative is 1).
pub fn total_loss_grad<T: Scalar>(layers: &[&[T]], hp: &HyperParams<T>) -> Vec<Vec<T>> {
    layers
        .iter()
        .map(|scores| {
            scores
                .iter()
                .map(|&z| hp.lambda * surrogate_point_grad(z, hp))
                .collect()
        })
        .collect()
}

/// Fraction of `scores` strictly below `th`. Callers pass only non-padded scores.
pub fn measure_sparsity<T: Scalar>(scores: &[T], th: T) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&x| x < th).count() as f64 / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> HyperParams<f64> {
        HyperParams::default()
    }

    #[test]
    fn defaults_match_published_constants() {
        let h = hp();
        assert_eq!(
            (
                h.sharpness,
                h.clip,
                h.surrogate_sharpness,
                h.surrogate_offset
            ),
            (10.0, 1000.0, 100.0, 1.0)
        );
        assert_eq!(h.lr_threshold, 1e-2);
        assert!(h.validate().is_ok());
        assert!(h.with_lambda(-1.0).validate().is_err());
        let mut bad = h;
        bad.sharpness = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn soft_threshold_at_and_around_threshold() {
        let h = hp();
        assert_eq!(soft_threshold(0.7, 0.7, &h), 0.0);
        let x = 0.3 + 10.0;
        assert!((soft_threshold(x, 0.3, &h) - x).abs() < 1e-8 * x);
        assert!((soft_threshold(0.3 - 10.0, 0.3, &h) + 1000.0).abs() < 1e-6);
    }

    #[test]
    fn soft_threshold_grad_limits() {
        let h = hp();
        let (dx, dth) = soft_threshold_grad(20.0, 0.0, &h);
        assert!((dx - 1.0).abs() < 1e-12 && dth.abs() < 1e-12);
        let x = 0.4;
        let (dx, dth) = soft_threshold_grad(x, x, &h);
        assert_eq!(dx, h.sharpness * x);
        assert_eq!(dth, -h.sharpness * x);
    }

    #[test]
    fn surrogate_extremes() {
        let h = hp();
        let at_clip = surrogate_l0(&[-1000.0], &h);
        assert!(at_clip < 1e-40 && at_clip > 0.0);
        assert!((surrogate_l0(&[0.0], &h) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn surrogate_counts_survivors() {
        let h = hp();
        let mut scores = vec![-1000.0; 7];
        scores.extend([0.3, 2.0, -0.5, 11.0]);
        assert!((surrogate_l0(&scores, &h) - 4.0).abs() < 1e-6);
        assert_eq!(exact_l0(&scores, h.clip), 4);
    }

    #[test]
    fn total_loss_examples() {
        let h = hp().with_lambda(0.0);
        assert_eq!(total_loss(0.75, &[&[1.0, 2.0]], &h), 0.75);
        let h = hp().with_lambda(1.0);
        assert!((total_loss(0.75, &[&[-1000.0, -1000.0]], &h) - 0.75).abs() < 1e-12);
        let h = hp().with_lambda(0.01);
        let survivors = vec![1.5; 42];
        let pruned = vec![-1000.0; 58];
        let got = total_loss(0.5, &[&survivors, &pruned], &h);
        assert!((got - 0.92).abs() < 1e-6);
    }

    #[test]
    fn sparsity_bounds() {
        let s = [-0.5, 0.1, 0.2];
        assert_eq!(measure_sparsity(&s, f64::NEG_INFINITY), 0.0);
        assert_eq!(measure_sparsity(&s, f64::INFINITY), 1.0);
        assert_eq!(measure_sparsity(&s, 0.1), 1.0 / 3.0);
        assert_eq!(measure_sparsity::<f64>(&[], 0.0), 0.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(1e6f64), 1.0);
        assert_eq!(sigmoid(-1e6f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
