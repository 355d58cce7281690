//! Finite-difference oracle for the threshold learner.
//!
//! Differences `f(x + h) - f(x - h)` are evaluated through identities that
//! avoid subtracting two nearly equal rounded values, so the central
//! difference stays accurate deep in the saturated tails of tanh and the
//! sigmoid. One Richardson step removes the `O(h^2)` truncation term.

use leopard_core::learner::HyperParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `tanh(a) - tanh(b)`.
pub fn tanh_diff(a: f64, b: f64) -> f64 {
    if a >= 0.0 && b >= 0.0 {
        let (ea, eb) = ((-2.0 * a).exp(), (-2.0 * b).exp());
        // e^{-2b} - e^{-2a} = -e^{-2b} expm1(-2(a - b))
        2.0 * (-eb * (-2.0 * (a - b)).exp_m1()) / ((1.0 + ea) * (1.0 + eb))
    } else if a <= 0.0 && b <= 0.0 {
        tanh_diff(-b, -a)
    } else {
        a.tanh() - b.tanh()
    }
}

/// `sigmoid(a) - sigmoid(b)`.
pub fn sigmoid_diff(a: f64, b: f64) -> f64 {
    0.5 * tanh_diff(0.5 * a, 0.5 * b)
}

/// Central difference from a difference function `d(h) = f(x + h) - f(x - h)`,
/// refined by one Richardson step.
pub fn central(d: impl Fn(f64) -> f64, h: f64) -> f64 {
    let coarse = d(h) / (2.0 * h);
    let fine = d(h / 2.0) / h;
    (4.0 * fine - coarse) / 3.0
}

pub fn step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Soft-threshold difference in `x` with `th` fixed. Both points must lie on
/// the same branch.
pub fn soft_threshold_dx(x: f64, th: f64, h: f64, hp: &HyperParams<f64>) -> f64 {
    let s = hp.sharpness;
    let (a, b) = (s * (x + h - th), s * (x - h - th));
    let d = tanh_diff(a, b);
    if x - h >= th {
        x * d + h * (a.tanh() + b.tanh())
    } else {
        hp.clip * d
    }
}

/// Soft-threshold difference in `th` with `x` fixed.
pub fn soft_threshold_dth(x: f64, th: f64, h: f64, hp: &HyperParams<f64>) -> f64 {
    let s = hp.sharpness;
    let d = tanh_diff(s * (x - th - h), s * (x - th + h));
    if x >= th + h {
        x * d
    } else {
        hp.clip * d
    }
}

/// Difference of one surrogate term when its score moves by `+-h`.
pub fn surrogate_d(z: f64, h: f64, hp: &HyperParams<f64>) -> f64 {
    let t = |v: f64| hp.surrogate_sharpness * (v + hp.clip - hp.surrogate_offset);
    sigmoid_diff(t(z + h), t(z - h))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn random_hp(rng: &mut ChaCha8Rng) -> HyperParams<f64> {
    HyperParams {
        sharpness: rng.random_range(0.5..20.0),
        clip: rng.random_range(5.0..2000.0),
        surrogate_sharpness: rng.random_range(5.0..200.0),
        surrogate_offset: rng.random_range(0.25..2.0),
        lambda: rng.random_range(0.0..1.0),
        ..HyperParams::default()
    }
}

/// Scores concentrated around the surrogate transition, with some spread
/// far away from it.
pub fn random_surrogate_score(rng: &mut ChaCha8Rng, hp: &HyperParams<f64>) -> f64 {
    let centre = -hp.clip + hp.surrogate_offset;
    if rng.random_bool(0.8) {
        centre + rng.random_range(-0.3..0.3)
    } else {
        rng.random_range(-hp.clip * 1.2..hp.clip * 0.2)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        if analytic.abs() > 1e-8 {
            self.checked += 1;
            self.worst = self.worst.max(rel_err(analytic, numeric));
        }
    }
}

/// Both partials of the soft threshold at `points` random `(x, th, hp)`.
pub fn check_soft_threshold(points: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut done = 0;
    while done < points {
        let hp = random_hp(&mut rng);
        let th = rng.random_range(-3.0..3.0);
        let width = 4.0 / hp.sharpness;
        let x = th + rng.random_range(-width..width) * if rng.random_bool(0.1) { 20.0 } else { 1.0 };
        let h = step(x);
        if (x - th).abs() <= 2.0 * h {
            continue;
        }
        done += 1;
        let (gx, gth) = leopard_core::learner::soft_threshold_grad(x, th, &hp);
        report.record(gx, central(|h| soft_threshold_dx(x, th, h, &hp), h));
        let hth = step(th);
        if (x - th).abs() > 2.0 * hth {
            report.record(gth, central(|h| soft_threshold_dth(x, th, h, &hp), hth));
        }
    }
    report
}

/// Per-score gradient of the surrogate count.
pub fn check_surrogate(points: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for _ in 0..points {
        let hp = random_hp(&mut rng);
        let scores: Vec<f64> = (0..rng.random_range(1..8))
            .map(|_| random_surrogate_score(&mut rng, &hp))
            .collect();
        let grad = leopard_core::learner::surrogate_l0_grad(&scores, &hp);
        let i = rng.random_range(0..scores.len());
        let z = scores[i];
        let h = step(z + hp.clip - hp.surrogate_offset);
        report.record(grad[i], central(|h| surrogate_d(z, h, &hp), h));
    }
    report
}

/// Gradient of the total loss with respect to the task loss and one score
/// of one layer.
pub fn check_total_loss(points: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for _ in 0..points {
        let hp = random_hp(&mut rng);
        let layers: Vec<Vec<f64>> = (0..rng.random_range(1..4))
            .map(|_| {
                (0..rng.random_range(1..6))
                    .map(|_| random_surrogate_score(&mut rng, &hp))
                    .collect()
            })
            .collect();
        let views: Vec<&[f64]> = layers.iter().map(|l| l.as_slice()).collect();
        let grad = leopard_core::learner::total_loss_grad(&views, &hp);
        let li = rng.random_range(0..layers.len());
        let j = rng.random_range(0..layers[li].len());
        let z = layers[li][j];
        let h = step(z + hp.clip - hp.surrogate_offset);
        // Every other term of the total loss is unchanged by the perturbation.
        let numeric = central(|h| hp.lambda * surrogate_d(z, h, &hp), h);
        report.record(grad[li][j], numeric);
        // d/d(task_loss) is one; the loss is affine in it.
        let task = rng.random_range(0.0..5.0);
        let ht = step(task);
        let hi = leopard_core::learner::total_loss(task + ht, &views, &hp);
        let lo = leopard_core::learner::total_loss(task - ht, &views, &hp);
        let d_task = (hi - lo) / (2.0 * ht);
        report.record(1.0, d_task);
    }
    report
}

/// Worst `|surrogate - exact count|` over `trials` random multisets whose
/// scores all sit at least `20 / k` outside the band `[-c, -c + alpha]`.
pub fn surrogate_fidelity(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let hp = if t % 2 == 0 { HyperParams::default() } else { random_hp(&mut rng) };
        let w = 20.0 / hp.surrogate_sharpness;
        let (lo, hi) = (-hp.clip - w, -hp.clip + hp.surrogate_offset + w);
        let scores: Vec<f64> = (0..rng.random_range(1..64))
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(hi..hp.clip)
                } else if rng.random_bool(0.5) {
                    lo - rng.random_range(0.0..1.0)
                } else {
                    rng.random_range(-2.0 * hp.clip..lo)
                }
            })
            .collect();
        let smooth = leopard_core::learner::surrogate_l0(&scores, &hp);
        let exact = leopard_core::learner::exact_l0(&scores, hp.clip) as f64;
        worst = worst.max((smooth - exact).abs());
    }
    worst
}
