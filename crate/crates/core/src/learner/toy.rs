//! Desk-scale joint fine-tuning of weights and thresholds.
//!
//! The toy task: each sequence holds one signal token (class 0 or 1) among
//! random distractors, with a fraction of labels flipped. The model embeds
//! tokens, runs one or more single-head attention layers, mean-pools the
//! last layer's rows and classifies. Gradients are computed by hand.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    soft_threshold, soft_threshold_grad, surrogate_l0, surrogate_point_grad, HyperParams,
    ThresholdParams,
};
use crate::attention::{softmax_rows, ScoreMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskConfig {
    /// Padded sequence length.
    pub seq_len: usize,
    /// Shortest valid length; lengths are uniform in `min_len..=seq_len`.
    pub min_len: usize,
    /// Tokens 0 and 1 are the class signals, the rest are distractors.
    pub vocab: usize,
    pub samples: usize,
    /// Probability that a label is flipped.
    pub label_noise: f64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            min_len: 8,
            vocab: 32,
            samples: 512,
            label_noise: 0.1,
        }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 {
            return Err(Error::Config(
                "vocab needs two signal tokens and a distractor".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.seq_len {
            return Err(Error::Config(format!(
                "min_len must be in 1..={}, got {}",
                self.seq_len, self.min_len
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must be in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Valid (non-padded) tokens only.
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub seq_len: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

pub fn make_dataset(cfg: &ToyTaskConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..cfg.samples)
        .map(|_| {
            let len = rng.random_range(cfg.min_len..=cfg.seq_len);
            let class = rng.random_range(0..2usize);
            let mut tokens: Vec<usize> = (0..len).map(|_| rng.random_range(2..cfg.vocab)).collect();
            let pos = rng.random_range(0..len);
            tokens[pos] = class;
            let label = if rng.random::<f64>() < cfg.label_noise {
                1 - class
            } else {
                class
            };
            Sample { tokens, label }
        })
        .collect();
    Ok(Dataset {
        seq_len: cfg.seq_len,
        classes: 2,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub layers: usize,
    pub classes: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_model: 16,
            d_head: 8,
            layers: 1,
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    /// `d_head x d_model`.
    pub wo: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub embed: Array2<T>,
    pub layers: Vec<ToyLayer<T>>,
    pub classifier: Array2<T>,
    pub bias: Array1<T>,
    pub thresholds: ThresholdParams<T>,
}

/// How scores are treated before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    /// No pruning at all.
    Dense,
    /// Differentiable soft threshold (training).
    Soft,
    /// Exact removal of scores below the threshold (inference).
    Hard,
}

fn random_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || T::of(normal.sample(rng)))
}

struct LayerCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    scores: Array2<T>,
    z: Array2<T>,
    p: Array2<T>,
    a: Array2<T>,
}

struct Forward<T> {
    layers: Vec<LayerCache<T>>,
    pooled: Array1<T>,
    logits: Array1<T>,
}

/// Gradient buffers with the same shapes as [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub embed: Array2<T>,
    pub layers: Vec<ToyLayer<T>>,
    pub classifier: Array2<T>,
    pub bias: Array1<T>,
    pub thresholds: Vec<T>,
}

impl<T: Scalar> ModelGrads<T> {
    fn zeros_like(m: &ToyModel<T>) -> Self {
        Self {
            embed: Array2::zeros(m.embed.dim()),
            layers: m
                .layers
                .iter()
                .map(|l| ToyLayer {
                    wq: Array2::zeros(l.wq.dim()),
                    wk: Array2::zeros(l.wk.dim()),
                    wv: Array2::zeros(l.wv.dim()),
                    wo: Array2::zeros(l.wo.dim()),
                })
                .collect(),
            classifier: Array2::zeros(m.classifier.dim()),
            bias: Array1::zeros(m.bias.len()),
            thresholds: vec![T::zero(); m.thresholds.th.len()],
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Array2<T>> {
        std::iter::once(&self.embed)
            .chain(
                self.layers
                    .iter()
                    .flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo]),
            )
            .chain(std::iter::once(&self.classifier))
    }

    pub fn norm(&self) -> T {
        let sq = self
            .tensors()
            .flat_map(|m| m.iter())
            .chain(self.bias.iter())
            .chain(self.thresholds.iter())
            .fold(T::zero(), |acc, &x| acc + x * x);
        sq.sqrt()
    }

    fn scale(&mut self, f: T) {
        self.embed *= f;
        for l in &mut self.layers {
            l.wq *= f;
            l.wk *= f;
            l.wv *= f;
            l.wo *= f;
        }
        self.classifier *= f;
        self.bias *= f;
        self.thresholds.iter_mut().for_each(|t| *t *= f);
    }

    fn is_finite(&self) -> bool {
        self.tensors().all(|m| m.iter().all(|x| x.is_finite()))
            && self.bias.iter().all(|x| x.is_finite())
            && self.thresholds.iter().all(|x| x.is_finite())
    }
}

fn log_softmax_ce<T: Scalar>(logits: &Array1<T>, label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits
        .iter()
        .fold(T::zero(), |acc, &l| acc + (l - max).exp())
        .ln()
        + max;
    lse - logits[label]
}

impl<T: Scalar> ToyModel<T> {
    pub fn new(cfg: &ToyModelConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0
            || cfg.d_model == 0
            || cfg.d_head == 0
            || cfg.classes < 2
            || cfg.vocab == 0
        {
            return Err(Error::Config(format!("invalid toy model shape {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_std = 1.0 / (cfg.d_model as f64).sqrt();
        let head_std = 1.0 / (cfg.d_head as f64).sqrt();
        let embed = random_matrix(&mut rng, cfg.vocab, cfg.d_model, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| ToyLayer {
                wq: random_matrix(&mut rng, cfg.d_model, cfg.d_head, in_std),
                wk: random_matrix(&mut rng, cfg.d_model, cfg.d_head, in_std),
                wv: random_matrix(&mut rng, cfg.d_model, cfg.d_head, in_std),
                wo: random_matrix(&mut rng, cfg.d_head, cfg.d_model, head_std),
            })
            .collect();
        let classifier = random_matrix(&mut rng, cfg.d_model, cfg.classes, in_std);
        Ok(Self {
            embed,
            layers,
            classifier,
            bias: Array1::zeros(cfg.classes),
            thresholds: ThresholdParams::zeros(cfg.layers),
        })
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.tokens.is_empty() {
            return Err(Error::Dimension("empty sample".into()));
        }
        if let Some(&t) = sample.tokens.iter().find(|&&t| t >= self.embed.nrows()) {
            return Err(Error::Dimension(format!(
                "token {t} outside vocabulary of {}",
                self.embed.nrows()
            )));
        }
        if sample.label >= self.bias.len() {
            return Err(Error::Dimension(format!(
                "label {} outside {} classes",
                sample.label,
                self.bias.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, tokens: &[usize], mode: ForwardMode, hp: &HyperParams<T>) -> Forward<T> {
        let mut x = self.embed.select(Axis(0), tokens);
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, &th) in self.layers.iter().zip(&self.thresholds.th) {
            let q = x.dot(&layer.wq);
            let k = x.dot(&layer.wk);
            let v = x.dot(&layer.wv);
            let r = T::one() / T::of(layer.wq.ncols() as f64).sqrt();
            let scores = q.dot(&k.t()) * r;
            let z = match mode {
                ForwardMode::Dense => scores.clone(),
                ForwardMode::Soft => scores.mapv(|s| soft_threshold(s, th, hp)),
                ForwardMode::Hard => scores.mapv(|s| if s < th { T::neg_infinity() } else { s }),
            };
            let p = softmax_rows(&ScoreMatrix {
                scores: z.clone(),
                scaled: true,
            })
            .probs;
            let a = p.dot(&v);
            let next = a.dot(&layer.wo);
            caches.push(LayerCache {
                x,
                q,
                k,
                v,
                scores,
                z,
                p,
                a,
            });
            x = next;
        }
        let pooled = x.mean_axis(Axis(0)).expect("non-empty sample");
        let logits = pooled.dot(&self.classifier) + &self.bias;
        Forward {
            layers: caches,
            pooled,
            logits,
        }
    }

    fn regularizer(&self, fw: &Forward<T>, hp: &HyperParams<T>) -> T {
        fw.layers.iter().fold(T::zero(), |acc, c| {
            acc + surrogate_l0(c.z.as_slice().expect("standard layout"), hp)
        })
    }

    /// Per-sample objective: cross-entropy, plus `lambda` times the surrogate
    /// count in [`ForwardMode::Soft`].
    pub fn objective(&self, sample: &Sample, mode: ForwardMode, hp: &HyperParams<T>) -> Result<T> {
        self.check_sample(sample)?;
        let fw = self.forward(&sample.tokens, mode, hp);
        let mut loss = log_softmax_ce(&fw.logits, sample.label);
        if mode == ForwardMode::Soft {
            loss += hp.lambda * self.regularizer(&fw, hp);
        }
        Ok(loss)
    }

    /// Gradient of [`Self::objective`] for one sample.
    pub fn gradients(
        &self,
        sample: &Sample,
        mode: ForwardMode,
        hp: &HyperParams<T>,
    ) -> Result<ModelGrads<T>> {
        self.check_sample(sample)?;
        let mut g = ModelGrads::zeros_like(self);
        let fw = self.forward(&sample.tokens, mode, hp);
        self.backward(&fw, sample, mode, hp, T::one(), &mut g);
        Ok(g)
    }

    /// Scaled scores of every layer for one sample, `n x n` each.
    pub fn layer_scores(
        &self,
        sample: &Sample,
        mode: ForwardMode,
        hp: &HyperParams<T>,
    ) -> Result<Vec<Array2<T>>> {
        self.check_sample(sample)?;
        Ok(self
            .forward(&sample.tokens, mode, hp)
            .layers
            .into_iter()
            .map(|c| c.scores)
            .collect())
    }

    fn backward(
        &self,
        fw: &Forward<T>,
        sample: &Sample,
        mode: ForwardMode,
        hp: &HyperParams<T>,
        weight: T,
        g: &mut ModelGrads<T>,
    ) {
        let n = sample.tokens.len();
        let max = fw.logits.iter().copied().fold(T::neg_infinity(), T::max);
        let mut dlogits = fw.logits.mapv(|l| (l - max).exp());
        let sum = dlogits.sum();
        dlogits.mapv_inplace(|e| e / sum);
        dlogits[sample.label] -= T::one();
        dlogits *= weight;

        let pooled_col = fw.pooled.view().insert_axis(Axis(1));
        let dl_row = dlogits.view().insert_axis(Axis(0));
        g.classifier.scaled_add(T::one(), &pooled_col.dot(&dl_row));
        g.bias += &dlogits;
        let dpooled = self.classifier.dot(&dlogits) / T::of(n as f64);
        let mut dx = Array2::from_shape_fn((n, dpooled.len()), |(_, j)| dpooled[j]);

        for (li, (layer, cache)) in self.layers.iter().zip(&fw.layers).enumerate().rev() {
            let gl = &mut g.layers[li];
            let th = self.thresholds.th[li];
            gl.wo.scaled_add(T::one(), &cache.a.t().dot(&dx));
            let da = dx.dot(&layer.wo.t());
            let dp = da.dot(&cache.v.t());
            let dv = cache.p.t().dot(&da);
            let mut dz = Array2::zeros(cache.p.dim());
            for ((mut dz_row, p_row), dp_row) in dz
                .axis_iter_mut(Axis(0))
                .zip(cache.p.axis_iter(Axis(0)))
                .zip(dp.axis_iter(Axis(0)))
            {
                let dot = p_row.dot(&dp_row);
                Zip::from(&mut dz_row)
                    .and(&p_row)
                    .and(&dp_row)
                    .for_each(|d, &p, &dpv| *d = p * (dpv - dot));
            }
            let ds = match mode {
                ForwardMode::Soft => {
                    let reg = weight * hp.lambda;
                    let mut dth = T::zero();
                    let ds = Zip::from(&dz).and(&cache.scores).and(&cache.z).map_collect(
                        |&d, &s, &z| {
                            let d = d + reg * surrogate_point_grad(z, hp);
                            let (gx, gth) = soft_threshold_grad(s, th, hp);
                            dth += d * gth;
                            d * gx
                        },
                    );
                    g.thresholds[li] += dth;
                    ds
                }
                // Hard pruning is not differentiable in the threshold; gradients
                // flow through surviving scores only.
                ForwardMode::Dense | ForwardMode::Hard => dz,
            };
            let r = T::one() / T::of(layer.wq.ncols() as f64).sqrt();
            let dq = ds.dot(&cache.k) * r;
            let dk = ds.t().dot(&cache.q) * r;
            gl.wq.scaled_add(T::one(), &cache.x.t().dot(&dq));
            gl.wk.scaled_add(T::one(), &cache.x.t().dot(&dk));
            gl.wv.scaled_add(T::one(), &cache.x.t().dot(&dv));
            dx = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        }
        for (row, &tok) in dx.axis_iter(Axis(0)).zip(&sample.tokens) {
            let mut e = g.embed.row_mut(tok);
            e += &row;
        }
    }

    fn apply(&mut self, g: &ModelGrads<T>, lr_params: T, lr_threshold: T) {
        self.embed.scaled_add(-lr_params, &g.embed);
        for (l, gl) in self.layers.iter_mut().zip(&g.layers) {
            l.wq.scaled_add(-lr_params, &gl.wq);
            l.wk.scaled_add(-lr_params, &gl.wk);
            l.wv.scaled_add(-lr_params, &gl.wv);
            l.wo.scaled_add(-lr_params, &gl.wo);
        }
        self.classifier.scaled_add(-lr_params, &g.classifier);
        self.bias.scaled_add(-lr_params, &g.bias);
        for (th, &d) in self.thresholds.th.iter_mut().zip(&g.thresholds) {
            *th -= lr_threshold * d;
        }
    }

    /// Mean task loss, mean surrogate count, overall and per-layer sparsity.
    fn evaluate(&self, data: &Dataset, mode: ForwardMode, hp: &HyperParams<T>) -> Evaluation {
        let layers = self.layers.len();
        let mut task = 0.0;
        let mut reg = 0.0;
        let mut pruned = vec![0usize; layers];
        let mut total = 0usize;
        for sample in &data.samples {
            let fw = self.forward(&sample.tokens, mode, hp);
            task += log_softmax_ce(&fw.logits, sample.label).as_f64();
            reg += self.regularizer(&fw, hp).as_f64();
            for ((c, &th), p) in fw
                .layers
                .iter()
                .zip(&self.thresholds.th)
                .zip(pruned.iter_mut())
            {
                *p += c.scores.iter().filter(|&&s| s < th).count();
            }
            total += sample.tokens.len() * sample.tokens.len();
        }
        let n = data.samples.len().max(1) as f64;
        let layer_sparsity: Vec<f64> = pruned
            .iter()
            .map(|&p| p as f64 / total.max(1) as f64)
            .collect();
        Evaluation {
            task_loss: task / n,
            surrogate_count: reg / n,
            sparsity: layer_sparsity.iter().sum::<f64>() / layers as f64,
            layer_sparsity,
        }
    }
}

struct Evaluation {
    task_loss: f64,
    surrogate_count: f64,
    sparsity: f64,
    layer_sparsity: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
    /// Anneal both learning rates along a half cosine over the epochs.
    pub cosine_decay: bool,
}

impl TrainOptions {
    fn lr_factor(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || self.epochs == 0 {
            return 1.0;
        }
        let t = (epoch - 1) as f64 / self.epochs as f64;
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            seed: 0,
            max_grad_norm: Some(5.0),
            cosine_decay: true,
        }
    }
}

/// One row of [`TrainStats`]; epoch 0 is the state before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub total_loss: f64,
    /// `total_loss` divided by its epoch-0 value.
    pub normalized_loss: f64,
    /// Task loss with scores below the threshold removed exactly.
    pub pruned_task_loss: f64,
    pub sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub lambda: f64,
    pub records: Vec<EpochRecord>,
}

impl TrainStats {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("epoch 0 is always recorded")
    }
}

fn check_data<T: Scalar>(model: &ToyModel<T>, data: &Dataset) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::Parameter("empty dataset".into()));
    }
    data.samples.iter().try_for_each(|s| model.check_sample(s))
}

fn run_epoch<T: Scalar>(
    model: &mut ToyModel<T>,
    data: &Dataset,
    mode: ForwardMode,
    hp: &HyperParams<T>,
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
    lr_params: T,
    lr_threshold: T,
) -> bool {
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(rng);
    for batch in order.chunks(opts.batch_size.max(1)) {
        let mut g = ModelGrads::zeros_like(model);
        let w = T::one() / T::of(batch.len() as f64);
        for &i in batch {
            let sample = &data.samples[i];
            let fw = model.forward(&sample.tokens, mode, hp);
            model.backward(&fw, sample, mode, hp, w, &mut g);
        }
        if !g.is_finite() {
            return false;
        }
        if let Some(max) = opts.max_grad_norm {
            let norm = g.norm();
            if norm > T::of(max) {
                g.scale(T::of(max) / norm);
            }
        }
        model.apply(&g, lr_params, lr_threshold);
    }
    true
}

/// Dense training (no thresholds) used to obtain the starting checkpoint.
pub fn pretrain<T: Scalar>(
    model: &mut ToyModel<T>,
    data: &Dataset,
    lr: T,
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    check_data(model, data)?;
    let hp = HyperParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = vec![model.evaluate(data, ForwardMode::Dense, &hp).task_loss];
    for epoch in 1..=opts.epochs {
        let lr = lr * T::of(opts.lr_factor(epoch));
        let ok = run_epoch(
            model,
            data,
            ForwardMode::Dense,
            &hp,
            opts,
            &mut rng,
            lr,
            T::zero(),
        );
        let loss = model.evaluate(data, ForwardMode::Dense, &hp).task_loss;
        if !ok || !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Jointly trains weights and thresholds with the soft threshold in place and
/// the surrogate count in the loss. Thresholds start from whatever the model
/// holds (zero for a fresh model).
pub fn fine_tune<T: Scalar>(
    model: &mut ToyModel<T>,
    data: &Dataset,
    hp: &HyperParams<T>,
    opts: &TrainOptions,
) -> Result<TrainStats> {
    hp.validate()?;
    check_data(model, data)?;
    let lambda = hp.lambda.as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::with_capacity(opts.epochs + 1);
    let mut base_total = None;
    for epoch in 0..=opts.epochs {
        if epoch > 0 {
            let f = T::of(opts.lr_factor(epoch));
            let ok = run_epoch(
                model,
                data,
                ForwardMode::Soft,
                hp,
                opts,
                &mut rng,
                hp.lr_params * f,
                hp.lr_threshold * f,
            );
            if !ok {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
        }
        let soft = model.evaluate(data, ForwardMode::Soft, hp);
        let hard = model.evaluate(data, ForwardMode::Hard, hp);
        let total = soft.task_loss + lambda * soft.surrogate_count;
        if !total.is_finite() || !hard.task_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        let base = *base_total.get_or_insert(total);
        records.push(EpochRecord {
            epoch,
            task_loss: soft.task_loss,
            total_loss: total,
            normalized_loss: if base != 0.0 { total / base } else { 1.0 },
            pruned_task_loss: hard.task_loss,
            sparsity: soft.sparsity,
            layer_sparsity: soft.layer_sparsity,
            thresholds: model.thresholds.th.iter().map(|t| t.as_f64()).collect(),
        });
    }
    Ok(TrainStats { lambda, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub baseline: TrainStats,
    pub runs: Vec<TrainStats>,
    /// Largest final sparsity among runs whose final task loss stays within
    /// `loss_slack` of the baseline.
    pub chosen: Option<f64>,
}

/// Fine-tunes copies of `model` for `lambda = 0` and every grid value
/// (concurrently) and picks the sparsest acceptable run.
pub fn select_lambda<T: Scalar>(
    model: &ToyModel<T>,
    data: &Dataset,
    hp: &HyperParams<T>,
    grid: &[f64],
    opts: &TrainOptions,
    loss_slack: f64,
) -> Result<LambdaSearch> {
    let mut lambdas = vec![0.0];
    lambdas.extend_from_slice(grid);
    let mut stats = lambdas
        .par_iter()
        .map(|&l| {
            let mut m = model.clone();
            fine_tune(&mut m, data, &hp.with_lambda(T::of(l)), opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = stats.remove(0);
    let limit = loss_slack * baseline.last().task_loss;
    let chosen = stats
        .iter()
        .filter(|s| s.last().task_loss <= limit)
        .max_by(|a, b| a.last().sparsity.total_cmp(&b.last().sparsity))
        .map(|s| s.lambda);
    Ok(LambdaSearch {
        baseline,
        runs: stats,
        chosen,
    })
}

/// Everything needed to reproduce a toy run from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySetup {
    pub task: ToyTaskConfig,
    pub model: ToyModelConfig,
    pub data_seed: u64,
    pub model_seed: u64,
    pub pretrain_lr: f64,
    pub pretrain: TrainOptions,
    pub fine_tune: TrainOptions,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            task: ToyTaskConfig::default(),
            model: ToyModelConfig::default(),
            data_seed: 1,
            model_seed: 2,
            pretrain_lr: 0.05,
            pretrain: TrainOptions {
                epochs: 30,
                seed: 3,
                cosine_decay: false,
                ..TrainOptions::default()
            },
            fine_tune: TrainOptions {
                seed: 4,
                ..TrainOptions::default()
            },
        }
    }
}

impl ToySetup {
    /// Builds the dataset and the densely pretrained starting model.
    pub fn prepare<T: Scalar>(&self) -> Result<(Dataset, ToyModel<T>)> {
        if self.model.vocab < self.task.vocab {
            return Err(Error::Config(format!(
                "model vocabulary {} smaller than task vocabulary {}",
                self.model.vocab, self.task.vocab
            )));
        }
        let data = make_dataset(&self.task, self.data_seed)?;
        let mut model = ToyModel::new(&self.model, self.model_seed)?;
        pretrain(&mut model, &data, T::of(self.pretrain_lr), &self.pretrain)?;
        Ok((data, model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let cfg = ToyTaskConfig::default();
        let a = make_dataset(&cfg, 3).unwrap();
        let b = make_dataset(&cfg, 3).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert!(s.tokens.len() >= cfg.min_len && s.tokens.len() <= cfg.seq_len);
            assert_eq!(s.tokens.iter().filter(|&&t| t < 2).count(), 1);
        }
        let bad = ToyTaskConfig { min_len: 0, ..cfg };
        assert!(make_dataset(&bad, 0).is_err());
    }

    #[test]
    fn bad_samples_are_rejected() {
        let m = ToyModel::<f64>::new(&ToyModelConfig::default(), 0).unwrap();
        let hp = HyperParams::default();
        let s = Sample {
            tokens: vec![40],
            label: 0,
        };
        assert!(m.objective(&s, ForwardMode::Soft, &hp).is_err());
        let s = Sample {
            tokens: vec![],
            label: 0,
        };
        assert!(m.objective(&s, ForwardMode::Soft, &hp).is_err());
    }
}
