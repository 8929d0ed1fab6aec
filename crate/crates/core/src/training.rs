//! Cross-entropy training with a hand-written reverse pass.
//!
//! Three modes share one backward kernel over plain weights:
//! - `plain`: the weights are used as stored.
//! - `one_lip`: the stored weights are divided by their Lipschitz factors on
//!   every step (normalized forward); gradients are mapped back through the
//!   division, by default treating the divisors as constants of the step.
//! - `regularized`: plain forward plus `λ · M(W) · Π M(K) · M(E)`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split, DataError, LabeledDataset};
use crate::erp::NormOrder;
use crate::model::{ConvTextClassifier, LipschitzFactors, Mode, ModelError, ModelShape};
use crate::norms::{m_emb_grad, m_head_grad, m_kernel_grad};
use crate::text::Sentence;

/// Samples per fixed reduction chunk. The chunk layout does not depend on
/// the number of worker threads, so batch gradients are bitwise reproducible.
const REDUCE_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {0} class(es) present; training needs at least 2")]
    Degenerate(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Plain,
    OneLip,
    Regularized,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Plain, TrainMode::OneLip, TrainMode::Regularized];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Plain => "plain",
            TrainMode::OneLip => "one_lip",
            TrainMode::Regularized => "regularized",
        }
    }

    /// 100 for `one_lip`, 0.01 otherwise.
    pub fn default_lr_max(self) -> f64 {
        match self {
            TrainMode::OneLip => 100.0,
            TrainMode::Plain | TrainMode::Regularized => 0.01,
        }
    }

    /// Mode of the model held during training.
    pub fn model_mode(self) -> Mode {
        match self {
            TrainMode::OneLip => Mode::Normalized,
            TrainMode::Plain | TrainMode::Regularized => Mode::Plain,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(TrainMode::Plain),
            "one_lip" | "one-lip" => Ok(TrainMode::OneLip),
            "regularized" => Ok(TrainMode::Regularized),
            other => Err(TrainError::Config(format!(
                "unknown mode {other:?} (expected plain, one_lip or regularized)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lambda: f64,
    pub seed: u64,
    pub p: NormOrder,
    /// Samples held out for per-epoch validation accuracy; 0 disables it.
    pub val_size: usize,
    /// Differentiate through the normalization divisors in `one_lip` mode
    /// instead of treating them as per-step constants.
    pub full_normalization_grad: bool,
    pub embed_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
}

impl TrainConfig {
    /// Defaults: 30 epochs, batch 128, mode-dependent learning rate, 1,000
    /// validation samples, `d = 150`, `k = 100`, `q = 10`, one layer.
    pub fn new(mode: TrainMode, p: NormOrder) -> Self {
        Self {
            mode,
            epochs: 30,
            batch_size: 128,
            lr_max: mode.default_lr_max(),
            lambda: 0.0,
            seed: 0,
            p,
            val_size: 1000,
            full_normalization_grad: false,
            embed_dim: 150,
            hidden: 100,
            kernel: 10,
            layers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch size must be at least 1".into());
        }
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            return err(format!(
                "lr_max must be finite and non-negative, got {}",
                self.lr_max
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return err(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        if self.lambda > 0.0 && self.mode != TrainMode::Regularized {
            return err(format!(
                "lambda > 0 requires regularized mode, got {}",
                self.mode
            ));
        }
        if self.full_normalization_grad && self.mode != TrainMode::OneLip {
            return err("full normalization gradients only apply to one_lip mode".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("kernel", self.kernel),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn shape(&self, vocab: usize, classes: usize) -> ModelShape {
        ModelShape {
            vocab,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            kernel: self.kernel,
            layers: self.layers,
            classes,
            norm: self.p,
        }
    }

    pub fn grad_options(&self) -> GradOptions {
        GradOptions {
            lambda: if self.mode == TrainMode::Regularized {
                self.lambda
            } else {
                0.0
            },
            full_normalization: self.full_normalization_grad,
        }
    }
}

/// Triangular schedule: `0 → lr_max` over the first half of the steps, then
/// back down to 0.
pub fn cyclic_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    let half = total_steps / 2;
    if half == 0 {
        return lr_max;
    }
    if step <= half {
        lr_max * step as f64 / half as f64
    } else {
        lr_max * total_steps.saturating_sub(step) as f64 / (total_steps - half) as f64
    }
}

/// Softmax cross-entropy and its gradient `softmax(z) − onehot(label)`.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> Result<(f64, Array1<f64>), TrainError> {
    if label >= logits.len() {
        return Err(TrainError::Label {
            label,
            classes: logits.len(),
        });
    }
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(TrainError::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|z| (z - max).exp());
    let sum = exps.sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad = exps / sum;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Gradients for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub embedding: Array2<f64>,
    pub kernels: Vec<Array3<f64>>,
    pub head: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &ConvTextClassifier) -> Self {
        Self {
            embedding: Array2::zeros(model.embedding.raw_dim()),
            kernels: model
                .kernels
                .iter()
                .map(|k| Array3::zeros(k.raw_dim()))
                .collect(),
            head: Array2::zeros(model.head.raw_dim()),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.embedding += &other.embedding;
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            *a += b;
        }
        self.head += &other.head;
    }

    fn scale(&mut self, c: f64) {
        self.embedding *= c;
        for k in &mut self.kernels {
            *k *= c;
        }
        self.head *= c;
    }

    fn check_finite(&self) -> Result<(), TrainError> {
        if !self.embedding.iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFiniteGradient("embedding"));
        }
        if !self.kernels.iter().all(|k| k.iter().all(|x| x.is_finite())) {
            return Err(TrainError::NonFiniteGradient("kernel"));
        }
        if !self.head.iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFiniteGradient("head"));
        }
        Ok(())
    }
}

/// Options that change the objective or its gradient beyond the model mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradOptions {
    /// Weight of the `M(W) · Π M(K) · M(E)` penalty (plain models only).
    pub lambda: f64,
    /// Differentiate through the normalization divisors.
    pub full_normalization: bool,
}

/// Loss, gradient with respect to the plain weights, and correctness of one
/// sample.
fn sample_backward(
    model: &ConvTextClassifier,
    s: &Sentence,
    y: usize,
) -> Result<(f64, Gradients), TrainError> {
    let trace = model.forward_trace(s)?;
    let (loss, grad_logits) = cross_entropy(&trace.logits, y)?;
    let mut g = Gradients::zeros_like(model);
    g.head = trace
        .pooled
        .view()
        .insert_axis(Axis(1))
        .dot(&grad_logits.view().insert_axis(Axis(0)));
    let grad_pooled = model.head.dot(&grad_logits);
    let last = trace.activations.last().expect("at least one layer");
    let mut grad = Array2::zeros(last.raw_dim());
    grad += &grad_pooled.view().insert_axis(Axis(0));
    for i in (0..model.kernels.len()).rev() {
        let pre = &trace.pre_activations[i];
        grad.zip_mut_with(pre, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let input = if i == 0 {
            &trace.embedded
        } else {
            &trace.activations[i - 1]
        };
        let (gi, gk) =
            crate::model::conv_full_backward(input.view(), model.kernels[i].view(), grad.view());
        g.kernels[i] = gk;
        grad = gi;
    }
    for (row, &t) in grad.axis_iter(Axis(0)).zip(s.tokens()) {
        let mut target = g.embedding.row_mut(t as usize);
        target += &row;
    }
    Ok((loss, g))
}

/// Summed loss and gradient over a batch on plain weights, reduced in a
/// fixed chunk layout.
fn batch_sum(
    model: &ConvTextClassifier,
    batch: &[(Sentence, usize)],
) -> Result<(f64, Gradients), TrainError> {
    let partials: Vec<Result<(f64, Gradients), TrainError>> = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc = Gradients::zeros_like(model);
            let mut loss = 0.0;
            for (s, y) in chunk {
                let (l, g) = sample_backward(model, s, *y)?;
                loss += l;
                acc.add_assign(&g);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for part in partials {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// `M(W) · Π M(K) · M(E)` of the stored weights.
pub fn lipschitz_penalty(model: &ConvTextClassifier) -> f64 {
    model.factors().global()
}

/// Maps a gradient with respect to `X / a(X)` back to `X`:
/// `g / a`, minus `(⟨g, X⟩ / a²) ∇a` when differentiating through `a`.
fn through_division<D: ndarray::Dimension>(
    g: &ndarray::Array<f64, D>,
    x: &ndarray::Array<f64, D>,
    a: f64,
    grad_a: Option<ndarray::Array<f64, D>>,
) -> ndarray::Array<f64, D> {
    let mut out = g / a;
    if let Some(ga) = grad_a {
        let inner: f64 = g.iter().zip(x.iter()).map(|(u, v)| u * v).sum();
        out.scaled_add(-inner / (a * a), &ga);
    }
    out
}

/// Mean batch objective and its gradient with respect to the stored weights.
///
/// A normalized model is differentiated through its folded form; the
/// divisors are per-step constants unless `opts.full_normalization` is set.
/// A plain model with `opts.lambda > 0` adds `λ ∇G` using the lowest-index
/// subgradients of each factor.
pub fn backward(
    model: &ConvTextClassifier,
    batch: &[(Sentence, usize)],
    opts: GradOptions,
) -> Result<(f64, Gradients), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let p = model.shape.norm;
    let (loss, grads) = match model.mode {
        Mode::Plain => {
            let (mut loss, mut g) = batch_sum(model, batch)?;
            loss *= inv_n;
            g.scale(inv_n);
            if opts.lambda > 0.0 {
                let f = model.factors();
                let kprod = f.kernel_product();
                loss += opts.lambda * f.global();
                g.embedding.scaled_add(
                    opts.lambda * f.head * kprod,
                    &m_emb_grad(model.embedding.view(), p),
                );
                for (i, k) in model.kernels.iter().enumerate() {
                    let others: f64 = f
                        .kernels
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, m)| m)
                        .product();
                    g.kernels[i].scaled_add(
                        opts.lambda * f.head * others * f.embedding,
                        &m_kernel_grad(k.view(), p),
                    );
                }
                g.head.scaled_add(
                    opts.lambda * kprod * f.embedding,
                    &m_head_grad(model.head.view(), p.conjugate()),
                );
            }
            (loss, g)
        }
        Mode::Normalized => {
            if opts.lambda > 0.0 {
                return Err(TrainError::Config(
                    "the Lipschitz penalty applies to plain models only".into(),
                ));
            }
            let f = model.factors();
            let folded = model.fold_with(&f)?;
            let (loss, mut gf) = batch_sum(&folded, batch)?;
            gf.scale(inv_n);
            let full = opts.full_normalization;
            let g = Gradients {
                embedding: through_division(
                    &gf.embedding,
                    &model.embedding,
                    f.embedding,
                    full.then(|| m_emb_grad(model.embedding.view(), p)),
                ),
                kernels: gf
                    .kernels
                    .iter()
                    .zip(&model.kernels)
                    .zip(&f.kernels)
                    .map(|((g, k), &a)| {
                        through_division(g, k, a, full.then(|| m_kernel_grad(k.view(), p)))
                    })
                    .collect(),
                head: through_division(
                    &gf.head,
                    &model.head,
                    f.head,
                    full.then(|| m_head_grad(model.head.view(), p.conjugate())),
                ),
            };
            (loss * inv_n, g)
        }
    };
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Mean batch objective matching [`backward`].
pub fn objective(
    model: &ConvTextClassifier,
    batch: &[(Sentence, usize)],
    lambda: f64,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let eff = model.effective()?;
    let losses: Vec<Result<f64, TrainError>> = batch
        .par_iter()
        .map(|(s, y)| Ok(cross_entropy(&eff.forward(s)?, *y)?.0))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let mut loss = total / batch.len() as f64;
    if lambda > 0.0 && model.mode == Mode::Plain {
        loss += lambda * lipschitz_penalty(model);
    }
    Ok(loss)
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(
    model: &ConvTextClassifier,
    samples: &[(Sentence, usize)],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let eff = model.effective()?;
    let hits: Vec<Result<bool, ModelError>> = samples
        .par_iter()
        .map(|(s, y)| Ok(argmax(&eff.forward(s)?) == *y))
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn sgd_step(model: &mut ConvTextClassifier, g: &Gradients, lr: f64) {
    model.embedding.scaled_add(-lr, &g.embedding);
    for (k, gk) in model.kernels.iter_mut().zip(&g.kernels) {
        k.scaled_add(-lr, gk);
    }
    model.head.scaled_add(-lr, &g.head);
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub loss: f64,
    /// Validation accuracy, absent when nothing was held out.
    pub val_acc: Option<f64>,
    /// `M(W) · Π M(K) · M(E)` of the model a verifier would see.
    #[serde(rename = "G")]
    pub g: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean objective over the training split before the first step.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_factors: LipschitzFactors,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Trains a fresh model. In `one_lip` mode the returned model is the folded
/// plain model, so every caller verifies the same architecture.
pub fn train(
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ConvTextClassifier, TrainReport), TrainError> {
    config.validate()?;
    let present = dataset.present_classes();
    if present < 2 {
        return Err(TrainError::Degenerate(present));
    }
    let (train_set, val_set) = if config.val_size > 0 {
        split(dataset, config.val_size, config.seed)?
    } else {
        (dataset.clone(), dataset.truncated(0))
    };
    let shape = config.shape(dataset.alphabet.len(), dataset.num_classes);
    let mut init_rng = crate::rng::stream(config.seed, "init");
    let mut model = ConvTextClassifier::init(shape, config.mode.model_mode(), &mut init_rng)?;
    let opts = config.grad_options();

    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let initial_loss = objective(&model, &train_set.samples, opts.lambda)?;
    let mut shuffle_rng = crate::rng::stream(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_set.samples[i].clone()));
            let (loss, g) = backward(&model, &batch, opts)?;
            loss_sum += loss * batch.len() as f64;
            sgd_step(&mut model, &g, cyclic_lr(step, total_steps, config.lr_max));
            step += 1;
        }
        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(accuracy(&model, &val_set.samples)?)
        };
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / n as f64,
            val_acc,
            g: model.effective()?.factors().global(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let model = match model.mode {
        Mode::Normalized => model.fold_normalization()?,
        Mode::Plain => model,
    };
    let final_factors = model.factors();
    Ok((
        model,
        TrainReport {
            initial_loss,
            epochs: records,
            final_factors,
        },
    ))
}
