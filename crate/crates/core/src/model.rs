//! Character-level convolutional classifier.
//!
//! A sentence is embedded row by row, passed through `l` zero-padded
//! convolutions each followed by ReLU, sum-pooled over every output position,
//! and mapped to class scores by a linear head. There are no bias terms.
//!
//! In [`Mode::Normalized`] every stage is divided by its Lipschitz factor on
//! each forward pass, which makes every margin 1-Lipschitz with respect to the
//! Levenshtein distance. [`ConvTextClassifier::fold_normalization`] absorbs the
//! divisors into the weights and returns the equivalent plain model.

use std::borrow::Cow;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erp::{diff_norm, NormOrder};
use crate::norms::{m_emb, m_emb_local, m_head, m_kernel};
use crate::text::Sentence;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("input row dimension {got} does not match kernel input dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("class pair must differ, got ({0}, {0})")]
    SameClass(usize),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("degenerate layer norm: {0} has zero Lipschitz factor")]
    DegenerateLayer(&'static str),
    #[error("operation requires a {expected} model")]
    WrongMode { expected: &'static str },
    #[error("non-finite weight in {0}")]
    NonFinite(&'static str),
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
    pub classes: usize,
    pub norm: NormOrder,
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab", self.vocab),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("kernel", self.kernel),
            ("layers", self.layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Shape(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(ModelError::Shape(format!(
                "classes must be at least 2, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Input dimension of convolution layer `i` (0-based).
    pub fn layer_input_dim(&self, i: usize) -> usize {
        if i == 0 {
            self.embed_dim
        } else {
            self.hidden
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    Normalized,
}

/// Per-layer Lipschitz factors of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzFactors {
    /// `M(E)`
    pub embedding: f64,
    /// `M(K^(i))` for every convolution layer
    pub kernels: Vec<f64>,
    /// `M(W)`
    pub head: f64,
}

impl LipschitzFactors {
    pub fn kernel_product(&self) -> f64 {
        self.kernels.iter().product()
    }

    /// `G = M(W) · Π M(K^(i)) · M(E)`
    pub fn global(&self) -> f64 {
        self.head * self.kernel_product() * self.embedding
    }
}

/// Intermediate values of a plain forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `S E`, `m x d`
    pub embedded: Array2<f64>,
    /// Pre-activation convolution outputs, one per layer.
    pub pre_activations: Vec<Array2<f64>>,
    /// ReLU outputs, one per layer; the last is pooled.
    pub activations: Vec<Array2<f64>>,
    /// Sum over all rows of the last activation, dimension `k`.
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTextClassifier {
    pub shape: ModelShape,
    pub mode: Mode,
    /// `v x d`
    pub embedding: Array2<f64>,
    /// `q x k x r` per layer
    pub kernels: Vec<Array3<f64>>,
    /// `k x o`
    pub head: Array2<f64>,
}

/// Zero-padded full 1D convolution: input `m x r`, kernel `q x k x r`, output
/// `(m + q − 1) x k` with row `i = Σ_j K_j · â_{i+j}` over the input padded
/// by `q − 1` zero rows on both sides.
pub fn conv_full(
    input: ArrayView2<f64>,
    kernel: ArrayView3<f64>,
) -> Result<Array2<f64>, ModelError> {
    let (q, k, r) = kernel.dim();
    let (m, d) = input.dim();
    if d != r && m > 0 {
        return Err(ModelError::DimensionMismatch {
            got: d,
            expected: r,
        });
    }
    let out_len = m + q - 1;
    let mut padded = Array2::zeros((m + 2 * (q - 1), r));
    if m > 0 {
        padded.slice_mut(s![q - 1..q - 1 + m, ..]).assign(&input);
    }
    let mut out = Array2::zeros((out_len, k));
    for j in 0..q {
        let window = padded.slice(s![j..j + out_len, ..]);
        out += &window.dot(&kernel.index_axis(Axis(0), j).t());
    }
    Ok(out)
}

/// Reverse pass of [`conv_full`]: returns `(d input, d kernel)` given the
/// upstream gradient of the output.
pub fn conv_full_backward(
    input: ArrayView2<f64>,
    kernel: ArrayView3<f64>,
    grad_out: ArrayView2<f64>,
) -> (Array2<f64>, Array3<f64>) {
    let (q, k, r) = kernel.dim();
    let m = input.nrows();
    let out_len = m + q - 1;
    debug_assert_eq!(grad_out.dim(), (out_len, k));
    let mut padded = Array2::zeros((m + 2 * (q - 1), r));
    padded.slice_mut(s![q - 1..q - 1 + m, ..]).assign(&input);
    let mut grad_padded = Array2::<f64>::zeros(padded.raw_dim());
    let mut grad_kernel = Array3::zeros((q, k, r));
    for j in 0..q {
        let window = padded.slice(s![j..j + out_len, ..]);
        grad_kernel
            .index_axis_mut(Axis(0), j)
            .assign(&grad_out.t().dot(&window));
        let contrib = grad_out.dot(&kernel.index_axis(Axis(0), j));
        let mut target = grad_padded.slice_mut(s![j..j + out_len, ..]);
        target += &contrib;
    }
    let grad_input = grad_padded.slice(s![q - 1..q - 1 + m, ..]).to_owned();
    (grad_input, grad_kernel)
}

fn uniform_array<R: Rng, D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
    rng: &mut R,
    shape: Sh,
    fan_in: usize,
) -> ndarray::Array<f64, D> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

impl ConvTextClassifier {
    /// Uniform(±1/√fan_in) weights, each layer then rescaled so that its
    /// Lipschitz factor is exactly 1.
    pub fn init<R: Rng>(shape: ModelShape, mode: Mode, rng: &mut R) -> Result<Self, ModelError> {
        shape.validate()?;
        let p = shape.norm;
        let mut embedding = uniform_array(rng, (shape.vocab, shape.embed_dim), shape.vocab);
        let mut kernels = Vec::with_capacity(shape.layers);
        for i in 0..shape.layers {
            let r = shape.layer_input_dim(i);
            kernels.push(uniform_array(
                rng,
                (shape.kernel, shape.hidden, r),
                shape.kernel * r,
            ));
        }
        let mut head = uniform_array(rng, (shape.hidden, shape.classes), shape.hidden);

        let me = m_emb(embedding.view(), p);
        if me > 0.0 {
            embedding /= me;
        }
        for k in &mut kernels {
            let mk = m_kernel(k.view(), p);
            if mk > 0.0 {
                *k /= mk;
            }
        }
        let mw = m_head(head.view(), p.conjugate());
        if mw > 0.0 {
            head /= mw;
        }
        Ok(Self {
            shape,
            mode,
            embedding,
            kernels,
            head,
        })
    }

    /// Checks tensor shapes against `shape` and that all weights are finite.
    pub fn validate(&self) -> Result<(), ModelError> {
        let sh = &self.shape;
        sh.validate()?;
        if self.embedding.dim() != (sh.vocab, sh.embed_dim) {
            return Err(ModelError::Shape(format!(
                "embedding is {:?}, expected {:?}",
                self.embedding.dim(),
                (sh.vocab, sh.embed_dim)
            )));
        }
        if self.kernels.len() != sh.layers {
            return Err(ModelError::Shape(format!(
                "{} kernels for {} layers",
                self.kernels.len(),
                sh.layers
            )));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            let expected = (sh.kernel, sh.hidden, sh.layer_input_dim(i));
            if k.dim() != expected {
                return Err(ModelError::Shape(format!(
                    "kernel {} is {:?}, expected {expected:?}",
                    i + 1,
                    k.dim()
                )));
            }
        }
        if self.head.dim() != (sh.hidden, sh.classes) {
            return Err(ModelError::Shape(format!(
                "head is {:?}, expected {:?}",
                self.head.dim(),
                (sh.hidden, sh.classes)
            )));
        }
        if !self.embedding.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite("embedding"));
        }
        if !self.kernels.iter().all(|k| k.iter().all(|x| x.is_finite())) {
            return Err(ModelError::NonFinite("kernel"));
        }
        if !self.head.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite("head"));
        }
        Ok(())
    }

    pub fn norm(&self) -> NormOrder {
        self.shape.norm
    }

    /// Factors of the stored weights (for a normalized model, of the raw
    /// weights before division).
    pub fn factors(&self) -> LipschitzFactors {
        let p = self.shape.norm;
        LipschitzFactors {
            embedding: m_emb(self.embedding.view(), p),
            kernels: self.kernels.iter().map(|k| m_kernel(k.view(), p)).collect(),
            head: m_head(self.head.view(), p.conjugate()),
        }
    }

    /// Plain model with the normalization divisors absorbed into the weights.
    pub fn fold_normalization(&self) -> Result<Self, ModelError> {
        if self.mode != Mode::Normalized {
            return Err(ModelError::WrongMode {
                expected: "normalized",
            });
        }
        let f = self.factors();
        Self::fold_with(self, &f)
    }

    pub(crate) fn fold_with(&self, f: &LipschitzFactors) -> Result<Self, ModelError> {
        if f.embedding == 0.0 {
            return Err(ModelError::DegenerateLayer("embedding"));
        }
        if f.kernels.contains(&0.0) {
            return Err(ModelError::DegenerateLayer("kernel"));
        }
        if f.head == 0.0 {
            return Err(ModelError::DegenerateLayer("head"));
        }
        Ok(Self {
            shape: self.shape,
            mode: Mode::Plain,
            embedding: &self.embedding / f.embedding,
            kernels: self
                .kernels
                .iter()
                .zip(&f.kernels)
                .map(|(k, m)| k / *m)
                .collect(),
            head: &self.head / f.head,
        })
    }

    /// Same weights reinterpreted in normalized mode.
    pub fn as_normalized(&self) -> Self {
        Self {
            mode: Mode::Normalized,
            ..self.clone()
        }
    }

    /// Weights that a plain forward pass should use: the model itself in
    /// plain mode, the freshly folded model in normalized mode.
    pub fn effective(&self) -> Result<Cow<'_, Self>, ModelError> {
        match self.mode {
            Mode::Plain => Ok(Cow::Borrowed(self)),
            Mode::Normalized => Ok(Cow::Owned(self.fold_normalization()?)),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.shape.vocab) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.shape.vocab,
            });
        }
        Ok(())
    }

    /// Full forward pass keeping every intermediate.
    pub fn forward_trace(&self, s: &Sentence) -> Result<ForwardTrace, ModelError> {
        let eff = self.effective()?;
        eff.plain_trace(s.tokens())
    }

    fn plain_trace(&self, tokens: &[u32]) -> Result<ForwardTrace, ModelError> {
        self.check_tokens(tokens)?;
        let embedded = self.embed(tokens);
        let mut pre_activations = Vec::with_capacity(self.kernels.len());
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let input = activations.last().unwrap_or(&embedded);
            let z = conv_full(input.view(), k.view())?;
            activations.push(z.mapv(|x| x.max(0.0)));
            pre_activations.push(z);
        }
        let pooled = activations
            .last()
            .expect("at least one layer")
            .sum_axis(Axis(0));
        let logits = pooled.dot(&self.head);
        Ok(ForwardTrace {
            embedded,
            pre_activations,
            activations,
            pooled,
            logits,
        })
    }

    fn embed(&self, tokens: &[u32]) -> Array2<f64> {
        self.embedding.select(
            Axis(0),
            &tokens.iter().map(|&t| t as usize).collect::<Vec<_>>(),
        )
    }

    fn plain_pooled(&self, tokens: &[u32]) -> Result<Array1<f64>, ModelError> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for k in &self.kernels {
            x = conv_full(x.view(), k.view())?;
            x.mapv_inplace(|v| v.max(0.0));
        }
        Ok(x.sum_axis(Axis(0)))
    }

    /// Pooled representation (the vector multiplied by the head).
    pub fn pooled(&self, s: &Sentence) -> Result<Array1<f64>, ModelError> {
        match self.mode {
            Mode::Plain => self.plain_pooled(s.tokens()),
            Mode::Normalized => self.fold_normalization()?.plain_pooled(s.tokens()),
        }
    }

    /// Pooled representation for raw token ids, plain mode only; used by the
    /// verifiers on ball members.
    pub fn pooled_tokens(&self, tokens: &[u32]) -> Result<Array1<f64>, ModelError> {
        if self.mode != Mode::Plain {
            return Err(ModelError::WrongMode { expected: "plain" });
        }
        self.plain_pooled(tokens)
    }

    /// Class scores for one sentence.
    pub fn forward(&self, s: &Sentence) -> Result<Array1<f64>, ModelError> {
        let eff = self.effective()?;
        Ok(eff.plain_pooled(s.tokens())?.dot(&eff.head))
    }

    /// Column `c` of the head.
    pub fn head_column(&self, c: usize) -> ndarray::ArrayView1<'_, f64> {
        self.head.column(c)
    }

    /// Lipschitz constant of the margin `f_y − f_ŷ` with respect to the
    /// Levenshtein distance. With `s`, the embedding factor is the local
    /// `M(E, s)`, valid only for perturbations of `s`.
    ///
    /// Plain: `‖w_ŷ − w_y‖_r · Π M(K) · M(E[, s])`.
    /// Normalized: `‖w_ŷ − w_y‖_r / M(W) · M(E[, s]) / M(E)`, at most 1.
    ///
    /// Spectral norms are raw power-iteration estimates here; certification
    /// applies [`crate::norms::SPECTRAL_SAFETY`] on top.
    pub fn margin_lipschitz(
        &self,
        y: usize,
        other: usize,
        s: Option<&Sentence>,
    ) -> Result<f64, ModelError> {
        let o = self.shape.classes;
        for class in [y, other] {
            if class >= o {
                return Err(ModelError::ClassOutOfRange { class, classes: o });
            }
        }
        if y == other {
            return Err(ModelError::SameClass(y));
        }
        let p = self.shape.norm;
        let head_diff = diff_norm(self.head.column(other), self.head.column(y), p.conjugate());
        let emb = match s {
            Some(s) => {
                self.check_tokens(s.tokens())?;
                m_emb_local(self.embedding.view(), s.tokens(), p)
            }
            None => m_emb(self.embedding.view(), p),
        };
        match self.mode {
            Mode::Plain => {
                let kernels: f64 = self.kernels.iter().map(|k| m_kernel(k.view(), p)).product();
                Ok(head_diff * kernels * emb)
            }
            Mode::Normalized => {
                let mw = m_head(self.head.view(), p.conjugate());
                let me = m_emb(self.embedding.view(), p);
                if mw == 0.0 {
                    return Err(ModelError::DegenerateLayer("head"));
                }
                if me == 0.0 {
                    return Err(ModelError::DegenerateLayer("embedding"));
                }
                Ok((head_diff / mw) * (emb / me))
            }
        }
    }
}
