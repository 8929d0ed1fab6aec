//! Verifiers and reports.
//!
//! - LipsLev: one forward pass, margins divided by the margin Lipschitz
//!   constants; sound for every sentence within the certified radius.
//! - Brute force: classifies every member of the Levenshtein ball; exact.
//! - IBP: boxes the pooled vectors of the radius-1 ball and bounds the head
//!   margin over the box; sound but looser than brute force.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erp::diff_norm;
use crate::model::{ConvTextClassifier, ModelError};
use crate::norms::{m_kernel, EmbeddingTable, SPECTRAL_SAFETY};
use crate::text::{enumerate_ball, enumerate_ball_k, Sentence};
use crate::training::argmax;
use crate::NormOrder;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("radius must be at least 1")]
    ZeroRadius,
    #[error(
        "brute force at k = {k} on a sentence of length {len} exceeds the cap of {cap}; \
         pass --allow-expensive to run it anyway"
    )]
    Expensive { k: usize, len: usize, cap: usize },
    #[error("IBP supports radius 1 only, got {0}")]
    IbpRadius(usize),
    #[error("unknown verifier {0:?} (expected lipslev, brute or ibp)")]
    UnknownVerifier(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("bucket width must be positive")]
    ZeroBucket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verifier {
    #[serde(rename = "lipslev")]
    LipsLev,
    Brute,
    Ibp,
}

impl Verifier {
    pub fn as_str(self) -> &'static str {
        match self {
            Verifier::LipsLev => "lipslev",
            Verifier::Brute => "brute",
            Verifier::Ibp => "ibp",
        }
    }
}

impl fmt::Display for Verifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verifier {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "lipslev" => Ok(Verifier::LipsLev),
            "brute" | "bruteforce" | "brute_force" => Ok(Verifier::Brute),
            "ibp" => Ok(Verifier::Ibp),
            other => Err(VerifyError::UnknownVerifier(other.to_string())),
        }
    }
}

/// Largest integer `n ≤ k_max` with `n · G < g`, or −1 when `g ≤ 0`.
/// `G = 0` with `g > 0` gives `k_max`: the margin cannot change.
pub fn certified_radius(g: f64, lipschitz: f64, k_max: usize) -> i64 {
    let k_max = k_max as i64;
    if g.is_nan() || g <= 0.0 {
        return -1;
    }
    if lipschitz <= 0.0 {
        return k_max;
    }
    let ratio = g / lipschitz;
    if ratio >= k_max as f64 + 1.0 {
        return k_max;
    }
    let mut n = ratio.floor() as i64;
    // the float floor can be off by one; the strict test decides
    while n > 0 && n as f64 * lipschitz >= g {
        n -= 1;
    }
    while ((n + 1) as f64) * lipschitz < g && n < k_max {
        n += 1;
    }
    n.min(k_max)
}

/// Margin and constant against one competing class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBound {
    pub other: usize,
    /// `g = f_y − f_other`
    pub margin: f64,
    /// `G_{y, other}`, including the spectral safety factor when `p = 2`
    pub lipschitz: f64,
    pub radius: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertResult {
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub pairs: Vec<PairBound>,
    /// −1 when not certified even at distance 0.
    pub radius: i64,
    pub seconds: f64,
}

/// Precomputed constants for LipsLev on one plain model.
#[derive(Clone, Debug)]
pub struct Certifier<'a> {
    model: std::borrow::Cow<'a, ConvTextClassifier>,
    /// `Π M(K)`, with the spectral safety factor per layer for `p = 2`.
    kernel_product: f64,
    table: EmbeddingTable,
    /// `head_diff[y][j] = ‖w_j − w_y‖_r`
    head_diff: Vec<Vec<f64>>,
    pub k_max: usize,
    /// Use `M(E, s)` rather than `M(E)`.
    pub local: bool,
}

impl<'a> Certifier<'a> {
    /// Folds a normalized model first.
    pub fn new(model: &'a ConvTextClassifier, k_max: usize) -> Result<Self, VerifyError> {
        let model = model.effective()?;
        let p = model.shape.norm;
        let safety = if p == NormOrder::L2 {
            SPECTRAL_SAFETY
        } else {
            1.0
        };
        let kernel_product = model
            .kernels
            .iter()
            .map(|k| m_kernel(k.view(), p) * safety)
            .product();
        let table = EmbeddingTable::new(model.embedding.view(), p);
        let o = model.shape.classes;
        let r = p.conjugate();
        let head_diff = (0..o)
            .map(|y| {
                (0..o)
                    .map(|j| diff_norm(model.head.column(j), model.head.column(y), r))
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            kernel_product,
            table,
            head_diff,
            k_max,
            local: true,
        })
    }

    pub fn model(&self) -> &ConvTextClassifier {
        &self.model
    }

    /// `G_{y, j}` used for certification around `s`.
    pub fn pair_constant(&self, s: &Sentence, y: usize, j: usize) -> f64 {
        let emb = if self.local {
            self.table.local(s.tokens())
        } else {
            self.table.global()
        };
        self.head_diff[y][j] * self.kernel_product * emb
    }

    /// LipsLev certificate for `(s, y)` from a single forward pass.
    pub fn verify(&self, s: &Sentence, y: usize) -> Result<CertResult, VerifyError> {
        let start = Instant::now();
        let o = self.model.shape.classes;
        if y >= o {
            return Err(VerifyError::Label {
                label: y,
                classes: o,
            });
        }
        let logits = self.model.forward(s)?;
        let predicted = argmax(&logits);
        let correct = predicted == y;
        let emb = if self.local {
            self.table.local(s.tokens())
        } else {
            self.table.global()
        };
        let mut pairs = Vec::with_capacity(o - 1);
        let mut radius = self.k_max as i64;
        for j in (0..o).filter(|&j| j != y) {
            let margin = logits[y] - logits[j];
            let lipschitz = self.head_diff[y][j] * self.kernel_product * emb;
            let r = certified_radius(margin, lipschitz, self.k_max);
            radius = radius.min(r);
            pairs.push(PairBound {
                other: j,
                margin,
                lipschitz,
                radius: r,
            });
        }
        if !correct {
            radius = -1;
        }
        Ok(CertResult {
            label: y,
            predicted,
            correct,
            pairs,
            radius,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// One-shot LipsLev with the local embedding constant.
pub fn lipslev_verify(
    model: &ConvTextClassifier,
    s: &Sentence,
    y: usize,
    k_max: usize,
) -> Result<CertResult, VerifyError> {
    Certifier::new(model, k_max)?.verify(s, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BruteOptions {
    /// Permit `k ≥ 2` on sentences longer than `length_cap`.
    pub allow_expensive: bool,
    pub length_cap: usize,
    /// Skip duplicate ball members at `k = 1`.
    pub dedup: bool,
}

impl Default for BruteOptions {
    fn default() -> Self {
        Self {
            allow_expensive: false,
            length_cap: 12,
            dedup: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteResult {
    pub verified: bool,
    /// First ball member not classified as the label.
    pub witness: Option<Sentence>,
    /// Ball members evaluated.
    pub evaluated: usize,
    /// Deletions excluded from the ball because they would produce the
    /// empty sentence.
    pub skipped_empty: usize,
    pub seconds: f64,
}

fn classified_as(model: &ConvTextClassifier, s: &Sentence, y: usize) -> Result<bool, ModelError> {
    Ok(argmax(&model.forward(s)?) == y)
}

/// Exact check of every sentence within distance `k` (the center included).
/// `model` must be plain; fold normalized models first.
pub fn brute_force_verify(
    model: &ConvTextClassifier,
    s: &Sentence,
    y: usize,
    k: usize,
    opts: BruteOptions,
) -> Result<BruteResult, VerifyError> {
    let start = Instant::now();
    if k == 0 {
        return Err(VerifyError::ZeroRadius);
    }
    if k >= 2 && !opts.allow_expensive && s.len() > opts.length_cap {
        return Err(VerifyError::Expensive {
            k,
            len: s.len(),
            cap: opts.length_cap,
        });
    }
    let o = model.shape.classes;
    if y >= o {
        return Err(VerifyError::Label {
            label: y,
            classes: o,
        });
    }
    let model = model.effective()?;
    let v = model.shape.vocab;
    let mut evaluated = 0;
    let mut witness = None;
    let skipped_empty;
    if k == 1 {
        for t in enumerate_ball(s, v, opts.dedup) {
            evaluated += 1;
            if !classified_as(&model, &t, y)? {
                witness = Some(t);
                break;
            }
        }
        // counted for the whole ball even when a witness stops the scan
        skipped_empty = usize::from(s.len() == 1);
    } else {
        let (members, skipped) = enumerate_ball_k(s, v, k);
        skipped_empty = skipped;
        for t in members {
            evaluated += 1;
            if !classified_as(&model, &t, y)? {
                witness = Some(t);
                break;
            }
        }
    }
    Ok(BruteResult {
        verified: witness.is_none(),
        witness,
        evaluated,
        skipped_empty,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Elementwise bounds on a vector.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalBox {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl IntervalBox {
    pub fn point(x: &Array1<f64>) -> Self {
        Self {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    /// Grows the box to contain `x`.
    pub fn include(&mut self, x: ArrayView1<f64>) {
        self.lower.zip_mut_with(&x, |l, &v| *l = l.min(v));
        self.upper.zip_mut_with(&x, |u, &v| *u = u.max(v));
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| l <= v && v <= u)
    }

    /// Lower bound of `cᵀh` over the box: `Σ c⁺ l + c⁻ u`.
    pub fn linear_lower_bound(&self, c: ArrayView1<f64>) -> f64 {
        c.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&w, (&l, &u))| if w >= 0.0 { w * l } else { w * u })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IbpResult {
    pub verified: bool,
    /// Lower bound of `f_y − f_j` over the box, for each `j ≠ y`.
    pub margin_lower_bounds: Vec<(usize, f64)>,
    pub bounds: IntervalBox,
    pub seconds: f64,
}

/// Radius-1 IBP baseline: exact pooled vectors for every ball member, then
/// an interval over-approximation through the head.
pub fn ibp_verify(
    model: &ConvTextClassifier,
    s: &Sentence,
    y: usize,
) -> Result<IbpResult, VerifyError> {
    let start = Instant::now();
    let o = model.shape.classes;
    if y >= o {
        return Err(VerifyError::Label {
            label: y,
            classes: o,
        });
    }
    let model = model.effective()?;
    let v = model.shape.vocab;
    let mut bounds = IntervalBox::point(&model.pooled_tokens(s.tokens())?);
    for t in enumerate_ball(s, v, true).skip(1) {
        bounds.include(model.pooled_tokens(t.tokens())?.view());
    }
    let wy = model.head.column(y);
    let mut margin_lower_bounds = Vec::with_capacity(o - 1);
    for j in (0..o).filter(|&j| j != y) {
        let c = &wy - &model.head.column(j);
        margin_lower_bounds.push((j, bounds.linear_lower_bound(c.view())));
    }
    Ok(IbpResult {
        verified: margin_lower_bounds.iter().all(|&(_, b)| b > 0.0),
        margin_lower_bounds,
        bounds,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One verifier's outcome on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub verifier: Verifier,
    pub clean_correct: bool,
    /// LipsLev: certified radius. Brute force and IBP: the checked radius if
    /// verified, 0 if correct but not verified, −1 if misclassified. In all
    /// cases the sample counts as verified at `k` iff this is `≥ k`.
    pub radius_or_verdict: i64,
    pub seconds: f64,
    pub length: usize,
}

impl SampleRecord {
    pub fn verified_at(&self, k: usize) -> bool {
        self.radius_or_verdict >= k as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Largest radius reported for LipsLev.
    pub k_max: usize,
    /// Radius checked by brute force.
    pub brute_k: usize,
    pub brute: BruteOptions,
    /// LipsLev with `M(E, s)` (default) instead of the global `M(E)`.
    pub local: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k_max: 10,
            brute_k: 1,
            brute: BruteOptions::default(),
            local: true,
        }
    }
}

/// Length-bucketed verified accuracy row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub start: usize,
    pub end: usize,
    pub samples: usize,
    pub verified: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub verifier: Verifier,
    pub samples: usize,
    pub clean_accuracy: f64,
    /// `(k, verified accuracy)` for each reported radius.
    pub verified: Vec<(usize, f64)>,
    pub mean_seconds: f64,
    /// Mean length of samples verified at `k = 1`, and of the rest.
    pub mean_length_verified: Option<f64>,
    pub mean_length_unverified: Option<f64>,
}

/// Violations of the subset relations against brute force at `k = 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SoundnessAudit {
    /// Samples checked by brute force at `k = 1`.
    pub checked: usize,
    /// LipsLev radius ≥ 1 but a misclassified neighbor exists.
    pub lipslev_violations: Vec<usize>,
    /// IBP verified but a misclassified neighbor exists.
    pub ibp_violations: Vec<usize>,
    /// Stored LipsLev pairs whose radius does not re-derive from `g` and `G`.
    pub floor_mismatches: Vec<usize>,
}

impl SoundnessAudit {
    pub fn is_clean(&self) -> bool {
        self.lipslev_violations.is_empty()
            && self.ibp_violations.is_empty()
            && self.floor_mismatches.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub records: Vec<SampleRecord>,
    pub reports: Vec<VerifierReport>,
    /// Present when brute force ran at `k = 1`.
    pub audit: Option<SoundnessAudit>,
    /// Empty-sentence deletions excluded from radius-1 balls.
    pub skipped_empty: usize,
}

struct SampleOutcome {
    records: Vec<SampleRecord>,
    floor_ok: bool,
    skipped_empty: usize,
}

fn verdict(correct: bool, verified: bool, k: usize) -> i64 {
    if !correct {
        -1
    } else if verified {
        k as i64
    } else {
        0
    }
}

/// Runs the selected verifiers over every sample (in parallel, results in
/// sample order) and aggregates reports and the soundness audit.
pub fn evaluate(
    model: &ConvTextClassifier,
    samples: &[(Sentence, usize)],
    verifiers: &[Verifier],
    opts: EvalOptions,
) -> Result<Evaluation, VerifyError> {
    if samples.is_empty() || verifiers.is_empty() {
        return Err(VerifyError::Empty);
    }
    let mut certifier = Certifier::new(model, opts.k_max)?;
    certifier.local = opts.local;
    let plain = certifier.model().clone();
    let mut verifiers = verifiers.to_vec();
    verifiers.sort();
    verifiers.dedup();

    let outcomes: Vec<Result<SampleOutcome, VerifyError>> = samples
        .par_iter()
        .enumerate()
        .map(|(id, (s, y))| {
            let mut records = Vec::with_capacity(verifiers.len());
            let mut floor_ok = true;
            let mut skipped_empty = 0;
            let clean_correct = classified_as(&plain, s, *y)?;
            for &v in &verifiers {
                let (value, seconds) = match v {
                    Verifier::LipsLev => {
                        let c = certifier.verify(s, *y)?;
                        floor_ok &= c.pairs.iter().all(|pb| {
                            pb.radius == certified_radius(pb.margin, pb.lipschitz, opts.k_max)
                        });
                        (c.radius, c.seconds)
                    }
                    Verifier::Brute => {
                        let b = brute_force_verify(&plain, s, *y, opts.brute_k, opts.brute)?;
                        if opts.brute_k == 1 {
                            skipped_empty += b.skipped_empty;
                        }
                        (verdict(clean_correct, b.verified, opts.brute_k), b.seconds)
                    }
                    Verifier::Ibp => {
                        let r = ibp_verify(&plain, s, *y)?;
                        (verdict(clean_correct, r.verified, 1), r.seconds)
                    }
                };
                records.push(SampleRecord {
                    sample_id: id,
                    verifier: v,
                    clean_correct,
                    radius_or_verdict: value,
                    seconds,
                    length: s.len(),
                });
            }
            Ok(SampleOutcome {
                records,
                floor_ok,
                skipped_empty,
            })
        })
        .collect();

    let mut records = Vec::with_capacity(samples.len() * verifiers.len());
    let mut floor_mismatches = Vec::new();
    let mut skipped_empty = 0;
    for (id, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        if !o.floor_ok {
            floor_mismatches.push(id);
        }
        skipped_empty += o.skipped_empty;
        records.extend(o.records);
    }
    let audit = (verifiers.contains(&Verifier::Brute) && opts.brute_k == 1).then(|| {
        let mut a = audit(&records);
        a.floor_mismatches = floor_mismatches;
        a
    });
    let reports = summarize(&records, opts.k_max)?;
    Ok(Evaluation {
        records,
        reports,
        audit,
        skipped_empty,
    })
}

/// Subset relations against brute force at `k = 1`, from stored records.
pub fn audit(records: &[SampleRecord]) -> SoundnessAudit {
    let mut by_sample: BTreeMap<usize, BTreeMap<Verifier, &SampleRecord>> = BTreeMap::new();
    for r in records {
        by_sample
            .entry(r.sample_id)
            .or_default()
            .insert(r.verifier, r);
    }
    let mut a = SoundnessAudit::default();
    for (id, rs) in by_sample {
        let Some(brute) = rs.get(&Verifier::Brute) else {
            continue;
        };
        a.checked += 1;
        let robust = brute.verified_at(1);
        if rs.get(&Verifier::LipsLev).is_some_and(|r| r.verified_at(1)) && !robust {
            a.lipslev_violations.push(id);
        }
        if rs.get(&Verifier::Ibp).is_some_and(|r| r.verified_at(1)) && !robust {
            a.ibp_violations.push(id);
        }
    }
    a
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-verifier aggregates. LipsLev is reported for `k = 1..=k_max`, the
/// others at the largest radius they recorded.
pub fn summarize(
    records: &[SampleRecord],
    k_max: usize,
) -> Result<Vec<VerifierReport>, VerifyError> {
    if records.is_empty() {
        return Err(VerifyError::Empty);
    }
    let mut groups: BTreeMap<Verifier, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.verifier).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (verifier, rs) in groups {
        let n = rs.len() as f64;
        let ks: Vec<usize> = match verifier {
            Verifier::LipsLev => (1..=k_max.max(1)).collect(),
            _ => {
                let top = rs
                    .iter()
                    .map(|r| r.radius_or_verdict)
                    .max()
                    .unwrap_or(1)
                    .max(1);
                vec![top as usize]
            }
        };
        let verified = ks
            .iter()
            .map(|&k| (k, rs.iter().filter(|r| r.verified_at(k)).count() as f64 / n))
            .collect();
        out.push(VerifierReport {
            verifier,
            samples: rs.len(),
            clean_accuracy: rs.iter().filter(|r| r.clean_correct).count() as f64 / n,
            verified,
            mean_seconds: rs.iter().map(|r| r.seconds).sum::<f64>() / n,
            mean_length_verified: mean(
                rs.iter()
                    .filter(|r| r.verified_at(1))
                    .map(|r| r.length as f64),
            ),
            mean_length_unverified: mean(
                rs.iter()
                    .filter(|r| !r.verified_at(1))
                    .map(|r| r.length as f64),
            ),
        });
    }
    Ok(out)
}

/// Verified accuracy at radius `k` per length bucket `[start, start + width)`.
pub fn length_buckets(
    records: &[SampleRecord],
    verifier: Verifier,
    k: usize,
    width: usize,
) -> Result<Vec<BucketRow>, VerifyError> {
    if width == 0 {
        return Err(VerifyError::ZeroBucket);
    }
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.verifier == verifier) {
        let e = buckets.entry(r.length / width).or_default();
        e.0 += 1;
        e.1 += usize::from(r.verified_at(k));
    }
    if buckets.is_empty() {
        return Err(VerifyError::Empty);
    }
    Ok(buckets
        .into_iter()
        .map(|(b, (n, v))| BucketRow {
            start: b * width,
            end: (b + 1) * width,
            samples: n,
            verified: v as f64 / n as f64,
        })
        .collect())
}

/// Aligned comparison table: verifier, k, clean %, verified %, mean seconds.
pub fn comparison_table(reports: &[VerifierReport]) -> String {
    let mut out = format!(
        "{:<9} {:>3} {:>8} {:>10} {:>12}\n",
        "verifier", "k", "clean%", "verified%", "mean_s"
    );
    for r in reports {
        for &(k, acc) in &r.verified {
            let _ = writeln!(
                out,
                "{:<9} {:>3} {:>8.2} {:>10.2} {:>12.3e}",
                r.verifier.as_str(),
                k,
                100.0 * r.clean_accuracy,
                100.0 * acc,
                r.mean_seconds
            );
        }
    }
    out
}

/// Bucket table plus mean lengths of verified and unverified samples.
pub fn length_table(
    records: &[SampleRecord],
    verifier: Verifier,
    k: usize,
    width: usize,
) -> Result<String, VerifyError> {
    let rows = length_buckets(records, verifier, k, width)?;
    let mut out = format!("{:>13} {:>8} {:>10}\n", "length", "samples", "verified%");
    for r in &rows {
        let _ = writeln!(
            out,
            "{:>13} {:>8} {:>10.2}",
            format!("[{}, {})", r.start, r.end),
            r.samples,
            100.0 * r.verified
        );
    }
    let sel: Vec<&SampleRecord> = records.iter().filter(|r| r.verifier == verifier).collect();
    let fmt_mean = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{v:.2}"));
    let _ = writeln!(
        out,
        "mean length verified: {}  unverified: {}",
        fmt_mean(mean(
            sel.iter()
                .filter(|r| r.verified_at(k))
                .map(|r| r.length as f64)
        )),
        fmt_mean(mean(
            sel.iter()
                .filter(|r| !r.verified_at(k))
                .map(|r| r.length as f64)
        ))
    );
    Ok(out)
}
