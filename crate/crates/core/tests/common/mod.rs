//! Independent reference implementations shared by the integration suites.
//! Nothing here calls into the library's numerics; each function is written
//! straight from its definition.

#![allow(dead_code, clippy::needless_range_loop)]

use certilev::data::{synthetic_task, LabeledDataset};
use certilev::training::{TrainConfig, TrainMode};
use certilev::{ConvTextClassifier, NormOrder};
use ndarray::{Array1, Array2};

/// Full-matrix Levenshtein table.
pub fn lev_oracle(a: &[u32], b: &[u32]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        d[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[m][n]
}

pub fn norm_oracle(x: &[f64], p: NormOrder) -> f64 {
    match p {
        NormOrder::L1 => x.iter().map(|v| v.abs()).sum(),
        NormOrder::L2 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NormOrder::Inf => x.iter().map(|v| v.abs()).fold(0.0, f64::max),
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Largest singular value via the eigenvalues of `MᵀM`.
pub fn spectral_oracle(m: &Array2<f64>) -> f64 {
    let (r, c) = m.dim();
    let mut g = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            g[i][j] = (0..r).map(|k| m[[k, i]] * m[[k, j]]).sum();
        }
    }
    jacobi_eigenvalues(g)
        .into_iter()
        .fold(0.0, f64::max)
        .max(0.0)
        .sqrt()
}

/// Induced p→p norm of a matrix acting on column vectors.
pub fn opnorm_oracle(m: &Array2<f64>, p: NormOrder) -> f64 {
    let (r, c) = m.dim();
    match p {
        NormOrder::L1 => (0..c)
            .map(|j| (0..r).map(|i| m[[i, j]].abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormOrder::Inf => (0..r)
            .map(|i| (0..c).map(|j| m[[i, j]].abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormOrder::L2 => spectral_oracle(m),
    }
}

pub fn kernel_factor_oracle(model: &ConvTextClassifier, layer: usize, p: NormOrder) -> f64 {
    let k = &model.kernels[layer];
    (0..k.dim().0)
        .map(|j| {
            let slice = k.index_axis(ndarray::Axis(0), j).to_owned();
            opnorm_oracle(&slice, p)
        })
        .sum()
}

fn rows(e: &Array2<f64>) -> Vec<Vec<f64>> {
    e.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// `M(E)`, or `M(E, P)` when `tokens` is given.
pub fn emb_factor_oracle(e: &Array2<f64>, tokens: Option<&[u32]>, p: NormOrder) -> f64 {
    let rs = rows(e);
    let mut best = rs.iter().map(|r| norm_oracle(r, p)).fold(0.0, f64::max);
    for i in 0..rs.len() {
        if tokens.is_some_and(|t| !t.contains(&(i as u32))) {
            continue;
        }
        for j in 0..rs.len() {
            best = best.max(norm_oracle(&diff(&rs[i], &rs[j]), p));
        }
    }
    best
}

pub fn head_column(model: &ConvTextClassifier, c: usize) -> Vec<f64> {
    model.head.column(c).to_vec()
}

pub fn head_factor_oracle(model: &ConvTextClassifier, r: NormOrder) -> f64 {
    let o = model.head.ncols();
    let mut best = 0.0f64;
    for a in 0..o {
        for b in 0..o {
            best = best.max(norm_oracle(
                &diff(&head_column(model, a), &head_column(model, b)),
                r,
            ));
        }
    }
    best
}

/// `‖w_j − w_y‖_r · Π M(K) · M(E[, P])` of a plain model.
pub fn margin_constant_oracle(
    model: &ConvTextClassifier,
    y: usize,
    j: usize,
    tokens: Option<&[u32]>,
) -> f64 {
    let p = model.shape.norm;
    let head = norm_oracle(
        &diff(&head_column(model, j), &head_column(model, y)),
        p.conjugate(),
    );
    let kernels: f64 = (0..model.kernels.len())
        .map(|i| kernel_factor_oracle(model, i, p))
        .product();
    head * kernels * emb_factor_oracle(&model.embedding, tokens, p)
}

/// Scalar-loop forward pass. With `normalized`, every stage is divided by
/// its factor as computed by the oracles above.
pub fn forward_oracle(model: &ConvTextClassifier, tokens: &[u32], normalized: bool) -> Vec<f64> {
    let p = model.shape.norm;
    let scale_e = if normalized {
        emb_factor_oracle(&model.embedding, None, p)
    } else {
        1.0
    };
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            model
                .embedding
                .row(t as usize)
                .iter()
                .map(|v| v / scale_e)
                .collect()
        })
        .collect();
    for (li, k) in model.kernels.iter().enumerate() {
        let (q, hidden, r) = k.dim();
        let scale_k = if normalized {
            kernel_factor_oracle(model, li, p)
        } else {
            1.0
        };
        let m = x.len();
        let mut out = vec![vec![0.0; hidden]; m + q - 1];
        for (i, row) in out.iter_mut().enumerate() {
            for j in 0..q {
                // padded index i + j maps to input row i + j − (q − 1)
                let idx = i + j;
                if idx < q - 1 || idx - (q - 1) >= m {
                    continue;
                }
                let input = &x[idx - (q - 1)];
                for (a, v) in row.iter_mut().enumerate() {
                    for c in 0..r {
                        *v += k[[j, a, c]] * input[c] / scale_k;
                    }
                }
            }
        }
        x = out
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
    }
    let hidden = model.head.nrows();
    let mut pooled = vec![0.0; hidden];
    for row in &x {
        for (a, v) in row.iter().enumerate() {
            pooled[a] += v;
        }
    }
    let scale_w = if normalized {
        head_factor_oracle(model, p.conjugate())
    } else {
        1.0
    };
    (0..model.head.ncols())
        .map(|c| {
            (0..hidden)
                .map(|a| pooled[a] * model.head[[a, c]])
                .sum::<f64>()
                / scale_w
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Every non-empty sequence over `v` symbols of length `m − k ..= m + k`
/// whose Levenshtein distance to `s` is at most `k`, found by exhaustive
/// generation and DP filtering.
pub fn ball_oracle(s: &[u32], v: u32, k: usize) -> Vec<Vec<u32>> {
    let m = s.len();
    let mut out = Vec::new();
    for len in m.saturating_sub(k).max(1)..=m + k {
        let total = (v as usize).pow(len as u32);
        for code in 0..total {
            let mut c = code;
            let t: Vec<u32> = (0..len)
                .map(|_| {
                    let d = (c % v as usize) as u32;
                    c /= v as usize;
                    d
                })
                .collect();
            if lev_oracle(s, &t) <= k {
                out.push(t);
            }
        }
    }
    out
}

pub fn to_array(v: &[f64]) -> Array1<f64> {
    Array1::from_vec(v.to_vec())
}

/// The desk-scale task used across suites.
pub fn toy_task(seed: u64, n: usize, classes: usize) -> LabeledDataset {
    synthetic_task(seed, n, 10..=40, classes)
}

/// Short-sentence variant that keeps exhaustive ball checks cheap.
pub fn short_task(seed: u64, n: usize) -> LabeledDataset {
    synthetic_task(seed, n, 4..=14, 2)
}

/// Toy architecture: `d = 8`, `k = 8`, `q = 3`, one layer, default recipe
/// otherwise.
pub fn toy_config(mode: TrainMode, p: NormOrder, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(mode, p);
    c.embed_dim = 8;
    c.hidden = 8;
    c.kernel = 3;
    c.val_size = 200;
    c.seed = seed;
    c
}
