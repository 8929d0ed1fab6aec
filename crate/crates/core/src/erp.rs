//! Edit distance with Real Penalty (ERP) between sequences of real vectors.
//!
//! A gap costs the norm of the skipped vector and a match costs the norm of
//! the difference. On one-hot rows with the max norm this is exactly the
//! Levenshtein distance, which is what lets layer-wise Lipschitz constants
//! compose into an edit-distance certificate.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A sequence of `m` row vectors of dimension `d`, stored as an `m x d`
/// matrix. `m = 0` is the empty sequence.
pub type VecSequence = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum ErpError {
    #[error("row dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("padding oracle limited to m + n <= {max}, got {got}")]
    TooLarge { got: usize, max: usize },
}

/// One of the three supported lp norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Inf,
}

impl NormOrder {
    pub const ALL: [NormOrder; 3] = [NormOrder::L1, NormOrder::L2, NormOrder::Inf];

    /// Hölder conjugate: 1 <-> inf, 2 <-> 2.
    pub fn conjugate(self) -> NormOrder {
        match self {
            NormOrder::L1 => NormOrder::Inf,
            NormOrder::L2 => NormOrder::L2,
            NormOrder::Inf => NormOrder::L1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormOrder::L1 => "1",
            NormOrder::L2 => "2",
            NormOrder::Inf => "inf",
        }
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(NormOrder::L1),
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "infinity" | "linf" => Ok(NormOrder::Inf),
            other => Err(format!("unsupported norm {other:?}; expected 1, 2 or inf")),
        }
    }
}

pub fn vec_norm(x: ArrayView1<f64>, p: NormOrder) -> f64 {
    match p {
        NormOrder::L1 => x.iter().map(|v| v.abs()).sum(),
        NormOrder::L2 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NormOrder::Inf => x.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Norm of `a - b` without allocating.
pub fn diff_norm(a: ArrayView1<f64>, b: ArrayView1<f64>, p: NormOrder) -> f64 {
    let diffs = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs());
    match p {
        NormOrder::L1 => diffs.sum(),
        NormOrder::L2 => diffs.map(|v| v * v).sum::<f64>().sqrt(),
        NormOrder::Inf => diffs.fold(0.0, f64::max),
    }
}

fn check_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<(), ErpError> {
    if a.nrows() > 0 && b.nrows() > 0 && a.ncols() != b.ncols() {
        return Err(ErpError::DimensionMismatch(a.ncols(), b.ncols()));
    }
    Ok(())
}

/// ERP distance by O(mn) dynamic programming.
pub fn erp_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, p: NormOrder) -> Result<f64, ErpError> {
    check_dims(&a, &b)?;
    let n = b.nrows();
    let a_norms: Vec<f64> = a.rows().into_iter().map(|r| vec_norm(r, p)).collect();
    let b_norms: Vec<f64> = b.rows().into_iter().map(|r| vec_norm(r, p)).collect();

    // prev[j] = D(i-1, j), cur[j] = D(i, j)
    let mut prev = vec![0.0; n + 1];
    for j in 0..n {
        prev[j + 1] = prev[j] + b_norms[j];
    }
    let mut cur = vec![0.0; n + 1];
    for (ai, &a_norm) in a.rows().into_iter().zip(&a_norms) {
        cur[0] = prev[0] + a_norm;
        for j in 0..n {
            let del_a = prev[j + 1] + a_norm;
            let del_b = cur[j] + b_norms[j];
            let matched = prev[j] + diff_norm(ai, b.row(j), p);
            cur[j + 1] = del_a.min(del_b).min(matched);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[n])
}

/// Largest `m + n` accepted by [`erp_padding_oracle`].
pub const PADDING_ORACLE_MAX: usize = 10;

/// ERP as the minimum over all zero paddings of both sequences to length
/// `m + n` of the summed row-wise distance. Exponential; test oracle only.
pub fn erp_padding_oracle(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    p: NormOrder,
) -> Result<f64, ErpError> {
    check_dims(&a, &b)?;
    let (m, n) = (a.nrows(), b.nrows());
    let len = m + n;
    if len > PADDING_ORACLE_MAX {
        return Err(ErpError::TooLarge {
            got: len,
            max: PADDING_ORACLE_MAX,
        });
    }
    if len == 0 {
        return Ok(0.0);
    }
    let dim = if m > 0 { a.ncols() } else { b.ncols() };
    let zero = ndarray::Array1::<f64>::zeros(dim);

    // a set bit in a placement mask marks a slot holding a real row
    let masks = |count: usize| -> Vec<u32> {
        (0u32..(1 << len))
            .filter(|mask| mask.count_ones() as usize == count)
            .collect()
    };
    let expand = |mask: u32| -> Vec<Option<usize>> {
        let mut next = 0;
        (0..len)
            .map(|slot| {
                if mask & (1 << slot) != 0 {
                    next += 1;
                    Some(next - 1)
                } else {
                    None
                }
            })
            .collect()
    };

    let a_layouts: Vec<Vec<Option<usize>>> = masks(m).into_iter().map(expand).collect();
    let b_layouts: Vec<Vec<Option<usize>>> = masks(n).into_iter().map(expand).collect();

    let mut best = f64::INFINITY;
    for la in &a_layouts {
        for lb in &b_layouts {
            let mut total = 0.0;
            for slot in 0..len {
                let x = la[slot].map_or(zero.view(), |i| a.row(i));
                let y = lb[slot].map_or(zero.view(), |j| b.row(j));
                total += diff_norm(x, y, p);
                if total >= best {
                    break;
                }
            }
            best = best.min(total);
        }
    }
    Ok(best)
}

/// Elementwise ReLU.
pub fn relu(a: &VecSequence) -> VecSequence {
    a.mapv(|x| x.max(0.0))
}

/// One-hot rows for a token sequence over `v` symbols.
pub fn one_hot(tokens: &[u32], v: usize) -> VecSequence {
    let mut out = Array2::zeros((tokens.len(), v));
    for (i, &t) in tokens.iter().enumerate() {
        out[[i, t as usize]] = 1.0;
    }
    out
}
