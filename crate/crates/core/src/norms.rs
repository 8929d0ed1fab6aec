//! Induced operator norms and the layer-wise Lipschitz factors of the
//! convolutional classifier, with the subgradients used for regularized and
//! fully differentiated one-Lipschitz training.
//!
//! Conventions: an embedding matrix is `v x d` (one row per symbol), a kernel
//! slice is `k x r` and acts on column vectors, and the head is `k x o` with
//! one column per class.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::erp::{diff_norm, vec_norm, NormOrder};

/// Multiplier applied to spectral norms wherever an upper bound is required
/// (certification), covering the rounding error of the SVD. Never applied
/// during training.
pub const SPECTRAL_SAFETY: f64 = 1.0 + 1e-6;

/// Sweep limit handed to the SVD before it gives up.
const SVD_MAX_ITERS: usize = 10_000;

/// Largest singular value with its singular pair: `M v = sigma u`.
#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub left: Array1<f64>,
    pub right: Array1<f64>,
}

/// Largest singular value of `m` from a full SVD. Power iteration is not
/// used because its convergence rate is the squared ratio of the top two
/// singular values, which random kernel slices routinely push close to one,
/// and a truncated iteration then underestimates the norm. Non-finite
/// input yields a NaN `sigma`.
pub fn spectral_norm(m: ArrayView2<f64>) -> SpectralEstimate {
    let (rows, cols) = m.dim();
    let nan = || SpectralEstimate {
        sigma: f64::NAN,
        left: Array1::zeros(rows),
        right: Array1::zeros(cols),
    };
    if rows == 0 || cols == 0 {
        return SpectralEstimate {
            sigma: 0.0,
            left: Array1::zeros(rows),
            right: Array1::zeros(cols),
        };
    }
    if m.iter().any(|x| !x.is_finite()) {
        return nan();
    }
    let dm = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
    let Some(svd) = dm.try_svd(true, true, f64::EPSILON, SVD_MAX_ITERS) else {
        return nan();
    };
    let (Some(u), Some(v_t)) = (svd.u.as_ref(), svd.v_t.as_ref()) else {
        return nan();
    };
    let mut best = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > svd.singular_values[best] {
            best = i;
        }
    }
    SpectralEstimate {
        sigma: svd.singular_values[best],
        left: Array1::from_iter(u.column(best).iter().copied()),
        right: Array1::from_iter(v_t.row(best).iter().copied()),
    }
}

/// Induced p→p operator norm of a matrix acting on column vectors: max
/// absolute column sum (p = 1), spectral norm (p = 2), max absolute row sum
/// (p = inf).
pub fn induced_opnorm(m: ArrayView2<f64>, p: NormOrder) -> f64 {
    match p {
        NormOrder::L1 => m
            .axis_iter(Axis(1))
            .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormOrder::Inf => m
            .axis_iter(Axis(0))
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormOrder::L2 => spectral_norm(m).sigma,
    }
}

/// `M(K) = Σ_j ‖K_j‖_p` over the `q` kernel slices.
pub fn m_kernel(kernel: ArrayView3<f64>, p: NormOrder) -> f64 {
    kernel
        .axis_iter(Axis(0))
        .map(|slice| induced_opnorm(slice, p))
        .sum()
}

/// Which entry attains an embedding-constant maximum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingArgmax {
    /// `‖e_i‖`
    Row(usize),
    /// `‖e_i − e_j‖`
    Pair(usize, usize),
}

/// `M(E) = max(max_i ‖e_i‖, max_{i,j} ‖e_i − e_j‖)` and its lowest-index
/// achiever (rows scanned before pairs).
pub fn m_emb_argmax(e: ArrayView2<f64>, p: NormOrder) -> (f64, EmbeddingArgmax) {
    let mut best = (0.0, EmbeddingArgmax::Row(0));
    for (i, row) in e.axis_iter(Axis(0)).enumerate() {
        let n = vec_norm(row, p);
        if n > best.0 {
            best = (n, EmbeddingArgmax::Row(i));
        }
    }
    let v = e.nrows();
    for i in 0..v {
        for j in (i + 1)..v {
            let n = diff_norm(e.row(i), e.row(j), p);
            if n > best.0 {
                best = (n, EmbeddingArgmax::Pair(i, j));
            }
        }
    }
    best
}

pub fn m_emb(e: ArrayView2<f64>, p: NormOrder) -> f64 {
    m_emb_argmax(e, p).0
}

/// Sentence-local embedding constant
/// `M(E, P) = max(max_i ‖e_i‖, max_{t ∈ P, j} ‖e_t − e_j‖)`.
pub fn m_emb_local(e: ArrayView2<f64>, tokens: &[u32], p: NormOrder) -> f64 {
    let v = e.nrows();
    let mut best = e
        .axis_iter(Axis(0))
        .map(|r| vec_norm(r, p))
        .fold(0.0, f64::max);
    let mut seen = vec![false; v];
    for &t in tokens {
        let t = t as usize;
        if seen[t] {
            continue;
        }
        seen[t] = true;
        for j in 0..v {
            best = best.max(diff_norm(e.row(t), e.row(j), p));
        }
    }
    best
}

/// Precomputed row norms and pairwise distances, making `M(E, P)` O(|P|).
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    max_row_norm: f64,
    /// `farthest[t] = max_j ‖e_t − e_j‖`
    farthest: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(e: ArrayView2<f64>, p: NormOrder) -> Self {
        let v = e.nrows();
        let max_row_norm = e
            .axis_iter(Axis(0))
            .map(|r| vec_norm(r, p))
            .fold(0.0, f64::max);
        let mut farthest = vec![0.0f64; v];
        for i in 0..v {
            for j in (i + 1)..v {
                let n = diff_norm(e.row(i), e.row(j), p);
                farthest[i] = farthest[i].max(n);
                farthest[j] = farthest[j].max(n);
            }
        }
        Self {
            max_row_norm,
            farthest,
        }
    }

    pub fn global(&self) -> f64 {
        self.farthest
            .iter()
            .copied()
            .fold(self.max_row_norm, f64::max)
    }

    pub fn local(&self, tokens: &[u32]) -> f64 {
        tokens
            .iter()
            .map(|&t| self.farthest[t as usize])
            .fold(self.max_row_norm, f64::max)
    }
}

/// Which class pair attains `M(W)`.
pub fn m_head_argmax(w: ArrayView2<f64>, r: NormOrder) -> (f64, (usize, usize)) {
    let o = w.ncols();
    let mut best = (0.0, (0, 1.min(o.saturating_sub(1))));
    for a in 0..o {
        for b in (a + 1)..o {
            let n = diff_norm(w.column(a), w.column(b), r);
            if n > best.0 {
                best = (n, (a, b));
            }
        }
    }
    best
}

/// `M(W) = max_{y, ŷ} ‖w_y − w_ŷ‖_r` over head columns.
pub fn m_head(w: ArrayView2<f64>, r: NormOrder) -> f64 {
    m_head_argmax(w, r).0
}

/// A subgradient of `x ↦ ‖x‖_p`; zero at the origin, lowest index for ties
/// of the max norm.
pub fn vec_norm_grad(x: ArrayView1<f64>, p: NormOrder) -> Array1<f64> {
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    match p {
        NormOrder::L1 => x.mapv(sign),
        NormOrder::L2 => {
            let n = x.dot(&x).sqrt();
            if n > 0.0 {
                x.mapv(|v| v / n)
            } else {
                Array1::zeros(x.len())
            }
        }
        NormOrder::Inf => {
            let mut g = Array1::zeros(x.len());
            let mut best: Option<(usize, f64)> = None;
            for (i, v) in x.iter().enumerate() {
                if best.is_none_or(|(_, b)| v.abs() > b) {
                    best = Some((i, v.abs()));
                }
            }
            if let Some((i, b)) = best {
                if b > 0.0 {
                    g[i] = sign(x[i]);
                }
            }
            g
        }
    }
}

/// Subgradient of `M(E)` with respect to `E`.
pub fn m_emb_grad(e: ArrayView2<f64>, p: NormOrder) -> Array2<f64> {
    let mut g = Array2::zeros(e.raw_dim());
    let (value, arg) = m_emb_argmax(e, p);
    if value == 0.0 {
        return g;
    }
    match arg {
        EmbeddingArgmax::Row(i) => {
            g.row_mut(i).assign(&vec_norm_grad(e.row(i), p));
        }
        EmbeddingArgmax::Pair(i, j) => {
            let diff = &e.row(i) - &e.row(j);
            let d = vec_norm_grad(diff.view(), p);
            g.row_mut(i).assign(&d);
            g.row_mut(j).assign(&(-&d));
        }
    }
    g
}

/// Subgradient of the induced norm of one `k x r` slice.
pub fn induced_opnorm_grad(m: ArrayView2<f64>, p: NormOrder) -> Array2<f64> {
    let mut g = Array2::zeros(m.raw_dim());
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    match p {
        NormOrder::L1 => {
            let mut best: Option<(usize, f64)> = None;
            for (c, col) in m.axis_iter(Axis(1)).enumerate() {
                let s: f64 = col.iter().map(|x| x.abs()).sum();
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            if let Some((c, _)) = best {
                g.column_mut(c).assign(&m.column(c).mapv(sign));
            }
        }
        NormOrder::Inf => {
            let mut best: Option<(usize, f64)> = None;
            for (r, row) in m.axis_iter(Axis(0)).enumerate() {
                let s: f64 = row.iter().map(|x| x.abs()).sum();
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((r, s));
                }
            }
            if let Some((r, _)) = best {
                g.row_mut(r).assign(&m.row(r).mapv(sign));
            }
        }
        NormOrder::L2 => {
            let est = spectral_norm(m);
            if est.sigma > 0.0 {
                let u = est.left.insert_axis(Axis(1));
                let v = est.right.insert_axis(Axis(0));
                g = u.dot(&v);
            }
        }
    }
    g
}

/// Subgradient of `M(K)` with respect to the `q x k x r` kernel tensor.
pub fn m_kernel_grad(kernel: ArrayView3<f64>, p: NormOrder) -> Array3<f64> {
    let mut g = Array3::zeros(kernel.raw_dim());
    for (j, slice) in kernel.axis_iter(Axis(0)).enumerate() {
        g.index_axis_mut(Axis(0), j)
            .assign(&induced_opnorm_grad(slice, p));
    }
    g
}

/// Subgradient of `M(W)` with respect to the `k x o` head.
pub fn m_head_grad(w: ArrayView2<f64>, r: NormOrder) -> Array2<f64> {
    let mut g = Array2::zeros(w.raw_dim());
    let (value, (a, b)) = m_head_argmax(w, r);
    if value == 0.0 {
        return g;
    }
    let diff = &w.column(a) - &w.column(b);
    let d = vec_norm_grad(diff.view(), r);
    g.column_mut(a).assign(&d);
    g.column_mut(b).assign(&(-&d));
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn identity_has_unit_norm() {
        let id = Array2::<f64>::eye(4);
        for p in NormOrder::ALL {
            assert!((induced_opnorm(id.view(), p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_matrix_norms() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(induced_opnorm(m.view(), NormOrder::L1), 6.0);
        assert_eq!(induced_opnorm(m.view(), NormOrder::Inf), 7.0);
        // largest eigenvalue of MᵀM = [[10,14],[14,20]] from the 2x2 quadratic
        let (tr, det) = (30.0f64, 200.0 - 196.0);
        let lambda = (tr + (tr * tr - 4.0 * det).sqrt()) / 2.0;
        let expected = lambda.sqrt();
        assert!((expected - 5.4649857).abs() < 1e-7);
        assert!((induced_opnorm(m.view(), NormOrder::L2) - expected).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_is_scale_equivariant() {
        let m = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let a = spectral_norm(m.view()).sigma;
        let b = spectral_norm((&m / 3.7).view()).sigma;
        assert!((a / 3.7 - b).abs() <= 1e-14 * a);
    }

    #[test]
    fn spectral_pair_is_consistent() {
        let m = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let e = spectral_norm(m.view());
        let mv = m.dot(&e.right);
        for (x, y) in mv.iter().zip(e.left.iter()) {
            assert!((x - e.sigma * y).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_rejects_non_finite() {
        let m = array![[1.0, f64::NAN]];
        assert!(spectral_norm(m.view()).sigma.is_nan());
    }

    #[test]
    fn kernel_factor_sums_slices() {
        let mut k = Array3::<f64>::zeros((2, 3, 3));
        for j in 0..2 {
            for i in 0..3 {
                k[[j, i, i]] = 1.0;
            }
        }
        for p in NormOrder::ALL {
            assert!((m_kernel(k.view(), p) - 2.0).abs() < 1e-12);
            assert!((m_kernel(k.slice(ndarray::s![0..1, .., ..]), p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_factor_examples() {
        let e = Array2::<f64>::eye(3);
        assert_eq!(m_emb(e.view(), NormOrder::Inf), 1.0);
        assert_eq!(m_emb(e.view(), NormOrder::L1), 2.0);
        assert!((m_emb(e.view(), NormOrder::L2) - 2f64.sqrt()).abs() < 1e-12);
        let table = EmbeddingTable::new(e.view(), NormOrder::L1);
        assert_eq!(table.global(), 2.0);
        assert_eq!(table.local(&[0, 0]), 2.0);
    }

    #[test]
    fn local_embedding_factor_can_be_smaller() {
        // symbols 0 and 1 are close, symbol 2 is far from both
        let e = array![[1.0, 0.0], [1.1, 0.0], [-3.0, 0.0]];
        for p in NormOrder::ALL {
            let global = m_emb(e.view(), p);
            let local = m_emb_local(e.view(), &[0, 1, 0], p);
            assert!(local <= global);
            assert_eq!(local, EmbeddingTable::new(e.view(), p).local(&[0, 1, 0]));
        }
        assert!((m_emb(e.view(), NormOrder::L2) - 4.1).abs() < 1e-12);
        // pairs with the far symbol still count because it can be substituted in
        assert!((m_emb_local(e.view(), &[0], NormOrder::L2) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn head_factor_examples() {
        let same = array![[1.0, 1.0], [2.0, 2.0]];
        assert_eq!(m_head(same.view(), NormOrder::L1), 0.0);
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(m_head(w.view(), NormOrder::L1), 2.0);
        assert_eq!(m_head(w.view(), NormOrder::Inf), 1.0);
    }

    #[test]
    fn norm_grads_ties_use_lowest_index() {
        let x = array![-2.0, 2.0, 1.0];
        assert_eq!(
            vec_norm_grad(x.view(), NormOrder::Inf),
            array![-1.0, 0.0, 0.0]
        );
        let m = array![[1.0, -1.0], [1.0, 1.0]];
        let g = induced_opnorm_grad(m.view(), NormOrder::L1);
        assert_eq!(g, array![[1.0, 0.0], [1.0, 0.0]]);
    }
}
