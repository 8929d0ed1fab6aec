//! Randomized invariants of the distance, norm and model layers, checked
//! against the reference implementations in `common`.

mod common;

use std::collections::HashSet;

use certilev::erp::{erp_distance, relu, vec_norm, NormOrder};
use certilev::model::{conv_full, ConvTextClassifier, Mode, ModelShape};
use certilev::norms::{induced_opnorm, m_emb, m_emb_local, m_head, m_kernel, spectral_norm};
use certilev::text::{ball_size_bound, enumerate_ball, levenshtein, Sentence};
use common::*;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NORMS: [NormOrder; 3] = [NormOrder::L1, NormOrder::L2, NormOrder::Inf];

fn tokens(v: u32, max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..v, 0..=max_len)
}

fn seq(d: usize, max_len: usize) -> impl Strategy<Value = Array2<f64>> {
    (0..=max_len).prop_flat_map(move |m| {
        prop::collection::vec(-2.0f64..2.0, m * d)
            .prop_map(move |v| Array2::from_shape_vec((m, d), v).unwrap())
    })
}

fn matrix(max: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn norm_order() -> impl Strategy<Value = NormOrder> {
    prop::sample::select(NORMS.to_vec())
}

fn erp(a: &Array2<f64>, b: &Array2<f64>, p: NormOrder) -> f64 {
    erp_distance(a.view(), b.view(), p).unwrap()
}

fn pad_zeros(a: &Array2<f64>, at: usize, count: usize) -> Array2<f64> {
    let (m, d) = a.dim();
    let mut out = Array2::zeros((m + count, d));
    for i in 0..m {
        let dst = if i < at { i } else { i + count };
        out.row_mut(dst).assign(&a.row(i));
    }
    out
}

fn sum_rows(a: &Array2<f64>, d: usize) -> Vec<f64> {
    (0..d).map(|c| a.column(c).sum()).collect()
}

fn random_model(seed: u64, vocab: usize, p: NormOrder, layers: usize) -> ConvTextClassifier {
    let shape = ModelShape {
        vocab,
        embed_dim: 3,
        hidden: 4,
        kernel: 2,
        layers,
        classes: 3,
        norm: p,
    };
    let mut m =
        ConvTextClassifier::init(shape, Mode::Plain, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // break the unit-factor initialization so the factors are informative
    m.embedding.mapv_inplace(|x| x * 1.7);
    for (i, k) in m.kernels.iter_mut().enumerate() {
        k.mapv_inplace(|x| x * (0.6 + i as f64));
    }
    m.head.mapv_inplace(|x| x * 2.3);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn levenshtein_is_symmetric_and_matches_table(a in tokens(4, 12), b in tokens(4, 12)) {
        let d = levenshtein(&a, &b);
        prop_assert_eq!(d, levenshtein(&b, &a));
        prop_assert_eq!(d, lev_oracle(&a, &b));
        prop_assert!(d >= a.len().abs_diff(b.len()));
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert_eq!(d == 0, a == b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn levenshtein_triangle(a in tokens(3, 10), b in tokens(3, 10), c in tokens(3, 10)) {
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
    }

    #[test]
    fn erp_triangle(
        (a, b, c) in (1usize..4).prop_flat_map(|d| (seq(d, 6), seq(d, 6), seq(d, 6))),
        p in norm_order(),
    ) {
        prop_assert!(erp(&a, &c, p) <= erp(&a, &b, p) + erp(&b, &c, p) + 1e-9);
    }

    #[test]
    fn erp_dominates_sum_difference(
        (d, a, b) in (1usize..4).prop_flat_map(|d| (Just(d), seq(d, 7), seq(d, 7))),
        p in norm_order(),
    ) {
        let diff: Vec<f64> = sum_rows(&a, d)
            .iter()
            .zip(sum_rows(&b, d))
            .map(|(x, y)| x - y)
            .collect();
        prop_assert!(norm_oracle(&diff, p) <= erp(&a, &b, p) + 1e-9);
    }

    #[test]
    fn relu_is_nonexpansive(
        (a, b) in (1usize..4).prop_flat_map(|d| (seq(d, 7), seq(d, 7))),
        p in norm_order(),
    ) {
        prop_assert!(erp(&relu(&a), &relu(&b), p) <= erp(&a, &b, p) + 1e-9);
    }

    #[test]
    fn linear_map_scales_by_transpose_norm(
        (a, b, v) in (1usize..4, 1usize..4).prop_flat_map(|(d, e)| (
            seq(d, 6),
            seq(d, 6),
            prop::collection::vec(-2.0f64..2.0, d * e)
                .prop_map(move |x| Array2::from_shape_vec((d, e), x).unwrap()),
        )),
        p in norm_order(),
    ) {
        // rows act as row vectors, x ↦ xV, so the factor is the column-vector
        // operator norm of Vᵀ
        let factor = opnorm_oracle(&v.t().to_owned(), p);
        let lhs = erp(&a.dot(&v), &b.dot(&v), p);
        prop_assert!(lhs <= factor * erp(&a, &b, p) * (1.0 + 1e-9) + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn erp_is_symmetric(
        (a, b) in (1usize..5).prop_flat_map(|d| (seq(d, 8), seq(d, 8))),
        p in norm_order(),
    ) {
        prop_assert!((erp(&a, &b, p) - erp(&b, &a, p)).abs() <= 1e-12);
        prop_assert_eq!(erp(&a, &a, p), 0.0);
    }

    #[test]
    fn erp_ignores_zero_rows(
        (a, b) in (1usize..4).prop_flat_map(|d| (seq(d, 6), seq(d, 6))),
        at in 0usize..8,
        count in 1usize..4,
        p in norm_order(),
    ) {
        let padded = pad_zeros(&a, at.min(a.nrows()), count);
        prop_assert!((erp(&padded, &b, p) - erp(&a, &b, p)).abs() <= 1e-12);
    }

    #[test]
    fn erp_to_empty_is_total_norm(a in seq(3, 8), p in norm_order()) {
        let empty = Array2::<f64>::zeros((0, 3));
        let total: f64 = a.rows().into_iter().map(|r| norm_oracle(&r.to_vec(), p)).sum();
        prop_assert!((erp(&a, &empty, p) - total).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dedup_ball_matches_exhaustive_radius_one(s in prop::collection::vec(0u32..3, 1..=4), v in 1u32..=3) {
        let s: Vec<u32> = s.into_iter().map(|t| t % v).collect();
        let center = Sentence::new(s.clone(), v as usize).unwrap();
        let got: Vec<Vec<u32>> = enumerate_ball(&center, v as usize, true)
            .map(Sentence::into_tokens)
            .collect();
        let unique: HashSet<Vec<u32>> = got.iter().cloned().collect();
        prop_assert_eq!(unique.len(), got.len());
        let want: HashSet<Vec<u32>> = ball_oracle(&s, v, 1).into_iter().collect();
        prop_assert_eq!(&unique, &want);

        let raw = enumerate_ball(&center, v as usize, false).count();
        let skipped = usize::from(s.len() == 1);
        prop_assert_eq!(raw + skipped, ball_size_bound(s.len(), v as usize));
        prop_assert!(got.len() <= ball_size_bound(s.len(), v as usize));
    }

    #[test]
    fn spectral_norm_matches_jacobi(m in matrix(8)) {
        let want = spectral_oracle(&m);
        let got = spectral_norm(m.view()).sigma;
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1e-12));
    }

    #[test]
    fn induced_norms_match_oracle(m in matrix(6), p in norm_order()) {
        let want = opnorm_oracle(&m, p);
        let got = induced_opnorm(m.view(), p);
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1e-12));
    }

    #[test]
    fn factor_functions_match_oracles(seed in any::<u64>(), p in norm_order(), sub in tokens(6, 5)) {
        let model = random_model(seed, 6, p, 2);
        let tol = |x: f64| 1e-6 * x.max(1e-12);
        for layer in 0..2 {
            let want = kernel_factor_oracle(&model, layer, p);
            prop_assert!((m_kernel(model.kernels[layer].view(), p) - want).abs() <= tol(want));
        }
        let global = emb_factor_oracle(&model.embedding, None, p);
        prop_assert!((m_emb(model.embedding.view(), p) - global).abs() <= 1e-12);
        let want_head = head_factor_oracle(&model, p.conjugate());
        prop_assert!((m_head(model.head.view(), p.conjugate()) - want_head).abs() <= 1e-12);
        if !sub.is_empty() {
            let local = m_emb_local(model.embedding.view(), &sub, p);
            let want = emb_factor_oracle(&model.embedding, Some(&sub), p);
            prop_assert!((local - want).abs() <= 1e-12);
            prop_assert!(local <= global);
        }
    }

    #[test]
    fn embedding_is_lipschitz_in_edit_distance(
        seed in any::<u64>(),
        p in norm_order(),
        a in prop::collection::vec(0u32..6, 1..8),
        b in prop::collection::vec(0u32..6, 1..8),
    ) {
        let model = random_model(seed, 6, p, 1);
        let embed = |t: &[u32]| {
            Array2::from_shape_fn((t.len(), 3), |(i, c)| model.embedding[[t[i] as usize, c]])
        };
        let bound = m_emb_local(model.embedding.view(), &a, p) * lev_oracle(&a, &b) as f64;
        prop_assert!(erp(&embed(&a), &embed(&b), p) <= bound * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn composed_conv_stack_is_lipschitz_in_edit_distance(
        seed in any::<u64>(),
        p in norm_order(),
        layers in 1usize..=2,
        a in prop::collection::vec(0u32..6, 1..8),
        b in prop::collection::vec(0u32..6, 1..8),
    ) {
        let model = random_model(seed, 6, p, layers);
        let features = |t: &[u32]| {
            let mut x = Array2::from_shape_fn((t.len(), 3), |(i, c)| {
                model.embedding[[t[i] as usize, c]]
            });
            for k in &model.kernels {
                x = relu(&conv_full(x.view(), k.view()).unwrap());
            }
            x
        };
        let kernels: f64 = (0..layers).map(|i| kernel_factor_oracle(&model, i, p)).product();
        let bound = kernels * emb_factor_oracle(&model.embedding, Some(&a), p) * lev_oracle(&a, &b) as f64;
        prop_assert!(erp(&features(&a), &features(&b), p) <= bound * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn fold_is_idempotent_and_unit_scaled(seed in any::<u64>(), p in norm_order()) {
        let normalized = random_model(seed, 6, p, 2).as_normalized();
        let folded = normalized.fold_normalization().unwrap();
        let f = folded.factors();
        prop_assert!((f.embedding - 1.0).abs() <= 1e-12);
        prop_assert!((f.head - 1.0).abs() <= 1e-12);
        for m in &f.kernels {
            prop_assert!((m - 1.0).abs() <= 1e-9);
        }
        let again = folded.as_normalized().fold_normalization().unwrap();
        for (x, y) in folded.embedding.iter().zip(again.embedding.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for (ka, kb) in folded.kernels.iter().zip(&again.kernels) {
            for (x, y) in ka.iter().zip(kb.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
        for (x, y) in folded.head.iter().zip(again.head.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

/// The general per-layer form `ERP(conv(a), conv(b)) ≤ M(K)·ERP(a, b)` does
/// not hold for arbitrary sequences; only the composition starting from an
/// embedding of an edit does. Smallest counterexample found: the convolution
/// doubles the distance while `M(K) = 2`.
#[test]
fn per_layer_conv_bound_fails_for_arbitrary_sequences() {
    let p = NormOrder::L1;
    let a = Array2::from_shape_vec((3, 1), vec![-1.0, 1.0, 1.0]).unwrap();
    let b = Array2::from_shape_vec((3, 1), vec![1.0, 0.0, 1.0]).unwrap();
    let k = Array3::from_shape_vec((2, 1, 1), vec![-1.0, -1.0]).unwrap();
    assert_eq!(erp(&a, &b, p), 1.0);
    let ca = conv_full(a.view(), k.view()).unwrap();
    let cb = conv_full(b.view(), k.view()).unwrap();
    assert_eq!(m_kernel(k.view(), p), 2.0);
    assert_eq!(erp(&ca, &cb, p), 4.0);
}

#[test]
fn norms_match_definitions() {
    let x = ndarray::arr1(&[3.0, -4.0, 0.0]);
    assert_eq!(vec_norm(x.view(), NormOrder::L1), 7.0);
    assert_eq!(vec_norm(x.view(), NormOrder::L2), 5.0);
    assert_eq!(vec_norm(x.view(), NormOrder::Inf), 4.0);
}
