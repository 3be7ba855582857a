//! Cross-module invariants as property tests.

use ndarray::{Array1, IxDyn};
use proptest::prelude::*;

use specgen::autodiff::{grad_check, Array, Tape};
use specgen::datasets::{format_graph, parse_graph};
use specgen::graphs::{are_isomorphic, connected_components, normalized_laplacian, top_k_spectrum, Graph};
use specgen::linalg::{self, Matrix};
use specgen::manifold::{canonical_signs, canonicalize, stiefel_from_params, stiefel_param_count};
use specgen::metrics::{is_planar, mean_edit_distance, uniqueness_novelty, Validity};
use specgen::training::{gradient_penalty, interpolate_eigenvalues};

fn graph_strategy(max_n: usize) -> impl Strategy<Value = Graph> {
    (2..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(any::<bool>(), n * (n - 1) / 2).prop_map(move |bits| {
            let mut g = Graph::empty(n);
            let mut it = bits.into_iter();
            for u in 0..n {
                for v in u + 1..n {
                    if it.next().unwrap() {
                        g.add_edge(u, v);
                    }
                }
            }
            g
        })
    })
}

fn graph_and_perm(max_n: usize) -> impl Strategy<Value = (Graph, Vec<usize>)> {
    graph_strategy(max_n).prop_flat_map(|g| {
        let n = g.n();
        (Just(g), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
    })
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_spectrum_in_range_and_counts_components(g in graph_strategy(14)) {
        let (vals, vecs) = linalg::sym_eig(normalized_laplacian(&g).view()).unwrap();
        prop_assert!(vals.iter().all(|&v| (-1e-9..=2.0 + 1e-9).contains(&v)));
        let zeros = vals.iter().filter(|v| v.abs() < 1e-8).count();
        prop_assert_eq!(zeros, connected_components(&g));
        prop_assert!(linalg::orthonormality_error(vecs.view()) < 1e-9);
        let l = normalized_laplacian(&g);
        let rebuilt = (&vecs * &vals).dot(&vecs.t());
        prop_assert!(max_abs(&(&rebuilt - &l)) < 1e-9);
    }

    #[test]
    fn spectra_are_permutation_invariant((g, perm) in graph_and_perm(12)) {
        let h = g.permute(&perm).unwrap();
        let (a, _) = linalg::sym_eig(normalized_laplacian(&g).view()).unwrap();
        let (b, _) = linalg::sym_eig(normalized_laplacian(&h).view()).unwrap();
        prop_assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
        prop_assert!(are_isomorphic(&g, &h));
        prop_assert_eq!(is_planar(&g), is_planar(&h));
    }

    #[test]
    fn top_k_eigenvectors_are_orthonormal_eigenpairs(g in graph_strategy(12), k in 1usize..4) {
        prop_assume!(connected_components(&g) == 1 && k < g.n() - 1);
        let s = top_k_spectrum(&g, k).unwrap();
        prop_assert!(linalg::orthonormality_error(s.eigenvectors.view()) < 1e-9);
        let l = normalized_laplacian(&g);
        let resid = l.dot(&s.eigenvectors) - &s.eigenvectors * &s.eigenvalues;
        prop_assert!(max_abs(&resid) < 1e-8);
        prop_assert!(s.eigenvalues.windows(2).into_iter().all(|w| w[0] <= w[1]));
        prop_assert!(s.eigenvalues[0] > 1e-10);
    }

    #[test]
    fn graph_files_round_trip(g in graph_strategy(16)) {
        let text = format_graph(&g);
        prop_assert_eq!(parse_graph(&text, "prop").unwrap(), g);
    }

    #[test]
    fn complement_is_an_involution_and_edit_distance_is_bounded(g in graph_strategy(12), h in graph_strategy(12)) {
        prop_assert_eq!(g.complement().complement(), g.clone());
        let d = mean_edit_distance(&[g.clone(), h]).unwrap();
        prop_assert!((0.0..=100.0).contains(&d));
        prop_assert_eq!(mean_edit_distance(&[g.clone(), g]).unwrap(), 0.0);
    }

    #[test]
    fn uniqueness_and_novelty_are_percentages(gs in proptest::collection::vec(graph_strategy(6), 1..8), ts in proptest::collection::vec(graph_strategy(6), 0..5)) {
        let un = uniqueness_novelty(&gs, &ts, &Validity::None).unwrap();
        prop_assert!((0.0..=100.0).contains(&un.unique) && (0.0..=100.0).contains(&un.novel));
        prop_assert!(un.unique > 0.0);
        prop_assert!(un.valid.is_none() && un.vun.is_none());
        let own = uniqueness_novelty(&gs, &gs, &Validity::None).unwrap();
        prop_assert_eq!(own.novel, 0.0);
    }

    #[test]
    fn stiefel_points_from_any_parameters(n in 2usize..12, k in 1usize..5, seed in proptest::collection::vec(-3.0f64..3.0, 64)) {
        prop_assume!(k <= n);
        let params: Vec<f64> = seed.iter().cycle().take(stiefel_param_count(n, k)).copied().collect();
        let u = stiefel_from_params(n, k, &params).unwrap();
        prop_assert!(linalg::orthonormality_error(u.view()) < 1e-9);
        let (c, perm) = canonicalize(u.view());
        let (cc, _) = canonicalize(c.view());
        prop_assert_eq!(&cc, &c);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let mut flipped = u.clone();
        flipped.column_mut(0).mapv_inplace(|x| -x);
        canonical_signs(&mut flipped);
        let mut signed = u.clone();
        canonical_signs(&mut signed);
        prop_assert!(max_abs(&(&flipped - &signed)) < 1e-12);
    }

    #[test]
    fn qr_factors_reconstruct(rows in 1usize..8, extra in 0usize..4, vals in proptest::collection::vec(-5.0f64..5.0, 96)) {
        let (n, k) = (rows + extra, rows);
        let m = Matrix::from_shape_fn((n, k), |(i, j)| vals[(i * k + j) % vals.len()] + if i == j { 10.0 } else { 0.0 });
        let (q, r) = linalg::qr(m.view()).unwrap();
        prop_assert!(linalg::orthonormality_error(q.view()) < 1e-10);
        prop_assert!(max_abs(&(q.dot(&r) - &m)) < 1e-9);
        prop_assert!((0..k).all(|i| r[[i, i]] >= 0.0 && (0..i).all(|j| r[[i, j]] == 0.0)));
    }

    #[test]
    fn matrix_exp_of_skew_is_a_rotation(n in 1usize..10, vals in proptest::collection::vec(-4.0f64..4.0, 81)) {
        let a = Matrix::from_shape_fn((n, n), |(i, j)| vals[i * 9 + j]);
        let q = linalg::matrix_exp((&a - &a.t()).view()).unwrap();
        prop_assert!(linalg::orthonormality_error(q.view()) < 1e-9);
        prop_assert!((linalg::det(q.view()).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn eigenvalue_interpolation_stays_between_endpoints(a in proptest::collection::vec(0.0f64..2.0, 3), b in proptest::collection::vec(0.0f64..2.0, 3), t in 0.0f64..1.0) {
        let ra = ndarray::Array2::from_shape_vec((1, 3), a.clone()).unwrap();
        let rb = ndarray::Array2::from_shape_vec((1, 3), b.clone()).unwrap();
        let mid = interpolate_eigenvalues(&ra, &rb, &[t]);
        for i in 0..3 {
            let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
            prop_assert!(mid[[0, i]] >= lo - 1e-12 && mid[[0, i]] <= hi + 1e-12);
        }
    }

    #[test]
    fn penalty_is_nonnegative_and_zero_for_flat_critics(w in proptest::collection::vec(-2.0f64..2.0, 4), x in proptest::collection::vec(-1.0f64..1.0, 8)) {
        let tape = Tape::new();
        let input = tape.leaf(Array::from_shape_vec(IxDyn(&[2, 4]), x).unwrap(), true);
        let weights = tape.constant(Array1::from(w.clone()).into_dyn());
        let scores = input.mul(weights).unwrap().sum_axis(1).unwrap();
        let gp = gradient_penalty(scores, &[input], 1.0).unwrap().item();
        prop_assert!(gp >= 0.0);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1.0 {
            prop_assert_eq!(gp, 0.0);
        } else {
            prop_assert!((gp - (norm - 1.0).powi(2)).abs() < 1e-9);
        }
    }

    #[test]
    fn tanh_chain_gradients_match_differences(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let x = Array::from_shape_vec(IxDyn(&[2, 3]), vals).unwrap();
        let err = grad_check(|v| Ok(v.tanh().matmul(v.t()?)?.sigmoid().sum()), &x, 1e-6).unwrap();
        prop_assert!(err < 1e-5);
    }
}
