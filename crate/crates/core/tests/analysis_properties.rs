//! Certificate identities, decision bands and bound consistency.

use std::collections::BTreeMap;

use consensuslab::analysis::{
    channel_generators, error_bound_general, error_bound_linear, heterogeneous_gain_bands, lambda_k_bound, ms_certificate,
    ms_decision_homogeneous, mu_estimate, optimal_gain, psi_f_matrix, reduced_channel_matrix, two_agent_closed_form, Bound,
    GainMatrix,
};
use consensuslab::graph::Graph;
use consensuslab::linalg::Matrix;
use consensuslab::noise::{build_channels, NoiseModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph_from_seed(rng: &mut ChaCha8Rng, max_n: usize) -> Graph {
    let n = rng.random_range(2..=max_n);
    let p = rng.random_range(0.2..1.0);
    Graph::random_connected(n, p, rng)
}

fn ms_coefficient(n: usize, k: f64, sigma: f64) -> f64 {
    let n = n as f64;
    2.0 * k - 2.0 * (n - 1.0) * sigma * sigma * k * k / n
}

proptest! {
    #[test]
    fn summed_reduced_channel_products_are_diagonal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = graph_from_seed(&mut rng, 8);
        let n = g.n_agents();
        let spec = g.spectrum().unwrap();
        let mut sum = Matrix::zeros(n - 1, n - 1);
        for (i, j) in g.ordered_edges() {
            let r = reduced_channel_matrix(&g, &spec, i, j).unwrap();
            sum = &sum + &(&r.transpose() * &r);
        }
        let expect = spec.lambda0.scale(2.0 * (n as f64 - 1.0) / n as f64);
        prop_assert!(sum.max_abs_diff(&expect) <= 1e-10);
    }

    #[test]
    fn sufficient_band_nests_inside_necessary_band(
        n in 2usize..12,
        connected in any::<bool>(),
        s1 in 0.01f64..3.0,
        s2 in 0.01f64..3.0,
        k in -2.0f64..20.0,
    ) {
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let bands = heterogeneous_gain_bands(n, connected, lo, hi, k);
        prop_assert!(!bands.sufficient || bands.necessary);
        let equal = heterogeneous_gain_bands(n, connected, s1, s1, k);
        if ms_decision_homogeneous(n, connected, k, s1) {
            prop_assert!(equal.sufficient);
        }
        prop_assert_eq!(equal.sufficient, equal.necessary);
    }

    #[test]
    fn optimal_gain_maximizes_the_rate_coefficient(n in 2usize..40, sigma in 0.05f64..4.0) {
        let ks = optimal_gain(n, sigma).unwrap();
        let best = ms_coefficient(n, ks, sigma);
        prop_assert!(best > ms_coefficient(n, 0.5 * ks, sigma));
        prop_assert!(best > ms_coefficient(n, 1.5 * ks, sigma));
        prop_assert!(best > 0.0);
    }

    #[test]
    fn two_agent_bound_is_tight(
        k in 0.01f64..3.0,
        s12 in 0.1f64..1.5,
        s21 in 0.1f64..1.5,
        x1 in -5.0f64..5.0,
        x2 in -5.0f64..5.0,
    ) {
        let g = Graph::complete(2);
        let spec = g.spectrum().unwrap();
        // key (i, j) holds the intensity of the measurement agent i takes of j
        let mut sig = BTreeMap::new();
        sig.insert((0, 1), s12);
        sig.insert((1, 0), s21);
        let noise = NoiseModel::linear_scalar(&g, sig).unwrap();
        let cert = ms_certificate(&g, &spec, &noise, &GainMatrix::scalar(k, 1)).unwrap();
        let d = x1 - x2;
        let bound = error_bound_linear(&cert, 2, 0.5 * d * d).unwrap();
        let exact = two_agent_closed_form(k, s12, s21, &[x1], &[x2]).unwrap();
        match (bound, exact.ms_error) {
            (Bound::Finite(b), Bound::Finite(e)) => {
                prop_assert!((b - e).abs() <= 1e-12 * (1.0 + e.abs()), "{b} vs {e}");
            }
            (Bound::Unbounded, Bound::Unbounded) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn general_bound_dominates_the_two_agent_error(
        k in 0.01f64..3.0,
        s12 in 0.1f64..1.2,
        s21 in 0.1f64..1.2,
        d in 0.1f64..5.0,
    ) {
        let g = Graph::complete(2);
        let spec = g.spectrum().unwrap();
        let gain = GainMatrix::scalar(k, 1);
        let sbar = s12.max(s21);
        let pf = psi_f_matrix(&spec, &gain, sbar);
        let exact = two_agent_closed_form(k, s12, s21, &[d], &[0.0]).unwrap().ms_error;
        let bound = error_bound_general(&spec, &gain, sbar, &pf, 0.5 * d * d).unwrap();
        if let Bound::Finite(b) = bound {
            let e = exact.value();
            prop_assert!(b >= e * (1.0 - 1e-12), "{b} < {e}");
            let equal = two_agent_closed_form(k, sbar, sbar, &[d], &[0.0]).unwrap().ms_error.value();
            prop_assert!((b - equal).abs() <= 1e-12 * (1.0 + equal));
        }
    }
}

#[test]
fn mu_estimate_never_undercuts_the_certified_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut instances = 0;
    for _ in 0..60 {
        let g = graph_from_seed(&mut rng, 5);
        let spec = g.spectrum().unwrap();
        let symmetric = rng.random_bool(0.5);
        let dim = rng.random_range(1..=2);
        let noise = if rng.random_bool(0.5) {
            NoiseModel::homogeneous(rng.random_range(0.1..1.5)).unwrap()
        } else {
            let mut sig = BTreeMap::new();
            for (i, j) in g.edges() {
                let s = rng.random_range(0.1..1.5);
                let t = if symmetric { s } else { rng.random_range(0.1..1.5) };
                sig.insert((i, j), s);
                sig.insert((j, i), t);
            }
            NoiseModel::linear_scalar(&g, sig).unwrap()
        }
        .with_symmetric_channels(symmetric);
        let gain = if dim == 1 {
            GainMatrix::scalar(rng.random_range(-3.0..3.0), 1)
        } else {
            let (a, b, c) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0));
            GainMatrix::matrix(Matrix::from_rows(&[[a, b], [b, c]])).unwrap()
        };
        let channels = build_channels(&g, &noise).unwrap();
        let cert = ms_certificate(&g, &spec, &noise, &gain).unwrap();
        let gens = channel_generators(&g, &spec, &noise, &channels, &gain).unwrap();
        let floor = lambda_k_bound(&cert, &gens).unwrap();
        let mu = mu_estimate(&cert, &gens, 16, 9).unwrap();
        assert!(mu.value >= floor - 1e-8, "mu {} < lambda_K {floor}", mu.value);
        instances += 1;
    }
    assert_eq!(instances, 60);
}
