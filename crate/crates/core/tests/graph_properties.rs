//! Graph, linear algebra and noise invariants on random instances.

use consensuslab::graph::{CanonicalMatrices, Graph};
use consensuslab::linalg::{kron, sym_eigen, sym_expm, Matrix};
use consensuslab::noise::{build_channels, NoiseModel};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

type Q = Ratio<i128>;

fn graph_from_seed(seed: u64, max_n: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_n);
    let p = rng.random_range(0.1..1.0);
    Graph::random_connected(n, p, &mut rng)
}

fn ones_outer(n: usize) -> Matrix {
    Matrix::from_vec(n, n, vec![1.0; n * n]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eigenbasis_spans_the_disagreement_space(seed in any::<u64>()) {
        let g = graph_from_seed(seed, 8);
        let n = g.n_agents();
        let spec = g.spectrum().unwrap();
        let phi = &spec.phi;
        let proj = CanonicalMatrices::new(n).disagreement_projector();
        prop_assert!((phi * &phi.transpose()).max_abs_diff(&proj) <= 1e-12);
        prop_assert!((&phi.transpose() * phi).max_abs_diff(&Matrix::identity(n - 1)) <= 1e-12);
        let l = g.laplacian();
        for c in 0..n - 1 {
            let v = phi.column(c);
            let lv = l.matvec(&v);
            let lam = spec.eigenvalues[c + 1];
            let res = lv.iter().zip(&v).map(|(a, b)| (a - lam * b).abs()).fold(0.0, f64::max);
            prop_assert!(res <= 1e-10 * (1.0 + lam));
        }
    }

    #[test]
    fn all_ones_projection_of_channel_matrices(seed in any::<u64>()) {
        let g = graph_from_seed(seed, 8);
        let n = g.n_agents();
        let spec = g.spectrum().unwrap();
        let phi = &spec.phi;
        let pp = phi * &phi.transpose();
        let jj = ones_outer(n);
        let ratio = n as f64 / (n as f64 - 1.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let b = g.channel_matrix(i, j).unwrap();
                let bt = b.transpose();
                let lhs = &(&bt * &jj) * &b;
                let rhs = (&(&bt * &pp) * &b).scale(ratio);
                prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn channel_matrices_are_idempotent_up_to_sign_and_sum_to_minus_laplacian(seed in any::<u64>()) {
        let g = graph_from_seed(seed, 8);
        let n = g.n_agents();
        let mut sum = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let b = g.channel_matrix(i, j).unwrap();
                prop_assert_eq!(&b * &b, b.scale(-1.0));
                sum = &sum + &b;
            }
        }
        prop_assert_eq!(sum, g.laplacian().scale(-1.0));
    }

    #[test]
    fn kron_mixed_product(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_m = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let (a, c) = (rand_m(2, 3), rand_m(3, 2));
        let (b, d) = (rand_m(3, 2), rand_m(2, 4));
        let lhs = &kron(&a, &b) * &kron(&c, &d);
        let rhs = kron(&(&a * &c), &(&b * &d));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn expm_of_negation_is_the_inverse(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_symmetric(&mut rng, 6, 5.0);
        let prod = &sym_expm(&m).unwrap() * &sym_expm(&m.scale(-1.0)).unwrap();
        prop_assert!(prod.max_abs_diff(&Matrix::identity(6)) <= 1e-8);
    }

    #[test]
    fn linear_intensities_are_homogeneous(seed in any::<u64>(), shift in -6i32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::complete(3);
        let c = 2f64.powi(shift);
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let mut scalars = BTreeMap::new();
        let mut mats = BTreeMap::new();
        for (i, j) in g.ordered_edges() {
            scalars.insert((i, j), rng.random_range(0.1..2.0));
            let m: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            mats.insert((i, j), Matrix::from_vec(2, 2, m).unwrap());
        }
        let models = [
            NoiseModel::homogeneous(rng.random_range(0.0..2.0)).unwrap(),
            NoiseModel::linear_scalar(&g, scalars).unwrap(),
            NoiseModel::linear_matrix(&g, mats).unwrap(),
        ];
        for m in &models {
            for (i, j) in g.ordered_edges() {
                let fx = m.evaluate_intensity(&g, i, j, &x).unwrap();
                let fcx = m.evaluate_intensity(&g, i, j, &cx).unwrap();
                let scaled: Vec<f64> = fx.iter().map(|v| c * v).collect();
                prop_assert_eq!(fcx, scaled);
            }
        }
    }
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rng.random_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let e = sym_eigen(&m).unwrap();
    let spectral = e.min().abs().max(e.max().abs()).max(1e-300);
    m.scale(scale / spectral * rng.random_range(0.0..1.0))
}

#[test]
fn eigen_reconstruction_on_random_symmetric_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let m = random_symmetric(&mut rng, n, scale);
        let e = sym_eigen(&m).unwrap();
        let rebuilt = e.reconstruct_with(|x| x);
        assert!(rebuilt.max_abs_diff(&m) <= 1e-10 * (1.0 + m.max_abs()));
        let vtv = &e.vectors.transpose() * &e.vectors;
        assert!(vtv.max_abs_diff(&Matrix::identity(n)) <= 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn canonical_matrix_identities() {
    for n in 2..=9 {
        let c = CanonicalMatrices::new(n);
        let j = &c.centering;
        assert!((j * j).max_abs_diff(j) <= 1e-15);
        let p = c.disagreement_projector();
        assert!((&p * &p).max_abs_diff(&p) <= 1e-15);
        for i in 0..n {
            let e = c.unit_vector(i);
            let q = p.quadratic_form(&e);
            assert!((q - (n as f64 - 1.0) / n as f64).abs() <= 1e-15);
        }
    }
}

#[test]
fn growth_bound_holds_on_every_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5u64 {
        let g = graph_from_seed(seed, 6);
        let mut scalars = BTreeMap::new();
        for (i, j) in g.ordered_edges() {
            scalars.insert((i, j), rng.random_range(0.05..3.0));
        }
        let models = [NoiseModel::homogeneous(0.7).unwrap(), NoiseModel::linear_scalar(&g, scalars).unwrap()];
        for m in &models {
            let worst = m.spot_check_growth_bound(&g, 3, 10_000, &mut rng).unwrap();
            assert!(worst <= m.growth_bound() + 1e-12);
        }
    }
}

#[test]
fn channel_sets_on_random_graphs() {
    for seed in 0..30u64 {
        let g = graph_from_seed(seed, 8);
        let m = NoiseModel::homogeneous(1.0).unwrap();
        let ind = build_channels(&g, &m).unwrap();
        let sym = build_channels(&g, &m.clone().with_symmetric_channels(true)).unwrap();
        let directed = 2 * g.edges().len();
        assert_eq!(ind.channels.len(), directed);
        assert_eq!(ind.brownian_count, directed);
        assert_eq!(sym.channels.len(), directed);
        assert_eq!(sym.brownian_count, directed / 2);
        for a in &sym.channels {
            let partner = sym.channels.iter().find(|b| b.receiver == a.sender && b.sender == a.receiver).unwrap();
            assert_eq!(a.brownian, partner.brownian);
        }
    }
}

// Characteristic polynomial oracle in exact rational arithmetic.

fn charpoly(l: &[Vec<i128>]) -> Vec<Q> {
    // Faddeev-LeVerrier; coefficients ascending, monic.
    let n = l.len();
    let a: Vec<Vec<Q>> = l.iter().map(|r| r.iter().map(|&v| Q::from_integer(v)).collect()).collect();
    let mut coeffs = vec![Q::from_integer(0); n + 1];
    coeffs[n] = Q::from_integer(1);
    let mut m = vec![vec![Q::from_integer(0); n]; n];
    for k in 1..=n {
        let mut next = vec![vec![Q::from_integer(0); n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = Q::from_integer(0);
                for t in 0..n {
                    s += a[i][t] * m[t][j];
                }
                if i == j {
                    s += coeffs[n - k + 1];
                }
                next[i][j] = s;
            }
        }
        m = next;
        let mut tr = Q::from_integer(0);
        for i in 0..n {
            for t in 0..n {
                tr += a[i][t] * m[t][i];
            }
        }
        coeffs[n - k] = -tr / Q::from_integer(k as i128);
    }
    coeffs
}

fn trim(mut p: Vec<Q>) -> Vec<Q> {
    while p.len() > 1 && *p.last().unwrap() == Q::from_integer(0) {
        p.pop();
    }
    p
}

fn derivative(p: &[Q]) -> Vec<Q> {
    if p.len() <= 1 {
        return vec![Q::from_integer(0)];
    }
    (1..p.len()).map(|k| p[k] * Q::from_integer(k as i128)).collect()
}

fn divmod(num: &[Q], den: &[Q]) -> (Vec<Q>, Vec<Q>) {
    let den = trim(den.to_vec());
    let mut rem = trim(num.to_vec());
    if rem.len() < den.len() {
        return (vec![Q::from_integer(0)], rem);
    }
    let mut quot = vec![Q::from_integer(0); rem.len() - den.len() + 1];
    let lead = *den.last().unwrap();
    while rem.len() >= den.len() && !(rem.len() == 1 && rem[0] == Q::from_integer(0)) {
        let shift = rem.len() - den.len();
        let c = *rem.last().unwrap() / lead;
        quot[shift] = c;
        for (k, d) in den.iter().enumerate() {
            rem[shift + k] -= c * d;
        }
        rem.pop();
        rem = trim(rem);
        if rem.is_empty() {
            rem.push(Q::from_integer(0));
        }
    }
    (quot, rem)
}

fn is_zero(p: &[Q]) -> bool {
    p.iter().all(|c| *c == Q::from_integer(0))
}

fn gcd(a: &[Q], b: &[Q]) -> Vec<Q> {
    let (mut a, mut b) = (trim(a.to_vec()), trim(b.to_vec()));
    while !is_zero(&b) {
        let (_, r) = divmod(&a, &b);
        a = b;
        b = r;
    }
    let lead = *a.last().unwrap();
    a.iter().map(|c| c / lead).collect()
}

fn eval(p: &[Q], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + (*c.numer() as f64) / (*c.denom() as f64))
}

/// Roots of a square-free polynomial with only real roots in `[lo, hi]`.
fn simple_roots(p: &[Q], lo: f64, hi: f64) -> Vec<f64> {
    let grid = 20_000;
    let h = (hi - lo) / grid as f64;
    let mut roots = Vec::new();
    let mut a = lo;
    let mut fa = eval(p, a);
    for s in 1..=grid {
        let b = lo + s as f64 * h;
        let fb = eval(p, b);
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            let (mut x0, mut x1, mut f0) = (a, b, fa);
            for _ in 0..200 {
                let mid = 0.5 * (x0 + x1);
                let fm = eval(p, mid);
                if fm == 0.0 || mid == x0 || mid == x1 {
                    x0 = mid;
                    x1 = mid;
                    break;
                }
                if f0 * fm < 0.0 {
                    x1 = mid;
                } else {
                    x0 = mid;
                    f0 = fm;
                }
            }
            roots.push(0.5 * (x0 + x1));
        }
        a = b;
        fa = fb;
    }
    roots
}

/// Eigenvalues with multiplicity via the square-free decomposition chain.
fn charpoly_roots(l: &[Vec<i128>]) -> Vec<f64> {
    let n = l.len();
    let hi = 2.0 * n as f64 + 0.5;
    let mut q = charpoly(l);
    let mut roots = Vec::new();
    while q.len() > 1 {
        let g = gcd(&q, &derivative(&q));
        let (sqfree, _) = divmod(&q, &g);
        roots.extend(simple_roots(&trim(sqfree), -0.25, hi));
        q = trim(g);
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots
}

#[test]
fn spectra_match_characteristic_polynomial_roots_for_all_small_graphs() {
    for n in 2..=4usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for mask in 0u32..(1 << pairs.len()) {
            let edges: Vec<(usize, usize)> =
                pairs.iter().enumerate().filter(|(b, _)| mask & (1 << b) != 0).map(|(_, e)| *e).collect();
            let g = Graph::new(n, &edges).unwrap();
            let l = g.laplacian();
            let li: Vec<Vec<i128>> = (0..n).map(|i| l.row(i).iter().map(|&v| v as i128).collect()).collect();
            let oracle = charpoly_roots(&li);
            let spec = g.spectrum().unwrap();
            assert_eq!(oracle.len(), n, "edges {edges:?}");
            for (a, b) in spec.eigenvalues.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-10, "edges {edges:?}: {:?} vs {oracle:?}", spec.eigenvalues);
            }
        }
    }
}

#[test]
fn charpoly_oracle_on_known_spectra() {
    let p3 = vec![vec![1, -1, 0], vec![-1, 2, -1], vec![0, -1, 1]];
    let r = charpoly_roots(&p3);
    assert!((r[0]).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12 && (r[2] - 3.0).abs() < 1e-12);
    let k4: Vec<Vec<i128>> = (0..4).map(|i| (0..4).map(|j| if i == j { 3 } else { -1 }).collect()).collect();
    let r = charpoly_roots(&k4);
    assert_eq!(r.len(), 4);
    assert!(r[0].abs() < 1e-12 && r[1..].iter().all(|v| (v - 4.0).abs() < 1e-12));
}
