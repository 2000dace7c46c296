//! Consensus certificates, gain thresholds, rate and steady-state-error
//! bounds for the noisy consensus protocol
//!
//! ```text
//! u_i = K Σ_j a_ij (y_ji - x_i),   y_ji = x_j + f_ji(x_j - x_i) ξ_ji
//! ```
//!
//! Reduced coordinates use the Laplacian eigenbasis `φ` (see
//! [`LaplacianSpectrum`]). For linear intensities the reduced error obeys
//!
//! ```text
//! dδ̄ = -(Λ⁰ ⊗ K) δ̄ dt + Σ_c G_c δ̄ dw_c,   G_c = Σ_{(i,j) on c} (φᵀ B_ij φ) ⊗ (K Σ_ji)
//! ```
//!
//! with one generator `G_c` per Brownian motion. Every linear certificate
//! below is assembled from these generators, so it follows the channel
//! wiring: with independent channels `G_c` is a single term and the
//! formulas reduce to the per-channel sums.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::ser::{SerializeSeq, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{is_connected, Graph, LaplacianSpectrum, CONNECTIVITY_TOL};
use crate::linalg::{dot, kron, min_abs_eig, norm, spectral_norm, sym_eigen, Matrix};
use crate::noise::{build_channels, ChannelSet, NoiseModel};

/// Relative threshold for calling a symmetric certificate positive definite.
pub const PD_TOL: f64 = 1e-12;

pub const MU_DEFAULT_RESTARTS: usize = 64;
pub const MU_DEFAULT_TOL: f64 = 1e-10;

/// A bound that may be unavailable because its certificate failed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Finite(f64),
    Unbounded,
}

impl Bound {
    pub fn value(self) -> f64 {
        match self {
            Bound::Finite(v) => v,
            Bound::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Bound::Finite(_))
    }
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Finite(v) => write!(f, "{v}"),
            Bound::Unbounded => f.write_str("inf"),
        }
    }
}

impl Serialize for Bound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bound::Finite(v) => s.serialize_f64(*v),
            Bound::Unbounded => s.serialize_str("inf"),
        }
    }
}

struct MatrixRows<'a>(&'a Matrix);

impl Serialize for MatrixRows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.rows()))?;
        for i in 0..self.0.rows() {
            seq.serialize_element(self.0.row(i))?;
        }
        seq.end()
    }
}

fn serialize_matrix<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    MatrixRows(m).serialize(s)
}

fn serialize_opt_matrix<S: Serializer>(m: &Option<Matrix>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match m {
        Some(m) => MatrixRows(m).serialize(s),
        None => s.serialize_none(),
    }
}

fn is_positive_definite(m: &Matrix) -> Result<bool> {
    if m.rows() == 0 {
        return Ok(false);
    }
    Ok(sym_eigen(m)?.min() > PD_TOL * (1.0 + m.max_abs()))
}

/// Control gain `K`, optionally known to be `k · I_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    k: Matrix,
    scalar: Option<f64>,
}

impl GainMatrix {
    pub fn scalar(k: f64, dim: usize) -> Self {
        Self { k: Matrix::identity(dim).scale(k), scalar: Some(k) }
    }

    /// A general `n × n` gain. An exact multiple of the identity is
    /// recognised as scalar.
    pub fn matrix(k: Matrix) -> Result<Self> {
        if !k.is_square() || k.rows() == 0 {
            return Err(Error::Gain(format!("gain must be square, got {}x{}", k.rows(), k.cols())));
        }
        if !k.is_finite() {
            return Err(Error::Gain("gain has non-finite entries".into()));
        }
        let c = k[(0, 0)];
        let scalar = (k == Matrix::identity(k.rows()).scale(c)).then_some(c);
        Ok(Self { k, scalar })
    }

    pub fn dim(&self) -> usize {
        self.k.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.k
    }

    pub fn scalar_k(&self) -> Option<f64> {
        self.scalar
    }

    pub fn is_symmetric(&self) -> bool {
        self.k.asymmetry() == 0.0
    }

    /// `‖K‖`, the spectral norm.
    pub fn norm(&self) -> f64 {
        match self.scalar {
            Some(k) => k.abs(),
            None => spectral_norm(&self.k).expect("finite square gain"),
        }
    }
}

/// `φᵀ B_ij φ`, computed from the two nonzero entries of `B_ij`.
pub fn reduced_channel_matrix(g: &Graph, spec: &LaplacianSpectrum, i: usize, j: usize) -> Result<Matrix> {
    // validates indices
    g.channel_matrix(i, j)?;
    let m = g.n_agents() - 1;
    let mut c = Matrix::zeros(m, m);
    let a = g.weight(i, j);
    if a == 0.0 {
        return Ok(c);
    }
    for k in 0..m {
        let pik = spec.phi[(i, k)];
        for l in 0..m {
            c[(k, l)] = a * pik * (spec.phi[(j, l)] - spec.phi[(i, l)]);
        }
    }
    Ok(c)
}

/// Diffusion generators `G_c` of the reduced error, one per Brownian motion.
pub fn channel_generators(
    g: &Graph,
    spec: &LaplacianSpectrum,
    noise: &NoiseModel,
    channels: &ChannelSet,
    gain: &GainMatrix,
) -> Result<Vec<Matrix>> {
    let n = gain.dim();
    check_dim(noise, n)?;
    let m = (g.n_agents() - 1) * n;
    let mut gens = vec![Matrix::zeros(m, m); channels.brownian_count];
    for c in &channels.channels {
        let sigma = noise
            .linear_coefficient(c.receiver, c.sender, n)
            .ok_or_else(|| Error::Noise("certificate needs a linear intensity".into()))?;
        let red = reduced_channel_matrix(g, spec, c.receiver, c.sender)?;
        let term = kron(&red, &(gain.as_matrix() * &sigma));
        gens[c.brownian] = &gens[c.brownian] + &term;
    }
    Ok(gens)
}

fn check_dim(noise: &NoiseModel, n: usize) -> Result<()> {
    match noise.fixed_dim() {
        Some(d) if d != n => Err(Error::Dimension(format!(
            "gain is {n}x{n} but intensity matrices are {d}x{d}"
        ))),
        _ => Ok(()),
    }
}

fn lambda0_kron(spec: &LaplacianSpectrum, m: &Matrix) -> Matrix {
    kron(&spec.lambda0, m)
}

/// `Ψ^f_L(K) = Λ⁰ ⊗ (K+Kᵀ)/2 - ((N-1)/N) ‖K‖² σ̄² (Λ⁰ ⊗ I_n)`.
pub fn psi_f_matrix(spec: &LaplacianSpectrum, gain: &GainMatrix, sigma_bar: f64) -> Matrix {
    let n_agents = spec.n_agents() as f64;
    let k = gain.as_matrix();
    let sym = (k + &k.transpose()).scale(0.5);
    let noise = ((n_agents - 1.0) / n_agents) * gain.norm().powi(2) * sigma_bar * sigma_bar;
    let a = lambda0_kron(spec, &sym);
    let b = lambda0_kron(spec, &Matrix::identity(gain.dim())).scale(noise);
    (&a - &b).symmetric_part()
}

/// Open gain interval `(0, upper)` of the small consensus gain condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainInterval {
    pub lower: f64,
    pub upper: Bound,
}

impl GainInterval {
    pub fn contains(&self, k: f64) -> bool {
        k > self.lower && k < self.upper.value()
    }
}

/// `0 < k < N / ((N-1) σ̄²)`; with `σ̄ = 0` the upper end is infinite.
pub fn small_gain_interval(n_agents: usize, sigma_bar: f64) -> Result<GainInterval> {
    if n_agents < 2 {
        return Err(Error::InvalidArgument("gain interval needs at least two agents".into()));
    }
    if !(sigma_bar >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_bar must be >= 0, got {sigma_bar}")));
    }
    let n = n_agents as f64;
    let upper = if sigma_bar == 0.0 {
        Bound::Unbounded
    } else {
        Bound::Finite(n / ((n - 1.0) * sigma_bar * sigma_bar))
    };
    Ok(GainInterval { lower: 0.0, upper })
}

/// Mean-square certificate pair `(Φ_K, Ψ_K)`.
#[derive(Debug, Clone)]
pub struct MsCertificate {
    pub phi_k: Matrix,
    pub psi_k: Matrix,
}

/// `Φ_K = Σ_c G_cᵀ G_c` and `Ψ_K = Λ⁰ ⊗ (K + Kᵀ) - Φ_K`.
///
/// With independent channels this is `Σ_{i,j} (φᵀB_ijᵀφφᵀB_ijφ) ⊗ (Σ_jiᵀKᵀKΣ_ji)`.
/// Shared (symmetric) channels add the cross terms of each pair.
pub fn ms_certificate(
    g: &Graph,
    spec: &LaplacianSpectrum,
    noise: &NoiseModel,
    gain: &GainMatrix,
) -> Result<MsCertificate> {
    if !noise.is_linear() {
        return Err(Error::Noise("mean-square certificate needs a linear intensity".into()));
    }
    let channels = build_channels(g, noise)?;
    let gens = channel_generators(g, spec, noise, &channels, gain)?;
    Ok(ms_certificate_from_generators(spec, gain, &gens))
}

pub fn ms_certificate_from_generators(spec: &LaplacianSpectrum, gain: &GainMatrix, gens: &[Matrix]) -> MsCertificate {
    let m = (spec.n_agents() - 1) * gain.dim();
    let mut phi_k = Matrix::zeros(m, m);
    for gc in gens {
        phi_k = &phi_k + &(&gc.transpose() * gc);
    }
    let phi_k = phi_k.symmetric_part();
    let k = gain.as_matrix();
    let drift = lambda0_kron(spec, &(k + &k.transpose()));
    let psi_k = (&drift - &phi_k).symmetric_part();
    MsCertificate { phi_k, psi_k }
}

/// `(λ_min(Ψ_K), λ_max(Ψ_K))`: `E‖δ(t)‖²` lies between
/// `‖δ0‖² e^{-λ_max t}` and `‖δ0‖² e^{-λ_min t}`.
pub fn ms_rate_bounds(psi_k: &Matrix) -> Result<(f64, f64)> {
    let e = sym_eigen(psi_k)?;
    Ok((e.min(), e.max()))
}

/// General-intensity bound `‖K‖²σ̄²λ_N‖δ0‖² / (N² λ_min(Ψ^f))`, tight for two
/// agents with homogeneous intensities.
pub fn error_bound_general(
    spec: &LaplacianSpectrum,
    gain: &GainMatrix,
    sigma_bar: f64,
    psi_f: &Matrix,
    delta0_sq: f64,
) -> Result<Bound> {
    if delta0_sq == 0.0 {
        return Ok(Bound::Finite(0.0));
    }
    let lmin = sym_eigen(psi_f)?.min();
    if !is_positive_definite(psi_f)? {
        return Ok(Bound::Unbounded);
    }
    let n = spec.n_agents() as f64;
    Ok(Bound::Finite(
        gain.norm().powi(2) * sigma_bar * sigma_bar * spec.lambda_max() * delta0_sq / (n * n * lmin),
    ))
}

/// Linear-intensity bound `λ_max(Φ_K)‖δ0‖² / (N(N-1) λ_min(Ψ_K))`.
pub fn error_bound_linear(cert: &MsCertificate, n_agents: usize, delta0_sq: f64) -> Result<Bound> {
    if delta0_sq == 0.0 {
        return Ok(Bound::Finite(0.0));
    }
    if !is_positive_definite(&cert.psi_k)? {
        return Ok(Bound::Unbounded);
    }
    let n = n_agents as f64;
    let lmax_phi = sym_eigen(&cert.phi_k)?.max();
    let lmin_psi = sym_eigen(&cert.psi_k)?.min();
    Ok(Bound::Finite(lmax_phi * delta0_sq / (n * (n - 1.0) * lmin_psi)))
}

/// Degree-based estimate `σ²k d(G)(N-1) / (2N²(1 - ((N-1)/N)σ²k)) · ‖δ0‖²`
/// for homogeneous intensities with `K = kI`.
pub fn error_bound_degree(k: f64, sigma: f64, n_agents: usize, max_degree: usize, delta0_sq: f64) -> Bound {
    if delta0_sq == 0.0 {
        return Bound::Finite(0.0);
    }
    let n = n_agents as f64;
    let denom = 1.0 - (n - 1.0) / n * sigma * sigma * k;
    if k <= 0.0 || denom <= 0.0 {
        return Bound::Unbounded;
    }
    Bound::Finite(sigma * sigma * k * max_degree as f64 * (n - 1.0) / (2.0 * n * n * denom) * delta0_sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyStateBounds {
    pub general: Bound,
    pub linear: Option<Bound>,
    pub degree: Option<Bound>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoAgentClosedForm {
    pub ms_error: Bound,
    pub as_iff: bool,
    pub ms_iff: bool,
}

/// Exact two-agent quantities with independent channels, `K = kI`.
pub fn two_agent_closed_form(k: f64, sigma12: f64, sigma21: f64, x1_0: &[f64], x2_0: &[f64]) -> Result<TwoAgentClosedForm> {
    if !(sigma12 > 0.0 && sigma21 > 0.0) {
        return Err(Error::InvalidArgument("two-agent intensities must be positive".into()));
    }
    if x1_0.len() != x2_0.len() {
        return Err(Error::Dimension("initial states differ in dimension".into()));
    }
    let s = sigma12 * sigma12 + sigma21 * sigma21;
    let diff_sq: f64 = x1_0.iter().zip(x2_0).map(|(a, b)| (a - b) * (a - b)).sum();
    let as_iff = 2.0 * k + 0.5 * k * k * s > 0.0;
    let ms_iff = 4.0 * k - k * k * s > 0.0;
    let ms_error = if ms_iff {
        let denom = 4.0 * (4.0 - k * s);
        assert!(denom > 0.0, "m.s. consensus with non-positive denominator");
        Bound::Finite(k * s * diff_sq / denom)
    } else {
        Bound::Unbounded
    };
    Ok(TwoAgentClosedForm { ms_error, as_iff, ms_iff })
}

/// Necessary and sufficient mean-square condition for homogeneous
/// independent channels and `K = kI`: connected and `0 < k < N/(σ²(N-1))`.
pub fn ms_decision_homogeneous(n_agents: usize, connected: bool, k: f64, sigma: f64) -> bool {
    if n_agents < 2 || !connected {
        return false;
    }
    small_gain_interval(n_agents, sigma).map(|iv| iv.contains(k)).unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainBands {
    /// Connected and `0 < k < N/(σ̄²(N-1))`, `σ̄ = max σ_ji`.
    pub sufficient: bool,
    /// Connected and `0 < k < N/(σ̲²(N-1))`, `σ̲ = min σ_ji`.
    pub necessary: bool,
}

/// Mean-square gain bands for scalar intensities `σ_ji` and `K = kI`.
pub fn heterogeneous_gain_bands(n_agents: usize, connected: bool, sigma_min: f64, sigma_max: f64, k: f64) -> GainBands {
    GainBands {
        sufficient: ms_decision_homogeneous(n_agents, connected, k, sigma_max),
        necessary: ms_decision_homogeneous(n_agents, connected, k, sigma_min),
    }
}

/// Certified floor `λ_K = λ_min(Ψ_K) + ½ Σ_c λ̂²_min(G_c + G_cᵀ)` of the
/// almost-sure rate functional. A channel whose `G_c + G_cᵀ` is indefinite
/// or singular contributes nothing, since `xᵀ(G_c + G_cᵀ)x` vanishes on the sphere.
pub fn lambda_k_bound(cert: &MsCertificate, gens: &[Matrix]) -> Result<f64> {
    let mut total = sym_eigen(&cert.psi_k)?.min();
    for gc in gens {
        let s = (gc + &gc.transpose()).symmetric_part();
        let eig = sym_eigen(&s)?;
        if eig.min() * eig.max() > 0.0 {
            total += 0.5 * min_abs_eig(&s, false)?.powi(2);
        }
    }
    Ok(total)
}

/// `xᵀΨx + 2 Σ_c (xᵀG_c x)²` on the unit sphere, with its Euclidean gradient.
fn as_functional(psi: &Matrix, sym_gens: &[Matrix], x: &[f64], grad: Option<&mut Vec<f64>>) -> f64 {
    let px = psi.matvec(x);
    let mut value = dot(x, &px);
    let mut g = grad;
    if let Some(gr) = g.as_deref_mut() {
        gr.clear();
        gr.extend(px.iter().map(|v| 2.0 * v));
    }
    for s in sym_gens {
        // xᵀGx = ½ xᵀ(G+Gᵀ)x
        let sx = s.matvec(x);
        let q = 0.5 * dot(x, &sx);
        value += 2.0 * q * q;
        if let Some(gr) = g.as_deref_mut() {
            for (o, v) in gr.iter_mut().zip(&sx) {
                *o += 4.0 * q * v;
            }
        }
    }
    value
}

fn normalize(v: &mut [f64]) {
    let nv = norm(v);
    v.iter_mut().for_each(|x| *x /= nv);
}

fn sphere_descent(psi: &Matrix, sym_gens: &[Matrix], mut x: Vec<f64>, tol: f64) -> (f64, Vec<f64>) {
    normalize(&mut x);
    let mut grad = Vec::new();
    let mut f = as_functional(psi, sym_gens, &x, Some(&mut grad));
    let mut step = 1.0 / (1.0 + psi.max_abs());
    for _ in 0..20_000 {
        let radial = dot(&x, &grad);
        let rgrad: Vec<f64> = grad.iter().zip(&x).map(|(g, xi)| g - radial * xi).collect();
        let rn = norm(&rgrad);
        if rn <= tol {
            break;
        }
        let mut accepted = false;
        while step > 1e-18 {
            let mut cand: Vec<f64> = x.iter().zip(&rgrad).map(|(xi, r)| xi - step * r).collect();
            normalize(&mut cand);
            let fc = as_functional(psi, sym_gens, &cand, None);
            if fc <= f - 1e-4 * step * rn * rn {
                x = cand;
                f = as_functional(psi, sym_gens, &x, Some(&mut grad));
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (f, x)
}

#[derive(Debug, Clone, Serialize)]
pub struct MuEstimate {
    /// Smallest functional value found; an upper estimate of the infimum.
    pub value: f64,
    pub minimizer: Vec<f64>,
    pub restarts: usize,
}

/// Multi-start projected gradient descent for
/// `μ = inf_{‖x‖=1} xᵀΨ_K x + 2 Σ_c (xᵀ G_c x)²`.
///
/// Starts from every eigenvector of `Ψ_K` plus `restarts` seeded random
/// directions. Not a certified value; compare against [`lambda_k_bound`].
pub fn mu_estimate(cert: &MsCertificate, gens: &[Matrix], restarts: usize, seed: u64) -> Result<MuEstimate> {
    let psi = &cert.psi_k;
    let m = psi.rows();
    if m == 0 {
        return Err(Error::InvalidArgument("empty certificate".into()));
    }
    let sym_gens: Vec<Matrix> = gens.iter().map(|g| (g + &g.transpose()).symmetric_part()).collect();
    let eig = sym_eigen(psi)?;
    let mut starts: Vec<Vec<f64>> = (0..m).map(|k| eig.vectors.column(k)).collect();
    starts.extend((0..restarts).map(|r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        (0..m).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
    }));
    let results: Vec<(f64, Vec<f64>)> = starts
        .into_par_iter()
        .map(|x0| sphere_descent(psi, &sym_gens, x0, MU_DEFAULT_TOL))
        .collect();
    let (value, minimizer) = results
        .into_iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("at least one start");
    Ok(MuEstimate { value, minimizer, restarts })
}

/// `(A_L(K), B_{L,K})` for symmetric scalar intensities and symmetric `K`:
///
/// ```text
/// A_L(K)  = Λ⁰ ⊗ K + ½ (φᵀ (Σ_{i,j} B_ij² σ_ji²) φ) ⊗ K²
/// B_{L,K} = (φᵀ (Σ_{i,j} B_ij σ_ji) φ) ⊗ K
/// ```
pub fn as_rate_matrices(
    g: &Graph,
    spec: &LaplacianSpectrum,
    noise: &NoiseModel,
    gain: &GainMatrix,
) -> Result<(Matrix, Matrix)> {
    if !noise.symmetric_channels {
        return Err(Error::Noise("almost-sure rate matrices need symmetric channels".into()));
    }
    if noise.scalar_range().is_none() {
        return Err(Error::Noise("almost-sure rate matrices need scalar intensities".into()));
    }
    if !gain.is_symmetric() {
        return Err(Error::Gain("almost-sure rate matrices need a symmetric gain".into()));
    }
    build_channels(g, noise)?;
    let n = g.n_agents();
    let mut sq = Matrix::zeros(n, n);
    let mut lin = Matrix::zeros(n, n);
    for (i, j) in g.ordered_edges() {
        let sigma = noise.linear_coefficient(i, j, 1).expect("scalar intensity")[(0, 0)];
        let b = g.channel_matrix(i, j)?;
        sq = &sq + &(&b * &b).scale(sigma * sigma);
        lin = &lin + &b.scale(sigma);
    }
    let phi = &spec.phi;
    let reduce = |m: &Matrix| (&(&phi.transpose() * m) * phi).symmetric_part();
    let k = gain.as_matrix();
    let a = &lambda0_kron(spec, k) + &kron(&reduce(&sq), &(k * k)).scale(0.5);
    let b = kron(&reduce(&lin), k);
    Ok((a.symmetric_part(), b.symmetric_part()))
}

/// Almost-sure condition for homogeneous symmetric channels, `K = kI`:
/// connected and `k + k²σ²/2 > 0`.
pub fn as_decision_homogeneous_symmetric(k: f64, sigma: f64, connected: bool) -> bool {
    connected && k + 0.5 * k * k * sigma * sigma > 0.0
}

/// `k* = N / (2(N-1)σ²)`, the midpoint of the small gain interval.
pub fn optimal_gain(n_agents: usize, sigma: f64) -> Result<f64> {
    if n_agents < 2 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("optimal gain needs N >= 2 and sigma > 0".into()));
    }
    let n = n_agents as f64;
    Ok(n / (2.0 * (n - 1.0) * sigma * sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdicts {
    pub ms_sufficient: bool,
    /// Exact mean-square decision, homogeneous intensities with `K = kI` only.
    pub ms_iff: Option<bool>,
    pub as_sufficient: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    /// Seed of the randomized restarts in [`mu_estimate`].
    pub seed: u64,
    pub n_agents: usize,
    pub state_dim: usize,
    pub wiring: &'static str,
    pub connected: bool,
    pub lambda_2: f64,
    pub lambda_n: f64,
    pub max_degree: usize,
    pub diameter: Option<usize>,
    pub synchronizability: Option<f64>,
    pub sigma_bar: f64,
    pub delta0_sq: f64,
    #[serde(serialize_with = "serialize_matrix")]
    pub psi_f: Matrix,
    pub psi_f_min_eig: f64,
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub phi_k: Option<Matrix>,
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub psi_k: Option<Matrix>,
    pub ms_rate_interval: Option<(f64, f64)>,
    pub ss_error_bounds: SteadyStateBounds,
    pub lambda_k: Option<f64>,
    pub mu_estimate: Option<f64>,
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub as_rate_a: Option<Matrix>,
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub as_rate_b: Option<Matrix>,
    pub verdicts: Verdicts,
    pub gain_interval: Option<GainInterval>,
    pub gain_bands: Option<GainBands>,
    pub optimal_k: Option<f64>,
    pub scalar_k: Option<f64>,
}

/// Options for [`analyze`].
#[derive(Debug, Clone, Copy)]
pub struct AnalysisOptions {
    pub mu_restarts: usize,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self { mu_restarts: MU_DEFAULT_RESTARTS, seed: 0 }
    }
}

/// Every certificate, bound and verdict that applies to `(g, noise, gain)`
/// with initial state `x0` (stacked, agent-major).
pub fn analyze(
    g: &Graph,
    noise: &NoiseModel,
    gain: &GainMatrix,
    x0: &[f64],
    opts: AnalysisOptions,
) -> Result<AnalysisReport> {
    let n_agents = g.n_agents();
    let dim = gain.dim();
    if n_agents < 2 {
        return Err(Error::InvalidArgument("analysis needs at least two agents".into()));
    }
    check_dim(noise, dim)?;
    if x0.len() != n_agents * dim {
        return Err(Error::Dimension(format!("x0 has {} entries, expected {}", x0.len(), n_agents * dim)));
    }
    let channels = build_channels(g, noise)?;
    let spec = g.spectrum()?;
    let connected = is_connected(g, &spec, CONNECTIVITY_TOL);
    let sigma_bar = noise.growth_bound();
    let delta0 = spec.reduce(x0, dim);
    let delta0_sq = dot(&delta0, &delta0);

    let psi_f = psi_f_matrix(&spec, gain, sigma_bar);
    let psi_f_min_eig = sym_eigen(&psi_f)?.min();
    let psi_f_pd = is_positive_definite(&psi_f)?;

    let mut report = AnalysisReport {
        seed: opts.seed,
        n_agents,
        state_dim: dim,
        wiring: if noise.symmetric_channels { "symmetric" } else { "independent" },
        connected,
        lambda_2: spec.algebraic_connectivity(),
        lambda_n: spec.lambda_max(),
        max_degree: g.max_degree(),
        diameter: g.diameter(),
        synchronizability: spec.synchronizability(),
        sigma_bar,
        delta0_sq,
        psi_f_min_eig,
        ss_error_bounds: SteadyStateBounds {
            general: error_bound_general(&spec, gain, sigma_bar, &psi_f, delta0_sq)?,
            linear: None,
            degree: None,
        },
        psi_f,
        phi_k: None,
        psi_k: None,
        ms_rate_interval: None,
        lambda_k: None,
        mu_estimate: None,
        as_rate_a: None,
        as_rate_b: None,
        verdicts: Verdicts { ms_sufficient: false, ms_iff: None, as_sufficient: false },
        gain_interval: small_gain_interval(n_agents, sigma_bar).ok(),
        gain_bands: None,
        optimal_k: None,
        scalar_k: gain.scalar_k(),
    };

    if !noise.is_linear() {
        // the general-intensity certificate assumes independent channels,
        // which build_channels enforces for general intensities
        report.verdicts.ms_sufficient = connected && psi_f_pd;
        report.verdicts.as_sufficient = report.verdicts.ms_sufficient;
        return Ok(report);
    }

    let gens = channel_generators(g, &spec, noise, &channels, gain)?;
    let cert = ms_certificate_from_generators(&spec, gain, &gens);
    let (lmin, lmax) = ms_rate_bounds(&cert.psi_k)?;
    let psi_k_pd = is_positive_definite(&cert.psi_k)?;
    let lambda_k = lambda_k_bound(&cert, &gens)?;
    let mu = mu_estimate(&cert, &gens, opts.mu_restarts, opts.seed)?;

    report.ss_error_bounds.linear = Some(error_bound_linear(&cert, n_agents, delta0_sq)?);
    report.ms_rate_interval = Some((lmin, lmax));
    report.lambda_k = Some(lambda_k);
    report.mu_estimate = Some(mu.value);

    let ms_sufficient = connected && (psi_k_pd || (!noise.symmetric_channels && psi_f_pd));
    let mut as_sufficient = ms_sufficient || (connected && lambda_k > PD_TOL * (1.0 + cert.psi_k.max_abs()));

    if let (Some(k), Some((smin, smax))) = (gain.scalar_k(), noise.scalar_range()) {
        report.gain_bands = Some(heterogeneous_gain_bands(n_agents, connected, smin, smax, k));
    }
    if let (Some(k), Some(sigma)) = (gain.scalar_k(), noise.homogeneous_sigma()) {
        report.ss_error_bounds.degree = Some(error_bound_degree(k, sigma, n_agents, g.max_degree(), delta0_sq));
        report.optimal_k = optimal_gain(n_agents, sigma).ok();
        report.verdicts.ms_iff = Some(if noise.symmetric_channels {
            // Ψ_K is a multiple of Λ⁰ ⊗ I_n here, so definiteness is exact
            connected && psi_k_pd
        } else {
            ms_decision_homogeneous(n_agents, connected, k, sigma)
        });
        if noise.symmetric_channels {
            as_sufficient |= as_decision_homogeneous_symmetric(k, sigma, connected);
        }
    }
    if noise.symmetric_channels && noise.scalar_range().is_some() && gain.is_symmetric() {
        let (a, b) = as_rate_matrices(g, &spec, noise, gain)?;
        report.as_rate_a = Some(a);
        report.as_rate_b = Some(b);
    }

    report.phi_k = Some(cert.phi_k);
    report.psi_k = Some(cert.psi_k);
    report.verdicts.ms_sufficient = ms_sufficient;
    report.verdicts.as_sufficient = as_sufficient;
    Ok(report)
}

fn fmt_matrix(m: &Matrix) -> String {
    let rows: Vec<String> = (0..m.rows())
        .map(|i| {
            let cells: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

impl AnalysisReport {
    /// `key: value` lines; field names match the JSON variant.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_agents", self.n_agents.to_string());
        kv("state_dim", self.state_dim.to_string());
        kv("wiring", self.wiring.to_string());
        kv("connected", self.connected.to_string());
        kv("lambda_2", self.lambda_2.to_string());
        kv("lambda_n", self.lambda_n.to_string());
        kv("max_degree", self.max_degree.to_string());
        kv("diameter", self.diameter.map_or("inf".into(), |d| d.to_string()));
        kv("synchronizability", fmt_opt(self.synchronizability));
        kv("sigma_bar", self.sigma_bar.to_string());
        kv("scalar_k", fmt_opt(self.scalar_k));
        kv("delta0_sq", self.delta0_sq.to_string());
        kv("psi_f", fmt_matrix(&self.psi_f));
        kv("psi_f_min_eig", self.psi_f_min_eig.to_string());
        kv("phi_k", self.phi_k.as_ref().map_or("n/a".into(), fmt_matrix));
        kv("psi_k", self.psi_k.as_ref().map_or("n/a".into(), fmt_matrix));
        kv(
            "ms_rate_interval",
            self.ms_rate_interval.map_or("n/a".into(), |(a, b)| format!("({a}, {b})")),
        );
        kv("ss_bound_general", self.ss_error_bounds.general.to_string());
        kv("ss_bound", fmt_opt(self.ss_error_bounds.linear));
        kv("ss_bound_degree", fmt_opt(self.ss_error_bounds.degree));
        kv("lambda_k", fmt_opt(self.lambda_k));
        kv("mu_estimate", fmt_opt(self.mu_estimate));
        kv("as_rate_a", self.as_rate_a.as_ref().map_or("n/a".into(), fmt_matrix));
        kv("as_rate_b", self.as_rate_b.as_ref().map_or("n/a".into(), fmt_matrix));
        kv("ms_sufficient", self.verdicts.ms_sufficient.to_string());
        kv("ms_iff", fmt_opt(self.verdicts.ms_iff));
        kv("as_sufficient", self.verdicts.as_sufficient.to_string());
        kv(
            "gain_interval",
            self.gain_interval.map_or("n/a".into(), |iv| format!("({}, {})", iv.lower, iv.upper)),
        );
        kv(
            "gain_bands",
            self.gain_bands
                .map_or("n/a".into(), |b| format!("sufficient={} necessary={}", b.sufficient, b.necessary)),
        );
        kv("optimal_k", fmt_opt(self.optimal_k));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn homog(sigma: f64) -> NoiseModel {
        NoiseModel::homogeneous(sigma).unwrap()
    }

    #[test]
    fn psi_f_two_agents() {
        let spec = Graph::complete(2).spectrum().unwrap();
        let p = psi_f_matrix(&spec, &GainMatrix::scalar(1.0, 1), 1.0);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-14);
        let z = psi_f_matrix(&spec, &GainMatrix::scalar(0.0, 1), 1.0);
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn psi_f_complete_four_closed_form() {
        let spec = Graph::complete(4).spectrum().unwrap();
        let (k, s) = (0.7, 1.3);
        let p = psi_f_matrix(&spec, &GainMatrix::scalar(k, 2), s);
        let want = kron(&spec.lambda0, &Matrix::identity(2)).scale(k - 0.75 * k * k * s * s);
        assert!(p.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gain_intervals() {
        assert_eq!(small_gain_interval(2, 1.0).unwrap().upper, Bound::Finite(2.0));
        let iv = small_gain_interval(4, 1.0).unwrap();
        assert!((iv.upper.value() - 4.0 / 3.0).abs() < 1e-15);
        assert!(iv.contains(1.0) && !iv.contains(1.4) && !iv.contains(0.0));
        let big = small_gain_interval(1_000_000, 1.0).unwrap();
        assert!((big.upper.value() - 1.0).abs() < 1e-5);
        assert_eq!(small_gain_interval(3, 0.0).unwrap().upper, Bound::Unbounded);
    }

    #[test]
    fn two_agent_certificates() {
        let g = Graph::complete(2);
        let spec = g.spectrum().unwrap();
        let c = ms_certificate(&g, &spec, &homog(1.0), &GainMatrix::scalar(1.0, 1)).unwrap();
        assert!((c.psi_k[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((c.phi_k[(0, 0)] - 2.0).abs() < 1e-14);
        assert_eq!(ms_rate_bounds(&c.psi_k).unwrap(), (c.psi_k[(0, 0)], c.psi_k[(0, 0)]));
        let z = ms_certificate(&g, &spec, &homog(1.0), &GainMatrix::scalar(0.0, 1)).unwrap();
        assert_eq!((z.phi_k.max_abs(), z.psi_k.max_abs()), (0.0, 0.0));
    }

    #[test]
    fn outside_gain_interval_flips_rate_sign() {
        let g = Graph::complete(3);
        let spec = g.spectrum().unwrap();
        let c = ms_certificate(&g, &spec, &homog(1.0), &GainMatrix::scalar(2.0, 1)).unwrap();
        assert!(ms_rate_bounds(&c.psi_k).unwrap().0 < 0.0);
    }

    #[test]
    fn complete_four_rate_exponents() {
        let g = Graph::complete(4);
        let spec = g.spectrum().unwrap();
        let (k, s) = (0.6, 1.0);
        let c = ms_certificate(&g, &spec, &homog(s), &GainMatrix::scalar(k, 1)).unwrap();
        let (lo, hi) = ms_rate_bounds(&c.psi_k).unwrap();
        let coef = 2.0 * k - 1.5 * s * s * k * k;
        assert!((lo - 4.0 * coef).abs() < 1e-12 && (hi - 4.0 * coef).abs() < 1e-12);
    }

    #[test]
    fn steady_state_bounds() {
        let g = Graph::complete(2);
        let spec = g.spectrum().unwrap();
        let c = ms_certificate(&g, &spec, &homog(1.0), &GainMatrix::scalar(1.0, 1)).unwrap();
        // ‖δ0‖² = 2 for x0 = (1, -1)
        assert!((error_bound_linear(&c, 2, 2.0).unwrap().value() - 1.0).abs() < 1e-12);
        assert_eq!(error_bound_linear(&c, 2, 0.0).unwrap(), Bound::Finite(0.0));
        let pf = psi_f_matrix(&spec, &GainMatrix::scalar(1.0, 1), 1.0);
        assert_eq!(error_bound_general(&spec, &GainMatrix::scalar(1.0, 1), 1.0, &pf, 0.0).unwrap(), Bound::Finite(0.0));
        assert_eq!(error_bound_degree(0.5, 1.0, 4, 3, 0.0), Bound::Finite(0.0));
        let b = error_bound_degree(0.5, 1.0, 4, 3, 1.0).value();
        assert!((b - 0.225).abs() < 1e-15);
        let bad = ms_certificate(&g, &spec, &homog(1.0), &GainMatrix::scalar(3.0, 1)).unwrap();
        assert_eq!(error_bound_linear(&bad, 2, 2.0).unwrap(), Bound::Unbounded);
    }

    #[test]
    fn two_agent_closed_forms() {
        let r = two_agent_closed_form(1.0, 1.0, 1.0, &[1.0], &[-1.0]).unwrap();
        assert_eq!(r.ms_error, Bound::Finite(1.0));
        assert!(r.as_iff && r.ms_iff);
        let r = two_agent_closed_form(2.2, 1.0, 1.0, &[1.0], &[-1.0]).unwrap();
        assert!(!r.ms_iff && r.ms_error == Bound::Unbounded);
        let r = two_agent_closed_form(-3.0, 1.0, 1.0, &[1.0], &[-1.0]).unwrap();
        assert!(r.as_iff && !r.ms_iff);
    }

    #[test]
    fn homogeneous_ms_decision() {
        assert!(ms_decision_homogeneous(2, true, 1.0, 1.0));
        assert!(!ms_decision_homogeneous(2, true, 2.2, 1.0));
        assert!(!ms_decision_homogeneous(4, false, 0.5, 1.0));
    }

    #[test]
    fn gain_bands() {
        let b = heterogeneous_gain_bands(2, true, 0.5, 1.5, 0.8);
        assert!(b.sufficient && b.necessary);
        let b = heterogeneous_gain_bands(2, true, 0.5, 1.5, 4.0);
        assert!(!b.sufficient && b.necessary);
        let b = heterogeneous_gain_bands(2, true, 0.5, 1.5, 9.0);
        assert!(!b.sufficient && !b.necessary);
    }

    #[test]
    fn lambda_k_and_mu_two_agents() {
        let g = Graph::complete(2);
        let spec = g.spectrum().unwrap();
        let noise = homog(1.0);
        let ch = build_channels(&g, &noise).unwrap();
        for (k, want) in [(1.0, 6.0), (0.0, 0.0)] {
            let gain = GainMatrix::scalar(k, 1);
            let gens = channel_generators(&g, &spec, &noise, &ch, &gain).unwrap();
            let cert = ms_certificate_from_generators(&spec, &gain, &gens);
            let lk = lambda_k_bound(&cert, &gens).unwrap();
            assert!((lk - want).abs() < 1e-12, "λ_K = {lk}");
            let mu = mu_estimate(&cert, &gens, 8, 1).unwrap();
            assert!((mu.value - want).abs() < 1e-12, "μ = {}", mu.value);
        }
    }

    #[test]
    fn mu_not_below_certified_floor_on_triangle() {
        let g = Graph::complete(3);
        let spec = g.spectrum().unwrap();
        let noise = NoiseModel::linear_scalar(
            &g,
            BTreeMap::from([((0, 1), 0.4), ((1, 0), 0.9), ((0, 2), 1.1), ((2, 0), 0.3), ((1, 2), 0.7), ((2, 1), 0.5)]),
        )
        .unwrap();
        let gain = GainMatrix::scalar(0.8, 1);
        let ch = build_channels(&g, &noise).unwrap();
        let gens = channel_generators(&g, &spec, &noise, &ch, &gain).unwrap();
        let cert = ms_certificate_from_generators(&spec, &gain, &gens);
        let lk = lambda_k_bound(&cert, &gens).unwrap();
        let mu = mu_estimate(&cert, &gens, MU_DEFAULT_RESTARTS, 7).unwrap();
        assert!(lk >= sym_eigen(&cert.psi_k).unwrap().min());
        assert!(mu.value >= lk - 1e-8, "μ = {} < λ_K = {lk}", mu.value);
    }

    #[test]
    fn as_rate_matrices_two_agents() {
        let g = Graph::complete(2);
        let spec = g.spectrum().unwrap();
        let noise = homog(1.0).with_symmetric_channels(true);
        let (a, b) = as_rate_matrices(&g, &spec, &noise, &GainMatrix::scalar(1.0, 1)).unwrap();
        assert!((a[(0, 0)] - 3.0).abs() < 1e-14);
        assert!((b[(0, 0)] + 2.0).abs() < 1e-14);
        let (a, b) = as_rate_matrices(&g, &spec, &noise, &GainMatrix::scalar(0.0, 1)).unwrap();
        assert_eq!((a.max_abs(), b.max_abs()), (0.0, 0.0));
        assert!(as_rate_matrices(&g, &spec, &homog(1.0), &GainMatrix::scalar(1.0, 1)).is_err());
        let skew = GainMatrix::matrix(Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]])).unwrap();
        assert!(as_rate_matrices(&g, &spec, &noise, &skew).is_err());
    }

    #[test]
    fn as_decisions() {
        assert!(as_decision_homogeneous_symmetric(-3.0, 1.0, true));
        assert!(!as_decision_homogeneous_symmetric(-1.0, 1.0, true));
        assert!(as_decision_homogeneous_symmetric(0.1, 1.0, true));
        assert!(!as_decision_homogeneous_symmetric(0.1, 1.0, false));
    }

    #[test]
    fn optimal_gains() {
        assert_eq!(optimal_gain(2, 1.0).unwrap(), 1.0);
        assert!((optimal_gain(4, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        for (n, s) in [(3, 0.5), (7, 2.0)] {
            let iv = small_gain_interval(n, s).unwrap();
            assert!((optimal_gain(n, s).unwrap() - 0.5 * iv.upper.value()).abs() < 1e-12);
        }
        assert!(optimal_gain(3, 0.0).is_err());
    }

    #[test]
    fn report_for_two_agents() {
        let g = Graph::complete(2);
        let r = analyze(&g, &homog(1.0), &GainMatrix::scalar(1.0, 1), &[1.0, -1.0], AnalysisOptions::default()).unwrap();
        assert_eq!(r.verdicts.ms_iff, Some(true));
        assert_eq!(r.gain_interval.unwrap().upper, Bound::Finite(2.0));
        assert!((r.ss_error_bounds.linear.unwrap().value() - 1.0).abs() < 1e-12);
        let text = r.to_text();
        assert!(text.contains("ms_iff: true"));
        assert!(text.contains("gain_interval: (0, 2)"));
        let line = text.lines().find(|l| l.starts_with("ss_bound: ")).unwrap();
        let v: f64 = line["ss_bound: ".len()..].parse().unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["verdicts"]["ms_iff"], serde_json::json!(true));
    }

    #[test]
    fn report_for_disconnected_graph() {
        let g = Graph::new(4, &[(0, 1), (2, 3)]).unwrap();
        let r = analyze(&g, &homog(1.0), &GainMatrix::scalar(0.5, 1), &[1.0, 0.0, -1.0, 2.0], AnalysisOptions::default())
            .unwrap();
        assert!(!r.verdicts.ms_sufficient);
        assert_eq!(r.verdicts.ms_iff, Some(false));
        assert_eq!(r.ss_error_bounds.linear, Some(Bound::Unbounded));
        assert_eq!(r.ss_error_bounds.general, Bound::Unbounded);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["ss_error_bounds"]["linear"], serde_json::json!("inf"));
    }

    #[test]
    fn report_negative_gain_symmetric() {
        let g = Graph::complete(3);
        let noise = homog(1.0).with_symmetric_channels(true);
        let r = analyze(&g, &noise, &GainMatrix::scalar(-3.0, 1), &[1.0, 0.0, -1.0], AnalysisOptions::default()).unwrap();
        assert!(r.verdicts.as_sufficient);
        assert!(!r.verdicts.ms_sufficient);
        assert_eq!(r.verdicts.ms_iff, Some(false));
    }
}
