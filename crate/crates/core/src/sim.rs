//! Euler–Maruyama integration of the closed-loop network
//!
//! ```text
//! dx = -(L ⊗ K) x dt + Σ_{i,j} a_ij [η_i ⊗ K f_ji(x_j - x_i)] dw_ji
//! ```
//!
//! The state is carried as the consensus value `x̄ = (1/N)(1ᵀ ⊗ I_n) x` plus
//! the disagreement `δ = x - 1 ⊗ x̄`, so `‖δ‖` stays accurate long after it
//! has fallen below the rounding level of `x`. Each step applies the same
//! increment to `x` as the plain scheme and then splits it.

use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::analysis::{channel_generators, GainMatrix};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{dot, sym_expm, Matrix};
use crate::noise::{build_channels, ChannelSet, NoiseKind, NoiseModel};
use crate::stats::{least_squares, Moments};

pub const DEFAULT_DT: f64 = 1e-3;
pub const MAX_SAMPLES: usize = 10_000;
/// Trajectories stop once the state norm passes this value.
pub const DIVERGENCE_LIMIT: f64 = 1e150;
pub const DEFAULT_SLOPE_WINDOW: f64 = 0.5;
pub const THREADS_ENV: &str = "CONSENSUSLAB_THREADS";
const MAX_BATCHES: usize = 64;

/// How much of each trial [`run_ensemble`] retains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Keep {
    #[default]
    Nothing,
    /// Sample times and `‖δ‖` only.
    Norms,
    /// Everything, including stacked states.
    Full,
}

impl Keep {
    pub fn as_str(self) -> &'static str {
        match self {
            Keep::Nothing => "none",
            Keep::Norms => "norms",
            Keep::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Keep::Nothing),
            "norms" => Some(Keep::Norms),
            "full" => Some(Keep::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub graph: Graph,
    pub noise: NoiseModel,
    pub gain: GainMatrix,
    /// Stacked agent-major initial state, length `N·n`.
    pub x0: Vec<f64>,
    pub dt: f64,
    pub t_end: f64,
    /// Steps between stored samples; `None` keeps at most [`MAX_SAMPLES`].
    pub sample_stride: Option<usize>,
    pub seed: u64,
    pub trials: usize,
    pub keep: Keep,
    /// Trailing fraction of the horizon used for log-slope fits.
    pub slope_window: f64,
}

impl SimConfig {
    pub fn new(graph: Graph, noise: NoiseModel, gain: GainMatrix, x0: Vec<f64>) -> Self {
        Self {
            graph,
            noise,
            gain,
            x0,
            dt: DEFAULT_DT,
            t_end: 10.0,
            sample_stride: None,
            seed: 0,
            trials: 1,
            keep: Keep::Nothing,
            slope_window: DEFAULT_SLOPE_WINDOW,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.gain.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let need = self.graph.n_agents() * self.gain.dim();
        if self.x0.len() != need {
            return Err(Error::Dimension(format!("x0 has {} entries, expected {need}", self.x0.len())));
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("x0 has non-finite entries".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon {} is shorter than dt {}", self.t_end, self.dt)));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be positive".into()));
        }
        if self.sample_stride == Some(0) {
            return Err(Error::InvalidArgument("sample_stride must be positive".into()));
        }
        if !(self.slope_window > 0.0 && self.slope_window <= 1.0) {
            return Err(Error::InvalidArgument(format!("slope window must be in (0, 1], got {}", self.slope_window)));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }

    pub fn stride(&self) -> usize {
        self.sample_stride.unwrap_or_else(|| default_stride(self.steps()))
    }
}

fn default_stride(steps: usize) -> usize {
    steps.div_ceil(MAX_SAMPLES - 2).max(1)
}

/// Step indices at which samples are stored: `0, s, 2s, …` and the last step.
pub fn sample_steps(steps: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=steps).step_by(stride).collect();
    if *v.last().unwrap() != steps {
        v.push(steps);
    }
    v
}

pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

#[derive(Clone, Debug)]
enum Coef {
    Scalar(f64),
    Matrix(Matrix),
}

impl Coef {
    fn from_matrix(m: Matrix) -> Self {
        let c = m[(0, 0)];
        if m == Matrix::identity(m.rows()).scale(c) {
            Coef::Scalar(c)
        } else {
            Coef::Matrix(m)
        }
    }

    /// `out += scale · C x`
    fn apply_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Coef::Scalar(c) => {
                let a = c * scale;
                out.iter_mut().zip(x).for_each(|(o, v)| *o += a * v);
            }
            Coef::Matrix(m) => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o += scale * dot(m.row(r), x);
                }
            }
        }
    }
}

struct Prepared {
    n_agents: usize,
    dim: usize,
    neighbors: Vec<Vec<usize>>,
    gain: Coef,
    /// `(receiver, sender, brownian)` in channel order.
    channels: Vec<(usize, usize, usize)>,
    /// `K Σ_ji` per channel for linear intensities.
    coeffs: Vec<Coef>,
    general: Option<Arc<dyn Fn(usize, usize, &[f64]) -> Vec<f64> + Send + Sync>>,
    brownian_count: usize,
}

impl Prepared {
    fn new(g: &Graph, noise: &NoiseModel, gain: &GainMatrix) -> Result<Self> {
        let dim = gain.dim();
        if let Some(d) = noise.fixed_dim() {
            if d != dim {
                return Err(Error::Dimension(format!("gain is {dim}x{dim} but intensity matrices are {d}x{d}")));
            }
        }
        let set: ChannelSet = build_channels(g, noise)?;
        let general = match &noise.kind {
            NoiseKind::General { f, .. } => Some(f.clone()),
            _ => None,
        };
        let mut coeffs = Vec::new();
        if general.is_none() {
            for c in &set.channels {
                let sigma = noise.linear_coefficient(c.receiver, c.sender, dim).expect("linear intensity");
                coeffs.push(Coef::from_matrix(gain.as_matrix() * &sigma));
            }
        }
        Ok(Self {
            n_agents: g.n_agents(),
            dim,
            neighbors: (0..g.n_agents()).map(|i| g.neighbors(i).collect()).collect(),
            gain: Coef::from_matrix(gain.as_matrix().clone()),
            channels: set.channels.iter().map(|c| (c.receiver, c.sender, c.brownian)).collect(),
            coeffs,
            general,
            brownian_count: set.brownian_count,
        })
    }
}

/// One simulated path, sampled every `stride` steps.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `x(t_k)`, stacked agent-major; empty when states were not stored.
    pub states: Vec<Vec<f64>>,
    /// `‖δ(t_k)‖`.
    pub delta_norms: Vec<f64>,
    /// `x̄(t_k)`.
    pub consensus: Vec<Vec<f64>>,
    /// `w_c` at the last completed step, one per Brownian motion.
    pub brownian_terminal: Vec<f64>,
    /// Time at which the state norm left the finite range.
    pub diverged_at: Option<f64>,
}

impl Trajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn integrate(
    p: &Prepared,
    x0: &[f64],
    dt: f64,
    steps: usize,
    samples: &[usize],
    store_states: bool,
    mut increments: impl FnMut(usize, &mut [f64]),
) -> Trajectory {
    let (na, n) = (p.n_agents, p.dim);
    let mut xbar = vec![0.0; n];
    for i in 0..na {
        for d in 0..n {
            xbar[d] += x0[i * n + d];
        }
    }
    xbar.iter_mut().for_each(|v| *v /= na as f64);
    let mut delta: Vec<f64> = (0..na * n).map(|k| x0[k] - xbar[k % n]).collect();

    let mut dw = vec![0.0; p.brownian_count];
    let mut w = vec![0.0; p.brownian_count];
    let mut inc = vec![0.0; na * n];
    let mut diff = vec![0.0; n];
    let mut tr = Trajectory {
        times: Vec::with_capacity(samples.len()),
        delta_norms: Vec::with_capacity(samples.len()),
        ..Default::default()
    };

    let record = |tr: &mut Trajectory, step: usize, xbar: &[f64], delta: &[f64]| {
        tr.times.push(step as f64 * dt);
        tr.delta_norms.push(dot(delta, delta).sqrt());
        tr.consensus.push(xbar.to_vec());
        if store_states {
            tr.states.push((0..na * n).map(|k| xbar[k % n] + delta[k]).collect());
        }
    };

    record(&mut tr, 0, &xbar, &delta);
    let mut next = 1;
    for step in 0..steps {
        increments(step, &mut dw);
        inc.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..na {
            if p.neighbors[i].is_empty() {
                continue;
            }
            diff.iter_mut().for_each(|v| *v = 0.0);
            for &j in &p.neighbors[i] {
                for d in 0..n {
                    diff[d] += delta[j * n + d] - delta[i * n + d];
                }
            }
            p.gain.apply_add(&diff, dt, &mut inc[i * n..(i + 1) * n]);
        }
        for (ci, &(r, s, b)) in p.channels.iter().enumerate() {
            let db = dw[b];
            for d in 0..n {
                diff[d] = delta[s * n + d] - delta[r * n + d];
            }
            let out = &mut inc[r * n..(r + 1) * n];
            match &p.general {
                None => p.coeffs[ci].apply_add(&diff, db, out),
                Some(f) => {
                    let y = f(r, s, &diff);
                    p.gain.apply_add(&y, db, out);
                }
            }
        }
        w.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);

        let mut mean = vec![0.0; n];
        for k in 0..na * n {
            delta[k] += inc[k];
            mean[k % n] += delta[k];
        }
        for d in 0..n {
            mean[d] /= na as f64;
            xbar[d] += mean[d];
        }
        for k in 0..na * n {
            delta[k] -= mean[k % n];
        }

        let norm_sq = dot(&delta, &delta) + na as f64 * dot(&xbar, &xbar);
        if !(norm_sq.is_finite() && norm_sq.sqrt() <= DIVERGENCE_LIMIT) {
            tr.diverged_at = Some((step + 1) as f64 * dt);
            break;
        }
        if next < samples.len() && step + 1 == samples[next] {
            record(&mut tr, step + 1, &xbar, &delta);
            next += 1;
        }
    }
    tr.brownian_terminal = w;
    tr
}

/// Simulates trial `trial_index` of `cfg`, storing sampled states.
pub fn simulate_trajectory(cfg: &SimConfig, trial_index: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let p = Prepared::new(&cfg.graph, &cfg.noise, &cfg.gain)?;
    Ok(run_trial(&p, cfg, trial_index, true))
}

fn run_trial(p: &Prepared, cfg: &SimConfig, trial: u64, store_states: bool) -> Trajectory {
    let steps = cfg.steps();
    let samples = sample_steps(steps, cfg.stride());
    let mut rng = trial_rng(cfg.seed, trial);
    let sq = cfg.dt.sqrt();
    integrate(p, &cfg.x0, cfg.dt, steps, &samples, store_states, |_, dw| {
        for v in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sq * z;
        }
    })
}

/// Pre-drawn Brownian increments, one row of `channels` values per step.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    pub dt: f64,
    pub channels: usize,
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn sample<R: rand::Rng + ?Sized>(channels: usize, steps: usize, dt: f64, rng: &mut R) -> Self {
        let sq = dt.sqrt();
        let increments = (0..channels * steps)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sq * z
            })
            .collect();
        Self { dt, channels, increments }
    }

    pub fn from_increments(dt: f64, channels: usize, increments: Vec<f64>) -> Result<Self> {
        if channels == 0 || increments.len() % channels != 0 {
            return Err(Error::Dimension(format!("{} increments for {channels} channels", increments.len())));
        }
        Ok(Self { dt, channels, increments })
    }

    pub fn steps(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.increments.len() / self.channels
        }
    }

    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.channels..(step + 1) * self.channels]
    }

    /// Same path on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(Error::InvalidArgument(format!("cannot coarsen {} steps by {factor}", self.steps())));
        }
        let coarse_steps = self.steps() / factor;
        let mut increments = vec![0.0; coarse_steps * self.channels];
        for s in 0..coarse_steps {
            for f in 0..factor {
                let row = self.increment(s * factor + f);
                for (c, v) in row.iter().enumerate() {
                    increments[s * self.channels + c] += v;
                }
            }
        }
        Ok(Self { dt: self.dt * factor as f64, channels: self.channels, increments })
    }

    /// `w(step · dt)`.
    pub fn value_at(&self, step: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.channels];
        for s in 0..step {
            w.iter_mut().zip(self.increment(s)).for_each(|(a, b)| *a += b);
        }
        w
    }
}

/// Integrates `cfg` on the grid and increments of `path` (its `dt` replaces
/// `cfg.dt`); states are stored.
pub fn simulate_with_path(cfg: &SimConfig, path: &BrownianPath) -> Result<Trajectory> {
    cfg.validate()?;
    let p = Prepared::new(&cfg.graph, &cfg.noise, &cfg.gain)?;
    if path.channels != p.brownian_count {
        return Err(Error::Dimension(format!(
            "path has {} channels, network needs {}",
            path.channels, p.brownian_count
        )));
    }
    let steps = path.steps();
    let samples = sample_steps(steps, cfg.sample_stride.unwrap_or_else(|| default_stride(steps)));
    Ok(integrate(&p, &cfg.x0, path.dt, steps, &samples, true, |s, dw| {
        dw.copy_from_slice(path.increment(s))
    }))
}

/// Drift `A = Λ⁰ ⊗ K + ½ Σ_c G_c²` and generators `G_c` of the reduced error
/// when all of them commute, so that
/// `δ̄(t) = exp(-A t + Σ_c G_c w_c(t)) δ̄(0)` holds pathwise.
pub fn closed_form_exponents(cfg: &SimConfig) -> Result<(Matrix, Vec<Matrix>)> {
    if !cfg.noise.symmetric_channels {
        return Err(Error::InvalidArgument("closed form needs symmetric channels".into()));
    }
    if !cfg.noise.is_linear() {
        return Err(Error::InvalidArgument("closed form needs a linear intensity".into()));
    }
    if !cfg.gain.is_symmetric() {
        return Err(Error::InvalidArgument("closed form needs a symmetric gain".into()));
    }
    let g = &cfg.graph;
    if g.n_agents() < 2 {
        return Err(Error::InvalidArgument("closed form needs at least two agents".into()));
    }
    let spec = g.spectrum()?;
    let set = build_channels(g, &cfg.noise)?;
    let gens = channel_generators(g, &spec, &cfg.noise, &set, &cfg.gain)?;
    let drift = crate::linalg::kron(&spec.lambda0, cfg.gain.as_matrix());
    let scale = gens.iter().map(Matrix::max_abs).fold(drift.max_abs(), f64::max).max(1.0);
    let tol = 1e-10 * scale * scale;
    for (a, ga) in gens.iter().enumerate() {
        if ga.asymmetry() > 1e-12 * scale {
            return Err(Error::InvalidArgument("diffusion generators are not symmetric".into()));
        }
        if ga.commutator(&drift).max_abs() > tol || gens[a + 1..].iter().any(|gb| ga.commutator(gb).max_abs() > tol) {
            return Err(Error::InvalidArgument("diffusion generators do not commute".into()));
        }
    }
    let mut a = drift;
    for gc in &gens {
        a = &a + &(gc * gc).scale(0.5);
    }
    Ok((a.symmetric_part(), gens))
}

/// Exact `δ̄(t_k)` along `path` at the given step indices.
pub fn closed_form_symmetric(cfg: &SimConfig, path: &BrownianPath, at_steps: &[usize]) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (a, gens) = closed_form_exponents(cfg)?;
    if path.channels != gens.len() {
        return Err(Error::Dimension(format!("path has {} channels, network needs {}", path.channels, gens.len())));
    }
    let spec = cfg.graph.spectrum()?;
    let d0 = spec.reduce(&cfg.x0, cfg.gain.dim());
    let mut out = Vec::with_capacity(at_steps.len());
    for &step in at_steps {
        if step > path.steps() {
            return Err(Error::InvalidArgument(format!("step {step} beyond path length {}", path.steps())));
        }
        if step == 0 {
            out.push(d0.clone());
            continue;
        }
        let t = step as f64 * path.dt;
        let w = path.value_at(step);
        let mut e = a.scale(-t);
        for (gc, wc) in gens.iter().zip(&w) {
            e = &e + &gc.scale(*wc);
        }
        out.push(sym_expm(&e.symmetric_part())?.matvec(&d0));
    }
    Ok(out)
}

/// Least-squares slope of `log‖δ(t)‖` over the trailing `window` fraction
/// of the sampled horizon. Zero samples are dropped with a warning.
pub fn as_rate_estimate(tr: &Trajectory, window: f64) -> Result<f64> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::InvalidArgument(format!("window must be in (0, 1], got {window}")));
    }
    let Some(&t_last) = tr.times.last() else {
        return Err(Error::Simulation("empty trajectory".into()));
    };
    let start = t_last * (1.0 - window);
    let (mut ts, mut ys) = (Vec::new(), Vec::new());
    let mut zeros = 0usize;
    for (&t, &d) in tr.times.iter().zip(&tr.delta_norms) {
        if t < start {
            continue;
        }
        if d > 0.0 {
            ts.push(t);
            ys.push(d.ln());
        } else {
            zeros += 1;
        }
    }
    if zeros > 0 {
        log::warn!("{zeros} zero-disagreement samples excluded from the slope fit");
    }
    least_squares(&ts, &ys)
        .map(|(b, _)| b)
        .ok_or_else(|| Error::Simulation("fewer than two positive disagreement samples in the window".into()))
}

/// `(log‖δ(t)‖ + (k + k²σ²/2) λ₂ t) / √(2t log log t)` for samples with `t > e`.
pub fn lil_normalized_curve(tr: &Trajectory, k: f64, sigma: f64, lambda_2: f64) -> Vec<(f64, f64)> {
    let rate = (k + 0.5 * k * k * sigma * sigma) * lambda_2;
    tr.times
        .iter()
        .zip(&tr.delta_norms)
        .filter(|(&t, &d)| t > std::f64::consts::E && d > 0.0)
        .map(|(&t, &d)| (t, (d.ln() + rate * t) / (2.0 * t * t.ln().ln()).sqrt()))
        .collect()
}

/// Monte Carlo aggregate over `cfg.trials` independent trials.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub trials: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    /// Sample mean of `‖δ(t_k)‖²` over trials that reached `t_k`.
    pub ms_curve: Vec<f64>,
    pub ms_se: Vec<f64>,
    pub ms_counts: Vec<usize>,
    /// Mean of `x̄(t_k)` over trials, `n` values per sample.
    pub consensus_mean_curve: Vec<Vec<f64>>,
    /// `x̄(T)` per trial; `None` for diverged trials.
    pub terminal_consensus: Vec<Option<Vec<f64>>>,
    /// `‖x̄(T) - mean(x0)‖²` per trial.
    pub terminal_error_sq: Vec<Option<f64>>,
    pub terminal_delta_sq: Vec<Option<f64>>,
    /// Trailing-window slope of `log‖δ‖` per trial.
    pub slopes: Vec<Option<f64>>,
    pub diverged_at: Vec<Option<f64>>,
    pub trajectories: Vec<Trajectory>,
    pub x0_mean: Vec<f64>,
    batches: Vec<Vec<Moments>>,
}

impl Ensemble {
    pub fn divergence_count(&self) -> usize {
        self.diverged_at.iter().filter(|d| d.is_some()).count()
    }

    /// Per-coordinate moments of `x̄(T)` over non-diverged trials.
    pub fn consensus_stats(&self) -> Vec<Moments> {
        let n = self.x0_mean.len();
        let mut m = vec![Moments::default(); n];
        for v in self.terminal_consensus.iter().flatten() {
            for d in 0..n {
                m[d].push(v[d]);
            }
        }
        m
    }

    pub fn terminal_error(&self) -> Moments {
        let mut m = Moments::default();
        self.terminal_error_sq.iter().flatten().for_each(|&v| m.push(v));
        m
    }

    pub fn finite_slopes(&self) -> Vec<f64> {
        self.slopes.iter().flatten().copied().collect()
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    fn log_ms_fit(&self, curve: &[f64], t0: f64, t1: f64) -> Option<f64> {
        let (mut ts, mut ys) = (Vec::new(), Vec::new());
        for (&t, &v) in self.times.iter().zip(curve) {
            if t >= t0 && t <= t1 && v > 0.0 && v.is_finite() {
                ts.push(t);
                ys.push(v.ln());
            }
        }
        least_squares(&ts, &ys).map(|(b, _)| b)
    }

    /// Slope of `log E‖δ(t)‖²` on `[t0, t1]` with a jackknife standard error
    /// over trial batches.
    pub fn ms_log_slope(&self, t0: f64, t1: f64) -> Option<(f64, f64)> {
        let full = self.log_ms_fit(&self.ms_curve, t0, t1)?;
        if self.batches.len() < 2 {
            return Some((full, f64::NAN));
        }
        let s = self.times.len();
        let mut loo = Vec::with_capacity(self.batches.len());
        for skip in 0..self.batches.len() {
            let mut curve = vec![Moments::default(); s];
            for (b, batch) in self.batches.iter().enumerate() {
                if b != skip {
                    curve.iter_mut().zip(batch).for_each(|(c, m)| c.merge(m));
                }
            }
            let means: Vec<f64> = curve.iter().map(|m| if m.count > 0 { m.mean } else { f64::NAN }).collect();
            loo.push(self.log_ms_fit(&means, t0, t1)?);
        }
        Some((full, crate::stats::jackknife_se(&loo)))
    }
}

struct BatchResult {
    ms: Vec<Moments>,
    consensus: Vec<Moments>,
    outcomes: Vec<(Option<Vec<f64>>, Option<f64>, Option<f64>, Option<f64>)>,
    trajectories: Vec<Trajectory>,
}

fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}");
            None
        }
    }
}

/// Runs all trials, in parallel across contiguous trial batches. Results
/// are reduced in trial order, so they do not depend on the thread count.
pub fn run_ensemble(cfg: &SimConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let p = Prepared::new(&cfg.graph, &cfg.noise, &cfg.gain)?;
    let n = p.dim;
    let steps = cfg.steps();
    let samples = sample_steps(steps, cfg.stride());
    let s_len = samples.len();
    let x0_mean: Vec<f64> = (0..n)
        .map(|d| (0..p.n_agents).map(|i| cfg.x0[i * n + d]).sum::<f64>() / p.n_agents as f64)
        .collect();
    let n_batches = cfg.trials.min(MAX_BATCHES);

    let run_batch = |b: usize| -> BatchResult {
        let lo = b * cfg.trials / n_batches;
        let hi = (b + 1) * cfg.trials / n_batches;
        let mut res = BatchResult {
            ms: vec![Moments::default(); s_len],
            consensus: vec![Moments::default(); s_len * n],
            outcomes: Vec::with_capacity(hi - lo),
            trajectories: Vec::new(),
        };
        for trial in lo..hi {
            let mut tr = run_trial(&p, cfg, trial as u64, cfg.keep == Keep::Full);
            for (k, d) in tr.delta_norms.iter().enumerate() {
                res.ms[k].push(d * d);
                for dd in 0..n {
                    res.consensus[k * n + dd].push(tr.consensus[k][dd]);
                }
            }
            let slope = as_rate_estimate(&tr, cfg.slope_window).ok();
            let outcome = if tr.diverged() {
                (None, None, None, slope)
            } else {
                let last = tr.consensus.last().unwrap().clone();
                let err: f64 = last.iter().zip(&x0_mean).map(|(a, b)| (a - b) * (a - b)).sum();
                let dl = *tr.delta_norms.last().unwrap();
                (Some(last), Some(err), Some(dl * dl), slope)
            };
            res.outcomes.push(outcome);
            if cfg.keep != Keep::Nothing {
                if cfg.keep == Keep::Norms {
                    tr.consensus = Vec::new();
                }
                res.trajectories.push(tr);
            } else if tr.diverged() {
                res.trajectories.push(Trajectory { diverged_at: tr.diverged_at, ..Default::default() });
            }
        }
        res
    };

    let run_all = || (0..n_batches).into_par_iter().map(run_batch).collect::<Vec<_>>();
    let results = match threads_from_env() {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Simulation(e.to_string()))?
            .install(run_all),
        None => run_all(),
    };

    let mut ms = vec![Moments::default(); s_len];
    let mut cons = vec![Moments::default(); s_len * n];
    let mut ens = Ensemble {
        trials: cfg.trials,
        seed: cfg.seed,
        times: samples.iter().map(|&s| s as f64 * cfg.dt).collect(),
        ms_curve: Vec::new(),
        ms_se: Vec::new(),
        ms_counts: Vec::new(),
        consensus_mean_curve: Vec::new(),
        terminal_consensus: Vec::with_capacity(cfg.trials),
        terminal_error_sq: Vec::with_capacity(cfg.trials),
        terminal_delta_sq: Vec::with_capacity(cfg.trials),
        slopes: Vec::with_capacity(cfg.trials),
        diverged_at: Vec::with_capacity(cfg.trials),
        trajectories: Vec::new(),
        x0_mean,
        batches: Vec::with_capacity(n_batches),
    };
    for r in results {
        ms.iter_mut().zip(&r.ms).for_each(|(a, b)| a.merge(b));
        cons.iter_mut().zip(&r.consensus).for_each(|(a, b)| a.merge(b));
        let mut kept = r.trajectories.into_iter();
        for (c, e, d, s) in r.outcomes {
            let diverged_at = if c.is_none() {
                let tr = kept.next().expect("diverged trial is recorded");
                let at = tr.diverged_at;
                if cfg.keep != Keep::Nothing {
                    ens.trajectories.push(tr);
                }
                at
            } else {
                if cfg.keep != Keep::Nothing {
                    ens.trajectories.push(kept.next().expect("kept trajectory"));
                }
                None
            };
            ens.terminal_consensus.push(c);
            ens.terminal_error_sq.push(e);
            ens.terminal_delta_sq.push(d);
            ens.slopes.push(s);
            ens.diverged_at.push(diverged_at);
        }
        ens.batches.push(r.ms);
    }
    ens.ms_curve = ms.iter().map(|m| m.mean.max(0.0)).collect();
    ens.ms_se = ms.iter().map(Moments::std_error).collect();
    ens.ms_counts = ms.iter().map(|m| m.count).collect();
    ens.consensus_mean_curve = (0..s_len).map(|k| (0..n).map(|d| cons[k * n + d].mean).collect()).collect();
    let diverged = ens.divergence_count();
    if diverged > 0 {
        log::warn!("{diverged} of {} trials diverged", cfg.trials);
    }
    Ok(ens)
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// `t,ms_delta_sq,se,consensus_mean_1..n`
pub fn write_ms_curve_csv<W: Write>(ens: &Ensemble, mut w: W) -> io::Result<()> {
    let n = ens.x0_mean.len();
    let mut header = vec!["t".to_string(), "ms_delta_sq".into(), "se".into()];
    header.extend((1..=n).map(|d| format!("consensus_mean_{d}")));
    writeln!(w, "{}", header.join(","))?;
    for k in 0..ens.times.len() {
        let mut row = vec![fmt_f(ens.times[k]), fmt_f(ens.ms_curve[k]), fmt_f(ens.ms_se[k])];
        row.extend(ens.consensus_mean_curve[k].iter().map(|v| fmt_f(*v)));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// `trial,slope,diverged_at` with empty cells for missing values.
pub fn write_slopes_csv<W: Write>(ens: &Ensemble, mut w: W) -> io::Result<()> {
    writeln!(w, "trial,slope,diverged_at")?;
    for (i, (s, d)) in ens.slopes.iter().zip(&ens.diverged_at).enumerate() {
        writeln!(w, "{i},{},{}", s.map(fmt_f).unwrap_or_default(), d.map(fmt_f).unwrap_or_default())?;
    }
    Ok(())
}

/// `t,delta_norm,consensus_1..n,x_<agent>_<coord>…`
pub fn write_trajectory_csv<W: Write>(tr: &Trajectory, n_agents: usize, dim: usize, mut w: W) -> io::Result<()> {
    let mut header = vec!["t".to_string(), "delta_norm".into()];
    if !tr.consensus.is_empty() {
        header.extend((1..=dim).map(|d| format!("consensus_{d}")));
    }
    if !tr.states.is_empty() {
        for i in 1..=n_agents {
            header.extend((1..=dim).map(|d| format!("x_{i}_{d}")));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for k in 0..tr.times.len() {
        let mut row = vec![fmt_f(tr.times[k]), fmt_f(tr.delta_norms[k])];
        if let Some(c) = tr.consensus.get(k) {
            row.extend(c.iter().map(|v| fmt_f(*v)));
        }
        if let Some(x) = tr.states.get(k) {
            row.extend(x.iter().map(|v| fmt_f(*v)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
