//! Measurement-noise intensity functions and Brownian channel wiring.
//!
//! A channel `(i, j)` is agent `i`'s measurement of neighbour `j`; its
//! intensity is `f_ji(x_j - x_i)`. Per-channel parameters are keyed by
//! `(receiver, sender)` in 0-based indices.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{norm, spectral_norm, Matrix};

/// User-supplied intensity: `(receiver, sender, relative state) -> noise direction`.
/// Must be Lipschitz so the closed-loop SDE is well posed.
pub type IntensityFn = Arc<dyn Fn(usize, usize, &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum NoiseKind {
    General { f: IntensityFn, sigma_bar: f64 },
    LinearMatrix(BTreeMap<(usize, usize), Matrix>),
    LinearScalar(BTreeMap<(usize, usize), f64>),
    Homogeneous { sigma: f64 },
}

#[derive(Clone)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Channels `(i, j)` and `(j, i)` share one Brownian motion.
    pub symmetric_channels: bool,
}

impl fmt::Debug for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            NoiseKind::General { sigma_bar, .. } => format!("General {{ sigma_bar: {sigma_bar} }}"),
            NoiseKind::LinearMatrix(m) => format!("LinearMatrix({m:?})"),
            NoiseKind::LinearScalar(m) => format!("LinearScalar({m:?})"),
            NoiseKind::Homogeneous { sigma } => format!("Homogeneous {{ sigma: {sigma} }}"),
        };
        f.debug_struct("NoiseModel")
            .field("kind", &kind)
            .field("symmetric_channels", &self.symmetric_channels)
            .finish()
    }
}

fn check_channels<T>(g: &Graph, map: &BTreeMap<(usize, usize), T>) -> Result<()> {
    for &(i, j) in map.keys() {
        if i >= g.n_agents() || j >= g.n_agents() || !g.adjacent(i, j) {
            return Err(Error::Noise(format!("channel ({}, {}) is not an edge", i + 1, j + 1)));
        }
    }
    for (i, j) in g.ordered_edges() {
        if !map.contains_key(&(i, j)) {
            return Err(Error::Noise(format!("missing intensity for channel ({}, {})", i + 1, j + 1)));
        }
    }
    Ok(())
}

impl NoiseModel {
    /// `f_ji(x) = σ x` on every channel; `σ = 0` is the noise-free network.
    pub fn homogeneous(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Noise(format!("homogeneous sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { kind: NoiseKind::Homogeneous { sigma }, symmetric_channels: false })
    }

    /// `f_ji(x) = σ_ji x`; `sigmas` must cover exactly the ordered edges of `g`.
    pub fn linear_scalar(g: &Graph, sigmas: BTreeMap<(usize, usize), f64>) -> Result<Self> {
        check_channels(g, &sigmas)?;
        if let Some((&(i, j), s)) = sigmas.iter().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Noise(format!(
                "sigma for channel ({}, {}) must be positive, got {s}",
                i + 1,
                j + 1
            )));
        }
        Ok(Self { kind: NoiseKind::LinearScalar(sigmas), symmetric_channels: false })
    }

    /// `f_ji(x) = Σ_ji x` with square matrices of a common order.
    pub fn linear_matrix(g: &Graph, sigmas: BTreeMap<(usize, usize), Matrix>) -> Result<Self> {
        check_channels(g, &sigmas)?;
        let mut dim = None;
        for m in sigmas.values() {
            if !m.is_square() || dim.is_some_and(|d| d != m.rows()) || !m.is_finite() {
                return Err(Error::Noise("intensity matrices must be finite, square and of one order".into()));
            }
            dim = Some(m.rows());
        }
        Ok(Self { kind: NoiseKind::LinearMatrix(sigmas), symmetric_channels: false })
    }

    pub fn general(f: IntensityFn, sigma_bar: f64) -> Result<Self> {
        if !(sigma_bar >= 0.0 && sigma_bar.is_finite()) {
            return Err(Error::Noise(format!("sigma_bar must be >= 0, got {sigma_bar}")));
        }
        Ok(Self { kind: NoiseKind::General { f, sigma_bar }, symmetric_channels: false })
    }

    pub fn with_symmetric_channels(mut self, symmetric: bool) -> Self {
        self.symmetric_channels = symmetric;
        self
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, NoiseKind::General { .. })
    }

    pub fn homogeneous_sigma(&self) -> Option<f64> {
        match self.kind {
            NoiseKind::Homogeneous { sigma } => Some(sigma),
            _ => None,
        }
    }

    /// State dimension forced by matrix intensities, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        match &self.kind {
            NoiseKind::LinearMatrix(m) => m.values().next().map(Matrix::rows),
            _ => None,
        }
    }

    /// `Σ_ji` as an `n × n` matrix; `None` for general intensities.
    pub fn linear_coefficient(&self, i: usize, j: usize, dim: usize) -> Option<Matrix> {
        match &self.kind {
            NoiseKind::General { .. } => None,
            NoiseKind::Homogeneous { sigma } => Some(Matrix::identity(dim).scale(*sigma)),
            NoiseKind::LinearScalar(m) => m.get(&(i, j)).map(|s| Matrix::identity(dim).scale(*s)),
            NoiseKind::LinearMatrix(m) => m.get(&(i, j)).cloned(),
        }
    }

    /// `f_ji(x)` for channel `(i, j)` of `g`.
    pub fn evaluate_intensity(&self, g: &Graph, i: usize, j: usize, x: &[f64]) -> Result<Vec<f64>> {
        if i >= g.n_agents() || j >= g.n_agents() || !g.adjacent(i, j) {
            return Err(Error::Noise(format!("channel ({}, {}) is not an edge", i + 1, j + 1)));
        }
        match &self.kind {
            NoiseKind::General { f, .. } => {
                let y = f(i, j, x);
                if y.len() != x.len() {
                    return Err(Error::Dimension(format!(
                        "intensity returned {} entries for a {}-vector",
                        y.len(),
                        x.len()
                    )));
                }
                Ok(y)
            }
            NoiseKind::Homogeneous { sigma } => Ok(x.iter().map(|v| sigma * v).collect()),
            NoiseKind::LinearScalar(m) => {
                let s = m[&(i, j)];
                Ok(x.iter().map(|v| s * v).collect())
            }
            NoiseKind::LinearMatrix(m) => {
                let s = &m[&(i, j)];
                if s.cols() != x.len() {
                    return Err(Error::Dimension(format!(
                        "{}x{} intensity applied to a {}-vector",
                        s.rows(),
                        s.cols(),
                        x.len()
                    )));
                }
                Ok(s.matvec(x))
            }
        }
    }

    /// `σ̄` with `‖f_ji(x)‖ ≤ σ̄ ‖x‖` on every channel.
    pub fn growth_bound(&self) -> f64 {
        match &self.kind {
            NoiseKind::General { sigma_bar, .. } => *sigma_bar,
            NoiseKind::Homogeneous { sigma } => *sigma,
            NoiseKind::LinearScalar(m) => m.values().copied().fold(0.0, f64::max),
            NoiseKind::LinearMatrix(m) => m
                .values()
                .map(|s| spectral_norm(s).expect("finite square intensity"))
                .fold(0.0, f64::max),
        }
    }

    /// `(min σ_ji, max σ_ji)` for scalar intensities.
    pub fn scalar_range(&self) -> Option<(f64, f64)> {
        match &self.kind {
            NoiseKind::Homogeneous { sigma } => Some((*sigma, *sigma)),
            NoiseKind::LinearScalar(m) => {
                let lo = m.values().copied().fold(f64::INFINITY, f64::min);
                let hi = m.values().copied().fold(0.0, f64::max);
                Some((lo, hi))
            }
            _ => None,
        }
    }

    /// Draws `samples_per_channel` Gaussian directions per channel and
    /// returns the largest observed `‖f(x)‖ / ‖x‖`. Fails if it exceeds the
    /// declared bound by more than `1e-12` (relative to `‖x‖`).
    pub fn spot_check_growth_bound<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        dim: usize,
        samples_per_channel: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let bound = self.growth_bound();
        let mut worst: f64 = 0.0;
        let mut x = vec![0.0; dim];
        for (i, j) in g.ordered_edges() {
            for _ in 0..samples_per_channel {
                let scale = 10f64.powf(rng.random_range(-3.0..3.0));
                for v in x.iter_mut() {
                    *v = scale * rng.sample::<f64, _>(StandardNormal);
                }
                let nx = norm(&x);
                if nx == 0.0 {
                    continue;
                }
                let nf = norm(&self.evaluate_intensity(g, i, j, &x)?);
                worst = worst.max(nf / nx);
                if nf > bound * nx + 1e-12 * nx {
                    return Err(Error::Noise(format!(
                        "channel ({}, {}) violates the growth bound: |f(x)|/|x| = {} > {bound}",
                        i + 1,
                        j + 1,
                        nf / nx
                    )));
                }
            }
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    pub receiver: usize,
    pub sender: usize,
    pub brownian: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSet {
    /// One per ordered edge, row-major in `(receiver, sender)`.
    pub channels: Vec<Channel>,
    pub brownian_count: usize,
}

impl ChannelSet {
    /// Channels grouped by Brownian motion, in Brownian id order.
    pub fn by_brownian(&self) -> Vec<Vec<Channel>> {
        let mut groups = vec![Vec::new(); self.brownian_count];
        for c in &self.channels {
            groups[c.brownian].push(*c);
        }
        groups
    }
}

/// Wires one channel per ordered edge. Independent wiring gives every channel
/// its own Brownian motion; symmetric wiring lets `(i, j)` and `(j, i)` share one.
pub fn build_channels(g: &Graph, m: &NoiseModel) -> Result<ChannelSet> {
    if m.symmetric_channels {
        match &m.kind {
            NoiseKind::General { .. } => {
                return Err(Error::Noise("symmetric channel wiring needs a linear intensity".into()))
            }
            NoiseKind::LinearScalar(s) => {
                for (&(i, j), &v) in s {
                    if v != s[&(j, i)] {
                        return Err(Error::Noise(format!(
                            "symmetric channels need sigma({},{}) = sigma({},{}), got {v} and {}",
                            i + 1,
                            j + 1,
                            j + 1,
                            i + 1,
                            s[&(j, i)]
                        )));
                    }
                }
            }
            NoiseKind::LinearMatrix(s) => {
                for (&(i, j), v) in s {
                    if v != &s[&(j, i)] {
                        return Err(Error::Noise(format!(
                            "symmetric channels need equal intensity matrices on ({}, {}) and ({}, {})",
                            i + 1,
                            j + 1,
                            j + 1,
                            i + 1
                        )));
                    }
                }
            }
            NoiseKind::Homogeneous { .. } => {}
        }
    }
    let n = g.n_agents();
    let mut ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut channels = Vec::new();
    for (i, j) in g.ordered_edges() {
        let key = if m.symmetric_channels { (i.min(j), i.max(j)) } else { (i, j) };
        let next = ids.len();
        let brownian = *ids.entry(key).or_insert(next);
        channels.push(Channel { receiver: i, sender: j, brownian });
    }
    debug_assert!(channels.len() <= n * n);
    Ok(ChannelSet { channels, brownian_count: ids.len() })
}
