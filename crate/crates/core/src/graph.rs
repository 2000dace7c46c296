//! Undirected 0–1 interaction graphs and their Laplacian objects.
//!
//! Agent indices are 0-based in the API. The edge-list file format is
//! 1-based (see [`Graph::parse_edge_list`]).

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, Matrix};

/// Default threshold on `λ₂` for the spectral connectivity test.
pub const CONNECTIVITY_TOL: f64 = 1e-9;

#[derive(Clone, PartialEq, Eq)]
pub struct Graph {
    n_agents: usize,
    /// Row-major 0/1 adjacency, zero diagonal.
    adjacency: Vec<u8>,
    degrees: Vec<usize>,
}

impl Graph {
    /// Builds a graph from unordered 0-based index pairs. Duplicate edges
    /// (in either orientation) collapse to one.
    pub fn new(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Graph("a graph needs at least one agent".into()));
        }
        let mut adjacency = vec![0u8; n_agents * n_agents];
        for &(i, j) in edges {
            if i >= n_agents || j >= n_agents {
                return Err(Error::Graph(format!(
                    "edge ({}, {}) out of range for {n_agents} agents",
                    i + 1,
                    j + 1
                )));
            }
            if i == j {
                return Err(Error::Graph(format!("self-loop at agent {}", i + 1)));
            }
            adjacency[i * n_agents + j] = 1;
            adjacency[j * n_agents + i] = 1;
        }
        let degrees = (0..n_agents)
            .map(|i| adjacency[i * n_agents..(i + 1) * n_agents].iter().map(|&a| a as usize).sum())
            .collect();
        Ok(Self { n_agents, adjacency, degrees })
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        Self::new(n, &edges).expect("complete graph is valid")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges).expect("path graph is valid")
    }

    pub fn cycle(n: usize) -> Self {
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        if n > 2 {
            edges.push((n - 1, 0));
        }
        Self::new(n, &edges).expect("cycle graph is valid")
    }

    /// Erdős–Rényi draws with edge probability `p`, redrawn until connected.
    pub fn random_connected<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Self {
        assert!(n >= 1 && p > 0.0, "random_connected needs n >= 1 and p > 0");
        loop {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            let g = Self::new(n, &edges).expect("generated edges are in range");
            if g.is_connected_bfs() {
                return g;
            }
        }
    }

    /// Parses the plain-text edge list: first line `N`, then one `i j` per
    /// edge (1-based). Text after `#` is ignored.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut n_agents: Option<(usize, usize)> = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| Error::Config { line: line_no, msg };
            match n_agents {
                None => {
                    if fields.len() != 1 {
                        return Err(bad(format!("expected agent count, found `{line}`")));
                    }
                    let n = fields[0]
                        .parse::<usize>()
                        .map_err(|_| bad(format!("invalid agent count `{}`", fields[0])))?;
                    n_agents = Some((n, line_no));
                }
                Some((n, _)) => {
                    if fields.len() != 2 {
                        return Err(bad(format!("expected `i j`, found `{line}`")));
                    }
                    let parse = |s: &str| -> Result<usize> {
                        let v = s.parse::<usize>().map_err(|_| bad(format!("invalid index `{s}`")))?;
                        if v == 0 || v > n {
                            return Err(bad(format!("index {v} out of range 1..={n}")));
                        }
                        Ok(v - 1)
                    };
                    let (i, j) = (parse(fields[0])?, parse(fields[1])?);
                    if i == j {
                        return Err(bad(format!("self-loop at agent {}", i + 1)));
                    }
                    edges.push((i, j));
                }
            }
        }
        let (n, line) = n_agents.ok_or(Error::Config { line: 1, msg: "missing agent count".into() })?;
        Self::new(n, &edges).map_err(|e| Error::Config { line, msg: e.to_string() })
    }

    /// Inverse of [`Graph::parse_edge_list`].
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{}\n", self.n_agents);
        for (i, j) in self.edges() {
            s.push_str(&format!("{} {}\n", i + 1, j + 1));
        }
        s
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_agents + j] == 1
    }

    /// `a_ij` as a float.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n_agents + j] as f64
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_agents).filter(move |&j| self.adjacent(i, j))
    }

    /// Unordered edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_agents {
            for j in (i + 1)..self.n_agents {
                if self.adjacent(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Ordered pairs `(i, j)` with `a_ij = 1`, in row-major order.
    pub fn ordered_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_agents {
            out.extend(self.neighbors(i).map(|j| (i, j)));
        }
        out
    }

    pub fn adjacency_matrix(&self) -> Matrix {
        let data = self.adjacency.iter().map(|&a| a as f64).collect();
        Matrix::from_vec(self.n_agents, self.n_agents, data).expect("square adjacency")
    }

    /// `L = D - A`.
    pub fn laplacian(&self) -> Matrix {
        let n = self.n_agents;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            l[(i, i)] = self.degrees[i] as f64;
            for j in self.neighbors(i) {
                l[(i, j)] = -1.0;
            }
        }
        l
    }

    /// `B_ij`: `b_ii = -a_ij`, `b_ij = a_ij`, all else zero.
    pub fn channel_matrix(&self, i: usize, j: usize) -> Result<Matrix> {
        let n = self.n_agents;
        if i >= n || j >= n {
            return Err(Error::Graph(format!("channel ({}, {}) out of range", i + 1, j + 1)));
        }
        if i == j {
            return Err(Error::Graph(format!("channel ({}, {}) needs distinct agents", i + 1, j + 1)));
        }
        let mut b = Matrix::zeros(n, n);
        let a = self.weight(i, j);
        if a != 0.0 {
            b[(i, i)] = -a;
            b[(i, j)] = a;
        }
        Ok(b)
    }

    /// Hop distances from `source`; `None` marks unreachable agents.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_agents];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes are reached");
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected_bfs(&self) -> bool {
        self.bfs_distances(0).iter().all(Option::is_some)
    }

    /// Longest shortest path, `None` when disconnected.
    pub fn diameter(&self) -> Option<usize> {
        let mut diam = 0;
        for s in 0..self.n_agents {
            for d in self.bfs_distances(s) {
                diam = diam.max(d?);
            }
        }
        Some(diam)
    }

    pub fn max_degree(&self) -> usize {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    pub fn spectrum(&self) -> Result<LaplacianSpectrum> {
        LaplacianSpectrum::new(self)
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let edges: BTreeSet<_> = self.edges().into_iter().map(|(i, j)| (i + 1, j + 1)).collect();
        f.debug_struct("Graph").field("n_agents", &self.n_agents).field("edges", &edges).finish()
    }
}

/// Orthonormal basis of the complement of `1` (Helmert contrasts), `N × (N-1)`.
fn helmert_basis(n: usize) -> Matrix {
    let mut q = Matrix::zeros(n, n.saturating_sub(1));
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            q[(i, k - 1)] = 1.0 / norm;
        }
        q[(k, k - 1)] = -(k as f64) / norm;
    }
    q
}

/// Laplacian eigenvalues with the reduced eigenbasis `φ`.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    /// Ascending, `eigenvalues[0] == 0.0` exactly.
    pub eigenvalues: Vec<f64>,
    /// `N × (N-1)`, columns are unit eigenvectors for `λ_2..λ_N`.
    pub phi: Matrix,
    /// `diag(λ_2, …, λ_N)`.
    pub lambda0: Matrix,
    /// `N × N` orthonormal, first column `1/√N`, then `φ`.
    pub full_transform: Matrix,
}

impl LaplacianSpectrum {
    /// The all-ones direction is split off first, so `λ_1 = 0` and its
    /// eigenvector `1/√N` are exact; the remaining pairs come from the
    /// Laplacian compressed onto the complement of `1`.
    pub fn new(g: &Graph) -> Result<Self> {
        let n = g.n_agents();
        let l = g.laplacian();
        let q = helmert_basis(n);
        let reduced = (&(&q.transpose() * &l) * &q).symmetric_part();
        let eig = sym_eigen(&reduced)?;
        let phi = &q * &eig.vectors;
        let mut eigenvalues = Vec::with_capacity(n);
        eigenvalues.push(0.0);
        // tiny negative round-off on zero modes of disconnected graphs
        eigenvalues.extend(eig.values.iter().map(|&v| if v.abs() <= 1e-12 { 0.0 } else { v }));
        let lambda0 = Matrix::from_diag(&eigenvalues[1..]);
        let mut full_transform = Matrix::zeros(n, n);
        let inv_sqrt = 1.0 / (n as f64).sqrt();
        for i in 0..n {
            full_transform[(i, 0)] = inv_sqrt;
            for k in 0..n - 1 {
                full_transform[(i, k + 1)] = phi[(i, k)];
            }
        }
        Ok(Self { eigenvalues, phi, lambda0, full_transform })
    }

    pub fn n_agents(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `λ_2`, zero for a single agent.
    pub fn algebraic_connectivity(&self) -> f64 {
        self.eigenvalues.get(1).copied().unwrap_or(0.0)
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("at least one eigenvalue")
    }

    /// `λ_2 / λ_N`, `None` when `λ_N = 0`.
    pub fn synchronizability(&self) -> Option<f64> {
        let top = self.lambda_max();
        (top > 0.0).then(|| self.algebraic_connectivity() / top)
    }

    /// `(φᵀ ⊗ I_n) v` for a stacked `N·n` vector.
    pub fn reduce(&self, v: &[f64], dim: usize) -> Vec<f64> {
        let n = self.n_agents();
        assert_eq!(v.len(), n * dim, "reduce: expected {} entries", n * dim);
        let mut out = vec![0.0; (n - 1) * dim];
        for k in 0..n - 1 {
            for i in 0..n {
                let p = self.phi[(i, k)];
                for c in 0..dim {
                    out[k * dim + c] += p * v[i * dim + c];
                }
            }
        }
        out
    }

    /// `(φ ⊗ I_n) w`, the inverse of [`LaplacianSpectrum::reduce`] on the
    /// disagreement subspace.
    pub fn expand(&self, w: &[f64], dim: usize) -> Vec<f64> {
        let n = self.n_agents();
        assert_eq!(w.len(), (n - 1) * dim, "expand: expected {} entries", (n - 1) * dim);
        let mut out = vec![0.0; n * dim];
        for i in 0..n {
            for k in 0..n - 1 {
                let p = self.phi[(i, k)];
                for c in 0..dim {
                    out[i * dim + c] += p * w[k * dim + c];
                }
            }
        }
        out
    }
}

/// Spectral connectivity test `λ₂ > tol`, cross-checked by breadth-first
/// search. Search wins on disagreement.
pub fn is_connected(g: &Graph, spectrum: &LaplacianSpectrum, tol: f64) -> bool {
    let spectral = g.n_agents() == 1 || spectrum.algebraic_connectivity() > tol;
    let bfs = g.is_connected_bfs();
    if spectral != bfs {
        log::warn!(
            "spectral connectivity (λ₂ = {:e}, tol = {tol:e}) disagrees with breadth-first search",
            spectrum.algebraic_connectivity()
        );
    }
    bfs
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphMetrics {
    pub max_degree: usize,
    /// `None` stands for an infinite diameter (disconnected graph).
    pub diameter: Option<usize>,
    pub synchronizability: Option<f64>,
}

pub fn graph_metrics(g: &Graph, spectrum: &LaplacianSpectrum) -> GraphMetrics {
    GraphMetrics {
        max_degree: g.max_degree(),
        diameter: g.diameter(),
        synchronizability: spectrum.synchronizability(),
    }
}

/// `1`, `J_N = (1/N)·1·1ᵀ` and the unit vectors `η_{N,i}`.
#[derive(Debug, Clone)]
pub struct CanonicalMatrices {
    pub ones: Vec<f64>,
    pub centering: Matrix,
}

impl CanonicalMatrices {
    pub fn new(n: usize) -> Self {
        let centering = Matrix::from_vec(n, n, vec![1.0 / n as f64; n * n]).expect("square");
        Self { ones: vec![1.0; n], centering }
    }

    pub fn unit_vector(&self, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.ones.len()];
        e[i] = 1.0;
        e
    }

    /// `I_N - J_N`.
    pub fn disagreement_projector(&self) -> Matrix {
        &Matrix::identity(self.ones.len()) - &self.centering
    }
}
