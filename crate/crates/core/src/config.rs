//! Experiment files: flat `key = value` text in `[section]`s, `#` comments.
//!
//! ```text
//! [graph]
//! kind = edges            # complete | path | cycle | edges | file
//! n = 3
//! edges = 1-2, 2-3        # 1-based
//!
//! [noise]
//! kind = scalar           # homogeneous | scalar | matrix
//! sigma.1.2 = 0.5         # measurement agent 1 takes of agent 2
//! sigma.2.1 = 0.7
//! symmetric = false
//!
//! [gain]
//! k = 1.0
//! dim = 1
//!
//! [initial]
//! x0 = 1, 0, -1
//!
//! [sim]
//! dt = 0.001
//! t_end = 10
//! trials = 1000
//! seed = 7
//!
//! [output]
//! dir = out
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::GainMatrix;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::noise::NoiseModel;
use crate::sim::{Keep, SimConfig, DEFAULT_DT, DEFAULT_SLOPE_WINDOW};

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    Complete(usize),
    Path(usize),
    Cycle(usize),
    /// 0-based unordered pairs.
    Edges { n_agents: usize, edges: Vec<(usize, usize)> },
    /// Edge-list file, relative paths resolved against the config's directory.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Homogeneous(f64),
    /// `(receiver, sender)`, 0-based.
    Scalar(BTreeMap<(usize, usize), f64>),
    Matrix(BTreeMap<(usize, usize), Matrix>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GainSpec {
    Scalar { k: f64, dim: usize },
    Matrix(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub dt: f64,
    pub t_end: f64,
    pub trials: usize,
    pub seed: u64,
    pub stride: Option<usize>,
    pub slope_window: f64,
    pub keep: Keep,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            t_end: 10.0,
            trials: 100,
            seed: 0,
            stride: None,
            slope_window: DEFAULT_SLOPE_WINDOW,
            keep: Keep::Nothing,
        }
    }
}

/// Tolerances of the `verify` command.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifySection {
    /// Fit window for the mean-square log-slope; defaults to the trailing
    /// slope window of the horizon.
    pub ms_fit_start: Option<f64>,
    pub ms_fit_end: Option<f64>,
    /// Required share of trials with a negative trailing slope.
    pub as_fraction: f64,
    /// Allowed excess of the median slope over the predicted rate.
    pub as_tolerance: f64,
    pub lil_start: f64,
    pub lil_end: f64,
    pub lil_margin: f64,
    pub lil_fraction: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            ms_fit_start: None,
            ms_fit_end: None,
            as_fraction: 0.95,
            as_tolerance: 0.5,
            lil_start: 10.0,
            lil_end: 100.0,
            lil_margin: 1.0,
            lil_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub graph: GraphSource,
    pub noise: NoiseSpec,
    pub symmetric: bool,
    pub gain: GainSpec,
    pub x0: Vec<f64>,
    pub sim: SimSection,
    pub verify: VerifySection,
    pub output_dir: Option<PathBuf>,
}

/// Everything needed to run: the built model plus the parsed sections.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub graph: Graph,
    pub noise: NoiseModel,
    pub gain: GainMatrix,
}

impl Experiment {
    pub fn sim_config(&self) -> SimConfig {
        let s = &self.config.sim;
        let mut cfg = SimConfig::new(self.graph.clone(), self.noise.clone(), self.gain.clone(), self.config.x0.clone());
        cfg.dt = s.dt;
        cfg.t_end = s.t_end;
        cfg.trials = s.trials;
        cfg.seed = s.seed;
        cfg.sample_stride = s.stride;
        cfg.slope_window = s.slope_window;
        cfg.keep = s.keep;
        cfg
    }
}

struct Entry {
    value: String,
    line: usize,
}

type Section = BTreeMap<String, Entry>;

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

const SECTIONS: [&str; 7] = ["graph", "noise", "gain", "initial", "sim", "verify", "output"];

fn allowed(section: &str, key: &str) -> bool {
    let fixed: &[&str] = match section {
        "graph" => &["kind", "n", "edges", "file"],
        "noise" => &["kind", "sigma", "symmetric"],
        "gain" => &["k", "dim", "matrix"],
        "initial" => &["x0"],
        "sim" => &["dt", "t_end", "trials", "seed", "stride", "slope_window", "keep"],
        "verify" => &[
            "ms_fit_start",
            "ms_fit_end",
            "as_fraction",
            "as_tolerance",
            "lil_start",
            "lil_end",
            "lil_margin",
            "lil_fraction",
        ],
        "output" => &["dir"],
        _ => &[],
    };
    fixed.contains(&key) || (section == "noise" && (key.starts_with("sigma.") || key.starts_with("matrix.")))
}

fn tokenize(text: &str) -> Result<BTreeMap<String, (usize, Section)>> {
    let mut sections: BTreeMap<String, (usize, Section)> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line, format!("malformed section header `{body}`")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            if sections.contains_key(name) {
                return Err(err(line, format!("duplicate section [{name}]")));
            }
            sections.insert(name.to_string(), (line, Section::new()));
            current = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(err(line, format!("expected `key = value`, found `{body}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = current.as_deref() else {
            return Err(err(line, format!("key `{key}` outside any section")));
        };
        if !allowed(sec, key) {
            return Err(err(line, format!("unknown key `{key}` in [{sec}]")));
        }
        let map = &mut sections.get_mut(sec).unwrap().1;
        if map.contains_key(key) {
            return Err(err(line, format!("duplicate key `{key}` in [{sec}]")));
        }
        map.insert(key.to_string(), Entry { value: value.to_string(), line });
    }
    Ok(sections)
}

fn parse_num<T: std::str::FromStr>(e: &Entry, what: &str) -> Result<T> {
    e.value.parse::<T>().map_err(|_| err(e.line, format!("invalid {what} `{}`", e.value)))
}

fn parse_f64(e: &Entry, what: &str) -> Result<f64> {
    let v: f64 = parse_num(e, what)?;
    if !v.is_finite() {
        return Err(err(e.line, format!("{what} must be finite")));
    }
    Ok(v)
}

fn parse_bool(e: &Entry, what: &str) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(e.line, format!("invalid {what} `{}` (expected true or false)", e.value))),
    }
}

fn parse_list(e: &Entry, what: &str) -> Result<Vec<f64>> {
    e.value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(e.line, format!("invalid {what} entry `{s}`")))
        })
        .collect()
}

/// `a b; c d` → 2×2.
fn parse_matrix(e: &Entry, what: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = e
        .value
        .split(';')
        .map(|r| parse_list(&Entry { value: r.to_string(), line: e.line }, what))
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(err(e.line, format!("{what} must be a non-empty square matrix written `a b; c d`")));
    }
    Ok(Matrix::from_rows(&rows))
}

fn parse_pair(key: &str, prefix: &str, line: usize) -> Result<(usize, usize)> {
    let rest = &key[prefix.len()..];
    let parts: Vec<&str> = rest.split('.').collect();
    let idx = |s: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v - 1),
            _ => Err(err(line, format!("invalid agent index `{s}` in `{key}`"))),
        }
    };
    if parts.len() != 2 {
        return Err(err(line, format!("expected `{prefix}<i>.<j>`, found `{key}`")));
    }
    Ok((idx(parts[0])?, idx(parts[1])?))
}

fn need<'a>(sec: &'a Section, key: &str, section: &str, header: usize) -> Result<&'a Entry> {
    sec.get(key).ok_or_else(|| err(header, format!("[{section}] needs `{key}`")))
}

fn reject_extra(sec: &Section, keep: &[&str], section: &str, why: &str) -> Result<()> {
    for (k, e) in sec {
        if !keep.iter().any(|p| k == p || (p.ends_with('.') && k.starts_with(p))) {
            return Err(err(e.line, format!("`{k}` is not used in [{section}] {why}")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let sections = tokenize(text)?;
        let last_line = text.lines().count().max(1);
        let get = |name: &str| -> Result<&(usize, Section)> {
            sections.get(name).ok_or_else(|| err(last_line, format!("missing section [{name}]")))
        };
        let empty = (0usize, Section::new());

        let (gh, g) = get("graph")?;
        let kind = need(g, "kind", "graph", *gh)?;
        let graph = match kind.value.as_str() {
            k @ ("complete" | "path" | "cycle") => {
                reject_extra(g, &["kind", "n"], "graph", "for this kind")?;
                let n: usize = parse_num(need(g, "n", "graph", *gh)?, "agent count")?;
                let e = &g["n"];
                if n == 0 {
                    return Err(err(e.line, "agent count must be positive"));
                }
                match k {
                    "complete" => GraphSource::Complete(n),
                    "path" => GraphSource::Path(n),
                    _ => {
                        if n < 3 {
                            return Err(err(e.line, "a cycle needs at least three agents"));
                        }
                        GraphSource::Cycle(n)
                    }
                }
            }
            "edges" => {
                reject_extra(g, &["kind", "n", "edges"], "graph", "for kind = edges")?;
                let ne = need(g, "n", "graph", *gh)?;
                let n: usize = parse_num(ne, "agent count")?;
                if n == 0 {
                    return Err(err(ne.line, "agent count must be positive"));
                }
                let edges = match g.get("edges") {
                    None => Vec::new(),
                    Some(e) => parse_edges(e, n)?,
                };
                GraphSource::Edges { n_agents: n, edges }
            }
            "file" => {
                reject_extra(g, &["kind", "file"], "graph", "for kind = file")?;
                GraphSource::File(PathBuf::from(&need(g, "file", "graph", *gh)?.value))
            }
            other => return Err(err(kind.line, format!("unknown graph kind `{other}`"))),
        };

        let (nh, nsec) = get("noise")?;
        let nkind = need(nsec, "kind", "noise", *nh)?;
        let symmetric = match nsec.get("symmetric") {
            Some(e) => parse_bool(e, "symmetric flag")?,
            None => false,
        };
        let noise = match nkind.value.as_str() {
            "homogeneous" => {
                reject_extra(nsec, &["kind", "symmetric", "sigma"], "noise", "for kind = homogeneous")?;
                let e = need(nsec, "sigma", "noise", *nh)?;
                let s = parse_f64(e, "sigma")?;
                if s < 0.0 {
                    return Err(err(e.line, "sigma must be nonnegative"));
                }
                NoiseSpec::Homogeneous(s)
            }
            "scalar" => {
                reject_extra(nsec, &["kind", "symmetric", "sigma."], "noise", "for kind = scalar")?;
                let mut map = BTreeMap::new();
                for (k, e) in nsec.iter().filter(|(k, _)| k.starts_with("sigma.")) {
                    let s = parse_f64(e, "sigma")?;
                    if s <= 0.0 {
                        return Err(err(e.line, "channel intensities must be positive"));
                    }
                    map.insert(parse_pair(k, "sigma.", e.line)?, s);
                }
                NoiseSpec::Scalar(map)
            }
            "matrix" => {
                reject_extra(nsec, &["kind", "symmetric", "matrix."], "noise", "for kind = matrix")?;
                let mut map = BTreeMap::new();
                for (k, e) in nsec.iter().filter(|(k, _)| k.starts_with("matrix.")) {
                    map.insert(parse_pair(k, "matrix.", e.line)?, parse_matrix(e, "intensity matrix")?);
                }
                NoiseSpec::Matrix(map)
            }
            other => return Err(err(nkind.line, format!("unknown noise kind `{other}`"))),
        };

        let (kh, ksec) = get("gain")?;
        let gain = match (ksec.get("k"), ksec.get("matrix")) {
            (Some(k), None) => {
                let dim = match ksec.get("dim") {
                    Some(e) => {
                        let d: usize = parse_num(e, "state dimension")?;
                        if d == 0 {
                            return Err(err(e.line, "state dimension must be positive"));
                        }
                        d
                    }
                    None => 1,
                };
                GainSpec::Scalar { k: parse_f64(k, "gain")?, dim }
            }
            (None, Some(m)) => {
                if let Some(e) = ksec.get("dim") {
                    return Err(err(e.line, "`dim` is implied by a gain matrix"));
                }
                GainSpec::Matrix(parse_matrix(m, "gain matrix")?)
            }
            (Some(_), Some(m)) => return Err(err(m.line, "give either `k` or `matrix`, not both")),
            (None, None) => return Err(err(*kh, "[gain] needs `k` or `matrix`")),
        };

        let (ih, isec) = get("initial")?;
        let x0 = parse_list(need(isec, "x0", "initial", *ih)?, "x0")?;

        let (_, ssec) = sections.get("sim").unwrap_or(&empty);
        let mut sim = SimSection::default();
        if let Some(e) = ssec.get("dt") {
            sim.dt = parse_f64(e, "dt")?;
            if sim.dt <= 0.0 {
                return Err(err(e.line, "dt must be positive"));
            }
        }
        if let Some(e) = ssec.get("t_end") {
            sim.t_end = parse_f64(e, "t_end")?;
        }
        if sim.t_end < sim.dt {
            let line = ssec.get("t_end").or(ssec.get("dt")).map_or(last_line, |e| e.line);
            return Err(err(line, "t_end must be at least dt"));
        }
        if let Some(e) = ssec.get("trials") {
            sim.trials = parse_num(e, "trial count")?;
            if sim.trials == 0 {
                return Err(err(e.line, "trials must be positive"));
            }
        }
        if let Some(e) = ssec.get("seed") {
            sim.seed = parse_num(e, "seed")?;
        }
        if let Some(e) = ssec.get("stride") {
            let s: usize = parse_num(e, "stride")?;
            if s == 0 {
                return Err(err(e.line, "stride must be positive"));
            }
            sim.stride = Some(s);
        }
        if let Some(e) = ssec.get("slope_window") {
            sim.slope_window = parse_f64(e, "slope window")?;
            if !(sim.slope_window > 0.0 && sim.slope_window <= 1.0) {
                return Err(err(e.line, "slope_window must be in (0, 1]"));
            }
        }
        if let Some(e) = ssec.get("keep") {
            sim.keep = Keep::parse(&e.value)
                .ok_or_else(|| err(e.line, format!("invalid keep `{}` (none, norms or full)", e.value)))?;
        }

        let (_, vsec) = sections.get("verify").unwrap_or(&empty);
        let mut verify = VerifySection::default();
        let f = |key: &str| -> Result<Option<f64>> { vsec.get(key).map(|e| parse_f64(e, key)).transpose() };
        verify.ms_fit_start = f("ms_fit_start")?;
        verify.ms_fit_end = f("ms_fit_end")?;
        if let Some(v) = f("as_fraction")? {
            verify.as_fraction = v;
        }
        if let Some(v) = f("as_tolerance")? {
            verify.as_tolerance = v;
        }
        if let Some(v) = f("lil_start")? {
            verify.lil_start = v;
        }
        if let Some(v) = f("lil_end")? {
            verify.lil_end = v;
        }
        if let Some(v) = f("lil_margin")? {
            verify.lil_margin = v;
        }
        if let Some(v) = f("lil_fraction")? {
            verify.lil_fraction = v;
        }

        let output_dir = sections
            .get("output")
            .and_then(|(_, o)| o.get("dir"))
            .map(|e| PathBuf::from(&e.value));

        Ok(Self { graph, noise, symmetric, gain, x0, sim, verify, output_dir })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[graph]");
        match &self.graph {
            GraphSource::Complete(n) => _ = writeln!(w, "kind = complete\nn = {n}"),
            GraphSource::Path(n) => _ = writeln!(w, "kind = path\nn = {n}"),
            GraphSource::Cycle(n) => _ = writeln!(w, "kind = cycle\nn = {n}"),
            GraphSource::Edges { n_agents, edges } => {
                let _ = writeln!(w, "kind = edges\nn = {n_agents}");
                if !edges.is_empty() {
                    let list: Vec<String> = edges.iter().map(|(i, j)| format!("{}-{}", i + 1, j + 1)).collect();
                    let _ = writeln!(w, "edges = {}", list.join(", "));
                }
            }
            GraphSource::File(p) => _ = writeln!(w, "kind = file\nfile = {}", p.display()),
        }
        let _ = writeln!(w, "\n[noise]");
        match &self.noise {
            NoiseSpec::Homogeneous(sig) => _ = writeln!(w, "kind = homogeneous\nsigma = {sig}"),
            NoiseSpec::Scalar(m) => {
                let _ = writeln!(w, "kind = scalar");
                for ((i, j), v) in m {
                    let _ = writeln!(w, "sigma.{}.{} = {v}", i + 1, j + 1);
                }
            }
            NoiseSpec::Matrix(m) => {
                let _ = writeln!(w, "kind = matrix");
                for ((i, j), v) in m {
                    let _ = writeln!(w, "matrix.{}.{} = {}", i + 1, j + 1, fmt_matrix(v));
                }
            }
        }
        let _ = writeln!(w, "symmetric = {}", self.symmetric);
        let _ = writeln!(w, "\n[gain]");
        match &self.gain {
            GainSpec::Scalar { k, dim } => _ = writeln!(w, "k = {k}\ndim = {dim}"),
            GainSpec::Matrix(m) => _ = writeln!(w, "matrix = {}", fmt_matrix(m)),
        }
        let x0: Vec<String> = self.x0.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(w, "\n[initial]\nx0 = {}", x0.join(", "));
        let sim = &self.sim;
        let _ = writeln!(
            w,
            "\n[sim]\ndt = {}\nt_end = {}\ntrials = {}\nseed = {}\nslope_window = {}\nkeep = {}",
            sim.dt,
            sim.t_end,
            sim.trials,
            sim.seed,
            sim.slope_window,
            sim.keep.as_str()
        );
        if let Some(st) = sim.stride {
            let _ = writeln!(w, "stride = {st}");
        }
        let v = &self.verify;
        let _ = writeln!(w, "\n[verify]");
        if let Some(x) = v.ms_fit_start {
            let _ = writeln!(w, "ms_fit_start = {x}");
        }
        if let Some(x) = v.ms_fit_end {
            let _ = writeln!(w, "ms_fit_end = {x}");
        }
        let _ = writeln!(
            w,
            "as_fraction = {}\nas_tolerance = {}\nlil_start = {}\nlil_end = {}\nlil_margin = {}\nlil_fraction = {}",
            v.as_fraction, v.as_tolerance, v.lil_start, v.lil_end, v.lil_margin, v.lil_fraction
        );
        if let Some(d) = &self.output_dir {
            let _ = writeln!(w, "\n[output]\ndir = {}", d.display());
        }
        s
    }

    /// Builds graph, noise model and gain; relative graph files are resolved
    /// against `base_dir`.
    pub fn build(self, base_dir: &Path) -> Result<Experiment> {
        let graph = match &self.graph {
            GraphSource::Complete(n) => Graph::complete(*n),
            GraphSource::Path(n) => Graph::path(*n),
            GraphSource::Cycle(n) => Graph::cycle(*n),
            GraphSource::Edges { n_agents, edges } => Graph::new(*n_agents, edges)?,
            GraphSource::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Graph(format!("cannot read {}: {e}", path.display())))?;
                Graph::parse_edge_list(&text).map_err(|e| Error::Graph(format!("{}: {e}", path.display())))?
            }
        };
        let noise = match &self.noise {
            NoiseSpec::Homogeneous(s) => NoiseModel::homogeneous(*s)?,
            NoiseSpec::Scalar(m) => NoiseModel::linear_scalar(&graph, m.clone())?,
            NoiseSpec::Matrix(m) => NoiseModel::linear_matrix(&graph, m.clone())?,
        }
        .with_symmetric_channels(self.symmetric);
        let gain = match &self.gain {
            GainSpec::Scalar { k, dim } => GainMatrix::scalar(*k, *dim),
            GainSpec::Matrix(m) => GainMatrix::matrix(m.clone())?,
        };
        let need = graph.n_agents() * gain.dim();
        if self.x0.len() != need {
            return Err(Error::Dimension(format!(
                "x0 has {} entries, expected N*n = {}*{} = {need}",
                self.x0.len(),
                graph.n_agents(),
                gain.dim()
            )));
        }
        Ok(Experiment { config: self, graph, noise, gain })
    }
}

fn parse_edges(e: &Entry, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for tok in e.value.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()) {
        let (a, b) = tok
            .split_once('-')
            .ok_or_else(|| err(e.line, format!("edge `{tok}` should look like `i-j`")))?;
        let idx = |s: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if (1..=n).contains(&v) => Ok(v - 1),
                _ => Err(err(e.line, format!("agent `{s}` out of range 1..={n}"))),
            }
        };
        let (i, j) = (idx(a)?, idx(b)?);
        if i == j {
            return Err(err(e.line, format!("self-loop `{tok}`")));
        }
        out.push((i, j));
    }
    Ok(out)
}

fn fmt_matrix(m: &Matrix) -> String {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    const K2: &str = "\
# two agents
[graph]
kind = complete
n = 2

[noise]
kind = homogeneous
sigma = 1

[gain]
k = 1

[initial]
x0 = 1, -1
";

    #[test]
    fn parses_minimal_file() {
        let c = ExperimentConfig::parse(K2).unwrap();
        assert_eq!(c.graph, GraphSource::Complete(2));
        assert_eq!(c.noise, NoiseSpec::Homogeneous(1.0));
        assert_eq!(c.gain, GainSpec::Scalar { k: 1.0, dim: 1 });
        assert_eq!(c.x0, vec![1.0, -1.0]);
        assert!(!c.symmetric);
        assert_eq!(c.sim, SimSection::default());
        let e = c.build(Path::new(".")).unwrap();
        assert_eq!(e.graph.n_agents(), 2);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let text = "\
[graph]
kind = edges
n = 3
edges = 1-2 2-3
[noise]
kind = matrix
matrix.1.2 = 1 0.5; 0 1
matrix.2.1 = 0.3 0; 0 0.3
matrix.2.3 = 1 0; 0 1
matrix.3.2 = 2 0; 0.1 1
[gain]
matrix = 1 0.25; 0 2
[initial]
x0 = 1 2 3 4 5 6
[sim]
dt = 0.0001
t_end = 2.5
trials = 17
seed = 18446744073709551615
stride = 3
keep = norms
[verify]
ms_fit_end = 0.05
[output]
dir = out/run
";
        let c = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_text(), c.to_text());
        assert_eq!(c.sim.seed, u64::MAX);
        c.build(Path::new(".")).unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            (K2.replace("sigma = 1", "sigma = 1\nsigmaa = 2"), 9),
            (K2.replace("k = 1", "k = one"), 11),
            (K2.replace("[initial]", "[initial]\n[initial]"), 14),
            (format!("{K2}\n[extra]\n"), 16),
            (format!("x = 1\n{K2}"), 1),
            (K2.replace("n = 2", "n = 2\nn = 3"), 5),
            (K2.replace("kind = complete", "kind = star"), 3),
        ];
        for (text, line) in cases {
            match ExperimentConfig::parse(&text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn missing_pieces_are_rejected() {
        assert!(ExperimentConfig::parse(&K2.replace("x0 = 1, -1", "")).is_err());
        assert!(ExperimentConfig::parse(&K2.replace("[gain]\nk = 1", "[gain]")).is_err());
        let short = ExperimentConfig::parse(&K2.replace("x0 = 1, -1", "x0 = 1")).unwrap();
        assert!(short.build(Path::new(".")).is_err());
    }

    #[test]
    fn scalar_noise_keys() {
        let text = K2.replace("kind = homogeneous\nsigma = 1", "kind = scalar\nsigma.1.2 = 0.5\nsigma.2.1 = 1.5");
        let c = ExperimentConfig::parse(&text).unwrap();
        let NoiseSpec::Scalar(m) = &c.noise else { panic!() };
        assert_eq!(m[&(0, 1)], 0.5);
        assert_eq!(m[&(1, 0)], 1.5);
        let bad = K2.replace("kind = homogeneous\nsigma = 1", "kind = scalar\nsigma = 1");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(Error::Config { line: 8, .. })));
    }

    #[test]
    fn graph_file_is_resolved_relative_to_base() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("g.txt"), "3\n1 2\n2 3\n").unwrap();
        let text = K2
            .replace("kind = complete\nn = 2", "kind = file\nfile = g.txt")
            .replace("x0 = 1, -1", "x0 = 1, 0, -1");
        let e = ExperimentConfig::parse(&text).unwrap().build(dir.path()).unwrap();
        assert_eq!(e.graph, Graph::path(3));
    }
}
