//! The `analyze`, `simulate` and `verify` commands.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::analysis::{analyze, AnalysisOptions, AnalysisReport, Bound};
use crate::config::{Experiment, ExperimentConfig};
use crate::error::Result;
use crate::noise::NoiseKind;
use crate::sim::{
    lil_normalized_curve, run_ensemble, write_ms_curve_csv, write_slopes_csv, write_trajectory_csv, Ensemble, Keep,
};
use crate::stats::median;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Command-line overrides on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config_path: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
}

/// Parses and builds the experiment, applies overrides and resolves the
/// output directory (`--out`, else `[output] dir` relative to the config,
/// else `out` next to the config).
pub fn load_experiment(opts: &RunOptions) -> Result<(Experiment, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&opts.config_path)?;
    if let Some(s) = opts.seed {
        cfg.sim.seed = s;
    }
    if let Some(t) = opts.trials {
        if t == 0 {
            return Err(crate::Error::InvalidArgument("--trials must be positive".into()));
        }
        cfg.sim.trials = t;
    }
    let base = opts.config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = match (&opts.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) if d.is_absolute() => d.clone(),
        (None, Some(d)) => base.join(d),
        (None, None) => base.join("out"),
    };
    Ok((cfg.build(&base)?, out))
}

fn analysis_of(exp: &Experiment) -> Result<AnalysisReport> {
    analyze(
        &exp.graph,
        &exp.noise,
        &exp.gain,
        &exp.config.x0,
        AnalysisOptions { seed: exp.config.sim.seed, ..Default::default() },
    )
}

/// Writes `report.txt` and `report.json`.
pub fn cmd_analyze(exp: &Experiment, out: &Path) -> Result<AnalysisReport> {
    let report = analysis_of(exp)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.json"), report.to_json())?;
    Ok(report)
}

fn ensemble_summary(ens: &Ensemble) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed: {}", ens.seed);
    let _ = writeln!(s, "trials: {}", ens.trials);
    let _ = writeln!(s, "diverged: {}", ens.divergence_count());
    if let (Some(t), Some(m)) = (ens.times.last(), ens.ms_curve.last()) {
        let _ = writeln!(s, "t_end: {t}");
        let _ = writeln!(s, "terminal_ms_delta_sq: {m}");
    }
    let err = ens.terminal_error();
    let _ = writeln!(s, "terminal_error_sq_mean: {}", err.mean);
    let _ = writeln!(s, "terminal_error_sq_se: {}", err.std_error());
    for (d, m) in ens.consensus_stats().iter().enumerate() {
        let _ = writeln!(s, "consensus_{}_mean: {}", d + 1, m.mean);
        let _ = writeln!(s, "consensus_{}_variance: {}", d + 1, m.variance());
        let _ = writeln!(s, "consensus_{}_se: {}", d + 1, m.std_error());
    }
    let slopes = ens.finite_slopes();
    let neg = slopes.iter().filter(|&&v| v < 0.0).count();
    let _ = writeln!(s, "slope_median: {}", median(&slopes).map_or("n/a".into(), |v| v.to_string()));
    let _ = writeln!(
        s,
        "slope_negative_fraction: {}",
        if slopes.is_empty() { f64::NAN } else { neg as f64 / slopes.len() as f64 }
    );
    s
}

/// Writes `ms_curve.csv`, `slopes.csv`, `summary.txt`, and one CSV per
/// trial under `trials/` when trajectories are kept.
pub fn cmd_simulate(exp: &Experiment, out: &Path) -> Result<Ensemble> {
    let cfg = exp.sim_config();
    let ens = run_ensemble(&cfg)?;
    write_ensemble(exp, &ens, out)?;
    Ok(ens)
}

fn write_ensemble(exp: &Experiment, ens: &Ensemble, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_ms_curve_csv(ens, BufWriter::new(File::create(out.join("ms_curve.csv"))?))?;
    write_slopes_csv(ens, BufWriter::new(File::create(out.join("slopes.csv"))?))?;
    fs::write(out.join("summary.txt"), ensemble_summary(ens))?;
    if !ens.trajectories.is_empty() {
        let dir = out.join("trials");
        fs::create_dir_all(&dir)?;
        for (i, tr) in ens.trajectories.iter().enumerate() {
            let f = BufWriter::new(File::create(dir.join(format!("trial_{i:05}.csv")))?);
            write_trajectory_csv(tr, exp.graph.n_agents(), exp.gain.dim(), f)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl CheckStatus {
    pub fn label(self) -> &'static str {
        match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIPPED",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

impl Check {
    fn judged(name: &'static str, ok: bool, detail: String) -> Self {
        let status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
        Self { name, status, detail }
    }

    fn skipped(name: &'static str, why: &str) -> Self {
        Self { name, status: CheckStatus::Skipped, detail: why.to_string() }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# seed: {}\n# trials: {}\n", self.seed, self.trials);
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", c.status.label(), c.name, c.detail);
        }
        s
    }
}

const ROUND_OFF: f64 = 8.0 * f64::EPSILON;

fn relative_se(ens: &Ensemble, k: usize) -> f64 {
    if ens.ms_curve[k] > 0.0 {
        ens.ms_se[k] / ens.ms_curve[k]
    } else {
        0.0
    }
}

fn check_ms_upper(ens: &Ensemble, delta0_sq: f64, lmin: f64, t_max: f64) -> Check {
    let mut worst = 0.0f64;
    let mut at = 0.0;
    let mut ok = true;
    for k in 0..ens.times.len() {
        let t = ens.times[k];
        if t > t_max || ens.ms_counts[k] == 0 {
            continue;
        }
        let curve = delta0_sq * (-lmin * t).exp();
        let bound = curve * (1.0 + 3.0 * relative_se(ens, k)) + ROUND_OFF * curve;
        let ratio = if bound > 0.0 { ens.ms_curve[k] / bound } else { 0.0 };
        if ratio > worst {
            worst = ratio;
            at = t;
        }
        if ens.ms_curve[k] > bound {
            ok = false;
        }
    }
    Check::judged(
        "ms_upper_bound",
        ok,
        format!("max ms/(upper*(1+3rse)) = {worst:.4} at t = {at} (must be <= 1; rate lambda_min = {lmin})"),
    )
}

fn check_ms_lower(ens: &Ensemble, delta0_sq: f64, lmax: f64, t_max: f64) -> Check {
    let mut worst = f64::INFINITY;
    let mut at = 0.0;
    let mut ok = true;
    for k in 0..ens.times.len() {
        let t = ens.times[k];
        if t > t_max || ens.ms_counts[k] == 0 {
            continue;
        }
        let factor = 1.0 - 3.0 * relative_se(ens, k);
        if factor <= 0.0 {
            continue;
        }
        let curve = delta0_sq * (-lmax * t).exp();
        let bound = curve * factor - ROUND_OFF * curve;
        if bound <= 0.0 {
            continue;
        }
        let ratio = ens.ms_curve[k] / bound;
        if ratio < worst {
            worst = ratio;
            at = t;
        }
        if ens.ms_curve[k] < bound {
            ok = false;
        }
    }
    Check::judged(
        "ms_lower_bound",
        ok,
        format!("min ms/(lower*(1-3rse)) = {worst:.4} at t = {at} (must be >= 1; rate lambda_max = {lmax})"),
    )
}

/// Runs analysis and simulation and compares them claim by claim. The
/// ensemble artefacts are written as for `simulate`, plus `verify.txt`.
pub fn cmd_verify(exp: &Experiment, out: &Path) -> Result<VerifyReport> {
    let report = analysis_of(exp)?;
    let vcfg = &exp.config.verify;
    let homog_sym = match (&exp.noise.kind, exp.gain.scalar_k()) {
        (NoiseKind::Homogeneous { sigma }, Some(k)) if exp.noise.symmetric_channels => Some((k, *sigma)),
        _ => None,
    };
    let mut cfg = exp.sim_config();
    if homog_sym.is_some() && cfg.keep == Keep::Nothing && cfg.t_end >= vcfg.lil_start {
        cfg.keep = Keep::Norms;
    }
    let ens = run_ensemble(&cfg)?;
    write_ensemble(exp, &ens, out)?;

    let t_end = *ens.times.last().unwrap();
    let fit_start = vcfg.ms_fit_start.unwrap_or(t_end * (1.0 - cfg.slope_window));
    let fit_end = vcfg.ms_fit_end.unwrap_or(t_end);
    let d0 = report.delta0_sq;
    let mut checks = Vec::new();

    match report.ms_rate_interval {
        Some((lmin, lmax)) if d0 > 0.0 => {
            // one EM step maps E‖δ‖² through I - Ψ dt + AᵀA dt², A = Λ⁰ ⊗ K
            let dt = cfg.dt;
            let a_sq = (report.lambda_n * exp.gain.norm()).powi(2);
            checks.push(check_ms_upper(&ens, d0, lmin - a_sq * dt, t_end));
            if lmax * dt < 0.5 {
                checks.push(check_ms_lower(&ens, d0, lmax + lmax * lmax * dt, t_end));
            } else {
                checks.push(Check::skipped("ms_lower_bound", "dt too coarse for the discrete lower rate"));
            }
        }
        Some(_) => {
            checks.push(Check::skipped("ms_upper_bound", "initial state already in consensus"));
            checks.push(Check::skipped("ms_lower_bound", "initial state already in consensus"));
        }
        None => {
            checks.push(Check::skipped("ms_upper_bound", "needs a linear intensity"));
            checks.push(Check::skipped("ms_lower_bound", "needs a linear intensity"));
        }
    }

    if report.verdicts.ms_sufficient && d0 > 0.0 {
        let peak = ens.ms_curve.iter().copied().fold(0.0, f64::max);
        let last = *ens.ms_curve.last().unwrap();
        checks.push(Check::judged(
            "ms_decay",
            last.is_finite() && last * 100.0 <= peak,
            format!("terminal ms = {last:e}, peak = {peak:e} (needs >= 100x decay)"),
        ));
    } else {
        checks.push(Check::skipped("ms_decay", "no mean-square certificate"));
    }

    match report.ms_rate_interval {
        Some((_, lmax)) if lmax < 0.0 && d0 > 0.0 => {
            let slope = ens.ms_log_slope(fit_start, fit_end);
            let detail = match slope {
                Some((b, se)) => format!(
                    "log ms slope on [{fit_start}, {fit_end}] = {b:.4} (se {se:.4}), predicted >= {:.4} (needs > 0)",
                    -lmax
                ),
                None => "too few positive samples in the fit window".into(),
            };
            checks.push(Check::judged("ms_growth", slope.is_some_and(|(b, _)| b > 0.0), detail));
        }
        _ => checks.push(Check::skipped("ms_growth", "mean-square divergence is not predicted")),
    }

    let bound = match report.ss_error_bounds.linear {
        Some(b @ Bound::Finite(_)) => Some(("linear", b.value())),
        _ => match report.ss_error_bounds.general {
            Bound::Finite(v) => Some(("general", v)),
            Bound::Unbounded => None,
        },
    };
    match bound {
        Some((which, b)) => {
            let m = ens.terminal_error();
            let ok = m.count > 0 && m.mean <= b + 3.0 * m.std_error();
            checks.push(Check::judged(
                "ss_error_bound",
                ok,
                format!("E|x* - mean(x0)|^2 = {:.6} (se {:.6}), {which} bound {b:.6}", m.mean, m.std_error()),
            ));
        }
        None => checks.push(Check::skipped("ss_error_bound", "no finite steady-state bound")),
    }

    if report.verdicts.ms_sufficient {
        let stats = ens.consensus_stats();
        let mut ok = true;
        let mut parts = Vec::new();
        for (d, m) in stats.iter().enumerate() {
            let target = ens.x0_mean[d];
            let dev = (m.mean - target).abs();
            ok &= m.count > 1 && dev <= 3.0 * m.std_error() + 1e-12 * (1.0 + target.abs());
            parts.push(format!("coord {}: mean {:.6} vs {target:.6} (se {:.6})", d + 1, m.mean, m.std_error()));
        }
        checks.push(Check::judged("consensus_unbiased", ok, parts.join("; ")));
    } else {
        checks.push(Check::skipped("consensus_unbiased", "no mean-square certificate"));
    }

    let slopes = ens.finite_slopes();
    if report.verdicts.as_sufficient && d0 > 0.0 && !slopes.is_empty() {
        let frac = slopes.iter().filter(|&&v| v < 0.0).count() as f64 / slopes.len() as f64;
        checks.push(Check::judged(
            "as_negative_slopes",
            frac >= vcfg.as_fraction,
            format!("{:.1}% of trials have a negative trailing slope (needs >= {:.1}%)", 100.0 * frac, 100.0 * vcfg.as_fraction),
        ));
        let predicted = match homog_sym {
            Some((k, s)) => Some(("(k + k^2 sigma^2/2) lambda_2", (k + 0.5 * k * k * s * s) * report.lambda_2)),
            None => match (report.mu_estimate, report.lambda_k) {
                (Some(mu), _) if mu > 0.0 => Some(("mu/2", 0.5 * mu)),
                (_, Some(lk)) if lk > 0.0 => Some(("lambda_K/2", 0.5 * lk)),
                _ => None,
            },
        };
        match predicted {
            Some((label, rate)) => {
                let med = median(&slopes).unwrap();
                checks.push(Check::judged(
                    "as_rate",
                    med <= -rate + vcfg.as_tolerance,
                    format!("median slope {med:.4}, predicted <= -{label} = {:.4} (+{} tolerance)", -rate, vcfg.as_tolerance),
                ));
            }
            None => checks.push(Check::skipped("as_rate", "no positive rate prediction")),
        }
    } else {
        checks.push(Check::skipped("as_negative_slopes", "no almost-sure certificate"));
        checks.push(Check::skipped("as_rate", "no almost-sure certificate"));
    }

    match homog_sym {
        Some((k, s)) if t_end >= vcfg.lil_start && d0 > 0.0 => {
            let envelope = k.abs() * s * report.lambda_n + vcfg.lil_margin;
            let (mut total, mut above) = (0usize, 0usize);
            for tr in &ens.trajectories {
                for (t, v) in lil_normalized_curve(tr, k, s, report.lambda_2) {
                    if t >= vcfg.lil_start && t <= vcfg.lil_end {
                        total += 1;
                        above += (v > envelope) as usize;
                    }
                }
            }
            let frac = if total > 0 { above as f64 / total as f64 } else { f64::NAN };
            checks.push(Check::judged(
                "lil_envelope",
                total > 0 && frac < vcfg.lil_fraction,
                format!(
                    "{above} of {total} samples in [{}, {}] above |k| sigma lambda_N + {} = {envelope:.4} ({:.2}%, needs < {:.1}%)",
                    vcfg.lil_start,
                    vcfg.lil_end,
                    vcfg.lil_margin,
                    100.0 * frac,
                    100.0 * vcfg.lil_fraction
                ),
            ));
        }
        Some(_) => checks.push(Check::skipped("lil_envelope", "horizon shorter than the envelope window")),
        None => checks.push(Check::skipped("lil_envelope", "needs homogeneous symmetric channels and K = kI")),
    }

    let vr = VerifyReport { seed: cfg.seed, trials: cfg.trials, checks };
    fs::write(out.join("verify.txt"), vr.to_text())?;
    Ok(vr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("exp.cfg");
        fs::write(&p, body).unwrap();
        p
    }

    const K2: &str = "\
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
[sim]
dt = 0.001
t_end = 1
trials = 8
seed = 5
";

    #[test]
    fn overrides_and_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), K2);
        let (exp, out) = load_experiment(&RunOptions {
            config_path: p.clone(),
            seed: Some(9),
            trials: Some(3),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(exp.config.sim.seed, 9);
        assert_eq!(exp.config.sim.trials, 3);
        assert_eq!(out, dir.path().join("out"));
        let bad = RunOptions { config_path: p, trials: Some(0), ..Default::default() };
        assert!(load_experiment(&bad).is_err());
    }

    #[test]
    fn analyze_writes_both_reports() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), K2);
        let (exp, out) = load_experiment(&RunOptions { config_path: p, ..Default::default() }).unwrap();
        let r = cmd_analyze(&exp, &out).unwrap();
        assert_eq!(r.verdicts.ms_iff, Some(true));
        let text = fs::read_to_string(out.join("report.txt")).unwrap();
        assert!(text.starts_with("seed: 5\n"));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(json["n_agents"], 2);
    }

    #[test]
    fn simulate_is_byte_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), &K2.replace("seed = 5", "seed = 5\nkeep = full"));
        let (exp, _) = load_experiment(&RunOptions { config_path: p, ..Default::default() }).unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        cmd_simulate(&exp, &a).unwrap();
        cmd_simulate(&exp, &b).unwrap();
        for f in ["ms_curve.csv", "slopes.csv", "summary.txt", "trials/trial_00007.csv"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn verify_skips_inapplicable_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), K2);
        let (exp, out) = load_experiment(&RunOptions { config_path: p, ..Default::default() }).unwrap();
        let r = cmd_verify(&exp, &out).unwrap();
        let lil = r.checks.iter().find(|c| c.name == "lil_envelope").unwrap();
        assert_eq!(lil.status, CheckStatus::Skipped);
        let growth = r.checks.iter().find(|c| c.name == "ms_growth").unwrap();
        assert_eq!(growth.status, CheckStatus::Skipped);
        assert!(fs::read_to_string(out.join("verify.txt")).unwrap().starts_with("# seed: 5\n"));
    }
}
