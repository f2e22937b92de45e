//! Named sweeps that produce one CSV table each.
//!
//! Relative errors are taken against the dense oracle whenever `Ψ` and `Q`
//! fit in memory; otherwise those columns are dropped and a comment says so.
//! Mean Lanczos counts are always total steps over total probes, so they
//! agree with the per-probe counts in the evaluation log.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Evaluation, HyperPrior};
use crate::oracle::{DenseProblem, MAX_DENSE_ROWS};
use crate::problems::ProblemKind;

use super::config::{PrecondMode, RunConfig};
use super::output::{fmt_f64, EvalLog, Table};
use super::{bounds_for, build_problem, run_map, theta0, Session};

/// Largest `n` for which the oracle builds `Q` densely.
const MAX_DENSE_UNKNOWNS: usize = 6000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Objective error against probe count.
    McAccuracy,
    /// Error and Lanczos steps against preconditioner rank, per smoothness.
    PrecondRank,
    /// Error and Lanczos steps against the noise variance.
    NoiseSweep,
    /// Lanczos steps and time against the number of measurements.
    MeasurementScaling,
    /// MAP runs on the space-time problem with and without the low-rank part.
    Dynamic,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::McAccuracy,
        ExperimentKind::PrecondRank,
        ExperimentKind::NoiseSweep,
        ExperimentKind::MeasurementScaling,
        ExperimentKind::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::McAccuracy => "mc-accuracy",
            ExperimentKind::PrecondRank => "precond-rank",
            ExperimentKind::NoiseSweep => "noise-sweep",
            ExperimentKind::MeasurementScaling => "measurement-scaling",
            ExperimentKind::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown experiment '{s}'; expected one of {}", names.join(", ")))
            })
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rel_l2(a: &[f64], exact: &[f64]) -> f64 {
    let diff = a.iter().zip(exact).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / exact.iter().map(|y| y * y).sum::<f64>().sqrt()
}

/// Exact objective and gradient at one `θ`.
struct Exact {
    objective: f64,
    gradient: Vec<f64>,
    seconds: f64,
}

fn oracle_feasible(s: &Session) -> bool {
    s.model.m() <= MAX_DENSE_ROWS && s.model.n() <= MAX_DENSE_UNKNOWNS
}

fn exact_at(s: &Session, theta: &[f64], hyper: HyperPrior) -> Result<Option<Exact>> {
    if !oracle_feasible(s) {
        return Ok(None);
    }
    let start = Instant::now();
    let dense = DenseProblem::new(&s.model, hyper)?;
    let objective = dense.exact_objective(theta)?;
    let gradient = dense.exact_gradient(theta)?;
    Ok(Some(Exact {
        objective,
        gradient,
        seconds: start.elapsed().as_secs_f64(),
    }))
}

/// Statistics of repeated evaluations in one sweep cell.
#[derive(Default)]
struct Cell {
    rel_err: Vec<f64>,
    grad_cos: Vec<f64>,
    grad_err: Vec<f64>,
    k_sum: usize,
    k_count: usize,
    reached_max: usize,
    matvecs: u64,
    seconds: f64,
}

impl Cell {
    fn add(&mut self, ev: &Evaluation, exact: Option<&Exact>, seconds: f64) {
        if let Some(x) = exact {
            self.rel_err.push((ev.objective - x.objective).abs() / x.objective.abs());
            self.grad_cos.push(cosine(&ev.gradient, &x.gradient));
            self.grad_err.push(rel_l2(&ev.gradient, &x.gradient));
        }
        self.k_sum += ev.per_probe_k.iter().sum::<usize>();
        self.k_count += ev.per_probe_k.len();
        self.reached_max += ev.reached_max;
        self.matvecs += ev.matvecs.total();
        self.seconds += seconds;
    }

    fn mean_k(&self) -> f64 {
        self.k_sum as f64 / self.k_count.max(1) as f64
    }
}

/// Runs `reps` evaluations at `theta` on probe seeds `seed, seed + 1, …`.
fn repeat(
    s: &Session,
    theta: &[f64],
    n_mc: usize,
    seed: u64,
    reps: usize,
    exact: Option<&Exact>,
    log: &mut Option<&mut EvalLog>,
    label: &str,
) -> Result<Cell> {
    let mut cell = Cell::default();
    for rep in 0..reps {
        let run = s.reseeded(n_mc, seed + rep as u64)?;
        let start = Instant::now();
        let ev = run.evaluate(theta)?;
        let secs = start.elapsed().as_secs_f64();
        if let Some(l) = log.as_deref_mut() {
            l.record(label, &ev)?;
        }
        cell.add(&ev, exact, secs);
    }
    Ok(cell)
}

fn eval_theta(cfg: &RunConfig, s: &Session) -> Result<Vec<f64>> {
    if cfg.experiment.theta.is_empty() {
        theta0(cfg, &s.problem)
    } else {
        let k = s.problem.prior.num_hyper();
        if cfg.experiment.theta.len() != k {
            return Err(Error::Config(format!(
                "experiment.theta needs {k} entries, got {}",
                cfg.experiment.theta.len()
            )));
        }
        Ok(cfg.experiment.theta.clone())
    }
}

fn header_comments(table: &mut Table, kind: ExperimentKind, cfg: &RunConfig) {
    table.comment(&format!("experiment = \"{kind}\""));
    table.comment(&cfg.to_toml());
}

fn no_oracle_note(table: &mut Table, s: &Session) {
    table.comment(&format!(
        "note: dense oracle infeasible at m = {}, n = {}; error columns omitted",
        s.model.m(),
        s.model.n()
    ));
}

/// Runs one named sweep; evaluations go to `log` when given.
pub fn run_experiment(kind: ExperimentKind, cfg: &RunConfig, mut log: Option<&mut EvalLog>) -> Result<Table> {
    let table = match kind {
        ExperimentKind::McAccuracy => mc_accuracy(cfg, &mut log),
        ExperimentKind::PrecondRank => precond_rank(cfg, &mut log),
        ExperimentKind::NoiseSweep => noise_sweep(cfg, &mut log),
        ExperimentKind::MeasurementScaling => measurement_scaling(cfg, &mut log),
        ExperimentKind::Dynamic => dynamic(cfg, &mut log),
    }?;
    if let Some(l) = log {
        l.flush()?;
    }
    Ok(table)
}

fn with_errors(base: &[&str], errors: &[&str], tail: &[&str], oracle: bool) -> Vec<String> {
    let mut h: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    if oracle {
        h.extend(errors.iter().map(|s| s.to_string()));
    }
    h.extend(tail.iter().map(|s| s.to_string()));
    h
}

fn mc_accuracy(cfg: &RunConfig, log: &mut Option<&mut EvalLog>) -> Result<Table> {
    let s = Session::new(cfg, build_problem(cfg)?, cfg.precond.mode)?;
    let theta = eval_theta(cfg, &s)?;
    let exact = exact_at(&s, &theta, s.opts.hyper)?;
    let reps = cfg.experiment.repetitions;
    let mut t = Table::new(with_errors(
        &["n_mc", "repetitions"],
        &["median_rel_err", "mean_rel_err", "std_rel_err", "mean_grad_cos", "mean_grad_rel_err"],
        &["mean_k", "reached_max", "matvecs", "seconds"],
        exact.is_some(),
    ));
    header_comments(&mut t, ExperimentKind::McAccuracy, cfg);
    if exact.is_none() {
        no_oracle_note(&mut t, &s);
    }
    for &n_mc in &cfg.experiment.n_mc_grid {
        let c = repeat(&s, &theta, n_mc, cfg.seed, reps, exact.as_ref(), log, "mc-accuracy")?;
        let mut row = vec![n_mc.to_string(), reps.to_string()];
        if exact.is_some() {
            row.extend([
                fmt_f64(median(&c.rel_err)),
                fmt_f64(mean(&c.rel_err)),
                fmt_f64(std_dev(&c.rel_err)),
                fmt_f64(mean(&c.grad_cos)),
                fmt_f64(mean(&c.grad_err)),
            ]);
        }
        row.extend([
            fmt_f64(c.mean_k()),
            c.reached_max.to_string(),
            c.matvecs.to_string(),
            fmt_f64(c.seconds),
        ]);
        t.push(row);
    }
    Ok(t)
}

fn precond_rank(cfg: &RunConfig, log: &mut Option<&mut EvalLog>) -> Result<Table> {
    let base = build_problem(cfg)?;
    let n_mc = cfg.estimator.n_mc_for(base.meta.kind);
    let reps = cfg.experiment.repetitions;
    let ranks: Vec<usize> = cfg
        .experiment
        .rank_grid
        .iter()
        .map(|&p| if base.meta.kind == ProblemKind::Dynamic { p * p * cfg.precond.time_p } else { p * p })
        .collect();

    let mut rows = Vec::new();
    let mut oracle = true;
    for &nu in &cfg.experiment.nu_grid {
        let problem = base.with_smoothness(nu);
        let mut cells = Vec::new();
        let mut exact = None;
        for (i, &p) in cfg.experiment.rank_grid.iter().enumerate() {
            let mut c = cfg.clone();
            c.precond.space_p = p;
            c.kernel.nu = Some(nu);
            let s = Session::new(&c, problem.clone(), PrecondMode::Lowrank)?;
            let theta = eval_theta(&c, &s)?;
            if i == 0 {
                exact = exact_at(&s, &theta, s.opts.hyper)?;
                oracle &= exact.is_some();
            }
            let label = format!("precond-rank nu={nu} r={}", ranks[i]);
            cells.push(repeat(&s, &theta, n_mc, cfg.seed, reps, exact.as_ref(), log, &label)?);
        }
        rows.push((nu, cells));
    }

    let mut header = vec!["nu".to_string()];
    header.extend(ranks.iter().map(|r| format!("k_r{r}")));
    if oracle {
        header.extend(ranks.iter().map(|r| format!("err_r{r}")));
        header.extend(ranks.iter().map(|r| format!("err_std_r{r}")));
    }
    header.extend(ranks.iter().map(|r| format!("reached_max_r{r}")));
    let mut t = Table::new(header);
    header_comments(&mut t, ExperimentKind::PrecondRank, cfg);
    t.comment(&format!("n_mc = {n_mc}, repetitions = {reps}; err is the mean relative objective error"));
    if !oracle {
        t.comment("note: dense oracle infeasible; error columns omitted");
    }
    for (nu, cells) in rows {
        let mut row = vec![nu.to_string()];
        row.extend(cells.iter().map(|c| fmt_f64(c.mean_k())));
        if oracle {
            row.extend(cells.iter().map(|c| fmt_f64(mean(&c.rel_err))));
            row.extend(cells.iter().map(|c| fmt_f64(std_dev(&c.rel_err))));
        }
        row.extend(cells.iter().map(|c| c.reached_max.to_string()));
        t.push(row);
    }
    Ok(t)
}

fn noise_sweep(cfg: &RunConfig, log: &mut Option<&mut EvalLog>) -> Result<Table> {
    let base = build_problem(cfg)?;
    let n_mc = cfg.estimator.n_mc_for(base.meta.kind);
    let reps = cfg.experiment.repetitions;
    let mut body = Vec::new();
    let mut oracle = true;
    for &nu in &cfg.experiment.nu_grid {
        let mut c = cfg.clone();
        c.kernel.nu = Some(nu);
        let s = Session::new(&c, base.with_smoothness(nu), cfg.precond.mode)?;
        let mut theta = eval_theta(&c, &s)?;
        for &sigma in &cfg.experiment.sigma_grid {
            theta[0] = sigma;
            let exact = exact_at(&s, &theta, s.opts.hyper)?;
            oracle &= exact.is_some();
            let label = format!("noise-sweep nu={nu} sigma_m_sq={sigma:e}");
            let cell = repeat(&s, &theta, n_mc, cfg.seed, reps, exact.as_ref(), log, &label)?;
            body.push((nu, sigma, cell));
        }
    }
    let mut t = Table::new(with_errors(
        &["nu", "sigma_m_sq", "repetitions"],
        &["median_rel_err", "mean_rel_err", "std_rel_err"],
        &["mean_k", "reached_max", "matvecs", "seconds"],
        oracle,
    ));
    header_comments(&mut t, ExperimentKind::NoiseSweep, cfg);
    if !oracle {
        t.comment("note: dense oracle infeasible; error columns omitted");
    }
    for (nu, sigma, c) in body {
        let mut row = vec![nu.to_string(), fmt_f64(sigma), reps.to_string()];
        if oracle {
            row.extend([fmt_f64(median(&c.rel_err)), fmt_f64(mean(&c.rel_err)), fmt_f64(std_dev(&c.rel_err))]);
        }
        row.extend([
            fmt_f64(c.mean_k()),
            c.reached_max.to_string(),
            c.matvecs.to_string(),
            fmt_f64(c.seconds),
        ]);
        t.push(row);
    }
    Ok(t)
}

fn measurement_scaling(cfg: &RunConfig, log: &mut Option<&mut EvalLog>) -> Result<Table> {
    let reps = cfg.experiment.repetitions;
    let mut body = Vec::new();
    let mut oracle = true;
    for &j in &cfg.experiment.j_grid {
        let mut c = cfg.clone();
        c.problem.j = j;
        c.problem.kind = ProblemKind::Static;
        c.problem.dir = None;
        let s = Session::new(&c, build_problem(&c)?, cfg.precond.mode)?;
        let theta = eval_theta(&c, &s)?;
        let exact = exact_at(&s, &theta, s.opts.hyper)?;
        oracle &= exact.is_some();
        let n_mc = c.estimator.n_mc_for(ProblemKind::Static);
        let label = format!("measurement-scaling j={j}");
        let cell = repeat(&s, &theta, n_mc, cfg.seed, reps, exact.as_ref(), log, &label)?;
        body.push((j, s.model.m(), cell, exact.map(|e| e.seconds)));
    }
    let mut t = Table::new(with_errors(
        &["j", "m", "repetitions", "mean_k", "reached_max", "matvecs", "mc_seconds"],
        &["mean_rel_err", "full_seconds"],
        &[],
        oracle,
    ));
    header_comments(&mut t, ExperimentKind::MeasurementScaling, cfg);
    t.comment("mc_seconds is per evaluation; full_seconds is one dense objective and gradient");
    for (j, m, c, full) in body {
        let mut row = vec![
            fmt_f64(j),
            m.to_string(),
            reps.to_string(),
            fmt_f64(c.mean_k()),
            c.reached_max.to_string(),
            c.matvecs.to_string(),
            fmt_f64(c.seconds / reps as f64),
        ];
        if oracle {
            row.extend([fmt_f64(mean(&c.rel_err)), fmt_f64(full.unwrap_or(f64::NAN))]);
        }
        t.push(row);
    }
    Ok(t)
}

fn dynamic(cfg: &RunConfig, log: &mut Option<&mut EvalLog>) -> Result<Table> {
    let mut c = cfg.clone();
    if c.problem.dir.is_none() {
        c.problem.kind = ProblemKind::Dynamic;
    }
    let problem = build_problem(&c)?;
    if problem.meta.kind != ProblemKind::Dynamic {
        return Err(Error::Config("the dynamic experiment needs a dynamic problem".into()));
    }
    let theta = theta0(&c, &problem)?;
    let bounds = bounds_for(&c, &problem)?;
    let opts = c.optimizer.options();
    let mut t = Table::new([
        "run",
        "iterations",
        "evaluations",
        "mean_k",
        "reached_max",
        "reached_max_probes",
        "objective",
        "theta",
        "reconstruction_error",
        "stop_reason",
        "matvecs",
    ]);
    header_comments(&mut t, ExperimentKind::Dynamic, cfg);
    t.comment("reached_max counts evaluations with at least one probe at kmax");
    for (mode, label) in [(PrecondMode::Lowrank, "preconditioned"), (PrecondMode::None, "unpreconditioned")] {
        let s = Session::new(&c, problem.clone(), mode)?;
        let run = run_map(&s, &theta, &bounds, &opts, log.as_deref_mut(), label)?;
        let rec = s.reconstruct(&run.result.theta)?;
        let theta_str: Vec<String> = run.result.theta.iter().map(|x| fmt_f64(*x)).collect();
        t.push(vec![
            label.to_string(),
            run.result.iterations.to_string(),
            run.result.evaluations.to_string(),
            fmt_f64(run.mean_k()),
            run.reached_max().to_string(),
            run.evaluations.iter().map(|e| e.reached_max).sum::<usize>().to_string(),
            fmt_f64(run.result.objective),
            theta_str.join(";"),
            rec.relative_error.map(fmt_f64).unwrap_or_default(),
            serde_json::to_value(run.result.reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            run.evaluations.iter().map(|e| e.matvecs.total()).sum::<u64>().to_string(),
        ]);
    }
    Ok(t)
}
