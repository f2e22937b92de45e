//! Configuration, optimizer, experiment harness and output plumbing.
//!
//! A [`Session`] pins everything one objective needs: the problem, the
//! preconditioner setup and a frozen probe sample. Every evaluation in a
//! session is deterministic, which is what the optimizer relies on.

mod config;
mod experiment;
mod optimize;
mod output;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::estimator::{evaluate, EvalOptions, Evaluation, Model, PrecondSetup, ProbeSet};
use crate::problems::{
    make_dynamic_problem, make_null_problem, make_static_problem, reconstruct, DynamicSpec, ProblemInstance,
    ProblemKind, Reconstruction, StaticSpec,
};

pub use config::{EstimatorConfig, ExperimentConfig, KernelConfig, OptimizerConfig, PrecondConfig, PrecondMode, ProblemConfig, RunConfig};
pub use experiment::{run_experiment, ExperimentKind};
pub use optimize::{minimize, Bounds, OptimOptions, OptimResult, StopReason, TraceEntry};
pub use output::{au_cache_name, cached_low_rank, fmt_f64, EvalLog, Table};

/// Generates or loads the problem described by `cfg.problem`, then applies
/// the kernel override.
pub fn build_problem(cfg: &RunConfig) -> Result<ProblemInstance> {
    let p = &cfg.problem;
    let problem = match &p.dir {
        Some(dir) => ProblemInstance::load(dir)?,
        None => match p.kind {
            ProblemKind::Static => make_static_problem(&StaticSpec {
                n_side: p.n_side.unwrap_or(StaticSpec::default().n_side),
                j: p.j,
                noise_level: p.noise_level,
                nu: cfg.kernel.nu.unwrap_or(StaticSpec::default().nu),
                seed: p.seed,
            })?,
            ProblemKind::Dynamic => make_dynamic_problem(&DynamicSpec {
                n_side: p.n_side.unwrap_or(DynamicSpec::default().n_side),
                n_t: p.n_t,
                n_src: p.n_src,
                n_rcv: p.n_rcv,
                noise_level: p.noise_level,
                seed: p.seed,
            })?,
            ProblemKind::Null => make_null_problem(p.m, p.n_side.unwrap_or(4), p.seed)?,
        },
    };
    Ok(match cfg.kernel.nu {
        Some(nu) if nu != problem.meta.nu => problem.with_smoothness(nu),
        _ => problem,
    })
}

/// Identifies the forward map for the `AU` cache.
pub fn problem_tag(p: &ProblemInstance) -> String {
    let kind = match p.meta.kind {
        ProblemKind::Static => "static",
        ProblemKind::Dynamic => "dynamic",
        ProblemKind::Null => "null",
    };
    format!(
        "{kind}_n{}_t{}_src{}_rcv{}_m{}",
        p.meta.n_side,
        p.meta.n_t,
        p.meta.n_src,
        p.meta.n_rcv,
        p.m()
    )
}

/// Default starting point: `(10⁻³, 0.8147, 0.9058)` for static problems and
/// `(σ_m², 1, 1, 1)` at the realized noise variance for dynamic ones.
pub fn reference_theta(p: &ProblemInstance) -> Vec<f64> {
    match p.meta.kind {
        ProblemKind::Static => vec![1e-3, 0.8147, 0.9058],
        ProblemKind::Dynamic => {
            let s = if p.meta.true_sigma_m_sq > 0.0 { p.meta.true_sigma_m_sq } else { 1e-3 };
            vec![s, 1.0, 1.0, 1.0]
        }
        ProblemKind::Null => vec![0.1, 1.0, 0.5],
    }
}

/// `optimizer.theta0` if given, otherwise [`reference_theta`].
pub fn theta0(cfg: &RunConfig, p: &ProblemInstance) -> Result<Vec<f64>> {
    let k = p.prior.num_hyper();
    let t = if cfg.optimizer.theta0.is_empty() {
        reference_theta(p)
    } else {
        cfg.optimizer.theta0.clone()
    };
    if t.len() != k {
        return Err(Error::Config(format!("θ₀ needs {k} entries for this problem, got {}", t.len())));
    }
    Ok(t)
}

/// Lower bounds default to `1e-8`; upper bounds to `+∞` for the variances
/// and to the top of the interpolation box for the length scales.
pub fn bounds_for(cfg: &RunConfig, p: &ProblemInstance) -> Result<Bounds> {
    let k = p.prior.num_hyper();
    let o = &cfg.optimizer;
    let lower = if o.lower.is_empty() { vec![1e-8; k] } else { o.lower.clone() };
    let upper = if o.upper.is_empty() {
        let mut u = vec![f64::INFINITY, f64::INFINITY, cfg.precond.ell_range[1]];
        if k == 4 {
            u = vec![f64::INFINITY, f64::INFINITY, cfg.precond.ell_t_range[1], cfg.precond.ell_range[1]];
        }
        u
    } else {
        o.upper.clone()
    };
    if lower.len() != k || upper.len() != k {
        return Err(Error::Config(format!("bounds need {k} entries for this problem")));
    }
    Bounds::new(lower, upper)
}

/// Frozen objective: problem, preconditioner and probe sample.
#[derive(Debug, Clone)]
pub struct Session {
    pub problem: ProblemInstance,
    pub model: Model,
    pub setup: PrecondSetup,
    pub probes: ProbeSet,
    pub opts: EvalOptions,
}

impl Session {
    pub fn new(cfg: &RunConfig, problem: ProblemInstance, mode: PrecondMode) -> Result<Self> {
        let model = problem.model()?;
        let setup = match mode {
            PrecondMode::None => PrecondSetup::NoiseOnly,
            PrecondMode::Lowrank => {
                let dir = cache_dir(cfg);
                cached_low_rank(
                    &model,
                    &cfg.precond.low_rank_settings(),
                    cfg.precond.clip_tol,
                    dir.as_deref(),
                    &problem_tag(&problem),
                )?
            }
        };
        let n_mc = cfg.estimator.n_mc_for(problem.meta.kind);
        let probes = ProbeSet::draw(model.m(), n_mc, cfg.estimator.probe, cfg.seed)?;
        Ok(Self {
            problem,
            model,
            setup,
            probes,
            opts: cfg.estimator.eval_options(),
        })
    }

    /// Same session on a fresh probe sample.
    pub fn reseeded(&self, n_mc: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            probes: ProbeSet::draw(self.model.m(), n_mc, self.probes.kind, seed)?,
            ..self.clone()
        })
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        evaluate(theta, &self.model, &self.setup, &self.probes, &self.opts)
    }

    /// Posterior mean at `θ`; the error is reported when the truth is nonzero.
    pub fn reconstruct(&self, theta: &[f64]) -> Result<Reconstruction> {
        let truth = Some(&self.problem.s_true).filter(|t| t.norm() > 0.0);
        reconstruct(&self.model, theta, &self.setup, self.opts.pcg_tol, self.opts.pcg_kmax, truth)
    }
}

/// `precond.cache_dir`, else the loaded problem directory.
pub fn cache_dir(cfg: &RunConfig) -> Option<PathBuf> {
    cfg.precond.cache_dir.clone().or_else(|| cfg.problem.dir.clone())
}

/// A finished MAP run with every evaluation it made.
#[derive(Debug, Clone)]
pub struct MapRun {
    pub theta0: Vec<f64>,
    pub result: OptimResult,
    pub evaluations: Vec<Evaluation>,
}

impl MapRun {
    /// Mean Lanczos steps over all probes of all evaluations.
    pub fn mean_k(&self) -> f64 {
        let (sum, count) = self
            .evaluations
            .iter()
            .fold((0usize, 0usize), |(s, c), e| (s + e.per_probe_k.iter().sum::<usize>(), c + e.per_probe_k.len()));
        sum as f64 / count.max(1) as f64
    }

    /// Evaluations in which at least one probe hit `kmax`.
    pub fn reached_max(&self) -> usize {
        self.evaluations.iter().filter(|e| e.reached_max > 0).count()
    }
}

/// Minimizes the session's surrogate from `theta0`, logging each evaluation
/// under `label`.
pub fn run_map(
    session: &Session,
    theta0: &[f64],
    bounds: &Bounds,
    opts: &OptimOptions,
    mut log: Option<&mut EvalLog>,
    label: &str,
) -> Result<MapRun> {
    let mut evaluations = Vec::new();
    let mut log_err = None;
    let result = minimize(
        |theta| {
            let ev = session.evaluate(theta)?;
            if !ev.is_reliable() {
                log::warn!(
                    "unreliable evaluation at θ = {theta:?}: {} probes at kmax, PCG converged = {}",
                    ev.reached_max,
                    ev.pcg_converged
                );
            }
            if let Some(l) = log.as_deref_mut() {
                if let Err(e) = l.record(label, &ev) {
                    log_err.get_or_insert(e);
                }
            }
            let out = (ev.objective, ev.gradient.clone());
            evaluations.push(ev);
            Ok(out)
        },
        theta0,
        bounds,
        opts,
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    if let Some(l) = log {
        l.flush()?;
    }
    Ok(MapRun {
        theta0: theta0.to_vec(),
        result,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn null_config(m: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.problem.kind = ProblemKind::Null;
        cfg.problem.m = m;
        cfg.problem.n_side = Some(3);
        cfg.precond.mode = PrecondMode::None;
        cfg.estimator.n_mc = Some(4);
        cfg
    }

    #[test]
    fn null_problem_optimum_is_analytic() {
        // With A = 0, F(σ²) = γσ² + (m/2) log σ² + ‖d‖²/(2σ²) + γ(σ_n + ℓ).
        let cfg = null_config(40);
        let p = build_problem(&cfg).unwrap();
        let s = Session::new(&cfg, p, PrecondMode::None).unwrap();
        let (m, g) = (40.0, cfg.estimator.gamma);
        let dd = s.problem.data.norm_squared();
        let expect = (-m / 2.0 + (m * m / 4.0 + 2.0 * g * dd).sqrt()) / (2.0 * g);
        let t0 = theta0(&cfg, &s.problem).unwrap();
        let bounds = bounds_for(&cfg, &s.problem).unwrap();
        // The default stop on |ΔF| ≤ 1e-8 |F| leaves σ² accurate to about √1e-8.
        let run = run_map(&s, &t0, &bounds, &cfg.optimizer.options(), None, "null").unwrap();
        assert!(run.result.converged(), "{:?}", run.result.reason);
        assert!((run.result.theta[0] - expect).abs() < 1e-3 * expect, "{} vs {expect}", run.result.theta[0]);
        let tight = OptimOptions {
            f_rel_tol: 1e-15,
            pg_tol: 1e-10,
            ..cfg.optimizer.options()
        };
        let run = run_map(&s, &t0, &bounds, &tight, None, "null").unwrap();
        assert!((run.result.theta[0] - expect).abs() < 1e-7 * expect, "{} vs {expect}", run.result.theta[0]);
        assert_eq!(run.evaluations.len(), run.result.evaluations);
        assert_eq!(run.reached_max(), 0);
    }

    #[test]
    fn session_is_deterministic() {
        let mut cfg = RunConfig::default();
        cfg.problem.n_side = Some(8);
        cfg.problem.j = 0.3;
        cfg.precond.space_p = 4;
        cfg.estimator.n_mc = Some(4);
        let p = build_problem(&cfg).unwrap();
        let s = Session::new(&cfg, p.clone(), PrecondMode::Lowrank).unwrap();
        let t = theta0(&cfg, &p).unwrap();
        let a = s.evaluate(&t).unwrap();
        let b = Session::new(&cfg, p, PrecondMode::Lowrank).unwrap().evaluate(&t).unwrap();
        assert_eq!(a, b);
        let c = s.reseeded(4, 99).unwrap().evaluate(&t).unwrap();
        assert_ne!(a.objective, c.objective);
    }

    #[test]
    fn defaults_follow_problem_kind() {
        let mut cfg = RunConfig::default();
        cfg.problem.kind = ProblemKind::Dynamic;
        cfg.problem.n_side = Some(6);
        cfg.problem.n_t = 3;
        cfg.problem.n_src = 3;
        cfg.problem.n_rcv = 4;
        let p = build_problem(&cfg).unwrap();
        let t = theta0(&cfg, &p).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], p.meta.true_sigma_m_sq);
        let b = bounds_for(&cfg, &p).unwrap();
        assert_eq!(b.upper[2], cfg.precond.ell_t_range[1]);
        assert_eq!(cfg.estimator.n_mc_for(p.meta.kind), 18);
        cfg.optimizer.theta0 = vec![1.0, 1.0, 1.0];
        assert!(theta0(&cfg, &p).unwrap_err().is_config_error());
    }

    #[test]
    fn kernel_override_changes_smoothness() {
        let mut cfg = RunConfig::default();
        cfg.problem.n_side = Some(6);
        cfg.problem.j = 0.2;
        cfg.kernel.nu = Some(crate::kernels::Smoothness::FiveHalves);
        let p = build_problem(&cfg).unwrap();
        assert_eq!(p.meta.nu, crate::kernels::Smoothness::FiveHalves);
    }
}
