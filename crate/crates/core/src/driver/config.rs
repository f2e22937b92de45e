//! TOML run configuration.
//!
//! Every section and key is optional; omitted values take the defaults
//! below. Unknown keys are rejected so that typos surface as errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EvalOptions, HyperPrior, ProbeKind, DEFAULT_GAMMA};
use crate::kernels::Smoothness;
use crate::krylov::{LanczosOptions, DEFAULT_KMAX, DEFAULT_PCG_TOL, DEFAULT_QUAD_TOL};
use crate::precond::DEFAULT_CLIP_TOLERANCE;
use crate::prior::LowRankSettings;
use crate::problems::{DynamicSpec, ProblemKind, StaticSpec};

use super::optimize::OptimOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Load a saved problem directory instead of generating one.
    pub dir: Option<PathBuf>,
    /// Pixels per side; unset means 32 for static problems and 16 for dynamic ones.
    pub n_side: Option<usize>,
    pub j: f64,
    pub n_t: usize,
    pub n_src: usize,
    pub n_rcv: usize,
    /// Rows of the null problem.
    pub m: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        let s = StaticSpec::default();
        let d = DynamicSpec::default();
        Self {
            kind: ProblemKind::Static,
            dir: None,
            n_side: None,
            j: s.j,
            n_t: d.n_t,
            n_src: d.n_src,
            n_rcv: d.n_rcv,
            m: 50,
            noise_level: s.noise_level,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Spatial smoothness; unset keeps the problem's own (1/2 static, 3/2 dynamic).
    pub nu: Option<Smoothness>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Probe count; unset means 24, or 18 for dynamic problems.
    pub n_mc: Option<usize>,
    pub probe: ProbeKind,
    pub quad_tol: f64,
    pub pcg_tol: f64,
    pub kmax: usize,
    pub pcg_kmax: usize,
    pub gamma: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            n_mc: None,
            probe: ProbeKind::Rademacher,
            quad_tol: DEFAULT_QUAD_TOL,
            pcg_tol: DEFAULT_PCG_TOL,
            kmax: DEFAULT_KMAX,
            pcg_kmax: 2000,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl EstimatorConfig {
    pub fn n_mc_for(&self, kind: ProblemKind) -> usize {
        self.n_mc.unwrap_or(match kind {
            ProblemKind::Dynamic => 18,
            ProblemKind::Static | ProblemKind::Null => 24,
        })
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            lanczos: LanczosOptions {
                kmax: self.kmax,
                quad_tol: self.quad_tol,
            },
            pcg_tol: self.pcg_tol,
            pcg_kmax: self.pcg_kmax,
            hyper: HyperPrior { gamma: self.gamma },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrecondMode {
    #[default]
    Lowrank,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecondConfig {
    pub mode: PrecondMode,
    pub space_p: usize,
    pub time_p: usize,
    pub theta_p: usize,
    pub ell_range: [f64; 2],
    pub ell_t_range: [f64; 2],
    pub clip_tol: f64,
    /// Where `AU` is cached; defaults to the problem directory when loading
    /// one, otherwise to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        let lr = LowRankSettings::default();
        Self {
            mode: PrecondMode::Lowrank,
            space_p: lr.space_p,
            time_p: lr.time_p,
            theta_p: lr.theta_p,
            ell_range: [lr.ell_range.0, lr.ell_range.1],
            ell_t_range: [lr.ell_t_range.0, lr.ell_t_range.1],
            clip_tol: DEFAULT_CLIP_TOLERANCE,
            cache_dir: None,
        }
    }
}

impl PrecondConfig {
    pub fn low_rank_settings(&self) -> LowRankSettings {
        LowRankSettings {
            space_p: self.space_p,
            time_p: self.time_p,
            theta_p: self.theta_p,
            ell_range: (self.ell_range[0], self.ell_range[1]),
            ell_t_range: (self.ell_t_range[0], self.ell_t_range[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Initial point; empty means the problem-specific default.
    pub theta0: Vec<f64>,
    /// Lower bounds; empty means `1e-8` everywhere.
    pub lower: Vec<f64>,
    /// Upper bounds; empty means the preconditioner's length-scale box for
    /// length scales and `+∞` elsewhere.
    pub upper: Vec<f64>,
    pub max_iter: usize,
    pub f_rel_tol: f64,
    pub pg_tol: f64,
    pub memory: usize,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimOptions::default();
        Self {
            theta0: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            max_iter: o.max_iter,
            f_rel_tol: o.f_rel_tol,
            pg_tol: o.pg_tol,
            memory: o.memory,
            max_backtracks: o.max_backtracks,
        }
    }
}

impl OptimizerConfig {
    pub fn options(&self) -> OptimOptions {
        OptimOptions {
            max_iter: self.max_iter,
            f_rel_tol: self.f_rel_tol,
            pg_tol: self.pg_tol,
            memory: self.memory,
            max_backtracks: self.max_backtracks,
            ..OptimOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub repetitions: usize,
    /// Evaluation point for accuracy sweeps; empty means the default `θ`.
    pub theta: Vec<f64>,
    pub n_mc_grid: Vec<usize>,
    /// Chebyshev nodes per spatial dimension; rank is the square.
    pub rank_grid: Vec<usize>,
    pub nu_grid: Vec<Smoothness>,
    pub sigma_grid: Vec<f64>,
    pub j_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            repetitions: 10,
            theta: Vec::new(),
            n_mc_grid: vec![8, 16, 24, 50, 100, 200],
            rank_grid: vec![5, 10, 15, 20],
            nu_grid: Smoothness::ALL.to_vec(),
            sigma_grid: vec![1e2, 1.0, 1e-2, 1e-4, 1e-6],
            j_grid: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the frozen probe sample.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub problem: ProblemConfig,
    pub kernel: KernelConfig,
    pub estimator: EstimatorConfig,
    pub precond: PrecondConfig,
    pub optimizer: OptimizerConfig,
    pub experiment: ExperimentConfig,
}

fn positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {x}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.estimator;
        positive("estimator.quad_tol", e.quad_tol)?;
        positive("estimator.pcg_tol", e.pcg_tol)?;
        if e.gamma < 0.0 || !e.gamma.is_finite() {
            return Err(Error::Config(format!("estimator.gamma must be nonnegative, got {}", e.gamma)));
        }
        if e.n_mc == Some(0) || e.kmax == 0 || e.pcg_kmax == 0 {
            return Err(Error::Config("n_mc, kmax and pcg_kmax must be positive".into()));
        }
        let p = &self.problem;
        if p.n_side == Some(0) || p.n_t == 0 || p.n_src == 0 || p.n_rcv == 0 || p.m == 0 {
            return Err(Error::Config("problem sizes must be positive".into()));
        }
        positive("problem.j", p.j)?;
        if p.noise_level < 0.0 || !p.noise_level.is_finite() {
            return Err(Error::Config("problem.noise_level must be nonnegative".into()));
        }
        let pc = &self.precond;
        if pc.space_p == 0 || pc.time_p == 0 || pc.theta_p == 0 {
            return Err(Error::Config("Chebyshev node counts must be positive".into()));
        }
        for (name, r) in [("precond.ell_range", pc.ell_range), ("precond.ell_t_range", pc.ell_t_range)] {
            if !(r[0] > 0.0 && r[1] > r[0] && r[1].is_finite()) {
                return Err(Error::Config(format!("{name} must satisfy 0 < low < high")));
            }
        }
        positive("precond.clip_tol", pc.clip_tol)?;
        let o = &self.optimizer;
        positive("optimizer.f_rel_tol", o.f_rel_tol)?;
        positive("optimizer.pg_tol", o.pg_tol)?;
        if o.memory == 0 || o.max_iter == 0 {
            return Err(Error::Config("optimizer.memory and max_iter must be positive".into()));
        }
        let x = &self.experiment;
        if x.repetitions == 0 {
            return Err(Error::Config("experiment.repetitions must be positive".into()));
        }
        let empty = [
            ("n_mc_grid", x.n_mc_grid.is_empty()),
            ("rank_grid", x.rank_grid.is_empty()),
            ("nu_grid", x.nu_grid.is_empty()),
            ("sigma_grid", x.sigma_grid.is_empty()),
            ("j_grid", x.j_grid.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("experiment.{name} must not be empty")));
        }
        if x.n_mc_grid.contains(&0) || x.rank_grid.contains(&0) {
            return Err(Error::Config("experiment grids must hold positive counts".into()));
        }
        for &s in &x.sigma_grid {
            positive("experiment.sigma_grid entry", s)?;
        }
        for &j in &x.j_grid {
            positive("experiment.j_grid entry", j)?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}
