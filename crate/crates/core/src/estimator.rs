//! Monte Carlo objective and gradient for the hyperparameter MAP problem.
//!
//! For `Ψ(θ) = A Q(θ) Aᵀ + R(θ)` and residual `r = Aμ − d`, [`evaluate`]
//! returns the frozen-sample surrogate
//!
//! ```text
//! F̂(θ) = γ Σᵢ θᵢ + ½ (ld − 2 log|det G|) + ½ zᵀ r,      Ψ z = r,
//! ld   = (1/n_mc) Σ_t ‖w_t‖² e₁ᵀ log(T_k^{(t)}) e₁,
//! ```
//!
//! and a gradient that reuses each probe's Lanczos basis. Since
//! `Ψ⁻¹ = Gᵀ (GΨGᵀ)⁻¹ G`, the vectors `ζ_t = Gᵀ ‖w_t‖ V_k T_k^{-1/2} e₁`
//! satisfy `E[ζ ζᵀ] ≈ Ψ⁻¹`, so the
//! trace term `½ tr(Ψ⁻¹ ∂Ψ)` becomes `(1/2n_mc) Σ_t ζ_tᵀ ∂Ψ ζ_t` with no new
//! Krylov work. Quadratic forms in `∂Ψ = A ∂Q Aᵀ + ∂R` are taken as
//! `(Aᵀζ)ᵀ ∂Q (Aᵀζ) + ζᵀ ∂R ζ`, so the gradient costs one adjoint product per
//! probe plus one for `z`, and no forward products.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernels::NoiseModel;
use crate::krylov::{lanczos, lanczos_many, pcg_solve, quadratures, LanczosOptions, PreconditionedPsi, DEFAULT_PCG_TOL};
use crate::linop::{CountedMap, CounterSnapshot, DiagonalMap, LinearMap, PsiMap, SharedMap, Vector};
use crate::precond::{precond_offline, precond_online, PrecondOffline, Preconditioner, DEFAULT_CLIP_TOLERANCE};
use crate::prior::{validate_theta, LowRankPrior, LowRankSettings, MeanModel, PriorModel};
use crate::tridiag::tridiag_eigen;

/// Default rate of the exponential hyperprior.
pub const DEFAULT_GAMMA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Rademacher,
    Gaussian,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rademacher" => Ok(ProbeKind::Rademacher),
            "gaussian" => Ok(ProbeKind::Gaussian),
            other => Err(Error::Config(format!("unknown probe kind '{other}'"))),
        }
    }
}

/// A frozen sample of isotropic probe vectors.
///
/// Probe `t` is drawn from its own ChaCha stream `t` under `seed`, so any
/// single probe can be regenerated without the others.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub kind: ProbeKind,
    pub seed: u64,
    pub vectors: Vec<Vector>,
}

impl ProbeSet {
    pub fn draw(m: usize, n_mc: usize, kind: ProbeKind, seed: u64) -> Result<Self> {
        if n_mc == 0 {
            return Err(Error::InvalidParameter("n_mc must be at least 1".into()));
        }
        let vectors = (0..n_mc)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                match kind {
                    ProbeKind::Rademacher => {
                        Vector::from_fn(m, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    }
                    ProbeKind::Gaussian => Vector::from_fn(m, |_, _| rng.sample(StandardNormal)),
                }
            })
            .collect();
        Ok(Self { kind, seed, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }
}

/// `π_hyp(θ) ∝ exp(−γ Σ θᵢ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub gamma: f64,
}

impl Default for HyperPrior {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA }
    }
}

/// `(γ Σ θᵢ, γ·1)`, additive constant dropped.
pub fn neg_log_hyperprior(theta: &[f64], hp: &HyperPrior) -> Result<(f64, Vec<f64>)> {
    if !(hp.gamma >= 0.0 && hp.gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("γ must be nonnegative, got {}", hp.gamma)));
    }
    validate_theta(theta, theta.len())?;
    Ok((hp.gamma * theta.iter().sum::<f64>(), vec![hp.gamma; theta.len()]))
}

/// Forward map, prior, mean and data of one inverse problem.
#[derive(Debug, Clone)]
pub struct Model {
    pub a: SharedMap,
    pub prior: PriorModel,
    pub mean: MeanModel,
    pub data: Vector,
}

impl Model {
    pub fn new(a: SharedMap, prior: PriorModel, mean: MeanModel, data: Vector) -> Result<Self> {
        check_len("Model (A cols vs prior size)", prior.n(), a.cols())?;
        check_len("Model (data vs A rows)", a.rows(), data.len())?;
        Ok(Self { a, prior, mean, data })
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn num_hyper(&self) -> usize {
        self.prior.num_hyper()
    }

    pub fn mean_vector(&self) -> Vector {
        match self.mean {
            MeanModel::Zero => Vector::zeros(self.n()),
            MeanModel::Constant(c) => Vector::from_element(self.n(), c),
        }
    }

    /// `∂μ/∂θᵢ`; `None` when the mean does not depend on `θ`.
    pub fn mean_derivative(&self, _i: usize) -> Option<Vector> {
        match self.mean {
            MeanModel::Zero | MeanModel::Constant(_) => None,
        }
    }
}

/// How `G` is obtained at each `θ`.
#[derive(Debug, Clone)]
pub enum PrecondSetup {
    /// `G = R^{-1/2}`.
    NoiseOnly,
    LowRank {
        lowrank: Arc<LowRankPrior>,
        offline: Arc<PrecondOffline>,
        clip_tol: f64,
    },
}

impl PrecondSetup {
    /// Builds `U` for `model.prior` and the `θ`-independent product `AU`.
    pub fn low_rank(model: &Model, settings: &LowRankSettings) -> Result<Self> {
        let lowrank = LowRankPrior::build(&model.prior, settings)?;
        let offline = precond_offline(model.a.as_ref(), &lowrank.factor())?;
        Ok(Self::from_parts(lowrank, offline))
    }

    pub fn from_parts(lowrank: LowRankPrior, offline: PrecondOffline) -> Self {
        PrecondSetup::LowRank {
            lowrank: Arc::new(lowrank),
            offline: Arc::new(offline),
            clip_tol: DEFAULT_CLIP_TOLERANCE,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            PrecondSetup::NoiseOnly => 0,
            PrecondSetup::LowRank { offline, .. } => offline.rank(),
        }
    }

    pub fn build(&self, theta: &[f64], m: usize) -> Result<Preconditioner> {
        let noise = NoiseModel::new(theta[0])?;
        match self {
            PrecondSetup::NoiseOnly => Preconditioner::noise_only(noise, m),
            PrecondSetup::LowRank {
                lowrank,
                offline,
                clip_tol,
            } => {
                check_len("PrecondSetup (AU rows)", m, offline.rows())?;
                precond_online(offline, &lowrank.core(theta)?, noise, *clip_tol)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub lanczos: LanczosOptions,
    pub pcg_tol: f64,
    pub pcg_kmax: usize,
    pub hyper: HyperPrior,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            lanczos: LanczosOptions::default(),
            pcg_tol: DEFAULT_PCG_TOL,
            pcg_kmax: 2000,
            hyper: HyperPrior::default(),
        }
    }
}

/// One objective and gradient evaluation with its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Estimate of `log det Ψ`.
    pub logdet: f64,
    /// `zᵀ r`.
    pub data_fit: f64,
    pub per_probe_k: Vec<usize>,
    /// Probes whose Lanczos run hit `kmax` before the stopping rule.
    pub reached_max: usize,
    pub pcg_converged: bool,
    pub pcg_iterations: usize,
    pub precond_rank: usize,
    /// Products with `A` over the whole evaluation.
    pub matvecs: CounterSnapshot,
    /// Products with `A` spent on the gradient after the Krylov stage.
    pub gradient_matvecs: CounterSnapshot,
    /// Products with `Ψ`.
    pub psi_applies: u64,
}

impl Evaluation {
    pub fn mean_k(&self) -> f64 {
        self.per_probe_k.iter().sum::<usize>() as f64 / self.per_probe_k.len().max(1) as f64
    }

    /// `false` when PCG stalled or every probe hit `kmax`.
    pub fn is_reliable(&self) -> bool {
        self.pcg_converged && self.reached_max < self.per_probe_k.len()
    }
}

struct ProbeOutcome {
    logquad: f64,
    k: usize,
    converged: bool,
    zeta: Vector,
}

/// Evaluates `F̂(θ)` and its reuse-based gradient on a frozen probe sample.
pub fn evaluate(
    theta: &[f64],
    model: &Model,
    setup: &PrecondSetup,
    probes: &ProbeSet,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let k_hyper = model.num_hyper();
    validate_theta(theta, k_hyper)?;
    let m = model.m();
    if probes.is_empty() {
        return Err(Error::InvalidParameter("empty probe set".into()));
    }
    check_len("evaluate (probe length)", m, probes.dim())?;

    // Stage 0: operators and preconditioner at θ.
    let a = Arc::new(CountedMap::new(model.a.clone()));
    let a_dyn: SharedMap = a.clone();
    let noise = NoiseModel::new(theta[0])?;
    let q = model.prior.covariance(theta)?;
    let psi = PsiMap::new(a_dyn, q, Arc::new(DiagonalMap::constant(m, noise.sigma_m_sq)))?;
    let g = setup.build(theta, m)?;
    let ld_g = g.logdet_g();

    // Stage 1: one Lanczos run per probe.
    let op = PreconditionedPsi::new(&psi, &g)?;
    let runs = lanczos_many(&op, &probes.vectors, &opts.lanczos)?;
    let outcomes: Vec<ProbeOutcome> = runs
        .par_iter()
        .map(|res| -> Result<ProbeOutcome> {
            let (lq, x) = quadratures(res)?;
            Ok(ProbeOutcome {
                logquad: lq,
                k: res.k,
                converged: res.converged,
                zeta: g.gt_apply(&x)?,
            })
        })
        .collect::<Result<_>>()?;
    let n_mc = outcomes.len() as f64;
    let ld = outcomes.iter().map(|o| o.logquad).sum::<f64>() / n_mc;

    let mu = model.mean_vector();
    let mut resid = if mu.iter().all(|&x| x == 0.0) {
        Vector::zeros(m)
    } else {
        a.apply(&mu)?
    };
    resid -= &model.data;
    let pcg = pcg_solve(&psi, &g, &resid, opts.pcg_tol, opts.pcg_kmax)?;
    let z = &pcg.solution;
    let data_fit = z.dot(&resid);

    let (hp_value, hp_grad) = neg_log_hyperprior(theta, &opts.hyper)?;
    let logdet = ld - 2.0 * ld_g;
    let objective = hp_value + 0.5 * logdet + 0.5 * data_fit;

    // Stage 2: gradient from the stored ζ_t and z.
    let before_grad = a.counter().snapshot();
    let dq = model.prior.covariance_derivatives(theta)?;
    // Column t holds ζ_t; the last column holds z.
    let mut zmat = DMatrix::zeros(m, outcomes.len() + 1);
    for (c, o) in outcomes.iter().enumerate() {
        zmat.set_column(c, &o.zeta);
    }
    zmat.set_column(outcomes.len(), z);
    let at_all = a.adjoint_block(&zmat)?;
    let last = outcomes.len();
    let at_z = at_all.column(last).into_owned();

    let mut gradient = hp_grad;
    for (i, gi) in gradient.iter_mut().enumerate() {
        // Per-column quadratic forms with ∂Ψ_i, in column order.
        let forms: Vec<f64> = match (&dq[i], i) {
            (Some(d), _) => {
                let dy = d.apply_block(&at_all)?;
                dy.column_iter().zip(at_all.column_iter()).map(|(p, y)| p.dot(&y)).collect()
            }
            (None, 0) => zmat.column_iter().map(|c| c.norm_squared()).collect(),
            (None, _) => vec![0.0; last + 1],
        };
        let trace: f64 = forms[..last].iter().sum();
        let mut data_term = forms[last];
        if let Some(dmu) = model.mean_derivative(i) {
            data_term -= 2.0 * at_z.dot(&dmu);
        }
        *gi += trace / (2.0 * n_mc) - 0.5 * data_term;
    }
    let after = a.counter().snapshot();

    let per_probe_k: Vec<usize> = outcomes.iter().map(|o| o.k).collect();
    let reached_max = outcomes.iter().filter(|o| !o.converged).count();
    if reached_max > 0 {
        log::debug!("{reached_max} of {} probes reached kmax", outcomes.len());
    }
    if !pcg.converged {
        log::warn!(
            "PCG did not converge ({} iterations, relative residual {:e})",
            pcg.iterations,
            pcg.relative_residual
        );
    }
    Ok(Evaluation {
        theta: theta.to_vec(),
        objective,
        gradient,
        logdet,
        data_fit,
        per_probe_k,
        reached_max,
        pcg_converged: pcg.converged,
        pcg_iterations: pcg.iterations,
        precond_rank: g.rank(),
        matvecs: after,
        gradient_matvecs: after.since(&before_grad),
        psi_applies: psi.counter().applies(),
    })
}

fn check_unit_interval(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {x}")));
    }
    Ok(())
}

/// Smallest `n_mc ≥ 1` with `n_mc ≥ 32 ε⁻² (‖L‖² + ε‖L‖/2) log(2/δ)`.
pub fn plan_samples(eps: f64, delta: f64, l_norm: f64) -> Result<usize> {
    check_unit_interval("ε", eps)?;
    check_unit_interval("δ", delta)?;
    if !(l_norm >= 0.0 && l_norm.is_finite()) {
        return Err(Error::InvalidParameter(format!("‖L‖ must be nonnegative, got {l_norm}")));
    }
    let bound = 32.0 / (eps * eps) * (l_norm * l_norm + 0.5 * eps * l_norm) * (2.0 / delta).ln();
    Ok((bound.ceil() as usize).max(1))
}

/// Smallest `k ≥ 1` with `k ≥ (√(ω+1)/4) log(4 ε⁻¹ m (√ω+1) log(2ω))`.
///
/// `delta` only enters through [`plan_samples`]; it is validated here for a
/// uniform interface.
pub fn plan_iterations(eps: f64, delta: f64, cond: f64, m: usize) -> Result<usize> {
    check_unit_interval("ε", eps)?;
    check_unit_interval("δ", delta)?;
    if !(cond >= 1.0 && cond.is_finite()) {
        return Err(Error::InvalidParameter(format!("condition number must be ≥ 1, got {cond}")));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("m must be positive".into()));
    }
    let inner = 4.0 / eps * m as f64 * (cond.sqrt() + 1.0) * (2.0 * cond).ln();
    let bound = (cond + 1.0).sqrt() / 4.0 * inner.ln();
    Ok((bound.ceil().max(1.0)) as usize)
}

/// Spectral estimates from a short Lanczos run, for the planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotEstimate {
    pub steps: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Estimate of `κ(GΨGᵀ)`.
    pub cond: f64,
    /// Estimate of `‖log(GΨGᵀ)‖₂`.
    pub log_norm: f64,
}

/// Ritz extremes after at most `steps` Lanczos steps from `w`.
///
/// Ritz values lie inside the spectrum, so both outputs are lower bounds.
pub fn pilot_estimate(op: &dyn LinearMap, w: &Vector, steps: usize) -> Result<PilotEstimate> {
    let res = lanczos(op, w, &LanczosOptions { kmax: steps, quad_tol: 0.0 })?;
    let eig = tridiag_eigen(&res.gamma, &res.delta, false)?;
    let lambda_min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = eig.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PilotEstimate {
        steps: res.k,
        lambda_min,
        lambda_max,
        cond: (lambda_max / lambda_min).max(1.0),
        log_norm: lambda_min.ln().abs().max(lambda_max.ln().abs()),
    })
}

/// Dense `Ψ(θ)` for small models; used by tests and the experiment harness.
pub fn dense_psi(model: &Model, theta: &[f64], a_dense: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, _) = model.prior.dense(theta)?;
    let m = model.m();
    Ok(a_dense * q * a_dense.transpose() + DMatrix::identity(m, m) * theta[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{PointGrid, Smoothness};
    use crate::linop::{DenseMap, ZeroMap};

    #[test]
    fn probes_are_reproducible_and_rademacher() {
        let a = ProbeSet::draw(40, 6, ProbeKind::Rademacher, 9).unwrap();
        let b = ProbeSet::draw(40, 6, ProbeKind::Rademacher, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.vectors.iter().flat_map(|v| v.iter()).all(|&x| x == 1.0 || x == -1.0));
        let c = ProbeSet::draw(40, 6, ProbeKind::Rademacher, 10).unwrap();
        assert_ne!(a, c);
        // Streams are per probe: a larger set extends a smaller one.
        let big = ProbeSet::draw(40, 9, ProbeKind::Rademacher, 9).unwrap();
        assert_eq!(&big.vectors[..6], &a.vectors[..]);
        assert!(ProbeSet::draw(4, 0, ProbeKind::Gaussian, 1).is_err());
    }

    #[test]
    fn probes_are_isotropic() {
        for kind in [ProbeKind::Rademacher, ProbeKind::Gaussian] {
            let p = ProbeSet::draw(5, 10_000, kind, 3).unwrap();
            let mut acc = DMatrix::<f64>::zeros(5, 5);
            for w in &p.vectors {
                acc += w * w.transpose();
            }
            acc /= p.len() as f64;
            assert!((acc - DMatrix::identity(5, 5)).amax() <= 0.05, "{kind:?}");
        }
    }

    #[test]
    fn hyperprior_value_and_gradient() {
        let (v, g) = neg_log_hyperprior(&[1.0, 2.0, 3.0], &HyperPrior { gamma: 1e-4 }).unwrap();
        assert!((v - 6e-4).abs() < 1e-18);
        assert_eq!(g, vec![1e-4; 3]);
        let (v, _) = neg_log_hyperprior(&[1e-300; 3], &HyperPrior::default()).unwrap();
        assert!(v < 1e-300);
        assert!(neg_log_hyperprior(&[1.0, 0.0], &HyperPrior::default()).is_err());
        let hp = HyperPrior { gamma: 0.3 };
        let th = [0.5, 1.5, 2.5];
        let h = 1e-6;
        for i in 0..3 {
            let mut p = th;
            let mut q = th;
            p[i] += h;
            q[i] -= h;
            let fd = (neg_log_hyperprior(&p, &hp).unwrap().0 - neg_log_hyperprior(&q, &hp).unwrap().0) / (2.0 * h);
            assert!((fd - 0.3).abs() < 1e-8);
        }
    }

    #[test]
    fn planner_examples() {
        assert_eq!(plan_samples(0.5, 0.5, 0.0).unwrap(), 1);
        assert_eq!(plan_samples(0.5, 0.5, 1.0).unwrap(), 222);
        // ω = 1, ε = 0.1, m = 1: (√2/4)·log(40·2·log 2) = 1.42.
        assert_eq!(plan_iterations(0.1, 0.5, 1.0, 1).unwrap(), 2);
        // The m factor is part of the bound: m = 10 gives (√2/4)·log(554.5) = 2.23.
        assert_eq!(plan_iterations(0.1, 0.5, 1.0, 10).unwrap(), 3);
        assert!(plan_samples(1.0, 0.5, 1.0).is_err());
        assert!(plan_iterations(0.1, 0.0, 2.0, 10).is_err());
        assert!(plan_iterations(0.1, 0.5, 0.5, 10).is_err());
    }

    fn zero_map_model(m: usize, d: Vector) -> Model {
        Model::new(
            Arc::new(ZeroMap::new(m, 4)),
            PriorModel::Matern {
                nu: Smoothness::Half,
                grid: PointGrid::unit_square(2),
            },
            MeanModel::Zero,
            d,
        )
        .unwrap()
    }

    #[test]
    fn zero_forward_map_is_exact() {
        let m = 7;
        let d = Vector::from_fn(m, |i, _| (i as f64 - 2.5) * 0.3);
        let model = zero_map_model(m, d.clone());
        let theta = [0.7, 1.2, 0.4];
        let hp = HyperPrior::default();
        let exact = hp.gamma * theta.iter().sum::<f64>()
            + 0.5 * m as f64 * theta[0].ln()
            + 0.5 * d.norm_squared() / theta[0];
        let exact_d0 = hp.gamma + 0.5 * m as f64 / theta[0] - 0.5 * d.norm_squared() / theta[0].powi(2);
        for seed in 0..3 {
            let probes = ProbeSet::draw(m, 3, ProbeKind::Gaussian, seed).unwrap();
            let ev = evaluate(&theta, &model, &PrecondSetup::NoiseOnly, &probes, &EvalOptions::default()).unwrap();
            assert!((ev.objective - exact).abs() <= 1e-8 * exact.abs().max(1.0));
            // With Ψ = σ_m² I and G = R^{-1/2}, each ζ_t = w_t/σ_m, so the σ_m²
            // trace term is only exact in expectation for Gaussian probes.
            assert!((ev.gradient[1] - hp.gamma).abs() < 1e-15);
            assert!((ev.gradient[2] - hp.gamma).abs() < 1e-15);
            assert!(ev.gradient[0].is_finite());
            assert_eq!(ev.per_probe_k, vec![1; 3]);
        }
        // Rademacher probes make ζ_tᵀζ_t = m/σ_m² exactly.
        let probes = ProbeSet::draw(m, 4, ProbeKind::Rademacher, 1).unwrap();
        let ev = evaluate(&theta, &model, &PrecondSetup::NoiseOnly, &probes, &EvalOptions::default()).unwrap();
        assert!((ev.gradient[0] - exact_d0).abs() <= 1e-10 * exact_d0.abs().max(1.0));
    }

    fn small_model() -> (Model, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let grid = PointGrid::unit_square(5);
        let a = DMatrix::from_fn(15, 25, |_, _| rng.random_range(-1.0..1.0) * 0.3);
        let d = Vector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
        let model = Model::new(
            Arc::new(DenseMap::new(a.clone())),
            PriorModel::Matern {
                nu: Smoothness::ThreeHalves,
                grid,
            },
            MeanModel::Zero,
            d,
        )
        .unwrap();
        (model, a)
    }

    #[test]
    fn gradient_stage_uses_only_adjoints() {
        let (model, _) = small_model();
        let probes = ProbeSet::draw(15, 5, ProbeKind::Rademacher, 2).unwrap();
        let setup = PrecondSetup::low_rank(
            &model,
            &LowRankSettings {
                space_p: 3,
                theta_p: 6,
                ..Default::default()
            },
        )
        .unwrap();
        let ev = evaluate(&[0.1, 1.0, 0.3], &model, &setup, &probes, &EvalOptions::default()).unwrap();
        assert_eq!(ev.gradient_matvecs.applies, 0);
        assert_eq!(ev.gradient_matvecs.adjoints, 6);
        assert_eq!(ev.per_probe_k.len(), 5);
        assert!(ev.pcg_converged);
        assert_eq!(ev.precond_rank, 9);
    }

    #[test]
    fn evaluation_is_deterministic_across_thread_counts() {
        let (model, _) = small_model();
        let probes = ProbeSet::draw(15, 8, ProbeKind::Rademacher, 4).unwrap();
        let theta = [0.05, 0.8, 0.4];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| evaluate(&theta, &model, &PrecondSetup::NoiseOnly, &probes, &EvalOptions::default()).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn full_krylov_logdet_matches_dense() {
        let (model, a) = small_model();
        let theta = [0.05, 0.8, 0.4];
        let psi = dense_psi(&model, &theta, &a).unwrap();
        let exact: f64 = psi.clone().cholesky().unwrap().l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        // Unit vectors as probes turn the sample mean into the exact trace.
        let vectors: Vec<Vector> = (0..15)
            .map(|i| {
                let mut e = Vector::zeros(15);
                e[i] = 15f64.sqrt();
                e
            })
            .collect();
        let probes = ProbeSet {
            kind: ProbeKind::Gaussian,
            seed: 0,
            vectors,
        };
        let opts = EvalOptions {
            lanczos: LanczosOptions { kmax: 15, quad_tol: 0.0 },
            ..Default::default()
        };
        let ev = evaluate(&theta, &model, &PrecondSetup::NoiseOnly, &probes, &opts).unwrap();
        assert!((ev.logdet - exact).abs() <= 1e-9 * exact.abs().max(1.0));
    }

    #[test]
    fn pilot_bounds_spectrum() {
        let op = DiagonalMap::new(Vector::from_fn(50, |i, _| 1.0 + i as f64));
        let w = Vector::from_element(50, 1.0);
        let est = pilot_estimate(&op, &w, 20).unwrap();
        assert!(est.lambda_min >= 1.0 - 1e-12 && est.lambda_max <= 50.0 + 1e-12);
        assert!(est.cond > 10.0);
        assert!((est.log_norm - est.lambda_max.ln()).abs() < 1e-12);
    }
}
