//! Command-line front end.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 3 for
//! numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperlanczos::driver::{
    bounds_for, build_problem, fmt_f64, run_experiment, run_map, theta0, EvalLog, ExperimentKind, RunConfig, Session,
    Table,
};
use hyperlanczos::io;
use hyperlanczos::problems::ProblemKind;
use hyperlanczos::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "hyperlanczos", version, about = "Hyperparameter MAP estimation with preconditioned Lanczos quadrature")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Probe seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the configured problem and save it as a directory.
    Generate,
    /// One objective and gradient evaluation with diagnostics.
    Evaluate {
        /// Comma-separated θ; defaults to the starting point.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta: Option<Vec<f64>>,
    },
    /// Full MAP run from the starting point.
    Optimize,
    /// A named sweep: mc-accuracy, precond-rank, noise-sweep,
    /// measurement-scaling or dynamic.
    Experiment { name: String },
    /// Posterior mean at θ written as an array file.
    Reconstruct {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta: Option<Vec<f64>>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if cfg.precond.cache_dir.is_none() && cfg.problem.dir.is_none() {
        cfg.precond.cache_dir = Some(cfg.out_dir().join("cache"));
    }
    Ok(cfg)
}

fn theta_or_default(theta: Option<Vec<f64>>, cfg: &RunConfig, s: &Session) -> Result<Vec<f64>> {
    match theta {
        Some(t) => {
            let k = s.problem.prior.num_hyper();
            if t.len() != k {
                return Err(Error::Config(format!("--theta needs {k} values, got {}", t.len())));
            }
            Ok(t)
        }
        None => theta0(cfg, &s.problem),
    }
}

fn echo(t: &mut Table, command: &str, cfg: &RunConfig) {
    t.comment(&format!("command = \"{command}\""));
    t.comment(&cfg.to_toml());
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let p = build_problem(cfg)?;
    let dir = cfg.out_dir().join("problem");
    p.save(&dir)?;
    println!(
        "wrote {} (m = {}, n = {}, realized σ_m² = {:e})",
        dir.display(),
        p.m(),
        p.n(),
        p.meta.true_sigma_m_sq
    );
    Ok(())
}

fn evaluate(cfg: &RunConfig, theta: Option<Vec<f64>>) -> Result<()> {
    let s = Session::new(cfg, build_problem(cfg)?, cfg.precond.mode)?;
    let theta = theta_or_default(theta, cfg, &s)?;
    let ev = s.evaluate(&theta)?;
    let out = cfg.out_dir();
    let mut log = EvalLog::create(&out.join("evaluate.jsonl"))?;
    log.record("evaluate", &ev)?;
    log.flush()?;

    let names = s.problem.prior.param_names();
    let mut header: Vec<String> = names.iter().map(|n| format!("theta_{n}")).collect();
    header.extend(["objective", "logdet", "data_fit"].map(String::from));
    header.extend(names.iter().map(|n| format!("grad_{n}")));
    header.extend(
        [
            "mean_k",
            "reached_max",
            "pcg_converged",
            "pcg_iterations",
            "precond_rank",
            "applies",
            "adjoints",
        ]
        .map(String::from),
    );
    let mut t = Table::new(header);
    echo(&mut t, "evaluate", cfg);
    let mut row: Vec<String> = theta.iter().map(|x| fmt_f64(*x)).collect();
    row.extend([fmt_f64(ev.objective), fmt_f64(ev.logdet), fmt_f64(ev.data_fit)]);
    row.extend(ev.gradient.iter().map(|x| fmt_f64(*x)));
    row.extend([
        fmt_f64(ev.mean_k()),
        ev.reached_max.to_string(),
        ev.pcg_converged.to_string(),
        ev.pcg_iterations.to_string(),
        ev.precond_rank.to_string(),
        ev.matvecs.applies.to_string(),
        ev.matvecs.adjoints.to_string(),
    ]);
    t.push(row);
    let path = out.join("evaluate.csv");
    t.write(&path)?;
    if !ev.is_reliable() {
        log::warn!("evaluation flagged: {} probes reached kmax, PCG converged = {}", ev.reached_max, ev.pcg_converged);
    }
    println!("F̂ = {:.10e}, mean k = {:.2}; wrote {}", ev.objective, ev.mean_k(), path.display());
    Ok(())
}

fn optimize(cfg: &RunConfig) -> Result<()> {
    let s = Session::new(cfg, build_problem(cfg)?, cfg.precond.mode)?;
    let t0 = theta0(cfg, &s.problem)?;
    let bounds = bounds_for(cfg, &s.problem)?;
    let out = cfg.out_dir();
    let mut log = EvalLog::create(&out.join("optimize.jsonl"))?;
    let run = run_map(&s, &t0, &bounds, &cfg.optimizer.options(), Some(&mut log), "optimize")?;

    let names = s.problem.prior.param_names();
    let mut header = vec!["iter".to_string()];
    header.extend(names.iter().map(|n| format!("theta_{n}")));
    header.extend(["objective", "gradient_norm", "projected_gradient", "evaluations"].map(String::from));
    let mut t = Table::new(header);
    echo(&mut t, "optimize", cfg);
    t.comment(&format!(
        "stop = {:?}, iterations = {}, evaluations = {}, mean_k = {}, reached_max = {}",
        run.result.reason,
        run.result.iterations,
        run.result.evaluations,
        fmt_f64(run.mean_k()),
        run.reached_max()
    ));
    for e in &run.result.trace {
        let mut row = vec![e.iter.to_string()];
        row.extend(e.theta.iter().map(|x| fmt_f64(*x)));
        row.extend([
            fmt_f64(e.objective),
            fmt_f64(e.gradient_norm),
            fmt_f64(e.projected_gradient),
            e.evaluations.to_string(),
        ]);
        t.push(row);
    }
    let path = out.join("optimize.csv");
    t.write(&path)?;
    println!(
        "θ* = {:?} ({:?} after {} iterations); wrote {}",
        run.result.theta,
        run.result.reason,
        run.result.iterations,
        path.display()
    );
    Ok(())
}

fn experiment(cfg: &RunConfig, name: &str) -> Result<()> {
    let kind: ExperimentKind = name.parse()?;
    let out = cfg.out_dir();
    let mut log = EvalLog::create(&out.join(format!("{kind}.jsonl")))?;
    let table = run_experiment(kind, cfg, Some(&mut log))?;
    let path = out.join(format!("{kind}.csv"));
    table.write(&path)?;
    println!("wrote {} ({} rows)", path.display(), table.rows.len());
    Ok(())
}

fn reconstruct(cfg: &RunConfig, theta: Option<Vec<f64>>) -> Result<()> {
    let s = Session::new(cfg, build_problem(cfg)?, cfg.precond.mode)?;
    let theta = theta_or_default(theta, cfg, &s)?;
    let rec = s.reconstruct(&theta)?;
    if !rec.pcg_converged {
        return Err(Error::Numerical(format!(
            "posterior mean solve did not converge in {} iterations",
            rec.pcg_iterations
        )));
    }
    // One column per frame, pixels in row-major image order.
    let frames = match s.problem.meta.kind {
        ProblemKind::Dynamic => s.problem.meta.n_t,
        ProblemKind::Static | ProblemKind::Null => 1,
    };
    let pixels = rec.field.len() / frames;
    let images = hyperlanczos::linop::Matrix::from_column_slice(pixels, frames, rec.field.as_slice());
    let out = cfg.out_dir();
    let path = out.join("reconstruction.mtx");
    io::write_dense(&path, &images)?;
    match rec.relative_error {
        Some(e) => println!("relative error {e:.6}; wrote {}", path.display()),
        None => println!("wrote {}", path.display()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate => generate(&cfg),
        Command::Evaluate { theta } => evaluate(&cfg, theta),
        Command::Optimize => optimize(&cfg),
        Command::Experiment { name } => experiment(&cfg, &name),
        Command::Reconstruct { theta } => reconstruct(&cfg, theta),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_errors_map_to_three() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
        assert_eq!(exit_code(&Error::NotPositiveDefinite("x".into())), 3);
    }

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["hyperlanczos", "evaluate", "--seed", "4", "--theta", "1e-3,1,0.5"]).unwrap();
        assert_eq!(cli.global.seed, Some(4));
        match cli.command {
            Command::Evaluate { theta } => assert_eq!(theta.unwrap(), vec![1e-3, 1.0, 0.5]),
            other => panic!("{other:?}"),
        }
    }
}
