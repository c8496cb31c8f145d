use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use ibpd::km::DEFAULT_TAU;
use ibpd_bench::error::{BenchError, ExitCode};
use ibpd_bench::oracle::oracle_solve;
use ibpd_bench::run::{run, validate, Algorithm, PlanSpec, RunConfig};
use ibpd_bench::spec::{load_problem, save_spec};
use ibpd_bench::suites::{benchmark, summary_table, Suite};
use ibpd_bench::trace::write_trace;

#[derive(Parser)]
#[command(name = "ibpd", version, about = "Randomized inertial block primal-dual solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem spec and optionally write the trace.
    Solve(RunArgs),
    /// Check the schedule and step-size condition without running.
    Validate(RunArgs),
    /// Reference solution of a problem spec.
    Oracle {
        #[arg(long)]
        problem: PathBuf,
    },
    /// Run a benchmark suite and print the summary table.
    Bench {
        /// ridge, lasso, tv1d or projection-feasibility
        suite: Suite,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Write the generated spec for the first seed here instead of running.
        #[arg(long)]
        emit_spec: Option<PathBuf>,
        /// Write the table here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, default_value = "pd-opt")]
    algo: Algorithm,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// full, single, bernoulli:<q>[,<q>…] or table:<bits>=<p>,…
    #[arg(long, default_value = "full")]
    plan: PlanSpec,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    check_every: usize,
    #[arg(long)]
    override_condition_check: bool,
    /// Derive dependent activation bits exactly from the sampled side.
    #[arg(long)]
    minimal_coupling: bool,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            algorithm: self.algo,
            alpha: self.alpha,
            tau: self.tau,
            delta: self.delta,
            lambda: self.lambda,
            plan: self.plan.clone(),
            seed: self.seed,
            max_iters: self.max_iters,
            tol: self.tol,
            check_every: self.check_every,
            override_condition: self.override_condition_check,
            minimal_coupling: self.minimal_coupling,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    process::exit(code.code());
}

fn vec_line(label: &str, v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(f64::to_string).collect();
    format!("{label} = [{}]", cells.join(", "))
}

fn execute(cmd: Command) -> Result<ExitCode, BenchError> {
    match cmd {
        Command::Solve(args) => {
            let loaded = load_problem(&args.problem)?;
            let report = run(&args.config(), &loaded)?;
            if let Some(path) = &args.trace_out {
                write_trace(path, &report.trace)?;
            }
            println!("{}", report.summary_line());
            println!("{}", vec_line("x", report.x.data()));
            if let Some(y) = &report.y {
                println!("{}", vec_line("y", y.data()));
            }
            Ok(if report.converged {
                ExitCode::Converged
            } else {
                ExitCode::NotConverged
            })
        }
        Command::Validate(args) => {
            let loaded = load_problem(&args.problem)?;
            for line in validate(&args.config(), &loaded)? {
                println!("{line}");
            }
            Ok(ExitCode::Converged)
        }
        Command::Oracle { problem } => {
            let loaded = load_problem(&problem)?;
            let sol = oracle_solve(&loaded.problem)?;
            println!(
                "method={:?} iterations={} residual={:e} objective={}",
                sol.method, sol.iterations, sol.residual, sol.objective
            );
            println!("{}", vec_line("x", sol.x.as_slice()));
            if let Some(y) = &sol.y {
                println!("{}", vec_line("y", y.as_slice()));
            }
            Ok(ExitCode::Converged)
        }
        Command::Bench {
            suite,
            seeds,
            emit_spec,
            out,
        } => {
            if let Some(path) = emit_spec {
                save_spec(&suite.spec(seeds.first().copied().unwrap_or(0)), &path)?;
                return Ok(ExitCode::Converged);
            }
            let cells = benchmark(suite, &seeds)?;
            let table = summary_table(&cells);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| BenchError::io(path.display(), e))?;
            }
            for c in &cells {
                for r in &c.runs {
                    if let Some(err) = &r.error {
                        eprintln!("{suite} seed {}: {err}", r.seed);
                    }
                }
            }
            Ok(if cells.iter().all(|c| c.passed()) {
                ExitCode::Converged
            } else {
                ExitCode::NotConverged
            })
        }
    }
}
