use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rskel_cli::experiments::{run_optimize, run_scaling, run_solve, run_update_bench};
use rskel_cli::{output, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rskel", version, about = "Fast direct solver experiments for 2D boundary integral equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Factor, solve and evaluate on an interior grid.
    Solve(Common),
    /// Factor/solve/apply timings over a list of sizes.
    Scaling(Common),
    /// Time factorization updates over a perturbation sequence.
    UpdateBench(Common),
    /// Optimize the hole positions.
    Optimize(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    cfg.override_with(c.threads, c.tol, c.out.clone())?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Solve(c) => {
            let cfg = load(&c)?;
            let r = run_solve(&cfg)?;
            println!(
                "solve: N={} unknowns={} residual={:.3e} factor={:.3}s solve={:.4}s",
                r.n_nodes, r.n_unknowns, r.residual, r.factor_seconds, r.solve_seconds
            );
            if let Some(e) = r.max_rel_error {
                println!("max relative interior error {e:.3e}");
            }
            output::write_solve(&cfg.output_dir, &r)
        }
        Command::Scaling(c) => {
            let cfg = load(&c)?;
            let r = run_scaling(&cfg, c.seed)?;
            for row in &r.rows {
                println!(
                    "N={:>7} factor={:.3}s solve={:.4}s apply={:.4}s",
                    row.n, row.factor_seconds, row.solve_seconds, row.apply_seconds
                );
            }
            if let Some(s) = r.slope {
                println!("log-log slope {s:.3}");
            }
            for t in &r.threads {
                println!("threads={} factor={:.3}s speedup={:.2} identical={}", t.threads, t.factor_seconds, t.speedup, t.identical);
            }
            output::write_scaling(&cfg.output_dir, &r)
        }
        Command::UpdateBench(c) => {
            let cfg = load(&c)?;
            let r = run_update_bench(&cfg, c.seed)?;
            println!(
                "factor={:.3}s updates={} mean={:.3}s std={:.3}s speedup={:.2} final diff={:.2e} same structure={}",
                r.factor_seconds,
                r.updates.len(),
                r.mean_seconds,
                r.std_seconds,
                r.speedup,
                r.final_rel_diff,
                r.final_identical_structure
            );
            output::write_update(&cfg.output_dir, &r)
        }
        Command::Optimize(c) => {
            let cfg = load(&c)?;
            let r = run_optimize(&cfg)?;
            let last = r.log.last();
            println!(
                "{:?} after {} iterations: theta=({:.5}, {:.5}) objective={:.6e} |grad|={:.2e} solves={}",
                r.log.status,
                r.log.iterations.len() - 1,
                last.theta[0],
                last.theta[1],
                last.objective,
                last.gradient[0].hypot(last.gradient[1]),
                r.solves
            );
            output::write_optimize(&cfg.output_dir, &r)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
