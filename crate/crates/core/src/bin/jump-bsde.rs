use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jump_bsde::cli::{run, Command, Overrides, EXIT_PASS, EXIT_USAGE};

/// Solve, verify and analyse BSDEs driven by finite-state jump processes.
#[derive(Parser)]
#[command(name = "jump-bsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve for the value field; writes u.csv and solver diagnostics.
    Solve(Common),
    /// Simulate paths of the state process; writes trajectories.csv.
    Simulate(Common),
    /// Check a solution along simulated paths; writes residuals.json and apriori.csv.
    Verify(Common),
    /// Solve perturbed problems and compare with the difference bounds.
    Stability(Common),
    /// Price the terminal claim; writes pricing.csv and feasibility.json.
    Price(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of simulated paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    grid: Option<usize>,
    /// Tolerance the command judges by.
    #[arg(long)]
    tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::from(EXIT_PASS as u8)
            };
        }
    };
    let (command, args) = match cli.command {
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Verify(a) => (Command::Verify, a),
        Cmd::Stability(a) => (Command::Stability, a),
        Cmd::Price(a) => (Command::Price, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        paths: args.paths,
        grid: args.grid,
        tol: args.tol,
    };
    let outcome = run(command, &args.config, &args.out, &overrides);
    for m in &outcome.messages {
        if outcome.code == EXIT_PASS {
            println!("{m}");
        } else {
            eprintln!("{m}");
        }
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    ExitCode::from(outcome.code as u8)
}
