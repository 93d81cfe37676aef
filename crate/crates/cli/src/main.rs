use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kolmo_cli::{run, Config, Experiment, Selection};

#[derive(Parser)]
#[command(name = "kolmo", version, about = "Run semigroup and invariant-measure experiments from a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structural hypotheses on sampled points.
    Audit(Args),
    /// Time-step the semigroup and compare with an exact solution.
    Evolve(Args),
    /// Check the pointwise, gradient and Lyapunov estimates.
    Estimates(Args),
    /// Extract canonical systems of invariant measures.
    Invariant(Args),
    /// Solve the one-dimensional density ODE.
    OdeDensities(Args),
    /// Compare long-time behaviour with the predicted limit.
    Asymptotics(Args),
    /// Run every experiment listed in the config.
    All(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// RNG seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (selection, args) = match cli.command {
        Command::Audit(a) => (Selection::One(Experiment::Audit), a),
        Command::Evolve(a) => (Selection::One(Experiment::Evolve), a),
        Command::Estimates(a) => (Selection::One(Experiment::Estimates), a),
        Command::Invariant(a) => (Selection::One(Experiment::Invariant), a),
        Command::OdeDensities(a) => (Selection::One(Experiment::OdeDensities), a),
        Command::Asymptotics(a) => (Selection::One(Experiment::Asymptotics), a),
        Command::All(a) => (Selection::All, a),
    };
    let outcome = Config::load(&args.config).and_then(|mut config| {
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        if let Some(out) = &args.out {
            config.output.dir = out.display().to_string();
        }
        let out = PathBuf::from(&config.output.dir);
        run(&config, selection, &out)
    });
    match outcome {
        Ok(o) => {
            for r in &o.reports {
                let failed = r.failed_checks().count();
                log::info!(
                    "{}: {} ({} checks, {failed} failed)",
                    r.experiment,
                    if r.passed { "pass" } else { "FAIL" },
                    r.checks.len()
                );
            }
            if o.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
