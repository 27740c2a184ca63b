use clap::{Parser, Subcommand};
use hieranderson::runner::{run, CliOverrides};
use std::path::PathBuf;
use std::process::ExitCode;

/// Hierarchical Anderson model experiments from TOML configs.
#[derive(Parser)]
#[command(name = "hieranderson", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Override run.master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.replicas.
    #[arg(long)]
    replicas: Option<usize>,
    /// Override run.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override run.threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Override run.dense_cap.
    #[arg(long)]
    dense_cap: Option<usize>,
    /// Emit additional reference-curve rows for plotting.
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Exact free spectrum plus one sampled spectrum.
    Spectrum(CommonArgs),
    /// Monte Carlo integrated density of states, both boundary conditions.
    Ids(CommonArgs),
    /// Dirichlet-Neumann decoupling inequalities on random samples.
    Bracketing(CommonArgs),
    /// Tail bounds at the top of the spectrum (Monte Carlo, analytic, Temple).
    Tail(CommonArgs),
    /// Exponent fits of tail or density data.
    Exponent(CommonArgs),
    /// Birkhoff averages and shift covariance.
    Ergodic(CommonArgs),
    /// Internal consistency battery; needs only [model] and [potential].
    Selfcheck(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Spectrum(a) => ("spectrum", a),
        Command::Ids(a) => ("ids", a),
        Command::Bracketing(a) => ("bracketing", a),
        Command::Tail(a) => ("tail", a),
        Command::Exponent(a) => ("exponent", a),
        Command::Ergodic(a) => ("ergodic", a),
        Command::Selfcheck(a) => ("selfcheck", a),
    };
    let overrides = CliOverrides {
        seed: args.seed,
        replicas: args.replicas,
        out_dir: args.out_dir.clone(),
        threads: args.threads,
        dense_cap: args.dense_cap,
        emit_plot_data: args.emit_plot_data,
    };
    match run(name, &args.config, &overrides) {
        Ok(outcome) => {
            println!(
                "{}: {} records -> {}",
                outcome.experiment,
                outcome.records,
                outcome.csv_path.display()
            );
            for (inv, ok) in &outcome.invariants {
                println!("  {} {}", if *ok { "ok  " } else { "FAIL" }, inv);
            }
            if outcome.violations() > 0 {
                eprintln!("{} invariant violation(s)", outcome.violations());
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
