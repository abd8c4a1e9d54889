use std::path::PathBuf;
use std::process::ExitCode;

use cbf_placement::bounds::ToleranceInputs;
use cbf_placement::closed_loop::Architecture;
use cbf_placement::commands::{cmd_batch, cmd_bounds, cmd_run};
use cbf_placement::config::ScenarioFile;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Local vs. remote CBF safety filters in a delayed control loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One closed-loop run; writes trace.csv and summary.json.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "combined")]
        arch: Architecture,
        /// Disturbance stream seed; defaults to the file's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// The batch configured in the scenario file.
    Batch {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Overrides [run] n_runs.
        #[arg(long)]
        n_runs: Option<usize>,
        /// Skip the per-run trace files.
        #[arg(long)]
        no_traces: bool,
    },
    /// Tolerance table for given constants.
    Bounds {
        #[arg(long = "h")]
        h: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long = "Lh", allow_negative_numbers = true)]
        l_h: f64,
        #[arg(long = "Lf")]
        l_f: f64,
        #[arg(long = "Lg")]
        l_g: f64,
        #[arg(long)]
        umax: f64,
        #[arg(long)]
        tau: usize,
        #[arg(long = "N")]
        horizon: usize,
    },
}

fn execute(cli: Cli) -> cbf_placement::error::Result<String> {
    match cli.command {
        Command::Run { scenario, arch, seed, out } => ScenarioFile::load(&scenario).and_then(|f| cmd_run(f, arch, seed, &out)),
        Command::Batch {
            scenario,
            out_dir,
            n_runs,
            no_traces,
        } => ScenarioFile::load(&scenario).and_then(|mut f| {
            if let Some(n) = n_runs {
                f.run.n_runs = n;
            }
            cmd_batch(f, &out_dir, !no_traces)
        }),
        Command::Bounds {
            h,
            gamma,
            l_h,
            l_f,
            l_g,
            umax,
            tau,
            horizon,
        } => ToleranceInputs::new(h, gamma, l_h, l_f, l_g, umax, tau, horizon).and_then(|t| cmd_bounds(&t)),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
