//! `prosh`: run solve, train, verify or sweep from a TOML config.
//!
//! Exit status is 0 on success, 1 when a verification check fails and 2 on
//! any parse, validation or runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prosh_core::config::{Overrides, RunConfig};
use prosh_core::runner::{run, Command};

#[derive(Parser)]
#[command(name = "prosh", version, about = "Shielded training and verification on tabular constrained MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Exact optimum by policy enumeration, plus the exact cost critic.
    Solve(Opts),
    /// Shielded Q-learning; writes the policy table and training log.
    Train(Opts),
    /// Train, then run the safety, preservation, noise and optimality checks.
    Verify(Opts),
    /// Train and check every cell of the configured grid.
    Sweep(Opts),
}

#[derive(Args)]
struct Opts {
    /// TOML config; defaults apply to every missing key.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma_c: Option<f64>,
    /// Cost budget d.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    x0: Option<f64>,
    /// Critic perturbation; a positive value switches the critic to perturbed.
    #[arg(long)]
    delta_b: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweep cells.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Opts {
    fn overrides(&self) -> Overrides {
        Overrides {
            gamma_c: self.gamma_c,
            budget: self.budget,
            x0: self.x0,
            delta_b: self.delta_b,
            episodes: self.episodes,
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
        }
    }
}

fn execute(cmd: Command, opts: &Opts) -> prosh_core::Result<bool> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&opts.overrides());
    let outcome = run(cmd, &cfg)?;
    println!("{}", outcome.summary);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(outcome.pass)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (cmd, opts) = match &cli.command {
        Sub::Solve(o) => (Command::Solve, o),
        Sub::Train(o) => (Command::Train, o),
        Sub::Verify(o) => (Command::Verify, o),
        Sub::Sweep(o) => (Command::Sweep, o),
    };
    match execute(cmd, opts) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
