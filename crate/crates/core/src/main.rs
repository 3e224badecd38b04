use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scrip::config::ExperimentConfig;
use scrip::exec::{init_threads, Exec};
use scrip::experiments::{run, write_run, Command, RunContext};

#[derive(Parser)]
#[command(
    name = "scrip",
    version,
    about = "Scrip system equilibria, steady states and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run with this seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Record distance-to-M* traces in simulations.
    #[arg(long, global = true)]
    trace: bool,
    /// Also write a gnuplot script next to sweep CSVs.
    #[arg(long, global = true)]
    plot_stub: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Steady-state money distribution for a fixed threshold profile.
    SteadyState,
    /// Best responses to a profile, or to given p_s and p_e.
    BestResponse,
    /// Threshold equilibrium by best-response iteration.
    Equilibrium,
    /// Agent-based simulation of a profile.
    Simulate,
    /// Optimal threshold and utility as p_e varies.
    Fig1,
    /// Equilibria as sybil count or fraction varies.
    SybilSweep,
    /// Largest money supply that avoids a crash.
    CrashScan,
    /// Equilibria as colluding group size varies.
    CollusionSweep,
    /// Money supply matching the welfare of a sybil population.
    SybilEquivalence,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::SteadyState => Command::SteadyState,
            Cmd::BestResponse => Command::BestResponse,
            Cmd::Equilibrium => Command::Equilibrium,
            Cmd::Simulate => Command::Simulate,
            Cmd::Fig1 => Command::Fig1,
            Cmd::SybilSweep => Command::SybilSweep,
            Cmd::CrashScan => Command::CrashScan,
            Cmd::CollusionSweep => Command::CollusionSweep,
            Cmd::SybilEquivalence => Command::SybilEquivalence,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: &Cli) -> scrip::Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| scrip::Error::Config("--config is required".into()))?;
    let (cfg, text) = ExperimentConfig::load(path)?;
    if let Some(t) = cli.threads.filter(|&t| t > 1) {
        init_threads(t);
    }
    let ctx = RunContext {
        exec: Exec::from_threads(cli.threads),
        trace: cli.trace,
        plot_stub: cli.plot_stub,
        seed: cli.seed,
    };
    let cmd = Command::from(cli.command);
    let output = run(cmd, &cfg, &ctx)?;
    write_run(&cli.out, cmd, &text, &output)?;
    for a in &output.artifacts {
        println!("{}", cli.out.join(&a.name).display());
    }
    Ok(())
}
