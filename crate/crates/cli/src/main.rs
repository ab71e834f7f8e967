use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fuseplan::workflow::Mode;
use fuseplan_cli::commands::{self, Overrides};
use fuseplan_cli::config::RunConfig;
use fuseplan_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "fuseplan", version, about = "Fused pipeline schedules and RLHF stage-fusion simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true, default_value = "fuseplan.toml")]
    config: PathBuf,

    /// Overrides the annealing seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the number of annealing chains.
    #[arg(long, global = true)]
    chains: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Iteration mode; both are simulated when omitted.
    #[arg(long, global = true)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Command {
    /// Search a fused training schedule and render it.
    Schedule,
    /// Sweep the migration threshold of the generation stage.
    SweepRt,
    /// Break down one RLHF iteration.
    Iterate,
    /// Report 1F1B, greedy and lower-bound makespans.
    Baselines,
    /// Solve a tiny layout exactly.
    Oracle,
    /// Compare recursive and matrix advantage estimation.
    GaeCheck,
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = RunConfig::load(&cli.config)?;
    let ov = Overrides { seed: cli.seed, chains: cli.chains };
    if ov.chains == Some(0) {
        return Err(CliError::Config("--chains must be positive".into()));
    }
    let out = match cli.command {
        Command::Schedule => commands::cmd_schedule(&cfg, ov)?,
        Command::SweepRt => commands::cmd_sweep_rt(&cfg)?,
        Command::Iterate => commands::cmd_iterate(&cfg, cli.mode)?,
        Command::Baselines => commands::cmd_baselines(&cfg)?,
        Command::Oracle => commands::cmd_oracle(&cfg)?,
        Command::GaeCheck => commands::cmd_gae_check(&cfg)?,
    };
    for path in out.commit(&cli.out)? {
        println!("wrote {}", path.display());
    }
    println!("{}", out.summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.code() as u8)
        }
    }
}
