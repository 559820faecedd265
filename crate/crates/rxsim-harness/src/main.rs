use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rxsim_harness::experiments::{
    run_experiment, validate_config, ExperimentError, ExperimentKind, RunOptions,
};

/// Deterministic receive-path simulator and experiment runner.
#[derive(Parser)]
#[command(name = "rxsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single simulation described by a config file.
    Simulate {
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a packaged experiment.
    Exp {
        #[command(subcommand)]
        experiment: ExpCommand,
    },
    /// Parse and validate a config file without running anything.
    Validate { config: PathBuf },
}

#[derive(Subcommand)]
enum ExpCommand {
    /// Per-packet CPU cost over a rate sweep, all stack variants.
    CpuPerPacket {
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// ISR latency percentiles per execution path.
    LatencyDist {
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Utilization/liveness grid for the modified and baseline systems.
    MitigationMap {
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory for result files.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Override the config's experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output format of result tables.
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
    /// Also render static SVG charts.
    #[arg(long)]
    plot: bool,
    /// Check engine invariants after every simulation step.
    #[arg(long)]
    audit: bool,
}

impl CommonArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out.clone(),
            seed_override: self.seed,
            plot: self.plot,
            audit: self.audit,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, common } => {
            run_and_report(ExperimentKind::Simulate, &config, &common)
        }
        Command::Exp { experiment } => match experiment {
            ExpCommand::CpuPerPacket { config, common } => {
                run_and_report(ExperimentKind::CpuPerPacket, &config, &common)
            }
            ExpCommand::LatencyDist { config, common } => {
                run_and_report(ExperimentKind::LatencyDist, &config, &common)
            }
            ExpCommand::MitigationMap { config, common } => {
                run_and_report(ExperimentKind::MitigationMap, &config, &common)
            }
        },
        Command::Validate { config } => match validate_config(&config) {
            Ok(kind) => {
                println!("ok: {config:?} is a valid {kind:?} config", config = config.display(), kind = kind);
                return ExitCode::SUCCESS;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_and_report(
    kind: ExperimentKind,
    config: &std::path::Path,
    common: &CommonArgs,
) -> Result<(), ExperimentError> {
    let output = run_experiment(kind, config, &common.options())?;
    for warning in &output.warnings {
        eprintln!("warning: {warning}");
    }
    for file in &output.files {
        println!("wrote {}", file.display());
    }
    Ok(())
}
