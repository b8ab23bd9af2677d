use clap::{Parser, Subcommand};
use kmoe_cli::{commands, config::RunConfig, exit_code, Invocation};
use std::path::PathBuf;
use std::process::ExitCode;

/// Desk-scale MRI reconstruction toolkit: acquisition simulation and an
/// unrolled data-consistency cascade with frequency-split state-space token
/// mixers and a shared-routed mixture-of-experts, trainable on synthetic
/// phantoms.
///
/// `KMOE_THREADS` caps the worker pool.
#[derive(Parser)]
#[command(name = "kmoe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory (required by reconstruct; resumes train).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write per-block feature tensors for the spectra command.
    #[arg(long)]
    dump_features: bool,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides `io.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an acquisition: phantom, mask, coils, noisy k-space.
    Simulate(Common),
    /// Reconstruct the simulated acquisition from a checkpoint.
    Reconstruct(Common),
    /// Train the cascade on jittered phantoms.
    Train(Common),
    /// Run the component and patch/depth ablation grid.
    Ablate(Common),
    /// Render spectra grids from dumped feature tensors.
    Spectra(Common),
}

fn run(cmd: &Command) -> kmoe_core::Result<()> {
    kmoe_core::par::init_pool();
    let common = match cmd {
        Command::Simulate(c)
        | Command::Reconstruct(c)
        | Command::Train(c)
        | Command::Ablate(c)
        | Command::Spectra(c) => c,
    };
    let mut config = RunConfig::load(&common.config)?;
    if let Some(steps) = common.steps {
        config.train.steps = steps;
    }
    let inv = Invocation::new(
        config,
        common.seed,
        common.out.clone(),
        common.checkpoint.clone(),
        common.dump_features,
    );
    match cmd {
        Command::Simulate(_) => commands::cmd_simulate(&inv),
        Command::Reconstruct(_) => commands::cmd_reconstruct(&inv),
        Command::Train(_) => commands::cmd_train(&inv),
        Command::Ablate(_) => commands::cmd_ablate(&inv).map(|_| ()),
        Command::Spectra(_) => commands::cmd_spectra(&inv).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
