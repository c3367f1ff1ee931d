//! `esmlab` — train a toy diffusion denoiser, probe exact coupled DDIM
//! inversion, and distill the denoiser into a 2D Gaussian-splat scene.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numeric failure,
//! 3 verification failure.

use clap::{Args, Parser, Subcommand};
use esmlab_cli::config::{
    load_config, DistillFileConfig, InitCompareConfig, RoundtripConfig, SweepFileConfig,
    TrainDenoiserConfig,
};
use esmlab_cli::run::{self, Failure};
use esmlab_core::distill::LossKind;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "esmlab",
    version,
    about = "Desk-scale score-distillation laboratory with exact diffusion inversion"
)]
struct Cli {
    /// Output root for run directories (overrides $ESMLAB_OUT; default "runs").
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional denoiser on a procedural dataset.
    TrainDenoiser(TrainArgs),
    /// Measure naive vs coupled inversion round-trip error on a checkpoint.
    Roundtrip(RoundtripArgs),
    /// Distill a checkpoint into a Gaussian-splat scene.
    Distill(DistillArgs),
    /// Grid one distillation hyperparameter across seeds.
    Sweep(SweepArgs),
    /// Compare random vs data-fitted scene initialization across seeds.
    InitCompare(InitCompareArgs),
    /// Run the invariant suite and write a machine-readable report.
    Verify,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config.
    config: PathBuf,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run directory name.
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args)]
struct RoundtripArgs {
    /// JSON run config.
    config: PathBuf,
    /// Override the number of random states per grid point.
    #[arg(long)]
    states: Option<usize>,
    /// Override the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run directory name.
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args)]
struct DistillArgs {
    /// JSON run config.
    config: PathBuf,
    /// Gradient estimator: sds, ism, or esm.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Total iteration count for the run.
    #[arg(long)]
    iterations: Option<usize>,
    /// Scene / sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Mixing ratio of the coupled inversion (esm only).
    #[arg(long)]
    rho: Option<f64>,
    /// Sub-step size of the multi-step inversion.
    #[arg(long)]
    delta_s: Option<usize>,
    /// Interval width between the two evaluation timesteps.
    #[arg(long)]
    delta_t: Option<usize>,
    /// Classifier-free guidance weight.
    #[arg(long)]
    guidance: Option<f64>,
    /// Class label distilled toward.
    #[arg(long)]
    label: Option<usize>,
    /// Override the run directory name.
    #[arg(long)]
    run_name: Option<String>,
    /// Scene snapshot (scene_XXXXXX.ckpt) to resume from; the run continues
    /// its iteration numbering up to the configured total.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Write a resumable snapshot every N iterations (0 = final only).
    #[arg(long, value_name = "N")]
    snapshot_every: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON run config.
    config: PathBuf,
    /// Override the run directory name.
    #[arg(long)]
    run_name: Option<String>,
    /// Override the seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct InitCompareArgs {
    /// JSON run config.
    config: PathBuf,
    /// Override the run directory name.
    #[arg(long)]
    run_name: Option<String>,
    /// Override the seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::TrainDenoiser(a) => {
            let mut cfg: TrainDenoiserConfig = load_config(&a.config)?;
            if let Some(v) = a.steps {
                cfg.train.steps = v;
            }
            if let Some(v) = a.seed {
                cfg.train.seed = v;
            }
            if let Some(v) = a.run_name {
                cfg.run_name = v;
            }
            run::train::cmd_train(out, cfg)
        }
        Command::Roundtrip(a) => {
            let mut cfg: RoundtripConfig = load_config(&a.config)?;
            if let Some(v) = a.states {
                cfg.states = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.run_name {
                cfg.run_name = v;
            }
            run::roundtrip::cmd_roundtrip(out, cfg)
        }
        Command::Distill(a) => {
            let mut cfg: DistillFileConfig = load_config(&a.config)?;
            if let Some(v) = a.loss {
                cfg.distill.loss = v;
            }
            if let Some(v) = a.iterations {
                cfg.distill.iterations = v;
            }
            if let Some(v) = a.seed {
                cfg.distill.seed = v;
            }
            if let Some(v) = a.rho {
                cfg.distill.rho = v;
            }
            if let Some(v) = a.delta_s {
                cfg.distill.delta_s = v;
            }
            if let Some(v) = a.delta_t {
                cfg.distill.delta_t = v;
            }
            if let Some(v) = a.guidance {
                cfg.distill.guidance = v;
            }
            if let Some(v) = a.label {
                cfg.distill.label = v;
            }
            if let Some(v) = a.run_name {
                cfg.run_name = v;
            }
            if let Some(v) = a.snapshot_every {
                cfg.snapshot_every = v;
            }
            run::distill::cmd_distill(out, cfg, a.resume)
        }
        Command::Sweep(a) => {
            let mut cfg: SweepFileConfig = load_config(&a.config)?;
            if let Some(v) = a.run_name {
                cfg.run_name = v;
            }
            if let Some(v) = a.seeds {
                cfg.seeds = v;
            }
            run::sweep::cmd_sweep(out, cfg)
        }
        Command::InitCompare(a) => {
            let mut cfg: InitCompareConfig = load_config(&a.config)?;
            if let Some(v) = a.run_name {
                cfg.run_name = v;
            }
            if let Some(v) = a.seeds {
                cfg.seeds = v;
            }
            run::init_compare::cmd_init_compare(out, cfg)
        }
        Command::Verify => run::verify::cmd_verify(out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(f) = dispatch(cli) {
        eprintln!("error: {f}");
        std::process::exit(f.exit_code());
    }
}
