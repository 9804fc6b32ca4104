mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use convkernels::{run_criterion, run_suite, Outcome, Scale, VerifyOptions};

use config::{Overrides, RunConfig};

const EXIT_FAILED: u8 = 1;
const EXIT_ERROR: u8 = 2;
const EXIT_INTERRUPTED: u8 = 3;

#[derive(Parser)]
#[command(name = "convkernels", version, about = "Exact convolutional kernels and kernel ridge regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and store the normalized train and test kernel blocks.
    Kernel(Overrides),
    /// Compute kernels, fit kernel ridge regression and report accuracy.
    Regress(Overrides),
    /// Accuracy over LAP c values and depths from a single kernel pass.
    Sweep(SweepArgs),
    /// Run the built-in correctness criteria.
    Verify(VerifyArgs),
    /// Whitened random-patch features for the configured dataset.
    Features(FeatureArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated LAP c values.
    #[arg(long, value_delimiter = ',')]
    c: Vec<usize>,
    /// Comma-separated depths.
    #[arg(long, value_delimiter = ',')]
    depths: Vec<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// quick or full.
    #[arg(long, default_value = "quick")]
    scale: Scale,
    /// CIFAR-10 binary directory, enabling the desk-scale trend check.
    #[arg(long, env = "CONVKERNELS_CIFAR_DIR")]
    cifar_dir: Option<PathBuf>,
    /// Run only these criteria.
    #[arg(long, value_delimiter = ',')]
    criterion: Vec<usize>,
    #[arg(long, hide = true)]
    mutate_lap_weights: bool,
}

#[derive(Args)]
struct FeatureArgs {
    #[command(flatten)]
    common: Overrides,
    /// Filters sampled before flip closure.
    #[arg(long, default_value_t = 2048)]
    patches: usize,
    #[arg(long, default_value_t = 5)]
    patch_size: usize,
    /// ZCA regularizer.
    #[arg(long, default_value_t = convkernels::data::DEFAULT_ZCA_EPSILON)]
    epsilon: f64,
    /// Keep the bank unchanged under horizontal flips.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    flip_closed: bool,
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn verify(a: &VerifyArgs) -> bool {
    let opts = VerifyOptions {
        scale: a.scale,
        cifar_dir: a.cifar_dir.clone(),
        mutate_lap_weights: a.mutate_lap_weights,
    };
    let passed = if a.criterion.is_empty() {
        run_suite(&opts, |r| println!("{r}")).passed()
    } else {
        a.criterion.iter().fold(true, |ok, &id| {
            let r = run_criterion(id, &opts);
            println!("{r}");
            ok && !(r.blocking && r.outcome == Outcome::Fail)
        })
    };
    println!("verify={}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Kernel(o) => {
            let cfg = RunConfig::resolve("kernel", &o, None)?;
            configure_threads(cfg.threads)?;
            commands::kernel(&cfg)?;
        }
        Command::Regress(o) => {
            let cfg = RunConfig::resolve("regress", &o, None)?;
            configure_threads(cfg.threads)?;
            commands::regress(&cfg)?;
        }
        Command::Sweep(a) => {
            let cfg = RunConfig::resolve("sweep", &a.common, Some((&a.c, &a.depths)))?;
            configure_threads(cfg.threads)?;
            commands::sweep(&cfg)?;
        }
        Command::Verify(a) => return Ok(verify(&a)),
        Command::Features(a) => {
            let cfg = RunConfig::resolve("features", &a.common, None)?;
            configure_threads(cfg.threads)?;
            commands::features(
                &cfg,
                &commands::FeatureArgs {
                    patches: a.patches,
                    patch_size: a.patch_size,
                    epsilon: a.epsilon,
                    flip_closed: a.flip_closed,
                },
            )?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            if let Some(convkernels::Error::Interrupted { completed }) = e.downcast_ref() {
                eprintln!("interrupted after {completed} tiles; rerun the same command to resume");
                return ExitCode::from(EXIT_INTERRUPTED);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
