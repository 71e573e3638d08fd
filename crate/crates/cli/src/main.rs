mod audit;
mod config;
mod dataset;
mod exit;
mod predict;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mdanet_core::{Variant, View};

/// Slice-compression attention U-Net for 3D volume segmentation.
#[derive(Debug, Parser)]
#[command(name = "mdanet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate labelled synthetic phantoms and a dataset manifest.
    MakePhantoms(MakePhantoms),
    /// Add an external raw volume (and optional labels) to a dataset.
    Import(Import),
    /// Train one fold, or cross-validate over all folds.
    Train(TrainArgs),
    /// Per-class Dice of a checkpoint (or a saved prediction) on a labelled volume.
    Eval(EvalArgs),
    /// Predict a label volume with a checkpoint.
    Infer(InferArgs),
    /// Parameter counts per variant and module.
    Paramcount(ParamcountArgs),
    /// Finite-difference gradient checks of attention blocks or whole networks.
    Gradcheck(GradcheckArgs),
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected d0,d1,d2, got '{s}'"));
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.trim().parse().map_err(|e| format!("'{p}': {e}"))?;
        if *d == 0 {
            return Err("dimensions must be positive".into());
        }
    }
    Ok(dims)
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three spacings, got '{s}'"))
}

#[derive(Debug, Args)]
struct MakePhantoms {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long, value_parser = parse_dims, default_value = "48,64,56")]
    dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Standard deviation of the additive noise.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
}

#[derive(Debug, Args)]
struct Import {
    /// Dataset directory; its manifest is created or extended.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    id: String,
    /// Raw little-endian image in C order over `dims`.
    #[arg(long)]
    image: PathBuf,
    /// Raw u8 labels over the same grid.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long, default_value = "f32")]
    dtype: String,
    #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
    spacing: [f64; 3],
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    view: Option<View>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parallel (fold, variant) runs when cross-validating.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "prediction"])))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score a label volume written by `infer` instead of running a model.
    #[arg(long)]
    prediction: Option<PathBuf>,
    /// Labelled volume header.
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value = "sagittal")]
    view: View,
    /// Refuse checkpoints holding another variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value = "sagittal")]
    view: View,
    #[arg(long)]
    variant: Option<Variant>,
    /// Header path of the predicted volume.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct ParamcountArgs {
    /// One variant; all four when omitted.
    #[arg(long)]
    variant: Option<Variant>,
    /// Take hyperparameters from a run config and the slice size from its
    /// data; the full-size reference network otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Scope {
    Block,
    Network,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "block")]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per case.
    #[arg(long, default_value_t = 3)]
    instances: u64,
    /// Spatial size of network inputs.
    #[arg(long, default_value_t = 8)]
    size: usize,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakePhantoms(a) => {
            let cfg = mdanet_core::volume::PhantomConfig {
                dims: a.dims,
                num_classes: a.classes,
                noise_sigma: a.noise,
                ..Default::default()
            };
            let m = dataset::make_phantoms(&a.out, a.subjects, a.seed, &cfg)?;
            eprintln!("wrote {} subjects to {}", m.subjects.len(), a.out.display());
            Ok(())
        }
        Command::Import(a) => {
            let image = dataset::read_raw_f32(&a.image, a.dims, &a.dtype)?;
            let mut volume = mdanet_core::Volume::new(a.dims, a.spacing, image)?;
            if let Some(l) = &a.labels {
                volume = volume.with_labels(dataset::read_raw_u8(l, a.dims)?)?;
            }
            dataset::import(&a.out, &a.id, &volume)
        }
        Command::Train(a) => train::run(train::Overrides {
            config: a.config,
            variant: a.variant,
            view: a.view,
            fold: a.fold,
            data: a.data,
            out: a.out,
            seed: a.seed,
            epochs: a.epochs,
            jobs: a.jobs,
        }),
        Command::Eval(a) => predict::eval(&predict::EvalRequest {
            checkpoint: a.checkpoint,
            prediction: a.prediction,
            volume: a.volume,
            view: a.view,
            variant: a.variant,
            out: a.out,
            batch_size: a.batch_size,
        }),
        Command::Infer(a) => predict::infer(&a.checkpoint, &a.volume, a.view, a.variant, &a.out, a.batch_size),
        Command::Paramcount(a) => audit::paramcount(a.variant, a.config.as_deref()),
        Command::Gradcheck(a) => audit::gradcheck(a.scope == Scope::Network, a.seed, a.instances, a.size),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e) as u8)
        }
    }
}
