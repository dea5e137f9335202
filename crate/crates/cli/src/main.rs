//! `fwdskin`: posed-space correspondence search, training, benchmarks, and
//! mesh export for forward-skinned implicit shapes.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{parse_dims, RunConfig};
use fwdskin::Variant;
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "fwdskin", version, about = "Forward skinning correspondence search and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Find canonical correspondences and posed occupancy of query points.
    Deform,
    /// Fit occupancy and skinning networks to a posed capsule body.
    Train,
    /// Time distillation, precomputation, search, and shape queries.
    Bench,
    /// Write one mesh of the posed surface per pose.
    Extract,
    /// Train across grid resolutions and distillation settings.
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Deform => "deform",
            Command::Train => "train",
            Command::Bench => "bench",
            Command::Extract => "extract",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Args)]
struct Flags {
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Skeleton JSON; the built-in arm when omitted.
    #[arg(long, global = true)]
    skeleton: Option<PathBuf>,
    /// JSON list of poses.
    #[arg(long, global = true)]
    pose: Option<PathBuf>,
    /// Query points (`.xyz` text or `.bin` little-endian f32 triples).
    #[arg(long, global = true)]
    points: Option<PathBuf>,
    /// Trained model; the analytic capsule body when omitted.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_name = "NX,NY,NZ", value_parser = parse_dims)]
    grid_dims: Option<[usize; 3]>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Search convergence threshold on the residual norm.
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Mesh lattice vertices per axis.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    /// Override any settings key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: fwdskin::Error| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let f = &cli.flags;
    let mut cfg = RunConfig::load(f.config.as_deref(), &f.set)?;
    if let Some(v) = f.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = f.grid_dims {
        cfg.train.grid_dims = v;
    }
    if let Some(v) = f.variant {
        cfg.settings.variant = v;
    }
    if let Some(v) = f.eps {
        cfg.settings.eps = v;
    }
    if let Some(v) = f.max_iters {
        cfg.settings.max_iters = v;
    }
    if let Some(v) = f.workers {
        cfg.settings.workers = v;
    }
    if let Some(v) = f.resolution {
        cfg.settings.resolution = v;
    }
    let inputs = commands::Inputs {
        skeleton: f.skeleton.clone(),
        pose: f.pose.clone(),
        points: f.points.clone(),
        checkpoint: f.checkpoint.clone(),
        grid_dims_flag: f.grid_dims.is_some(),
        out: f.out.clone(),
    };
    let mut manifest = RunManifest::new(cli.command.name(), cfg.train.seed, cfg.snapshot());
    if let Some(p) = &f.config {
        manifest.add_input(p)?;
    }
    let started = std::time::Instant::now();
    let command = cli.command;
    let workers = cfg.settings.workers;
    fwdskin::with_workers(workers, || match command {
        Command::Deform => commands::deform(&cfg, &inputs, &mut manifest),
        Command::Train => commands::train(&cfg, &inputs, &mut manifest),
        Command::Bench => commands::bench(&cfg, &inputs, &mut manifest),
        Command::Extract => commands::extract(&cfg, &inputs, &mut manifest),
        Command::Ablate => commands::ablate(&cfg, &inputs, &mut manifest),
    })??;
    manifest.time("total", started.elapsed().as_secs_f64());
    manifest.write(&inputs.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
