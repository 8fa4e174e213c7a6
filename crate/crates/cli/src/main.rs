//! `lanesplat`: generate benchmark scenes, initialize, train, render and
//! evaluate layered street-scene reconstructions.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::config::PostKind;

#[derive(Parser, Debug)]
#[command(name = "lanesplat", version, about = "Layered street-scene reconstruction and view extrapolation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random choice (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 = all cores (overrides `threads`).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Interp,
    Extrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PostArg {
    None,
    Histogram,
}

impl From<PostArg> for PostKind {
    fn from(p: PostArg) -> Self {
        match p {
            PostArg::None => PostKind::None,
            PostArg::Histogram => PostKind::Histogram,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark dataset with analytic ground truth.
    GenScene {
        /// Built-in scene preset.
        #[arg(long, default_value = "flat-lane", conflicts_with = "spec")]
        preset: String,
        /// Full scene description in TOML instead of a preset.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build the initial scene from pseudo-LiDAR depth.
    Init {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Optimize a scene and write a checkpoint plus metrics.csv.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Start from this checkpoint instead of initializing.
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
        /// Iterations (overrides `train.iterations`).
        #[arg(long)]
        iters: Option<usize>,
        /// Write per-layer debug images here.
        #[arg(long, value_name = "DIR")]
        dump_layers: Option<PathBuf>,
    },
    /// Render a checkpoint at the poses of a pose file.
    Render {
        #[arg(long, value_name = "DIR")]
        scene: PathBuf,
        /// Lines of `id tx ty tz qw qx qy qz`.
        #[arg(long, value_name = "FILE")]
        poses: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Camera file; defaults to the dataset's camera.cfg.
        #[arg(long, value_name = "FILE", required_unless_present = "data")]
        camera: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Post-process plugin (overrides `render.post`).
        #[arg(long, value_enum)]
        post: Option<PostArg>,
        /// Style image for the histogram plugin (overrides `render.reference`).
        #[arg(long, value_name = "PNG")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        dump_layers: Option<PathBuf>,
    },
    /// Compare renders of a checkpoint against a dataset's images.
    Eval {
        #[arg(long, value_name = "DIR")]
        scene: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long, value_enum)]
        post: Option<PostArg>,
        #[arg(long, value_name = "PNG")]
        reference: Option<PathBuf>,
        /// Also write eval.json and a manifest here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run the step-by-step ablation on a generated benchmark dataset.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
}

fn parse() -> Cli {
    let keys = config::keys_help();
    let cmd = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
