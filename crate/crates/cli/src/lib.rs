//! Command-line driver for spikedict experiments.

mod commands;
mod config;

use std::ffi::OsString;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::{Config, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "spikedict", version, about = "Spiking sparse coding and dictionary learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (falls back to the config key, then LCA_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long = "out")]
    out_dir: Option<PathBuf>,
    /// Checkpoint directory or `.dlm` dictionary.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the spiking network with contrastive local updates.
    TrainSnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Train the SGD baseline dictionary.
    TrainSgd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Step size (defaults to eta_d).
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Print the active coefficients of one input as `index,value` lines.
    SparseCode {
        #[command(flatten)]
        common: Common,
        /// PGM, PST1 or a text file of numbers.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Patch index inside a PST1 input.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Phase duration.
        #[arg(long = "T")]
        t_phase: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        /// Print the coordinate-descent code instead.
        #[arg(long)]
        oracle: bool,
        /// Print the l-infinity gap between network and oracle codes.
        #[arg(long, conflicts_with = "oracle")]
        compare: bool,
    },
    /// Add noise to an image, denoise it and report PSNR.
    Denoise {
        #[command(flatten)]
        common: Common,
        /// Clean reference image (PGM).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Noise level; calibrated to target_psnr when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Spike raster (`layer,neuron,t`) of one contrastive run.
    Raster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long = "T")]
        t_phase: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        /// Write to this file instead of stdout.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Recompute consistency, symmetry and objective from a checkpoint.
    Metrics {
        #[command(flatten)]
        common: Common,
    },
    /// Write the procedural desk scene as a PGM.
    MakeScene {
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
}

fn build_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<Config, ConfigError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if cfg.threads.is_none() {
        if let Ok(v) = std::env::var("LCA_THREADS") {
            cfg.set("threads", v.trim())
                .map_err(|e| ConfigError(format!("LCA_THREADS: {e}")))?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &common.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = &common.weights {
        cfg.weights = Some(w.clone());
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(cfg: &Config) -> Result<(), CliError> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn s<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|x| x.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, extra, action): (Common, Vec<(&str, Option<String>)>, _) = match cli.cmd {
        Cmd::MakeScene {
            width,
            height,
            seed,
            output,
        } => return commands::make_scene(width, height, seed, &output),
        Cmd::TrainSnn { common, seed, iterations } => (
            common,
            vec![("seed", s(seed)), ("iterations", s(iterations))],
            Action::TrainSnn,
        ),
        Cmd::TrainSgd {
            common,
            seed,
            iterations,
            eta,
        } => (
            common,
            vec![("seed", s(seed)), ("iterations", s(iterations)), ("sgd_eta", s(eta))],
            Action::TrainSgd,
        ),
        Cmd::SparseCode {
            common,
            input,
            index,
            gamma,
            t_phase,
            dt,
            oracle,
            compare,
        } => (
            common,
            vec![
                ("input", input.map(|p| p.display().to_string())),
                ("input_index", s(index)),
                ("gamma", s(gamma)),
                ("t_phase", s(t_phase)),
                ("dt", s(dt)),
            ],
            Action::SparseCode { oracle, compare },
        ),
        Cmd::Denoise {
            common,
            image,
            sigma,
            seed,
            stride,
        } => (
            common,
            vec![
                ("image", image.map(|p| p.display().to_string())),
                ("sigma", s(sigma)),
                ("noise_seed", s(seed)),
                ("stride", s(stride)),
            ],
            Action::Denoise,
        ),
        Cmd::Raster {
            common,
            input,
            index,
            t_phase,
            dt,
            output,
        } => (
            common,
            vec![
                ("input", input.map(|p| p.display().to_string())),
                ("input_index", s(index)),
                ("t_phase", s(t_phase)),
                ("dt", s(dt)),
            ],
            Action::Raster { output },
        ),
        Cmd::Metrics { common } => (common, vec![], Action::Metrics),
    };
    let cfg = build_config(&common, &extra)?;
    init_threads(&cfg)?;
    match action {
        Action::TrainSnn => commands::train_snn(&cfg),
        Action::TrainSgd => commands::train_sgd(&cfg),
        Action::SparseCode { oracle, compare } => commands::sparse_code(&cfg, oracle, compare),
        Action::Denoise => commands::denoise(&cfg),
        Action::Raster { output } => commands::raster(&cfg, output.as_deref()),
        Action::Metrics => commands::metrics(&cfg),
    }
}

enum Action {
    TrainSnn,
    TrainSgd,
    SparseCode { oracle: bool, compare: bool },
    Denoise,
    Raster { output: Option<PathBuf> },
    Metrics,
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
