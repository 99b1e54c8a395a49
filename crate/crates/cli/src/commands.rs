//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use spikedict::checkpoint::{self, CheckpointPaths};
use spikedict::coding;
use spikedict::data::{self, Dataset, GrayImage, Provenance};
use spikedict::engine::SimParams;
use spikedict::learning;
use spikedict::linalg;
use spikedict::metrics::{self, Coder, MetricsRecord};
use spikedict::oracle::{self, CoordinateDescent, SgdConfig};
use spikedict::report;
use spikedict::rng::{self, Stream};
use spikedict::{weights_from_dictionary, Dictionary, Error, NetworkWeights};

use crate::config::{CoderKind, Config, ConfigError};

/// Failure of a subcommand with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Usage, config or input problem (exit 1).
    Config(String),
    /// The simulation or solver gave up (exit 2).
    Abort(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Abort(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Abort(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::CurrentBoundExceeded { .. } | Error::ThresholdUnderflow { .. } | Error::NotConverged { .. } => {
                CliError::Abort(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("`{key}` is not set (config key or flag)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}

/// Training and test samples of a configured run.
struct Samples {
    train: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
    /// Tile shape used when drawing atoms.
    tile: (usize, usize),
}

fn image_patches(img: &GrayImage, cfg: &Config, count: usize, stream: Stream, label: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::stream(cfg.run.seed, stream);
    let raw = data::sample_patches_with(img, cfg.patch_size, count, &mut r)?;
    let prov = Provenance {
        source: label.display().to_string(),
        patch_size: Some(cfg.patch_size),
        seed: Some(cfg.run.seed),
    };
    let (set, dropped) = data::preprocess_split(&raw, prov)?;
    if dropped > 0 {
        log::info!("{}: dropped {dropped} flat patches", label.display());
    }
    Ok(set.patches)
}

fn pick(patches: &[Vec<f64>], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, Stream::TestPatchSampling);
    (0..count.min(patches.len()))
        .map(|_| patches[r.random_range(0..patches.len())].clone())
        .collect()
}

fn tile_for(dim: usize, patch_size: usize) -> (usize, usize) {
    if dim == 2 * patch_size * patch_size {
        return (patch_size, patch_size);
    }
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side, side)
    } else {
        (1, dim)
    }
}

fn load_test(cfg: &Config, fallback: Option<&Dataset>) -> Result<Vec<Vec<f64>>> {
    if cfg.test_patches == 0 {
        return Ok(Vec::new());
    }
    let loaded;
    let (ds, label) = match (&cfg.testset, fallback) {
        (Some(p), _) => {
            loaded = data::load_dataset(p)?;
            (&loaded, p.clone())
        }
        (None, Some(d)) => (d, cfg.dataset.clone().unwrap_or_default()),
        (None, None) => match &cfg.dataset {
            Some(p) => {
                loaded = data::load_dataset(p)?;
                (&loaded, p.clone())
            }
            None => return Ok(Vec::new()),
        },
    };
    match ds {
        Dataset::Image(img, _) => image_patches(img, cfg, cfg.test_patches, Stream::TestPatchSampling, &label),
        Dataset::Patches(set) => Ok(pick(&set.patches, cfg.test_patches, cfg.run.seed)),
    }
}

fn load_samples(cfg: &Config) -> Result<Samples> {
    let path = require(&cfg.dataset, "dataset")?;
    let ds = data::load_dataset(path)?;
    let train = match &ds {
        Dataset::Image(img, _) => image_patches(img, cfg, cfg.n_patches, Stream::PatchSampling, path)?,
        Dataset::Patches(set) => set.patches.clone(),
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let test = load_test(cfg, Some(&ds))?;
    if let Some(t) = test.first() {
        if t.len() != train[0].len() {
            return Err(CliError::Config(format!(
                "test samples have dimension {}, training samples {}",
                t.len(),
                train[0].len()
            )));
        }
    }
    let tile = tile_for(train[0].len(), cfg.patch_size);
    Ok(Samples { train, test, tile })
}

fn write_logs(dir: &Path, log: &[MetricsRecord]) -> Result<()> {
    report::write_text(dir.join("metrics.jsonl"), &report::metrics_jsonl(log))?;
    report::write_text(dir.join("metrics.csv"), &report::metrics_csv(log))?;
    Ok(())
}

fn write_chart(dir: &Path, label: &str, log: &[MetricsRecord]) -> Result<()> {
    report::write_text(dir.join("objective.svg"), &report::objective_chart(&[(label, log)]))?;
    Ok(())
}

fn write_atlas(dir: &Path, d: &ndarray::Array2<f64>, tile: (usize, usize)) -> Result<()> {
    let atlas = metrics::export_atlas(d, tile)?;
    data::write_pgm(dir.join("atlas.pgm"), &atlas)?;
    Ok(())
}

pub fn train_snn(cfg: &Config) -> Result<()> {
    let samples = load_samples(cfg)?;
    create_dir(&cfg.out_dir)?;
    let out = learning::train(&samples.train, &samples.test, &cfg.run, |r| {
        log::info!(
            "iteration {}: objective {:?} consistency {:?} symmetry {:?}",
            r.iteration,
            r.objective,
            r.consistency,
            r.symmetry
        );
    })?;
    checkpoint::save_weights(&cfg.out_dir, &out.weights)?;
    write_logs(&cfg.out_dir, &out.log)?;
    write_chart(&cfg.out_dir, "snn", &out.log)?;
    write_atlas(&cfg.out_dir, &out.weights.b, samples.tile)?;
    match out.aborted {
        Some(a) => Err(CliError::Abort(format!(
            "aborted at iteration {}: {}; weights from iteration {} kept in {}",
            a.iteration,
            a.error,
            a.iteration - 1,
            cfg.out_dir.display()
        ))),
        None => Ok(()),
    }
}

pub fn train_sgd(cfg: &Config) -> Result<()> {
    let samples = load_samples(cfg)?;
    create_dir(&cfg.out_dir)?;
    let sgd = SgdConfig::from_run(&cfg.run, cfg.sgd_eta.unwrap_or(cfg.run.eta_d));
    let out = oracle::sgd_train(&samples.train, &samples.test, &sgd, |r| {
        log::info!("iteration {}: objective {:?}", r.iteration, r.objective);
    })?;
    if out.reseeded_atoms > 0 {
        log::warn!("{} atoms were re-randomized", out.reseeded_atoms);
    }
    checkpoint::write_dlm(cfg.out_dir.join("D.dlm"), out.dictionary.matrix())?;
    write_logs(&cfg.out_dir, &out.log)?;
    write_chart(&cfg.out_dir, "sgd", &out.log)?;
    write_atlas(&cfg.out_dir, out.dictionary.matrix(), samples.tile)?;
    Ok(())
}

/// What a `weights` path holds.
enum Loaded {
    Network(NetworkWeights),
    Dictionary(Dictionary),
}

fn load_weights_path(cfg: &Config) -> Result<Loaded> {
    let path = require(&cfg.weights, "weights")?;
    let dict_file = if path.is_dir() {
        if CheckpointPaths::new(path).f.exists() {
            return Ok(Loaded::Network(checkpoint::load_weights(path, cfg.run.lambda1, cfg.gamma)?));
        }
        path.join("D.dlm")
    } else {
        path.to_path_buf()
    };
    Ok(Loaded::Dictionary(Dictionary::new(checkpoint::read_dlm(&dict_file)?)?))
}

fn network(cfg: &Config) -> Result<NetworkWeights> {
    Ok(match load_weights_path(cfg)? {
        Loaded::Network(w) => w,
        Loaded::Dictionary(d) => weights_from_dictionary(&d, cfg.run.lambda1, cfg.gamma)?,
    })
}

fn parse_numbers(text: &str, path: &Path) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::Config(format!("{}: not a number: {t:?}", path.display())))
        })
        .collect()
}

/// Reads the input vector and brings it to length `m`.
fn read_input(cfg: &Config, m: usize) -> Result<Vec<f64>> {
    let path = require(&cfg.input, "input")?;
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let x = match data::detect_format(&bytes) {
        Some(data::DatasetFormat::Pgm) => {
            let img = data::decode_pgm(&bytes, path)?;
            if img.pixels.len() * 2 == m {
                let split = data::split_patch(&img.pixels).unwrap_or(data::SplitPatch {
                    channels: vec![0.0; m],
                    mean: 0.0,
                    norm: 0.0,
                });
                split.channels
            } else {
                img.pixels
            }
        }
        Some(_) => {
            let set = match data::load_dataset(path)? {
                Dataset::Patches(s) => s,
                Dataset::Image(..) => unreachable!("PGM handled above"),
            };
            set.patches.get(cfg.input_index).cloned().ok_or_else(|| {
                CliError::Config(format!(
                    "{}: index {} out of range ({} patches)",
                    path.display(),
                    cfg.input_index,
                    set.len()
                ))
            })?
        }
        None => {
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::Config(format!("{}: unrecognized input format", path.display())))?;
            parse_numbers(&text, path)?
        }
    };
    if x.len() != m {
        return Err(CliError::Config(format!(
            "{}: input has {} entries, network expects {m}",
            path.display(),
            x.len()
        )));
    }
    if let Some(v) = x.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(CliError::Config(format!("{}: inputs must be finite and >= 0, got {v}", path.display())));
    }
    Ok(x)
}

fn oracle_code(w: &NetworkWeights, x: &[f64]) -> Result<Vec<f64>> {
    let n = w.n_coding();
    let s: Vec<f64> = w.s.to_vec();
    let sol = CoordinateDescent::new(&w.b).solve(x, w.lambda1, &s, None, 1e-10, 1000 * n.max(1))?;
    Ok(sol.a)
}

pub fn sparse_code(cfg: &Config, oracle: bool, compare: bool) -> Result<()> {
    let w = network(cfg)?;
    let x = read_input(cfg, w.n_input())?;
    let mut out = String::new();
    if oracle {
        for (i, v) in oracle_code(&w, &x)?.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            out.push_str(&format!("{i},{v}\n"));
        }
    } else {
        let (a, _) = coding::sparse_code(&w, &x, cfg.gamma, cfg.run.t_phase, SimParams::from(&cfg.run))?;
        if compare {
            let o = oracle_code(&w, &x)?;
            let gap = linalg::max_abs(a.iter().zip(&o).map(|(p, q)| p - q));
            out.push_str(&format!("linf_gap,{gap}\n"));
        } else {
            for i in coding::support(a.view(), cfg.run.t_phase) {
                out.push_str(&format!("{i},{}\n", a[i]));
            }
        }
    }
    print!("{out}");
    Ok(())
}

pub fn denoise(cfg: &Config) -> Result<()> {
    let loaded = load_weights_path(cfg)?;
    let clean = data::load_pgm(require(&cfg.image, "image")?)?;
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => data::calibrate_sigma(&clean, cfg.target_psnr, cfg.noise_seed, 1e-3)?.0,
    };
    let noisy = data::add_gaussian_noise(&clean, sigma, cfg.noise_seed)?;
    let weights;
    let coder = match (cfg.coder, &loaded) {
        (CoderKind::Oracle, Loaded::Network(w)) => Coder::Oracle {
            d: &w.b,
            lambda1: cfg.run.lambda1,
        },
        (CoderKind::Oracle, Loaded::Dictionary(d)) => Coder::Oracle {
            d: d.matrix(),
            lambda1: cfg.run.lambda1,
        },
        (CoderKind::Network, l) => {
            weights = match l {
                Loaded::Network(w) => w.clone(),
                Loaded::Dictionary(d) => weights_from_dictionary(d, cfg.run.lambda1, 0.0)?,
            };
            Coder::Network {
                weights: &weights,
                t_phase: cfg.run.t_phase,
                params: SimParams::from(&cfg.run),
            }
        }
    };
    let den = metrics::denoise(&coder, &noisy, cfg.patch_size, cfg.stride)?;
    create_dir(&cfg.out_dir)?;
    data::write_pgm(cfg.out_dir.join("noisy.pgm"), &noisy)?;
    data::write_pgm(cfg.out_dir.join("denoised.pgm"), &den.image)?;
    let p_noisy = metrics::psnr(&clean, &noisy)?;
    let p_den = metrics::psnr(&clean, &den.image)?;
    println!("psnr_noisy,psnr_denoised,mean_l0");
    println!("{p_noisy:.6},{p_den:.6},{:.6}", den.mean_l0);
    Ok(())
}

pub fn raster(cfg: &Config, output: Option<&Path>) -> Result<()> {
    let w = network(cfg)?;
    let x = read_input(cfg, w.n_input())?;
    let (_, events) = learning::contrastive_run_logged(&w, &x, &cfg.run)?;
    let csv = report::raster_csv(&events);
    match output {
        Some(p) => report::write_text(p, &csv)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(csv.as_bytes())
                .map_err(|e| CliError::Config(format!("stdout: {e}")))?;
        }
    }
    Ok(())
}

pub fn metrics(cfg: &Config) -> Result<()> {
    let loaded = load_weights_path(cfg)?;
    let test = load_test(cfg, None)?;
    let d = match &loaded {
        Loaded::Network(w) => &w.b,
        Loaded::Dictionary(d) => d.matrix(),
    };
    let objective = if test.is_empty() {
        String::new()
    } else {
        format!("{:.10e}", oracle::surrogate_objective(d, &test, cfg.run.lambda1, oracle::DEFAULT_TOL)?)
    };
    let (consistency, symmetry) = match &loaded {
        Loaded::Network(w) => (
            match metrics::consistency(&w.h, &w.f, &w.b) {
                Ok(c) => format!("{c:.10e}"),
                Err(Error::ZeroH) => String::new(),
                Err(e) => return Err(e.into()),
            },
            format!("{:.10e}", metrics::symmetry(&w.f, &w.b)?),
        ),
        Loaded::Dictionary(_) => (String::new(), String::new()),
    };
    println!("consistency,symmetry,objective,mean_atom_norm");
    println!("{consistency},{symmetry},{objective},{:.10e}", metrics::mean_atom_norm(d));
    Ok(())
}

pub fn make_scene(width: usize, height: usize, seed: u64, output: &Path) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(CliError::Config("width and height must be >= 1".into()));
    }
    data::write_pgm(output, &data::synthetic_scene(width, height, seed))?;
    Ok(())
}
