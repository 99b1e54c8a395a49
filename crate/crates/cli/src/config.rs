//! Flat `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use spikedict::RunConfig;

/// Configuration problem; always maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<spikedict::Error> for ConfigError {
    fn from(e: spikedict::Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoderKind {
    Oracle,
    Network,
}

/// Everything a subcommand can be configured with.
#[derive(Debug, Clone)]
pub struct Config {
    pub run: RunConfig,
    /// Training data: PGM image, IDX3 images or PST1 patches.
    pub dataset: Option<PathBuf>,
    /// Held-out data for the surrogate objective; sampled from `dataset` when unset.
    pub testset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub patch_size: usize,
    /// Patches drawn from an image dataset.
    pub n_patches: usize,
    pub test_patches: usize,
    /// SGD baseline step size; defaults to `eta_d`.
    pub sgd_eta: Option<f64>,
    pub threads: Option<usize>,
    /// Checkpoint directory or `.dlm` dictionary.
    pub weights: Option<PathBuf>,
    /// Input vector for `sparse-code` and `raster`.
    pub input: Option<PathBuf>,
    /// Patch index when `input` holds several patches.
    pub input_index: usize,
    /// Clean image for `denoise`.
    pub image: Option<PathBuf>,
    pub sigma: Option<f64>,
    /// Noise level is calibrated to this PSNR when `sigma` is unset.
    pub target_psnr: f64,
    pub noise_seed: u64,
    pub stride: usize,
    pub coder: CoderKind,
    pub gamma: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            dataset: None,
            testset: None,
            out_dir: PathBuf::from("out"),
            patch_size: 8,
            n_patches: 20000,
            test_patches: 500,
            sgd_eta: None,
            threads: None,
            weights: None,
            input: None,
            input_index: 0,
            image: None,
            sigma: None,
            target_psnr: 18.69,
            noise_seed: 0,
            stride: 1,
            coder: CoderKind::Oracle,
            gamma: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse {value:?}")))
}

impl Config {
    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if self.run.set(key, value)? {
            return Ok(());
        }
        match key {
            "dataset" => self.dataset = Some(value.into()),
            "testset" => self.testset = Some(value.into()),
            "out_dir" => self.out_dir = value.into(),
            "patch_size" => self.patch_size = parse(key, value)?,
            "n_patches" => self.n_patches = parse(key, value)?,
            "test_patches" => self.test_patches = parse(key, value)?,
            "sgd_eta" => self.sgd_eta = Some(parse(key, value)?),
            "threads" => self.threads = Some(parse(key, value)?),
            "weights" => self.weights = Some(value.into()),
            "input" => self.input = Some(value.into()),
            "input_index" => self.input_index = parse(key, value)?,
            "image" => self.image = Some(value.into()),
            "sigma" => self.sigma = Some(parse(key, value)?),
            "target_psnr" => self.target_psnr = parse(key, value)?,
            "noise_seed" => self.noise_seed = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "coder" => {
                self.coder = match value {
                    "oracle" => CoderKind::Oracle,
                    "network" => CoderKind::Network,
                    other => return Err(ConfigError(format!("coder must be oracle|network, got {other:?}"))),
                }
            }
            _ => return Err(ConfigError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Reads a config file. Relative input paths inside it are resolved against
    /// its directory; `out_dir` stays relative to the working directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            for p in [
                &mut cfg.dataset,
                &mut cfg.testset,
                &mut cfg.weights,
                &mut cfg.input,
                &mut cfg.image,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run.validate()?;
        if self.patch_size == 0 {
            return Err(ConfigError("patch_size must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(ConfigError("stride must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(ConfigError(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if self.threads == Some(0) {
            return Err(ConfigError("threads must be >= 1".into()));
        }
        Ok(())
    }
}
