use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero atom: column {0} of the dictionary is all zeros")]
    ZeroAtom(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("current bound exceeded: |mu| = {current} > {bound} at t = {time} ({layer} neuron {neuron})")]
    CurrentBoundExceeded {
        time: f64,
        layer: Layer,
        neuron: usize,
        current: f64,
        bound: f64,
    },

    #[error("threshold underflow: diag(H)[{index}] = {value}")]
    ThresholdUnderflow { index: usize, value: f64 },

    #[error("perturbation too large: 4*|dH|_1*|a|_inf = {lhs} >= min(s) = {min_s}")]
    PerturbationTooLarge { lhs: f64, min_s: f64 },

    #[error("solver not converged after {sweeps} sweeps (kkt gap {gap:e})")]
    NotConverged {
        sweeps: usize,
        gap: f64,
        best: Vec<f64>,
    },

    #[error("zero H: Frobenius norm of H is zero")]
    ZeroH,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("patch larger than image: patch {patch}, image {width}x{height}")]
    PatchLargerThanImage {
        patch: usize,
        width: usize,
        height: usize,
    },

    #[error("bad magic in {path}: {detail}")]
    BadMagic { path: PathBuf, detail: String },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),

    #[error("malformed header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Which layer of the two-layer network a neuron belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    Coding,
    Input,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Coding => "coding",
            Layer::Input => "input",
        }
    }
}

impl std::fmt::Display for Layer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
