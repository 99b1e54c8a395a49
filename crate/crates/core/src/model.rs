//! Domain types shared by the simulator, the learner, the oracle and reporting.
//!
//! Matrices are dense `ndarray` arrays. Thresholds of the coding neurons are
//! not stored separately: they are the diagonal of `H`.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Non-negative `M x N` dictionary whose columns are the atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
}

impl Dictionary {
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        let (m, n) = atoms.dim();
        if m == 0 || n == 0 {
            return Err(Error::DimensionMismatch(format!(
                "dictionary must be at least 1x1, got {m}x{n}"
            )));
        }
        if let Some(((r, c), v)) = atoms
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidValue(format!(
                "dictionary entry ({r},{c}) = {v} must be finite and >= 0"
            )));
        }
        Ok(Self { atoms })
    }

    /// Square identity dictionary.
    pub fn identity(n: usize) -> Self {
        Self {
            atoms: Array2::eye(n),
        }
    }

    /// Number of pixels per image (`M`).
    pub fn rows(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of atoms (`N`).
    pub fn cols(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.atoms
    }

    pub fn atom(&self, j: usize) -> ArrayView1<'_, f64> {
        self.atoms.column(j)
    }

    pub fn atom_norms(&self) -> Vec<f64> {
        (0..self.cols())
            .map(|j| linalg::norm2(self.atom(j)))
            .collect()
    }

    /// Random non-negative dictionary with unit-norm atoms.
    pub fn random_unit<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut atoms = Array2::zeros((rows, cols));
        for j in 0..cols {
            fill_unit_atom(atoms.column_mut(j), rng);
        }
        Self { atoms }
    }
}

/// Overwrites `atom` with a random non-negative unit-norm vector.
pub fn fill_unit_atom<R: Rng + ?Sized>(mut atom: ArrayViewMut1<'_, f64>, rng: &mut R) {
    loop {
        atom.iter_mut().for_each(|v| *v = rng.random::<f64>());
        let norm = linalg::norm2(atom.view());
        if norm > 0.0 {
            atom.mapv_inplace(|v| v / norm);
            return;
        }
    }
}

/// The distributed encoding of one two-layer network.
///
/// Coding neuron `i` stores row `i` of `F` and `H`; input neuron `k` stores
/// row `k` of `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    /// Feedforward weights, `N x M`.
    pub f: Array2<f64>,
    /// Feedback weights, `M x N`.
    pub b: Array2<f64>,
    /// Lateral inhibition plus thresholds, `N x N`; `diag(H)` are the thresholds.
    pub h: Array2<f64>,
    /// Per-atom l1 scaling.
    pub s: Array1<f64>,
    pub lambda1: f64,
    pub gamma: f64,
}

impl NetworkWeights {
    pub fn n_coding(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_input(&self) -> usize {
        self.b.nrows()
    }

    pub fn thresholds(&self) -> ArrayView1<'_, f64> {
        self.h.diag()
    }

    /// The dictionary seen by the feedforward path, `D = F^T`.
    pub fn feedforward_dictionary(&self) -> Array2<f64> {
        self.f.t().to_owned()
    }
}

/// A single invariant violation reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn violation(message: String) -> Violation {
    Violation { message }
}

/// Checks every invariant of [`NetworkWeights`] and reports all violations.
pub fn validate(w: &NetworkWeights) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let n = w.h.nrows();
    let m = w.b.nrows();

    if w.h.ncols() != n {
        out.push(violation(format!("H must be square, got {:?}", w.h.dim())));
    }
    if w.f.dim() != (n, m) {
        out.push(violation(format!(
            "F must be {n}x{m}, got {:?}",
            w.f.dim()
        )));
    }
    if w.b.ncols() != n {
        out.push(violation(format!(
            "B must have {n} columns, got {}",
            w.b.ncols()
        )));
    }
    if w.s.len() != n {
        out.push(violation(format!("s must have length {n}, got {}", w.s.len())));
    }

    for ((i, j), v) in w.f.indexed_iter() {
        if !v.is_finite() || *v < 0.0 {
            out.push(violation(format!("F >= 0 at ({i},{j}): {v}")));
        }
    }
    for ((i, j), v) in w.b.indexed_iter() {
        if !v.is_finite() || *v < 0.0 {
            out.push(violation(format!("B >= 0 at ({i},{j}): {v}")));
        }
    }
    for ((i, j), v) in w.h.indexed_iter() {
        if i == j {
            if !v.is_finite() || *v <= 0.0 {
                out.push(violation(format!("diag(H) > 0 at index {i}")));
            }
        } else if !v.is_finite() || *v < 0.0 {
            out.push(violation(format!("off-diagonal H >= 0 at ({i},{j}): {v}")));
        }
    }
    for (i, v) in w.s.iter().enumerate() {
        if !v.is_finite() || *v <= 0.0 {
            out.push(violation(format!("s > 0 at index {i}: {v}")));
        }
    }
    if !w.lambda1.is_finite() || w.lambda1 <= 0.0 {
        out.push(violation(format!("lambda1 > 0, got {}", w.lambda1)));
    }
    if !(w.gamma >= 0.0) {
        out.push(violation(format!("gamma >= 0, got {}", w.gamma)));
    }
    if !(w.gamma < 1.0) {
        out.push(violation(format!("gamma < 1, got {}", w.gamma)));
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Fully consistent weights for a dictionary: `F = D^T`, `B = D`,
/// `H = D^T D`, `s = 1`.
pub fn weights_from_dictionary(d: &Dictionary, lambda1: f64, gamma: f64) -> Result<NetworkWeights> {
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::InvalidValue(format!("lambda1 must be > 0, got {lambda1}")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidValue(format!("gamma must be in [0,1), got {gamma}")));
    }
    let dm = d.matrix();
    if let Some(j) = (0..d.cols()).find(|&j| dm.column(j).iter().all(|&v| v == 0.0)) {
        return Err(Error::ZeroAtom(j));
    }
    let f = dm.t().to_owned();
    let b = dm.clone();
    let h = linalg::matmul(&f, &b);
    Ok(NetworkWeights {
        f,
        b,
        h,
        s: Array1::ones(d.cols()),
        lambda1,
        gamma,
    })
}

/// Per-neuron simulation state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeuronState {
    /// Soma current over the last step.
    pub current: f64,
    /// Membrane potential; unbounded below.
    pub potential: f64,
    /// Undelivered synaptic charge `sum_j W_ij (alpha * sigma_j)(t)`; input
    /// neurons store it without the feedback gain `gamma`.
    pub trace: f64,
    pub spike_count: u64,
    /// Integral of the current over the measuring window.
    pub current_integral: f64,
    pub window_start: f64,
}

/// Limiting states measured at the end of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSnapshot {
    /// Coding-neuron spike rates.
    pub a: Array1<f64>,
    /// Input-neuron spike rates.
    pub b: Array1<f64>,
    /// Coding-neuron average currents.
    pub u: Array1<f64>,
    /// Input-neuron average currents.
    pub v: Array1<f64>,
    /// `u - diag(H) a`.
    pub e: Array1<f64>,
    /// `v - b`.
    pub f: Array1<f64>,
    pub gamma_used: f64,
    pub window: (f64, f64),
    /// Largest `|mu|` seen during the phase, over both layers.
    pub peak_current: f64,
}

impl PhaseSnapshot {
    pub fn duration(&self) -> f64 {
        self.window.1 - self.window.0
    }
}

/// Weight initialization used by the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Weights consistent with a random unit-atom dictionary.
    Consistent,
    /// Independent column-normalized `F^T` and `B`; `H` random on `[0, 1.5]`
    /// with diagonal `1.5`.
    Asymmetric,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(Self::Consistent),
            "asymmetric" => Ok(Self::Asymmetric),
            other => Err(Error::Config(format!(
                "init_scheme must be consistent|asymmetric, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Consistent => "consistent",
            Self::Asymmetric => "asymmetric",
        })
    }
}

/// Whether running averages restart at each phase boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvgReset {
    ResetAtPhase,
    Cumulative,
}

impl std::str::FromStr for AvgReset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset_at_phase" => Ok(Self::ResetAtPhase),
            "cumulative" => Ok(Self::Cumulative),
            other => Err(Error::Config(format!(
                "avg_reset must be reset_at_phase|cumulative, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AvgReset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ResetAtPhase => "reset_at_phase",
            Self::Cumulative => "cumulative",
        })
    }
}

/// Simulation and learning hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dt: f64,
    pub t_phase: f64,
    pub kappa: f64,
    pub eta_d: f64,
    pub eta_h: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_atoms: usize,
    pub seed: u64,
    pub init_scheme: InitScheme,
    pub current_bound: f64,
    pub theta_floor: f64,
    pub avg_reset: AvgReset,
    /// Training iterations (one sample each).
    pub iterations: usize,
    /// Metrics cadence in iterations.
    pub metrics_every: usize,
    /// Clip `F` and `B` to the non-negative quadrant after each update.
    pub project_fb: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 32.0,
            t_phase: 20.0,
            kappa: 0.7,
            eta_d: 0.01,
            eta_h: 0.15,
            lambda1: 0.1,
            lambda2: 0.0,
            n_atoms: 64,
            seed: 0,
            init_scheme: InitScheme::Consistent,
            current_bound: 100.0,
            theta_floor: 1e-3,
            avg_reset: AvgReset::ResetAtPhase,
            iterations: 1000,
            metrics_every: 50,
            project_fb: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.dt > 0.0) {
            return fail(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.t_phase >= self.dt) {
            return fail(format!("t_phase must be >= dt, got {}", self.t_phase));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return fail(format!("kappa must be in (0,1), got {}", self.kappa));
        }
        if !(self.eta_d > 0.0) || !(self.eta_h > 0.0) {
            return fail("learning rates must be > 0".into());
        }
        if self.eta_h < self.eta_d {
            return fail(format!(
                "eta_h ({}) must be >= eta_d ({})",
                self.eta_h, self.eta_d
            ));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return fail("lambda1 and lambda2 must be >= 0".into());
        }
        if self.n_atoms == 0 {
            return fail("n_atoms must be >= 1".into());
        }
        if !(self.current_bound > 0.0) {
            return fail("current_bound must be > 0".into());
        }
        if !(self.theta_floor > 0.0) {
            return fail("theta_floor must be > 0".into());
        }
        if self.metrics_every == 0 {
            return fail("metrics_every must be >= 1".into());
        }
        Ok(())
    }

    /// Number of simulation steps in one phase.
    pub fn steps_per_phase(&self) -> usize {
        (self.t_phase / self.dt).round() as usize
    }

    /// Sets a field from its config-file key. Returns `Ok(false)` when the key
    /// is not a `RunConfig` field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            parse_number(v)
                .and_then(|x| x.parse::<T>().ok())
                .ok_or_else(|| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "dt" => self.dt = num(key, value)?,
            "t_phase" | "T_phase" => self.t_phase = num(key, value)?,
            "kappa" => self.kappa = num(key, value)?,
            "eta_d" | "eta_D" => self.eta_d = num(key, value)?,
            "eta_h" | "eta_H" => self.eta_h = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "n_atoms" => self.n_atoms = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "init_scheme" => self.init_scheme = value.parse()?,
            "current_bound" => self.current_bound = num(key, value)?,
            "theta_floor" => self.theta_floor = num(key, value)?,
            "avg_reset" => self.avg_reset = value.parse()?,
            "iterations" => self.iterations = num(key, value)?,
            "metrics_every" => self.metrics_every = num(key, value)?,
            "project_fb" => {
                self.project_fb = value
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: expected true|false, got {value:?}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Accepts plain numbers and simple fractions such as `1/32`.
pub(crate) fn parse_number(v: &str) -> Option<String> {
    let v = v.trim();
    if let Some((num, den)) = v.split_once('/') {
        let num: f64 = num.trim().parse().ok()?;
        let den: f64 = den.trim().parse().ok()?;
        if den == 0.0 {
            return None;
        }
        Some(format!("{}", num / den))
    } else {
        Some(v.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn trivial_weights() -> NetworkWeights {
        NetworkWeights {
            f: Array2::zeros((2, 3)),
            b: Array2::zeros((3, 2)),
            h: Array2::eye(2),
            s: Array1::ones(2),
            lambda1: 0.1,
            gamma: 0.0,
        }
    }

    #[test]
    fn zero_feedforward_identity_h_is_valid() {
        assert!(validate(&trivial_weights()).is_ok());
    }

    #[test]
    fn zero_threshold_is_reported() {
        let mut w = trivial_weights();
        w.h[[0, 0]] = 0.0;
        let v = validate(&w).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "diag(H) > 0 at index 0");
    }

    #[test]
    fn gamma_one_is_reported() {
        let mut w = trivial_weights();
        w.gamma = 1.0;
        let v = validate(&w).unwrap_err();
        assert!(v.iter().any(|v| v.message.starts_with("gamma < 1")));
    }

    #[test]
    fn all_violations_are_listed() {
        let mut w = trivial_weights();
        w.f[[1, 2]] = -1.0;
        w.h[[0, 1]] = -0.5;
        w.s[1] = 0.0;
        let v = validate(&w).unwrap_err();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn identity_dictionary_gives_identity_weights() {
        let w = weights_from_dictionary(&Dictionary::identity(2), 0.5, 0.0).unwrap();
        assert_eq!(w.f, Array2::<f64>::eye(2));
        assert_eq!(w.b, Array2::<f64>::eye(2));
        assert_eq!(w.h, Array2::<f64>::eye(2));
        assert_eq!(w.thresholds().to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn single_diagonal_atom_has_unit_threshold() {
        let r = 1.0 / 2f64.sqrt();
        let d = Dictionary::new(array![[r], [r]]).unwrap();
        let w = weights_from_dictionary(&d, 0.1, 0.0).unwrap();
        // r^2 + r^2 = 1 up to rounding of 1/sqrt(2).
        assert!((w.h[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_column_is_rejected() {
        let d = Dictionary::new(array![[1.0, 0.0], [0.5, 0.0]]).unwrap();
        assert!(matches!(
            weights_from_dictionary(&d, 0.1, 0.0),
            Err(Error::ZeroAtom(1))
        ));
    }

    #[test]
    fn negative_dictionary_is_rejected() {
        assert!(Dictionary::new(array![[1.0, -0.1]]).is_err());
        assert!(Dictionary::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn run_config_parses_fraction_dt() {
        let mut c = RunConfig::default();
        assert!(c.set("dt", "1/64").unwrap());
        assert_eq!(c.dt, 1.0 / 64.0);
        assert!(!c.set("no_such_key", "1").unwrap());
    }

    #[test]
    fn run_config_rejects_eta_h_below_eta_d() {
        let c = RunConfig {
            eta_h: 0.001,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
