//! Numerical ground truth for the network.
//!
//! [`solve_nn_lasso`] solves the non-negative weighted-l1 coding problem
//! `min_{a >= 0} 1/2 |x - D a|^2 + lambda |S a|_1` by cyclic coordinate
//! descent with a closed-form non-negative soft threshold per coordinate and
//! stops on the KKT gap. [`sgd_train`] is the plain stochastic-gradient
//! dictionary learner with a unit-norm atom constraint.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::MetricsRecord;
use crate::model::{fill_unit_atom, Dictionary, RunConfig};
use crate::rng::{self, Stream};

pub const DEFAULT_TOL: f64 = 1e-8;

/// One instance of the non-negative sparse-coding problem.
#[derive(Debug, Clone, Copy)]
pub struct LassoProblem<'a> {
    pub d: &'a Array2<f64>,
    pub x: &'a [f64],
    pub lambda: f64,
    pub s: &'a [f64],
}

impl<'a> LassoProblem<'a> {
    pub fn new(d: &'a Array2<f64>, x: &'a [f64], lambda: f64, s: &'a [f64]) -> Result<Self> {
        if x.len() != d.nrows() || s.len() != d.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "D is {:?}, x has {}, s has {}",
                d.dim(),
                x.len(),
                s.len()
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidValue(format!("lambda must be > 0, got {lambda}")));
        }
        if s.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidValue("s must be > 0".into()));
        }
        Ok(Self { d, x, lambda, s })
    }
}

/// Result of a converged solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub a: Vec<f64>,
    /// `max(max_i (r_i)_+, max_i |a_i r_i|)` with `r = D^T x - lambda s - D^T D a`.
    pub kkt_gap: f64,
    pub sweeps: usize,
    /// Objective after each full sweep.
    pub objective_trace: Vec<f64>,
}

/// Reusable solver for many right-hand sides against one dictionary.
#[derive(Debug, Clone)]
pub struct CoordinateDescent {
    gram: Array2<f64>,
    dt: Array2<f64>,
}

impl CoordinateDescent {
    pub fn new(d: &Array2<f64>) -> Self {
        Self {
            gram: linalg::gram(d),
            dt: d.t().to_owned(),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.gram.nrows()
    }

    fn objective_from_gram(&self, a: &[f64], dtx: &Array1<f64>, xx: f64, lambda: f64, s: &[f64]) -> f64 {
        // 1/2 |x|^2 - a.D^T x + 1/2 a.G a + lambda s.a
        let n = a.len();
        let mut quad = 0.0;
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            let gi = self.gram.row(i).iter().zip(a).fold(0.0, |acc, (g, aj)| acc + g * aj);
            quad += a[i] * gi;
        }
        let mut lin = 0.0;
        let mut pen = 0.0;
        for i in 0..n {
            lin += a[i] * dtx[i];
            pen += s[i] * a[i].abs();
        }
        0.5 * xx - lin + 0.5 * quad + lambda * pen
    }

    fn residual(&self, c: &Array1<f64>, a: &[f64]) -> Array1<f64> {
        let n = a.len();
        let mut r = c.clone();
        for i in 0..n {
            r[i] -= self.gram.row(i).iter().zip(a).fold(0.0, |acc, (g, aj)| acc + g * aj);
        }
        r
    }

    fn gap(a: &[f64], r: &Array1<f64>) -> f64 {
        let mut g: f64 = 0.0;
        for (ai, ri) in a.iter().zip(r.iter()) {
            g = g.max(ri.max(0.0)).max((ai * ri).abs());
        }
        g
    }

    /// Solves one problem, optionally warm-started from `start`.
    pub fn solve(
        &self,
        x: &[f64],
        lambda: f64,
        s: &[f64],
        start: Option<&[f64]>,
        tol: f64,
        max_sweeps: usize,
    ) -> Result<LassoSolution> {
        let n = self.n_atoms();
        if x.len() != self.dt.ncols() || s.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "x has {}, s has {}, dictionary is {}x{}",
                x.len(),
                s.len(),
                self.dt.ncols(),
                n
            )));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidValue(format!("tol must be > 0, got {tol}")));
        }
        let xv = ArrayView1::from(x);
        let dtx = linalg::matvec(&self.dt, xv);
        let xx = linalg::dot(xv, xv);
        let c = Array1::from_iter((0..n).map(|i| dtx[i] - lambda * s[i]));

        let mut a = match start {
            Some(a0) if a0.len() == n => a0.iter().map(|v| v.max(0.0)).collect(),
            _ => vec![0.0; n],
        };
        for (ai, g) in a.iter_mut().zip(self.gram.diag()) {
            if *g <= 0.0 {
                *ai = 0.0;
            }
        }
        let mut r = self.residual(&c, &a);
        let mut trace = Vec::new();
        let mut active: Vec<usize> = Vec::with_capacity(n);

        for sweep in 1..=max_sweeps {
            self.sweep(0..n, &mut a, &mut r);
            // Polish the active set before paying for another full sweep.
            active.clear();
            active.extend((0..n).filter(|&i| a[i] > 0.0));
            for _ in 0..8 * n.max(1) {
                let moved = self.sweep(active.iter().copied(), &mut a, &mut r);
                if moved <= tol * 1e-3 {
                    break;
                }
            }
            r = self.residual(&c, &a);
            trace.push(self.objective_from_gram(&a, &dtx, xx, lambda, s));
            let gap = Self::gap(&a, &r);
            if gap <= tol {
                return Ok(LassoSolution {
                    a,
                    kkt_gap: gap,
                    sweeps: sweep,
                    objective_trace: trace,
                });
            }
        }
        let gap = Self::gap(&a, &r);
        Err(Error::NotConverged {
            sweeps: max_sweeps,
            gap,
            best: a,
        })
    }

    /// One pass of exact coordinate minimization; returns the largest step.
    fn sweep(&self, order: impl Iterator<Item = usize>, a: &mut [f64], r: &mut Array1<f64>) -> f64 {
        let mut moved: f64 = 0.0;
        for i in order {
            let gii = self.gram[[i, i]];
            if gii <= 0.0 {
                continue;
            }
            let next = (a[i] + r[i] / gii).max(0.0);
            let delta = next - a[i];
            if delta != 0.0 {
                a[i] = next;
                let row = self.gram.row(i);
                for (rj, g) in r.iter_mut().zip(row.iter()) {
                    *rj -= delta * g;
                }
                moved = moved.max(delta.abs());
            }
        }
        moved
    }
}

/// Default sweep budget for `n` atoms.
pub fn default_max_sweeps(n: usize) -> usize {
    10 * n.max(1)
}

/// Solves the non-negative weighted-l1 coding problem.
pub fn solve_nn_lasso(p: &LassoProblem<'_>, tol: f64, max_sweeps: usize) -> Result<LassoSolution> {
    CoordinateDescent::new(p.d).solve(p.x, p.lambda, p.s, None, tol, max_sweeps)
}

/// `1/2 |x - D a|^2 + lambda1 |S a|_1 + lambda2/2 |D|_F^2`.
pub fn objective(d: &Array2<f64>, x: &[f64], a: &[f64], lambda1: f64, s: &[f64], lambda2: f64) -> f64 {
    let recon = linalg::matvec(d, ArrayView1::from(a));
    let mut sq = 0.0;
    for (xi, ri) in x.iter().zip(recon.iter()) {
        sq += (xi - ri) * (xi - ri);
    }
    let mut l1 = 0.0;
    for (si, ai) in s.iter().zip(a.iter()) {
        l1 += (si * ai).abs();
    }
    let fro = linalg::frobenius(d);
    0.5 * sq + lambda1 * l1 + 0.5 * lambda2 * fro * fro
}

/// Mean coding cost over a test set with unit scaling.
///
/// Samples are coded in parallel; the sum runs in sample order.
pub fn surrogate_objective(d: &Array2<f64>, testset: &[Vec<f64>], lambda1: f64, tol: f64) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let solver = CoordinateDescent::new(d);
    let n = d.ncols();
    let ones = vec![1.0; n];
    let costs: Vec<f64> = testset
        .par_iter()
        .map(|x| {
            let sol = solver.solve(x, lambda1, &ones, None, tol, surrogate_sweeps(n))?;
            Ok(objective(d, x, &sol.a, lambda1, &ones, 0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut total = 0.0;
    for c in &costs {
        total += c;
    }
    Ok(total / testset.len() as f64)
}

fn surrogate_sweeps(n: usize) -> usize {
    100 * n.max(1)
}

/// Hyperparameters of the SGD baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub eta: f64,
    pub lambda1: f64,
    pub n_atoms: usize,
    pub iterations: usize,
    pub metrics_every: usize,
    pub seed: u64,
    pub tol: f64,
}

impl SgdConfig {
    pub fn from_run(cfg: &RunConfig, eta: f64) -> Self {
        Self {
            eta,
            lambda1: cfg.lambda1,
            n_atoms: cfg.n_atoms,
            iterations: cfg.iterations,
            metrics_every: cfg.metrics_every,
            seed: cfg.seed,
            tol: DEFAULT_TOL,
        }
    }
}

/// Final dictionary plus the metrics log.
#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub dictionary: Dictionary,
    pub log: Vec<MetricsRecord>,
    pub reseeded_atoms: usize,
}

/// One projected SGD step; returns how many atoms had to be re-randomized.
pub fn sgd_step<R: Rng + ?Sized>(d: &mut Array2<f64>, x: &[f64], a: &[f64], eta: f64, reseed: &mut R) -> usize {
    let recon = linalg::matvec(d, ArrayView1::from(a));
    let (m, n) = d.dim();
    for k in 0..m {
        let err = recon[k] - x[k];
        if err == 0.0 {
            continue;
        }
        for j in 0..n {
            if a[j] != 0.0 {
                d[[k, j]] -= eta * err * a[j];
            }
        }
    }
    d.mapv_inplace(|v| v.max(0.0));
    let mut reseeded = 0;
    for j in 0..n {
        let norm = linalg::norm2(d.column(j));
        if norm > 0.0 {
            d.column_mut(j).mapv_inplace(|v| v / norm);
        } else {
            fill_unit_atom(d.column_mut(j), reseed);
            reseeded += 1;
        }
    }
    reseeded
}

/// Stochastic-gradient dictionary learning with unit-norm atoms.
///
/// `observe` receives each metrics record as soon as it is computed.
pub fn sgd_train(
    dataset: &[Vec<f64>],
    testset: &[Vec<f64>],
    cfg: &SgdConfig,
    mut observe: impl FnMut(&MetricsRecord),
) -> Result<SgdOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = dataset[0].len();
    let mut init_rng = rng::stream(cfg.seed, Stream::WeightInit);
    let mut order = rng::stream(cfg.seed, Stream::SampleOrder);
    let mut reseed = rng::stream(cfg.seed, Stream::AtomReseed);
    let mut d = Dictionary::random_unit(m, cfg.n_atoms, &mut init_rng).into_matrix();
    let ones = vec![1.0; cfg.n_atoms];
    let mut log = Vec::new();
    let mut reseeded = 0;

    let mut record = |iteration: usize, d: &Array2<f64>, log: &mut Vec<MetricsRecord>| -> Result<()> {
        let objective = if testset.is_empty() {
            None
        } else {
            Some(surrogate_objective(d, testset, cfg.lambda1, cfg.tol)?)
        };
        let norms = (0..d.ncols()).map(|j| linalg::norm2(d.column(j)));
        let rec = MetricsRecord::sgd(iteration, objective, norms.sum::<f64>() / d.ncols() as f64);
        observe(&rec);
        log.push(rec);
        Ok(())
    };

    record(0, &d, &mut log)?;
    for it in 1..=cfg.iterations {
        let x = &dataset[order.random_range(0..dataset.len())];
        let solver = CoordinateDescent::new(&d);
        let sol = match solver.solve(x, cfg.lambda1, &ones, None, cfg.tol, surrogate_sweeps(cfg.n_atoms)) {
            Ok(sol) => sol.a,
            Err(Error::NotConverged { best, gap, .. }) => {
                log::warn!("sgd iteration {it}: coding stopped at kkt gap {gap:e}");
                best
            }
            Err(e) => return Err(e),
        };
        reseeded += sgd_step(&mut d, x, &sol, cfg.eta, &mut reseed);
        if it % cfg.metrics_every == 0 || it == cfg.iterations {
            record(it, &d, &mut log)?;
        }
    }
    Ok(SgdOutcome {
        dictionary: Dictionary::new(d)?,
        log,
        reseeded_atoms: reseeded,
    })
}
