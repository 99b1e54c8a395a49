//! Dictionary learning with contrastive two-phase runs.
//!
//! Each iteration codes one sample twice on the same simulation: first
//! without feedback, then with feedback strength `kappa`. Input-layer rate
//! differences give the reconstruction gradient `g_D`, coding-layer
//! differences give the consistency gradient `g_H`. Every neuron then updates
//! its own row of weights from quantities it holds or receives; the
//! [`local`] module spells those row updates out one neuron at a time.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;

use crate::engine::{NetworkSim, SimParams, SpikeEvent};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::{self, MetricsRecord};
use crate::model::{weights_from_dictionary, Dictionary, InitScheme, NetworkWeights, PhaseSnapshot, RunConfig};
use crate::oracle::{surrogate_objective, DEFAULT_TOL};
use crate::rng::{self, Stream};

/// Snapshots of the two phases of one sample.
#[derive(Debug, Clone)]
pub struct ContrastivePair {
    pub snap0: PhaseSnapshot,
    pub snap_k: PhaseSnapshot,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub g_d: Array1<f64>,
    pub g_h: Array1<f64>,
}

/// Runs `gamma = 0` then `gamma = kappa`, carrying the neuron state over.
pub fn contrastive_run(weights: &NetworkWeights, x: &[f64], cfg: &RunConfig) -> Result<ContrastivePair> {
    let mut sim = NetworkSim::new(weights, x, SimParams::from(cfg))?;
    let snap0 = sim.run_phase(0.0, cfg.t_phase)?;
    let snap_k = sim.run_phase(cfg.kappa, cfg.t_phase)?;
    Ok(ContrastivePair {
        snap0,
        snap_k,
        kappa: cfg.kappa,
    })
}

/// [`contrastive_run`] with every spike of both phases recorded.
pub fn contrastive_run_logged(
    weights: &NetworkWeights,
    x: &[f64],
    cfg: &RunConfig,
) -> Result<(ContrastivePair, Vec<SpikeEvent>)> {
    let mut sim = NetworkSim::new(weights, x, SimParams::from(cfg))?;
    sim.enable_spike_log();
    let snap0 = sim.run_phase(0.0, cfg.t_phase)?;
    let snap_k = sim.run_phase(cfg.kappa, cfg.t_phase)?;
    let log = sim.take_spike_log().unwrap_or_default();
    Ok((
        ContrastivePair {
            snap0,
            snap_k,
            kappa: cfg.kappa,
        },
        log,
    ))
}

/// `g_D = b_kappa - b_0`, `g_H = (1-kappa) H (a_0 - a_kappa) + (1-kappa) e_0 - e_kappa`.
pub fn extract_gradients(pair: &ContrastivePair, weights: &NetworkWeights) -> Gradients {
    let (s0, sk) = (&pair.snap0, &pair.snap_k);
    let kbar = 1.0 - pair.kappa;
    let g_d = &sk.b - &s0.b;
    let da = &s0.a - &sk.a;
    let hda = linalg::matvec(&weights.h, da.view());
    let g_h = Zip::from(&hda)
        .and(&s0.e)
        .and(&sk.e)
        .map_collect(|&hd, &e0, &ek| kbar * hd + (kbar * e0 - ek));
    Gradients { g_d, g_h }
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let col = a.insert_axis(ndarray::Axis(1));
    let row = b.insert_axis(ndarray::Axis(0));
    &col * &row
}

/// Reconstruction update of `F` and `B`, followed by the optional projection.
pub fn update_fb(weights: &mut NetworkWeights, pair: &ContrastivePair, grads: &Gradients, cfg: &RunConfig) {
    let inv_kappa = 1.0 / pair.kappa;
    let ak = pair.snap_k.a.view();
    let step = outer(ak, grads.g_d.view());
    let df = (&step * inv_kappa + &weights.f * cfg.lambda2) * cfg.eta_d;
    let db = (&step.t() * inv_kappa + &weights.b * cfg.lambda2) * cfg.eta_d;
    weights.f = &weights.f - &df;
    weights.b = &weights.b - &db;
    if cfg.project_fb {
        weights.f.mapv_inplace(|v| v.max(0.0));
        weights.b.mapv_inplace(|v| v.max(0.0));
    }
}

/// Catch-up and decay update of `H`, then projection of off-diagonals to
/// `>= 0` and of the diagonal to `>= theta_floor`.
pub fn update_h(weights: &mut NetworkWeights, pair: &ContrastivePair, grads: &Gradients, cfg: &RunConfig) {
    let inv_kappa = 1.0 / pair.kappa;
    let catch_up = outer(grads.g_h.view(), pair.snap_k.a.view()) * (cfg.eta_h * inv_kappa);
    let decay = &weights.h * (2.0 * cfg.eta_d * cfg.lambda2);
    weights.h = &weights.h - &catch_up - &decay;
    project_h(&mut weights.h, cfg.theta_floor);
}

fn project_h(h: &mut Array2<f64>, floor: f64) {
    for ((i, j), v) in h.indexed_iter_mut() {
        *v = if i == j { v.max(floor) } else { v.max(0.0) };
    }
}

/// `s <- diag(H)`.
pub fn scaling_update(weights: &mut NetworkWeights) -> Result<()> {
    let diag = weights.h.diag();
    if let Some((i, v)) = diag.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::ThresholdUnderflow { index: i, value: *v });
    }
    weights.s = diag.to_owned();
    Ok(())
}

/// Frobenius norm of the catch-up matrix `kappa^-1 g_H a_kappa^T`.
pub fn catch_up_norm(pair: &ContrastivePair, grads: &Gradients) -> f64 {
    linalg::norm2(grads.g_h.view()) * linalg::norm2(pair.snap_k.a.view()) / pair.kappa
}

/// What one learning iteration saw.
#[derive(Debug, Clone)]
pub struct Iteration {
    pub pair: ContrastivePair,
    pub grads: Gradients,
}

/// One full iteration on sample `x`: both phases, gradients, all updates.
pub fn iterate(weights: &mut NetworkWeights, x: &[f64], cfg: &RunConfig) -> Result<Iteration> {
    let pair = contrastive_run(weights, x, cfg)?;
    let grads = extract_gradients(&pair, weights);
    update_fb(weights, &pair, &grads, cfg);
    update_h(weights, &pair, &grads, cfg);
    scaling_update(weights)?;
    Ok(Iteration { pair, grads })
}

/// Per-neuron form of the gradients and updates.
///
/// Every function here sees one neuron's stored row, its own snapshot
/// entries, the rates it receives and the broadcast constants.
pub mod local {
    use super::*;

    /// Constants broadcast to every neuron.
    #[derive(Debug, Clone, Copy)]
    pub struct Broadcast {
        pub kappa: f64,
        pub eta_d: f64,
        pub eta_h: f64,
        pub lambda2: f64,
        pub theta_floor: f64,
        pub project_fb: bool,
    }

    impl From<&RunConfig> for Broadcast {
        fn from(c: &RunConfig) -> Self {
            Self {
                kappa: c.kappa,
                eta_d: c.eta_d,
                eta_h: c.eta_h,
                lambda2: c.lambda2,
                theta_floor: c.theta_floor,
                project_fb: c.project_fb,
            }
        }
    }

    /// Input neuron `k`: its rate change between phases.
    pub fn g_d_entry(b0_k: f64, bk_k: f64) -> f64 {
        bk_k - b0_k
    }

    /// Coding neuron `i`: its row of `H`, its own `e` values and the coding
    /// rates it receives over the lateral connections.
    pub fn g_h_entry(
        h_row: ArrayView1<'_, f64>,
        a0: ArrayView1<'_, f64>,
        ak: ArrayView1<'_, f64>,
        e0_i: f64,
        ek_i: f64,
        kappa: f64,
    ) -> f64 {
        let kbar = 1.0 - kappa;
        let da = &a0 - &ak;
        kbar * linalg::dot(h_row, da.view()) + (kbar * e0_i - ek_i)
    }

    /// Coding neuron `i` updates its feedforward row from its own rate and the
    /// input-layer gradient entries carried by the incoming spikes.
    pub fn f_row(row: ArrayView1<'_, f64>, ak_i: f64, g_d: ArrayView1<'_, f64>, p: &Broadcast) -> Array1<f64> {
        let inv_kappa = 1.0 / p.kappa;
        Array1::from_iter(row.iter().zip(g_d.iter()).map(|(&f, &g)| {
            let v = f - ((ak_i * g) * inv_kappa + f * p.lambda2) * p.eta_d;
            if p.project_fb { v.max(0.0) } else { v }
        }))
    }

    /// Input neuron `k` updates its feedback row from its own gradient entry
    /// and the coding rates it receives.
    pub fn b_row(row: ArrayView1<'_, f64>, g_d_k: f64, ak: ArrayView1<'_, f64>, p: &Broadcast) -> Array1<f64> {
        let inv_kappa = 1.0 / p.kappa;
        Array1::from_iter(row.iter().zip(ak.iter()).map(|(&b, &a)| {
            let v = b - ((a * g_d_k) * inv_kappa + b * p.lambda2) * p.eta_d;
            if p.project_fb { v.max(0.0) } else { v }
        }))
    }

    /// Coding neuron `i` updates its lateral row and threshold.
    pub fn h_row(row: ArrayView1<'_, f64>, i: usize, g_h_i: f64, ak: ArrayView1<'_, f64>, p: &Broadcast) -> Array1<f64> {
        let c_catch = p.eta_h * (1.0 / p.kappa);
        let c_decay = 2.0 * p.eta_d * p.lambda2;
        Array1::from_iter(row.iter().zip(ak.iter()).enumerate().map(|(j, (&h, &a))| {
            let v = h - (g_h_i * a) * c_catch - h * c_decay;
            if j == i { v.max(p.theta_floor) } else { v.max(0.0) }
        }))
    }

    /// All gradients, one neuron at a time.
    pub fn gradients(pair: &ContrastivePair, weights: &NetworkWeights) -> Gradients {
        let (s0, sk) = (&pair.snap0, &pair.snap_k);
        let g_d = Array1::from_iter((0..s0.b.len()).map(|k| g_d_entry(s0.b[k], sk.b[k])));
        let g_h = Array1::from_iter((0..s0.a.len()).map(|i| {
            g_h_entry(weights.h.row(i), s0.a.view(), sk.a.view(), s0.e[i], sk.e[i], pair.kappa)
        }));
        Gradients { g_d, g_h }
    }

    /// All weight updates, one neuron at a time, followed by the scaling update.
    pub fn apply_updates(
        weights: &NetworkWeights,
        pair: &ContrastivePair,
        grads: &Gradients,
        p: &Broadcast,
    ) -> NetworkWeights {
        let ak = pair.snap_k.a.view();
        let mut out = weights.clone();
        for i in 0..weights.n_coding() {
            out.f.row_mut(i).assign(&f_row(weights.f.row(i), ak[i], grads.g_d.view(), p));
            out.h.row_mut(i).assign(&h_row(weights.h.row(i), i, grads.g_h[i], ak, p));
            out.s[i] = out.h[[i, i]];
        }
        for k in 0..weights.n_input() {
            out.b.row_mut(k).assign(&b_row(weights.b.row(k), grads.g_d[k], ak, p));
        }
        out
    }
}

/// Initial weights for `m` inputs per `cfg.init_scheme`.
pub fn init_weights<R: Rng + ?Sized>(cfg: &RunConfig, m: usize, rng: &mut R) -> Result<NetworkWeights> {
    let n = cfg.n_atoms;
    match cfg.init_scheme {
        InitScheme::Consistent => {
            let d = Dictionary::random_unit(m, n, rng);
            weights_from_dictionary(&d, cfg.lambda1, 0.0)
        }
        InitScheme::Asymmetric => {
            let ft = Dictionary::random_unit(m, n, rng).into_matrix();
            let b = Dictionary::random_unit(m, n, rng).into_matrix();
            let mut h = Array2::zeros((n, n));
            for ((i, j), v) in h.indexed_iter_mut() {
                *v = if i == j { 1.5 } else { rng.random_range(0.0..1.5) };
            }
            let s = h.diag().to_owned();
            Ok(NetworkWeights {
                f: ft.t().to_owned(),
                b,
                h,
                s,
                lambda1: cfg.lambda1,
                gamma: 0.0,
            })
        }
    }
}

/// Why a training run stopped early.
#[derive(Debug)]
pub struct TrainAbort {
    /// Iteration that failed; the returned weights are from the one before.
    pub iteration: usize,
    pub error: Error,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub log: Vec<MetricsRecord>,
    pub aborted: Option<TrainAbort>,
}

fn record(
    weights: &NetworkWeights,
    iteration: usize,
    testset: &[Vec<f64>],
    max_current: Option<f64>,
    catch_up: Option<f64>,
    lambda1: f64,
) -> Result<MetricsRecord> {
    let objective = if testset.is_empty() {
        None
    } else {
        Some(surrogate_objective(&weights.b, testset, lambda1, DEFAULT_TOL)?)
    };
    let consistency = match metrics::consistency(&weights.h, &weights.f, &weights.b) {
        Ok(c) => Some(c),
        Err(Error::ZeroH) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsRecord {
        method: "snn".into(),
        iteration,
        objective,
        consistency,
        symmetry: Some(metrics::symmetry(&weights.f, &weights.b)?),
        mean_atom_norm: metrics::mean_atom_norm(&weights.b),
        max_current,
        max_s: Some(weights.s.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        catch_up_norm: catch_up,
    })
}

/// Runs the learner from freshly initialized weights.
pub fn train(
    dataset: &[Vec<f64>],
    testset: &[Vec<f64>],
    cfg: &RunConfig,
    observe: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let m = dataset.first().ok_or(Error::EmptyDataset)?.len();
    let weights = init_weights(cfg, m, &mut rng::stream(cfg.seed, Stream::WeightInit))?;
    train_from(weights, dataset, testset, cfg, observe)
}

/// Runs the learner from the given weights.
pub fn train_from(
    mut weights: NetworkWeights,
    dataset: &[Vec<f64>],
    testset: &[Vec<f64>],
    cfg: &RunConfig,
    mut observe: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order = rng::stream(cfg.seed, Stream::SampleOrder);
    let mut log = Vec::new();
    let rec = record(&weights, 0, testset, None, None, cfg.lambda1)?;
    observe(&rec);
    log.push(rec);

    let mut peak: f64 = 0.0;
    for it in 1..=cfg.iterations {
        let x = &dataset[order.random_range(0..dataset.len())];
        let before = weights.clone();
        let step = match iterate(&mut weights, x, cfg) {
            Ok(s) => s,
            Err(error @ Error::CurrentBoundExceeded { .. }) => {
                log::error!("iteration {it}: {error}");
                return Ok(TrainOutcome {
                    weights: before,
                    log,
                    aborted: Some(TrainAbort { iteration: it, error }),
                });
            }
            Err(e) => return Err(e),
        };
        peak = peak.max(step.pair.snap0.peak_current).max(step.pair.snap_k.peak_current);
        if it % cfg.metrics_every == 0 || it == cfg.iterations {
            let g = catch_up_norm(&step.pair, &step.grads);
            let rec = record(&weights, it, testset, Some(peak), Some(g), cfg.lambda1)?;
            log::debug!(
                "iteration {it}: objective {:?} consistency {:?} |G| {g:.3e}",
                rec.objective,
                rec.consistency
            );
            observe(&rec);
            log.push(rec);
            peak = 0.0;
        }
    }
    Ok(TrainOutcome {
        weights,
        log,
        aborted: None,
    })
}

/// Picks the candidate `lambda2` whose short pre-run ends with mean atom norm
/// closest to 1. Returns the choice and every candidate's final norm.
pub fn calibrate_lambda2(
    dataset: &[Vec<f64>],
    cfg: &RunConfig,
    candidates: &[f64],
    iterations: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidValue("no lambda2 candidates".into()));
    }
    let mut results = Vec::with_capacity(candidates.len());
    for &l2 in candidates {
        let c = RunConfig {
            lambda2: l2,
            iterations,
            metrics_every: iterations.max(1),
            ..cfg.clone()
        };
        let out = train(dataset, &[], &c, |_| {})?;
        if let Some(a) = out.aborted {
            return Err(a.error);
        }
        results.push((l2, metrics::mean_atom_norm(&out.weights.b)));
    }
    let best = results
        .iter()
        .min_by(|p, q| (p.1 - 1.0).abs().total_cmp(&(q.1 - 1.0).abs()))
        .map(|p| p.0)
        .expect("non-empty");
    Ok((best, results))
}
