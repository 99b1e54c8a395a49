//! Sparse coding with the spiking network.

use ndarray::{Array1, Array2, ArrayView1};

use crate::engine::{run_single_phase, SimParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{weights_from_dictionary, Dictionary, NetworkWeights, PhaseSnapshot, RunConfig};
use crate::oracle::CoordinateDescent;

/// Runs one phase from rest and returns the coding-neuron rates.
pub fn sparse_code(
    weights: &NetworkWeights,
    x: &[f64],
    gamma: f64,
    t_phase: f64,
    params: SimParams,
) -> Result<(Array1<f64>, PhaseSnapshot)> {
    let snap = run_single_phase(weights, x, gamma, t_phase, params)?;
    Ok((snap.a.clone(), snap))
}

/// Rate above which a coefficient counts as active after a window of `t_phase`.
pub fn support_threshold(t_phase: f64) -> f64 {
    1.5 / t_phase
}

/// Indices of active coefficients.
pub fn support(a: ArrayView1<'_, f64>, t_phase: f64) -> Vec<usize> {
    let thr = support_threshold(t_phase);
    a.iter().enumerate().filter(|(_, v)| **v > thr).map(|(i, _)| i).collect()
}

/// Outcome of coding with a perturbed lateral matrix.
#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub a_network: Array1<f64>,
    pub a_oracle: Vec<f64>,
    /// Rescaled penalty weights `s - Delta_H a`.
    pub s_tilde: Vec<f64>,
    /// `|a_network - a_oracle|_inf`.
    pub gap: f64,
    /// Whether `|s - s_tilde|_inf < min(s) / 2`.
    pub s_within_half: bool,
    /// `4 |Delta_H|_1 |a|_inf`, compared against `min(s)`.
    pub smallness: f64,
    pub oracle_kkt_gap: f64,
}

/// Entrywise l1 norm.
fn l1(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Codes `x` with `H = D^T D + lambda1 (1 - gamma) Delta_H` and checks the
/// rates against the exact code under the implied rescaled penalty.
pub fn verify_perturbation(
    d: &Dictionary,
    delta_h: &Array2<f64>,
    gamma: f64,
    x: &[f64],
    cfg: &RunConfig,
) -> Result<PerturbationReport> {
    let n = d.cols();
    if delta_h.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "Delta_H is {:?}, expected ({n}, {n})",
            delta_h.dim()
        )));
    }
    let mut w = weights_from_dictionary(d, cfg.lambda1, gamma)?;
    let scale = cfg.lambda1 * (1.0 - gamma);
    w.h.scaled_add(scale, delta_h);
    if let Some(i) = (0..n).find(|&i| !(w.h[[i, i]] > 0.0)) {
        return Err(Error::ThresholdUnderflow { index: i, value: w.h[[i, i]] });
    }
    let (a, _) = sparse_code(&w, x, gamma, cfg.t_phase, SimParams::from(cfg))?;

    let min_s = w.s.iter().copied().fold(f64::INFINITY, f64::min);
    let smallness = 4.0 * l1(delta_h) * linalg::max_abs(a.iter().copied());
    if !(smallness < min_s) {
        return Err(Error::PerturbationTooLarge { lhs: smallness, min_s });
    }
    let eta = linalg::matvec(delta_h, a.view());
    let s_tilde: Vec<f64> = (0..n).map(|i| w.s[i] - eta[i]).collect();
    let shift = linalg::max_abs(eta.iter().copied());

    let sol = CoordinateDescent::new(d.matrix()).solve(x, cfg.lambda1, &s_tilde, None, 1e-10, 1000 * n.max(1))?;
    let gap = linalg::max_abs(a.iter().zip(&sol.a).map(|(p, q)| p - q));
    Ok(PerturbationReport {
        a_network: a,
        a_oracle: sol.a,
        s_tilde,
        gap,
        s_within_half: shift < min_s / 2.0,
        smallness,
        oracle_kkt_gap: sol.kkt_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dictionary_soft_thresholds() {
        let w = weights_from_dictionary(&Dictionary::identity(2), 0.5, 0.0).unwrap();
        let (a, _) = sparse_code(&w, &[1.0, 0.1], 0.0, 200.0, SimParams::default()).unwrap();
        assert!((a[0] - 0.5).abs() <= 0.02, "{a}");
        assert_eq!(a[1], 0.0);
        assert_eq!(support(a.view(), 200.0), vec![0]);
    }

    #[test]
    fn zero_input_zero_code() {
        let w = weights_from_dictionary(&Dictionary::identity(3), 0.1, 0.0).unwrap();
        let (a, _) = sparse_code(&w, &[0.0; 3], 0.0, 20.0, SimParams::default()).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn oversized_perturbation_is_rejected() {
        let d = Dictionary::identity(2);
        let cfg = RunConfig {
            t_phase: 50.0,
            lambda1: 0.1,
            ..RunConfig::default()
        };
        let delta = Array2::from_elem((2, 2), 1.0);
        let r = verify_perturbation(&d, &delta, 0.0, &[1.0, 0.8], &cfg);
        assert!(matches!(r, Err(Error::PerturbationTooLarge { .. })), "{r:?}");
    }
}
