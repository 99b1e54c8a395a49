//! Fixed-step simulation of the two-layer integrate-and-fire network.
//!
//! Coding neuron `i` has bias `-(1-gamma) lambda1 s_i`, threshold `H_ii`,
//! excitatory input `F_ik` from input neuron `k` and inhibitory input `-H_ij`
//! from coding neuron `j != i`. Input neuron `k` has bias `(1-gamma) x_k`,
//! threshold 1 and excitatory feedback `gamma B_kj` from coding neuron `j`.
//!
//! Synapses share the kernel `alpha(t) = e^{-t}`, so each neuron keeps one
//! scalar trace holding the undelivered synaptic charge. A spike adds its
//! weight to every destination trace at the end of the step; during a step the
//! trace releases `trace * (1 - e^{-dt})` of charge, which is the exact
//! integral of the kernel over the step, so every spike delivers exactly its
//! weight in total.
//!
//! The feedback weight `gamma B` changes between phases while the spike
//! history does not. Input-neuron traces therefore accumulate `B` alone and
//! the current feedback strength is applied on release, so the feedback
//! current is always `gamma B (alpha * sigma)(t)` over the whole history.
//!
//! Potentials are reset by subtracting the threshold. The charge that
//! overshoots the threshold inside a step is kept, which makes
//! `u - theta a = (rho(end) - rho(start)) / T` hold exactly on the grid.

use ndarray::{Array1, Array2};

use crate::error::{Error, Layer, Result};
use crate::linalg;
use crate::model::{AvgReset, NetworkWeights, NeuronState, PhaseSnapshot, RunConfig};

/// Parameters that stay fixed over the lifetime of one simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub dt: f64,
    pub current_bound: f64,
    pub avg_reset: AvgReset,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1.0 / 32.0,
            current_bound: 100.0,
            avg_reset: AvgReset::ResetAtPhase,
        }
    }
}

impl From<&RunConfig> for SimParams {
    fn from(c: &RunConfig) -> Self {
        Self {
            dt: c.dt,
            current_bound: c.current_bound,
            avg_reset: c.avg_reset,
        }
    }
}

/// One logged spike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeEvent {
    pub layer: Layer,
    pub neuron: usize,
    pub t: f64,
}

/// Spikes emitted by one call to [`NetworkSim::step`], in ascending index order.
#[derive(Debug, Clone, Copy)]
pub struct StepSpikes<'a> {
    pub coding: &'a [usize],
    pub input: &'a [usize],
}

/// Advances a single neuron by one step and reports whether it spiked.
///
/// `release` is the fraction of the trace delivered during the step,
/// `1 - e^{-dt}`; the trace keeps the remaining `e^{-dt}` share.
#[inline]
pub fn advance_neuron(state: &mut NeuronState, bias: f64, threshold: f64, dt: f64, release: f64) -> bool {
    advance_neuron_with_gain(state, bias, threshold, dt, release, 1.0)
}

/// [`advance_neuron`] where the released trace charge is scaled by `gain`.
#[inline]
pub fn advance_neuron_with_gain(
    state: &mut NeuronState,
    bias: f64,
    threshold: f64,
    dt: f64,
    release: f64,
    gain: f64,
) -> bool {
    let released = state.trace * release;
    state.trace -= released;
    let charge = bias * dt + gain * released;
    state.current = charge / dt;
    state.potential += charge;
    state.current_integral += charge;
    if state.potential >= threshold {
        state.potential -= threshold;
        state.spike_count += 1;
        true
    } else {
        false
    }
}

/// Mutable simulation of one network on one input image.
#[derive(Debug, Clone)]
pub struct NetworkSim<'w> {
    weights: &'w NetworkWeights,
    // Source-major copies: row j holds the weights leaving neuron j.
    h_by_source: Array2<f64>,
    b_by_source: Array2<f64>,
    f_by_source: Array2<f64>,
    gamma: f64,
    x: Array1<f64>,
    coding: Vec<NeuronState>,
    input: Vec<NeuronState>,
    coding_bias: Vec<f64>,
    input_bias: Vec<f64>,
    params: SimParams,
    release: f64,
    t: f64,
    phases_run: usize,
    peak_current: f64,
    coding_spikes: Vec<usize>,
    input_spikes: Vec<usize>,
    spike_log: Option<Vec<SpikeEvent>>,
}

impl<'w> NetworkSim<'w> {
    pub fn new(weights: &'w NetworkWeights, x: &[f64], params: SimParams) -> Result<Self> {
        let n = weights.n_coding();
        let m = weights.n_input();
        if weights.h.dim() != (n, n) || weights.f.dim() != (n, m) || weights.b.dim() != (m, n) {
            return Err(Error::DimensionMismatch(format!(
                "F {:?}, B {:?}, H {:?}",
                weights.f.dim(),
                weights.b.dim(),
                weights.h.dim()
            )));
        }
        if weights.s.len() != n {
            return Err(Error::DimensionMismatch(format!("s has length {}, expected {n}", weights.s.len())));
        }
        if x.len() != m {
            return Err(Error::DimensionMismatch(format!("image has {} pixels, network expects {m}", x.len())));
        }
        if let Some((k, v)) = x.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidValue(format!("input pixel {k} = {v} must be finite and >= 0")));
        }
        if let Some((i, v)) = weights.h.diag().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::ThresholdUnderflow { index: i, value: *v });
        }
        if !(params.dt > 0.0) || !(params.current_bound > 0.0) {
            return Err(Error::InvalidValue(format!("dt and current_bound must be > 0: {params:?}")));
        }
        let mut sim = Self {
            weights,
            h_by_source: weights.h.t().to_owned(),
            b_by_source: weights.b.t().to_owned(),
            f_by_source: weights.f.t().to_owned(),
            gamma: weights.gamma,
            x: Array1::from_vec(x.to_vec()),
            coding: vec![NeuronState::default(); n],
            input: vec![NeuronState::default(); m],
            coding_bias: vec![0.0; n],
            input_bias: vec![0.0; m],
            params,
            release: -(-params.dt).exp_m1(),
            t: 0.0,
            phases_run: 0,
            peak_current: 0.0,
            coding_spikes: Vec::with_capacity(n),
            input_spikes: Vec::with_capacity(m),
            spike_log: None,
        };
        sim.set_gamma(weights.gamma)?;
        Ok(sim)
    }

    pub fn weights(&self) -> &NetworkWeights {
        self.weights
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn coding_states(&self) -> &[NeuronState] {
        &self.coding
    }

    pub fn input_states(&self) -> &[NeuronState] {
        &self.input
    }

    pub fn coding_bias(&self) -> &[f64] {
        &self.coding_bias
    }

    pub fn input_bias(&self) -> &[f64] {
        &self.input_bias
    }

    /// Largest `|mu|` since the current phase started.
    pub fn peak_current(&self) -> f64 {
        self.peak_current
    }

    pub fn enable_spike_log(&mut self) {
        if self.spike_log.is_none() {
            self.spike_log = Some(Vec::new());
        }
    }

    pub fn spike_log(&self) -> Option<&[SpikeEvent]> {
        self.spike_log.as_deref()
    }

    pub fn take_spike_log(&mut self) -> Option<Vec<SpikeEvent>> {
        self.spike_log.take()
    }

    /// Sets the feedback strength and recomputes both layers' biases.
    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidValue(format!("gamma must be in [0,1), got {gamma}")));
        }
        self.gamma = gamma;
        let keep = 1.0 - gamma;
        let lambda1 = self.weights.lambda1;
        for (bias, s) in self.coding_bias.iter_mut().zip(self.weights.s.iter()) {
            *bias = -keep * lambda1 * s;
        }
        for (bias, x) in self.input_bias.iter_mut().zip(self.x.iter()) {
            *bias = keep * x;
        }
        Ok(())
    }

    /// One synchronous step of length `dt`.
    pub fn step(&mut self) -> Result<StepSpikes<'_>> {
        let dt = self.params.dt;
        let bound = self.params.current_bound;
        let release = self.release;
        let t_end = self.t + dt;
        self.coding_spikes.clear();
        self.input_spikes.clear();

        for (i, st) in self.coding.iter_mut().enumerate() {
            let theta = self.weights.h[[i, i]];
            if advance_neuron(st, self.coding_bias[i], theta, dt, release) {
                self.coding_spikes.push(i);
            }
            let mu = st.current.abs();
            if !(mu <= bound) {
                return Err(Error::CurrentBoundExceeded {
                    time: t_end,
                    layer: Layer::Coding,
                    neuron: i,
                    current: st.current,
                    bound,
                });
            }
            self.peak_current = self.peak_current.max(mu);
        }
        for (k, st) in self.input.iter_mut().enumerate() {
            if advance_neuron_with_gain(st, self.input_bias[k], 1.0, dt, release, self.gamma) {
                self.input_spikes.push(k);
            }
            let mu = st.current.abs();
            if !(mu <= bound) {
                return Err(Error::CurrentBoundExceeded {
                    time: t_end,
                    layer: Layer::Input,
                    neuron: k,
                    current: st.current,
                    bound,
                });
            }
            self.peak_current = self.peak_current.max(mu);
        }

        // Delivery, source-ascending: input spikes, then coding spikes.
        for &k in &self.input_spikes {
            let row = self.f_by_source.row(k);
            for (st, w) in self.coding.iter_mut().zip(row.iter()) {
                st.trace += w;
            }
        }
        for &j in &self.coding_spikes {
            let lateral = self.h_by_source.row(j);
            for (i, (st, w)) in self.coding.iter_mut().zip(lateral.iter()).enumerate() {
                if i != j {
                    st.trace -= w;
                }
            }
            let feedback = self.b_by_source.row(j);
            for (st, w) in self.input.iter_mut().zip(feedback.iter()) {
                st.trace += w;
            }
        }

        if let Some(log) = self.spike_log.as_mut() {
            for &k in &self.input_spikes {
                log.push(SpikeEvent { layer: Layer::Input, neuron: k, t: t_end });
            }
            for &i in &self.coding_spikes {
                log.push(SpikeEvent { layer: Layer::Coding, neuron: i, t: t_end });
            }
        }

        self.t = t_end;
        Ok(StepSpikes {
            coding: &self.coding_spikes,
            input: &self.input_spikes,
        })
    }

    /// Runs one phase at feedback strength `gamma` for duration `t_phase`.
    ///
    /// Currents, potentials and traces carry over from the previous phase.
    pub fn run_phase(&mut self, gamma: f64, t_phase: f64) -> Result<PhaseSnapshot> {
        let dt = self.params.dt;
        if !(t_phase >= dt) {
            return Err(Error::InvalidValue(format!("phase duration {t_phase} must be >= dt {dt}")));
        }
        self.set_gamma(gamma)?;
        if self.params.avg_reset == AvgReset::ResetAtPhase || self.phases_run == 0 {
            let start = self.t;
            for st in self.coding.iter_mut().chain(self.input.iter_mut()) {
                st.spike_count = 0;
                st.current_integral = 0.0;
                st.window_start = start;
            }
        }
        self.peak_current = 0.0;
        let steps = (t_phase / dt).round() as usize;
        for _ in 0..steps {
            self.step()?;
        }
        self.phases_run += 1;
        Ok(self.snapshot())
    }

    /// Averages over the current measuring window.
    pub fn snapshot(&self) -> PhaseSnapshot {
        let start = self.coding.first().or(self.input.first()).map_or(0.0, |s| s.window_start);
        let dur = self.t - start;
        let rate = |st: &NeuronState| if dur > 0.0 { st.spike_count as f64 / dur } else { 0.0 };
        let avg = |st: &NeuronState| if dur > 0.0 { st.current_integral / dur } else { 0.0 };
        let a = Array1::from_iter(self.coding.iter().map(rate));
        let u = Array1::from_iter(self.coding.iter().map(avg));
        let b = Array1::from_iter(self.input.iter().map(rate));
        let v = Array1::from_iter(self.input.iter().map(avg));
        let theta = self.weights.h.diag();
        let e = Array1::from_iter((0..a.len()).map(|i| u[i] - theta[i] * a[i]));
        let f = &v - &b;
        PhaseSnapshot {
            a,
            b,
            u,
            v,
            e,
            f,
            gamma_used: self.gamma,
            window: (start, self.t),
            peak_current: self.peak_current,
        }
    }
}

/// Convenience: fresh simulation, one phase.
pub fn run_single_phase(
    weights: &NetworkWeights,
    x: &[f64],
    gamma: f64,
    t_phase: f64,
    params: SimParams,
) -> Result<PhaseSnapshot> {
    let mut sim = NetworkSim::new(weights, x, params)?;
    sim.run_phase(gamma, t_phase)
}

/// Residuals of the non-negative sparse-coding optimality conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct KktResiduals {
    /// Positive part of `F x - lambda1 s - H a`, per coding neuron.
    pub stationarity_gap: Array1<f64>,
    /// `|a . (F x - lambda1 s - H a)|_inf`.
    pub complementarity: f64,
    /// `|min(a, 0)|_inf`.
    pub negativity: f64,
}

impl KktResiduals {
    pub fn max_stationarity(&self) -> f64 {
        linalg::max_abs(self.stationarity_gap.iter().copied())
    }

    pub fn worst(&self) -> f64 {
        self.max_stationarity().max(self.complementarity).max(self.negativity)
    }
}

/// KKT residuals of an arbitrary code `a` under the network's weights.
pub fn kkt_residuals_for_code(a: &[f64], weights: &NetworkWeights, x: &[f64]) -> KktResiduals {
    let av = ndarray::ArrayView1::from(a);
    let fx = linalg::matvec(&weights.f, ndarray::ArrayView1::from(x));
    let ha = linalg::matvec(&weights.h, av);
    let r: Array1<f64> = Array1::from_iter(
        (0..a.len()).map(|i| fx[i] - weights.lambda1 * weights.s[i] - ha[i]),
    );
    KktResiduals {
        stationarity_gap: r.mapv(|v| v.max(0.0)),
        complementarity: linalg::max_abs(a.iter().zip(r.iter()).map(|(a, r)| a * r)),
        negativity: linalg::max_abs(a.iter().map(|v| v.min(0.0))),
    }
}

/// KKT residuals of a snapshot's coding rates.
pub fn kkt_residuals(snap: &PhaseSnapshot, weights: &NetworkWeights, x: &[f64]) -> KktResiduals {
    kkt_residuals_for_code(snap.a.as_slice().expect("contiguous"), weights, x)
}
