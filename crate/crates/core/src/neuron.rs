//! Discrete leaky integrate-and-fire dynamics with soft reset.
//!
//! ```text
//! u[t+1] = leak * (u[t] - v_th * s[t]) + I[t+1]
//! s[t+1] = H(u[t+1] - v_th)
//! ```
//!
//! The surrogate `psi` is the derivative of a logistic firing probability
//! with temperature `a1`, so the deterministic model, its sigmoid relaxation
//! and the stochastic (Bernoulli) neuron all share one local derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifConfig {
    pub v_th: f64,
    /// Per-step decay factor, `1 - 1/tau_m`.
    pub leak: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self { v_th: 1.0, leak: 0.5 }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::config("lif.leak", "must lie in [0, 1)"));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::config("lif.v_th", "must be positive"));
        }
        Ok(())
    }

    pub fn from_time_constant(tau_m: f64, v_th: f64) -> Self {
        Self { v_th, leak: 1.0 - 1.0 / tau_m }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub a1: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { a1: 0.25 }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a1 > 0.0) {
            return Err(Error::config("surrogate.a1", "must be positive"));
        }
        Ok(())
    }
}

/// Firing-probability family for stochastic neurons.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiringCdf {
    /// Logistic noise: `F(x) = sigmoid(x / a1)`.
    #[default]
    Sigmoid,
    /// Gaussian noise: `F(x) = Phi(x / a1)`.
    Erf,
}

impl FiringCdf {
    pub fn prob(self, x: f64, a1: f64) -> f64 {
        match self {
            FiringCdf::Sigmoid => sigmoid(x / a1),
            FiringCdf::Erf => 0.5 * (1.0 + libm::erf(x / (a1 * std::f64::consts::SQRT_2))),
        }
    }

    pub fn density(self, x: f64, a1: f64) -> f64 {
        match self {
            FiringCdf::Sigmoid => {
                let p = sigmoid(x / a1);
                p * (1.0 - p) / a1
            }
            FiringCdf::Erf => {
                let y = x / a1;
                (-0.5 * y * y).exp() / (a1 * (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticNeuronConfig {
    pub enabled: bool,
    pub cdf: FiringCdf,
}

/// How membrane potential becomes output activity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    /// `H(u - v_th)`.
    #[default]
    Deterministic,
    /// `sigmoid((u - v_th) / a1)`: a differentiable stand-in used by gradient oracles.
    SigmoidRelaxed,
    /// Bernoulli spikes with `p = F(u - v_th)`.
    Stochastic(FiringCdf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub u: Tensor,
    pub s: Tensor,
}

impl NeuronState {
    /// Resting state: zero potential, no spikes.
    pub fn resting(shape: &[usize]) -> Self {
        Self { u: Tensor::zeros(shape), s: Tensor::zeros(shape) }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `psi(u) = (1/a1) e^{(v_th-u)/a1} / (1 + e^{(v_th-u)/a1})^2`.
#[inline]
pub fn surrogate(u: f64, v_th: f64, a1: f64) -> f64 {
    let p = sigmoid((u - v_th) / a1);
    p * (1.0 - p) / a1
}

/// Leak, integrate and reset in place; returns nothing so the caller decides
/// how spikes are generated.
#[inline]
pub(crate) fn integrate(u: &mut [f64], s: &[f64], current: &[f64], cfg: &LifConfig) {
    for ((ui, &si), &ii) in u.iter_mut().zip(s).zip(current) {
        *ui = cfg.leak * (*ui - cfg.v_th * si) + ii;
    }
}

pub(crate) fn fire(u: &[f64], s: &mut [f64], cfg: &LifConfig, mode: SpikeMode, a1: f64, rng: Option<&mut RngState>) -> Result<()> {
    match mode {
        SpikeMode::Deterministic => {
            for (si, &ui) in s.iter_mut().zip(u) {
                *si = heaviside(ui - cfg.v_th);
            }
        }
        SpikeMode::SigmoidRelaxed => {
            for (si, &ui) in s.iter_mut().zip(u) {
                *si = sigmoid((ui - cfg.v_th) / a1);
            }
        }
        SpikeMode::Stochastic(cdf) => {
            let rng = rng.ok_or_else(|| Error::InvalidArgument("stochastic spiking needs a random stream".into()))?;
            for (si, &ui) in s.iter_mut().zip(u) {
                *si = if rng.bernoulli(cdf.prob(ui - cfg.v_th, a1)) { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(())
}

/// One deterministic LIF update; `input_current` is the already-summed `W s + b`.
pub fn lif_step(state: &NeuronState, input_current: &Tensor, cfg: &LifConfig) -> Result<NeuronState> {
    state.u.ensure_shape("lif_step (s)", state.s.shape())?;
    state.u.ensure_shape("lif_step (input)", input_current.shape())?;
    let mut u = state.u.clone();
    let mut s = state.s.clone();
    integrate(u.data_mut(), state.s.data(), input_current.data(), cfg);
    fire(u.data(), s.data_mut(), cfg, SpikeMode::Deterministic, 1.0, None)?;
    Ok(NeuronState { u, s })
}

pub fn surrogate_deriv(u: &Tensor, cfg: &LifConfig, sg: &SurrogateConfig) -> Tensor {
    u.map(|v| surrogate(v, cfg.v_th, sg.a1))
}

/// Bernoulli spikes with probability `F(u - v_th)`, using `a1` as the cdf scale.
pub fn stochastic_spike(
    u: &Tensor,
    cfg: &LifConfig,
    st: &StochasticNeuronConfig,
    sg: &SurrogateConfig,
    rng: &mut RngState,
) -> Result<Tensor> {
    if !st.enabled {
        return Err(Error::InvalidArgument("stochastic neuron is disabled".into()));
    }
    let mut s = Tensor::zeros(u.shape());
    fire(u.data(), s.data_mut(), cfg, SpikeMode::Stochastic(st.cdf), sg.a1, Some(rng))?;
    Ok(s)
}
