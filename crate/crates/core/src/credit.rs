//! Spatial credit assignment: per-step error signals for every hidden layer.
//!
//! All engines read the same [`StepRecord`] and emit an [`ErrorSignal`] of
//! identical shape, so the online learner never needs to know which one ran.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, PerturbRecord, StepRecord};
use crate::neuron::surrogate;
use crate::numerics::{gemm, RngState, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    BpSg,
    Dfa,
    ZoSp,
    #[default]
    Opzo,
}

impl Engine {
    pub const ALL: [Engine; 4] = [Engine::BpSg, Engine::Dfa, Engine::ZoSp, Engine::Opzo];

    pub fn as_str(self) -> &'static str {
        match self {
            Engine::BpSg => "bp_sg",
            Engine::Dfa => "dfa",
            Engine::ZoSp => "zo_sp",
            Engine::Opzo => "opzo",
        }
    }

    /// Whether training injects noise during the forward pass.
    pub fn perturbs(self) -> bool {
        matches!(self, Engine::ZoSp | Engine::Opzo)
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Engine::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::config("engine", format!("unknown engine `{s}` (expected bp_sg, dfa, zo_sp or opzo)")))
    }
}

/// `ce_weight * CE(softmax(o), y) + (1 - ce_weight) * 0.5 * ||o - y||^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub ce_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { ce_weight: 0.9 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ce_weight) {
            return Err(Error::config("loss.ce_weight", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// `dL/do` per sample, `[batch, classes]`.
    pub error: Tensor,
}

pub fn softmax_row(o: &[f64], out: &mut [f64]) {
    let mx = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, v) in out.iter_mut().zip(o) {
        *p = (v - mx).exp();
        z += *p;
    }
    out.iter_mut().for_each(|p| *p /= z);
}

pub fn loss_and_error(o: &Tensor, labels: &[usize], loss: &LossSpec) -> Result<LossOutput> {
    o.ensure_finite("loss input")?;
    let (batch, m) = (o.rows(), o.cols());
    if labels.len() != batch {
        return Err(Error::shape("loss labels", &[batch], &[labels.len()]));
    }
    let w = loss.ce_weight;
    let mut error = Tensor::zeros(&[batch, m]);
    let mut per_sample = Vec::with_capacity(batch);
    let mut p = vec![0.0; m];
    for (b, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::LabelOutOfRange { label: y, classes: m });
        }
        let row = o.row(b);
        softmax_row(row, &mut p);
        let ce = -(p[y].max(f64::MIN_POSITIVE)).ln();
        let mut mse = 0.0;
        let e = error.row_mut(b);
        for k in 0..m {
            let onehot = if k == y { 1.0 } else { 0.0 };
            let d = row[k] - onehot;
            mse += 0.5 * d * d;
            e[k] = w * (p[k] - onehot) + (1.0 - w) * d;
        }
        per_sample.push(w * ce + (1.0 - w) * mse);
    }
    let mean = per_sample.iter().sum::<f64>() / batch as f64;
    Ok(LossOutput { per_sample, mean, error })
}

/// Error with respect to each hidden layer's membrane potential plus the
/// readout's output error.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSignal {
    /// `[batch, width_l]` per hidden layer.
    pub hidden: Vec<Tensor>,
    /// `[batch, classes]`.
    pub output: Tensor,
}

impl ErrorSignal {
    pub fn zeros_like(rec: &StepRecord) -> Self {
        Self { hidden: rec.u.iter().map(|u| Tensor::zeros(u.shape())).collect(), output: Tensor::zeros(rec.output.shape()) }
    }

    pub fn is_zero(&self) -> bool {
        self.hidden.iter().chain(std::iter::once(&self.output)).all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    RandomFixed,
    MomentumJacobian,
}

impl FeedbackKind {
    fn name(self) -> &'static str {
        match self {
            FeedbackKind::RandomFixed => "random_fixed",
            FeedbackKind::MomentumJacobian => "momentum_jacobian",
        }
    }
}

/// Direct feedback matrices, one `[width_l, classes]` matrix per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    pub kind: FeedbackKind,
    pub matrices: Vec<Tensor>,
    pub momentum: f64,
}

impl FeedbackState {
    /// Fixed `U(-1/sqrt(m), 1/sqrt(m))` entries, drawn once.
    pub fn random_fixed(widths: &[usize], classes: usize, rng: &mut RngState) -> Self {
        let k = 1.0 / (classes as f64).sqrt();
        let matrices = widths
            .iter()
            .map(|&n| {
                let mut t = Tensor::zeros(&[n, classes]);
                t.data_mut().iter_mut().for_each(|v| *v = (2.0 * rng.uniform() - 1.0) * k);
                t
            })
            .collect();
        Self { kind: FeedbackKind::RandomFixed, matrices, momentum: 1.0 }
    }

    /// All-zero momentum feedback.
    pub fn momentum_jacobian(widths: &[usize], classes: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("feedback_momentum", "must lie in [0, 1]"));
        }
        Ok(Self {
            kind: FeedbackKind::MomentumJacobian,
            matrices: widths.iter().map(|&n| Tensor::zeros(&[n, classes])).collect(),
            momentum,
        })
    }

    fn require(&self, engine: &'static str, kind: FeedbackKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::FeedbackKindMismatch { engine, expected: kind.name() });
        }
        Ok(())
    }
}

/// Options shared by the surrogate-weighted engines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalOptions {
    /// Multiply direct feedback by the local surrogate derivative.
    pub apply_surrogate: bool,
}

impl Default for SignalOptions {
    fn default() -> Self {
        Self { apply_surrogate: true }
    }
}

/// `g *= psi(u) * mask` in place.
fn local_factor(g: &mut [f64], rec: &StepRecord, net: &Network, l: usize, apply_surrogate: bool) {
    let (v_th, a1) = (net.spec.lif.v_th, net.spec.surrogate.a1);
    if apply_surrogate {
        for (gi, &u) in g.iter_mut().zip(rec.u[l].data()) {
            *gi *= surrogate(u, v_th, a1);
        }
    }
    if let Some(m) = &rec.masks[l] {
        g.iter_mut().zip(m.data()).for_each(|(gi, k)| *gi *= k);
    }
}

/// Backward sweep through the spatial weights of the current step only.
///
/// `weights` are the effective hidden weights of the rollout.
pub fn bp_sg_errors(rec: &StepRecord, net: &Network, weights: &[Tensor], e: &Tensor) -> Result<ErrorSignal> {
    let batch = rec.batch();
    let nl = net.hidden.len();
    if rec.u.len() != nl || weights.len() != nl {
        return Err(Error::Missing("tape entry lacks per-layer state".into()));
    }
    e.ensure_shape("output error", rec.output.shape())?;
    let mut hidden = vec![Tensor::zeros(&[0]); nl];
    let ro = &net.readout;
    let mut up = vec![0.0; batch * ro.kind.in_dim()];
    ro.kind.backward_input(ro.w.data(), e.data(), batch, &mut up);
    for l in (0..nl).rev() {
        let layer = &net.hidden[l];
        let mut g = layer.unpool(&up, batch);
        local_factor(&mut g, rec, net, l, true);
        if l > 0 {
            up = vec![0.0; batch * layer.params.kind.in_dim()];
            layer.params.kind.backward_input(weights[l].data(), &g, batch, &mut up);
        }
        hidden[l] = Tensor::new(vec![batch, layer.width()], g)?;
    }
    Ok(ErrorSignal { hidden, output: e.clone() })
}

/// `(e B^T) * psi(u) * mask` for one layer.
fn direct_signal(e: &Tensor, fb: &Tensor, rec: &StepRecord, net: &Network, l: usize, opts: SignalOptions) -> Result<Tensor> {
    let (batch, m) = (e.rows(), e.cols());
    let n = net.hidden[l].width();
    fb.ensure_shape("feedback matrix", &[n, m])?;
    let mut g = vec![0.0; batch * n];
    gemm(batch, m, n, 1.0, e.data(), false, fb.data(), true, 0.0, &mut g);
    local_factor(&mut g, rec, net, l, opts.apply_surrogate);
    Tensor::new(vec![batch, n], g)
}

fn direct_errors(e: &Tensor, fb: &FeedbackState, rec: &StepRecord, net: &Network, opts: SignalOptions) -> Result<ErrorSignal> {
    e.ensure_shape("output error", rec.output.shape())?;
    if fb.matrices.len() != net.hidden.len() {
        return Err(Error::shape("feedback layers", &[net.hidden.len()], &[fb.matrices.len()]));
    }
    let hidden = (0..net.hidden.len()).map(|l| direct_signal(e, &fb.matrices[l], rec, net, l, opts)).collect::<Result<Vec<_>>>()?;
    Ok(ErrorSignal { hidden, output: e.clone() })
}

/// Single layer of a direct-feedback signal; layers are independent.
pub fn direct_layer_signal(
    e: &Tensor,
    fb: &FeedbackState,
    rec: &StepRecord,
    net: &Network,
    l: usize,
    opts: SignalOptions,
) -> Result<Tensor> {
    direct_signal(e, &fb.matrices[l], rec, net, l, opts)
}

pub fn dfa_errors(e: &Tensor, fb: &FeedbackState, rec: &StepRecord, net: &Network, opts: SignalOptions) -> Result<ErrorSignal> {
    fb.require("dfa", FeedbackKind::RandomFixed)?;
    direct_errors(e, fb, rec, net, opts)
}

/// `e_tilde` is the loss gradient at the perturbed output.
pub fn opzo_errors(e_tilde: &Tensor, fb: &FeedbackState, rec: &StepRecord, net: &Network, opts: SignalOptions) -> Result<ErrorSignal> {
    fb.require("opzo", FeedbackKind::MomentumJacobian)?;
    direct_errors(e_tilde, fb, rec, net, opts)
}

/// Node-perturbation single-point estimate: each layer gets
/// `(L_x / alpha) * z_x`, weighted by the local surrogate derivative.
pub fn zo_sp_grad(
    rec: &StepRecord,
    net: &Network,
    loss_tilde: &[f64],
    perturb: &PerturbRecord,
    opts: SignalOptions,
) -> Result<ErrorSignal> {
    if perturb.alpha == 0.0 {
        return Err(Error::InvalidArgument("alpha must be nonzero".into()));
    }
    let batch = rec.batch();
    if loss_tilde.len() != batch {
        return Err(Error::shape("per-sample losses", &[batch], &[loss_tilde.len()]));
    }
    let scaled = |z: &Tensor| -> Tensor {
        let mut out = z.scale(perturb.sign / perturb.alpha);
        for (b, &lx) in loss_tilde.iter().enumerate() {
            out.row_mut(b).iter_mut().for_each(|v| *v *= lx);
        }
        out
    };
    let mut hidden = Vec::with_capacity(net.hidden.len());
    for l in 0..net.hidden.len() {
        let mut g = scaled(&perturb.z[l]);
        local_factor(g.data_mut(), rec, net, l, opts.apply_surrogate);
        hidden.push(g);
    }
    let output = match &perturb.z_out {
        Some(zo) => scaled(zo),
        None => Tensor::zeros(rec.output.shape()),
    };
    Ok(ErrorSignal { hidden, output })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoPointMode {
    #[default]
    Central,
    OneSided,
}

/// Two-evaluation estimate `(f(θ+αz) - f(θ-αz)) / (2α) z`, or the one-sided
/// `(f(θ+αz) - f(θ)) / α z`.
pub fn zo_two_point_grad(mut f: impl FnMut(&Tensor) -> f64, theta: &Tensor, z: &Tensor, alpha: f64, mode: TwoPointMode) -> Result<Tensor> {
    if alpha == 0.0 {
        return Err(Error::InvalidArgument("alpha must be nonzero".into()));
    }
    z.ensure_shape("two-point direction", theta.shape())?;
    let mut plus = theta.clone();
    plus.axpy(alpha, z)?;
    let coef = match mode {
        TwoPointMode::Central => {
            let mut minus = theta.clone();
            minus.axpy(-alpha, z)?;
            (f(&plus) - f(&minus)) / (2.0 * alpha)
        }
        TwoPointMode::OneSided => (f(&plus) - f(theta)) / alpha,
    };
    Ok(z.scale(coef))
}

/// Single-point black-box estimate `f(θ+αz) / α z`.
pub fn zo_single_point_grad(mut f: impl FnMut(&Tensor) -> f64, theta: &Tensor, z: &Tensor, alpha: f64) -> Result<Tensor> {
    if alpha == 0.0 {
        return Err(Error::InvalidArgument("alpha must be nonzero".into()));
    }
    z.ensure_shape("single-point direction", theta.shape())?;
    let mut plus = theta.clone();
    plus.axpy(alpha, z)?;
    Ok(z.scale(f(&plus) / alpha))
}

/// How the momentum feedback is fed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackRule {
    /// `z õ^T`, the form used for training.
    #[default]
    Output,
    /// `z õ^T / α`.
    OutputScaled,
    /// `z (õ - o)^T / α`; needs the clean output.
    DeltaScaled,
}

/// `M_l <- λ M_l + (1-λ) mean_b(z_b v_b^T)` with `v` chosen by `rule`.
pub fn opzo_update_feedback(
    fb: &mut FeedbackState,
    perturb: &PerturbRecord,
    o_tilde: &Tensor,
    o_clean: Option<&Tensor>,
    rule: FeedbackRule,
) -> Result<()> {
    fb.require("opzo", FeedbackKind::MomentumJacobian)?;
    if fb.matrices.len() != perturb.z.len() {
        return Err(Error::shape("feedback layers", &[fb.matrices.len()], &[perturb.z.len()]));
    }
    let (batch, m) = (o_tilde.rows(), o_tilde.cols());
    let v: Tensor = match rule {
        FeedbackRule::Output => o_tilde.clone(),
        FeedbackRule::OutputScaled => o_tilde.scale(1.0 / nonzero_alpha(perturb)?),
        FeedbackRule::DeltaScaled => {
            let o = o_clean.ok_or_else(|| Error::Missing("delta feedback rule needs the clean output".into()))?;
            o.ensure_shape("clean output", o_tilde.shape())?;
            o_tilde.zip_map(o, |a, b| a - b)?.scale(1.0 / nonzero_alpha(perturb)?)
        }
    };
    let lam = fb.momentum;
    let gain = (1.0 - lam) * perturb.sign / batch as f64;
    for (mat, z) in fb.matrices.iter_mut().zip(&perturb.z) {
        let n = z.cols();
        z.ensure_shape("feedback noise", &[batch, n])?;
        mat.ensure_shape("feedback matrix", &[n, m])?;
        gemm(n, batch, m, gain, z.data(), true, v.data(), false, lam, mat.data_mut());
    }
    Ok(())
}

fn nonzero_alpha(p: &PerturbRecord) -> Result<f64> {
    if p.alpha == 0.0 {
        Err(Error::InvalidArgument("alpha must be nonzero".into()))
    } else {
        Ok(p.alpha)
    }
}
