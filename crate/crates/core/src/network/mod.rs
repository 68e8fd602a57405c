//! Spiking layer stacks with a non-spiking affine readout.

mod ops;

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

pub use ops::{ConvGeometry, LayerKind, PoolGeometry};

use crate::error::{Error, Result};
use crate::neuron::{fire, integrate, LifConfig, NeuronState, SpikeMode, SurrogateConfig};
use crate::numerics::{NoiseDistribution, RngState, Tensor};

/// Variance floor used by [`weight_standardize`].
pub const WS_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerParams {
    pub fn zeros(kind: LayerKind) -> Self {
        let w = match kind.weight_shape() {
            Some(s) => Tensor::zeros(&s),
            None => Tensor::zeros(&[0]),
        };
        Self { kind, w, b: Tensor::zeros(&[kind.bias_len()]) }
    }

    /// `U(-k, k)` with `k = scale / sqrt(fan_in)` for weights and biases.
    pub fn init_uniform(kind: LayerKind, scale: f64, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(kind);
        if let Some([_, fan_in]) = kind.weight_shape() {
            let k = scale / (fan_in as f64).sqrt();
            for v in p.w.data_mut().iter_mut().chain(p.b.data_mut()) {
                *v = (2.0 * rng.uniform() - 1.0) * k;
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind.weight_shape() {
            Some(s) => self.w.ensure_shape("layer weight", &s)?,
            None => self.w.ensure_shape("pool weight", &[0])?,
        }
        self.b.ensure_shape("layer bias", &[self.kind.bias_len()])?;
        self.w.ensure_finite("layer weight")?;
        self.b.ensure_finite("layer bias")
    }
}

/// Scaled weight standardization of a `[rows, fan_in]` matrix.
///
/// Each row is centered and divided by its standard deviation, then scaled
/// by `gamma / sqrt(fan_in)`. Rows with variance below [`WS_EPS`] use the floor.
pub fn weight_standardize(w: &Tensor, gamma: f64) -> Result<Tensor> {
    let (rows, fan_in) = ws_dims(w)?;
    let gain = gamma / (fan_in as f64).sqrt();
    let mut out = w.clone();
    for r in 0..rows {
        let row = out.row_mut(r);
        let (mean, var) = crate::numerics::mean_var(row);
        let inv = gain / var.max(WS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Ok(out)
}

/// Gradient with respect to the raw weights given the gradient `g_hat`
/// with respect to the standardized ones.
pub fn weight_standardize_backward(w: &Tensor, g_hat: &Tensor, gamma: f64) -> Result<Tensor> {
    let (rows, fan_in) = ws_dims(w)?;
    g_hat.ensure_shape("weight standardization grad", w.shape())?;
    let n = fan_in as f64;
    let gain = gamma / n.sqrt();
    let mut out = Tensor::zeros(w.shape());
    for r in 0..rows {
        let row = w.row(r);
        let (mean, var) = crate::numerics::mean_var(row);
        let sigma = var.max(WS_EPS).sqrt();
        let gh = g_hat.row(r);
        let dst = out.row_mut(r);
        let gbar = gh.iter().sum::<f64>() / n;
        if var < WS_EPS {
            // sigma is a constant here
            for (d, g) in dst.iter_mut().zip(gh) {
                *d = gain * (g - gbar) / sigma;
            }
            continue;
        }
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sigma).collect();
        let gx = gh.iter().zip(&xhat).map(|(g, x)| g * x).sum::<f64>() / n;
        for ((d, g), x) in dst.iter_mut().zip(gh).zip(&xhat) {
            *d = gain * (g - gbar - x * gx) / sigma;
        }
    }
    Ok(out)
}

fn ws_dims(w: &Tensor) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!("weight standardization expects a [rows, fan_in] matrix, got {:?}", w.shape())));
    }
    let fan_in = w.shape()[1];
    if fan_in < 2 {
        return Err(Error::InvalidArgument(format!("weight standardization needs fan_in >= 2, got {fan_in}")));
    }
    Ok((w.shape()[0], fan_in))
}

/// One token of an architecture string such as `128C3-AP2-256C3-FC`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchToken {
    Fc(usize),
    Conv { channels: usize, kernel: usize },
    Pool(usize),
    Readout,
}

pub fn parse_arch(arch: &str) -> Result<Vec<ArchToken>> {
    let bad = |tok: &str| Error::config("arch", format!("unrecognized layer token `{tok}`"));
    let parse_num = |s: &str, tok: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(bad(tok)),
        }
    };
    let mut out = Vec::new();
    for tok in arch.split('-').map(str::trim) {
        let t = if tok == "FC" {
            ArchToken::Readout
        } else if let Some(n) = tok.strip_prefix("FC") {
            ArchToken::Fc(parse_num(n, tok)?)
        } else if let Some(k) = tok.strip_prefix("AP") {
            ArchToken::Pool(parse_num(k, tok)?)
        } else if let Some((c, k)) = tok.split_once('C') {
            ArchToken::Conv { channels: parse_num(c, tok)?, kernel: parse_num(k, tok)? }
        } else {
            return Err(bad(tok));
        };
        out.push(t);
    }
    match out.iter().position(|t| *t == ArchToken::Readout) {
        Some(i) if i + 1 == out.len() => Ok(out),
        _ => Err(Error::config("arch", "must end with exactly one readout `FC`")),
    }
}

/// Named architectures.
pub fn preset_arch(name: &str) -> Option<&'static str> {
    Some(match name {
        "fc800" => "FC800-FC800-FC",
        "fc300-desk" => "FC300-FC300-FC",
        "conv5" => "128C3-AP2-256C3-AP2-512C3-AP2-512C3-FC",
        "conv-desk" => "16C3-AP2-32C3-AP2-FC",
        "conv9" => "128C3-128C3-AP2-256C3-256C3-AP2-512C3-512C3-AP2-512C3-512C3-FC",
        _ => return None,
    })
}

pub const PRESETS: [&str; 5] = ["fc800", "fc300-desk", "conv5", "conv-desk", "conv9"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Architecture string, e.g. `FC300-FC300-FC`.
    pub arch: String,
    /// `[channels, height, width]` of one input frame.
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub lif: LifConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    /// Standardize conv weights before use.
    #[serde(default)]
    pub weight_standardization: bool,
    /// Per-hidden-layer spike dropout rate, fixed across time steps.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub spike_mode: SpikeMode,
    /// Multiplier on the default uniform init bound.
    #[serde(default = "one")]
    pub init_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn new(arch: impl Into<String>, input: [usize; 3], classes: usize) -> Self {
        Self {
            arch: arch.into(),
            input,
            classes,
            lif: LifConfig::default(),
            surrogate: SurrogateConfig::default(),
            weight_standardization: false,
            dropout: 0.0,
            spike_mode: SpikeMode::Deterministic,
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        self.surrogate.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least 2 classes"));
        }
        if self.input.contains(&0) {
            return Err(Error::config("model.input", "dimensions must be positive"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("model.init_scale", "must be positive"));
        }
        self.layer_kinds().map(|_| ())
    }

    /// Hidden-layer operators with their optional pooling, plus the readout.
    pub fn layer_kinds(&self) -> Result<(Vec<(LayerKind, Option<PoolGeometry>)>, LayerKind)> {
        let tokens = parse_arch(&self.arch)?;
        let [mut c, mut h, mut w] = self.input;
        let mut hidden: Vec<(LayerKind, Option<PoolGeometry>)> = Vec::new();
        let mut spatial = true;
        for tok in tokens {
            match tok {
                ArchToken::Conv { channels, kernel } => {
                    if !spatial {
                        return Err(Error::config("arch", "conv layer after a fully connected layer"));
                    }
                    let geo = ConvGeometry { in_c: c, in_h: h, in_w: w, out_c: channels, kernel, stride: 1, padding: kernel / 2 };
                    if geo.in_h + 2 * geo.padding < kernel || geo.in_w + 2 * geo.padding < kernel {
                        return Err(Error::config("arch", "kernel larger than the feature map"));
                    }
                    (c, h, w) = (channels, geo.out_h(), geo.out_w());
                    hidden.push((LayerKind::Conv(geo), None));
                }
                ArchToken::Fc(n) => {
                    hidden.push((LayerKind::Fc { in_dim: c * h * w, out_dim: n }, None));
                    (c, h, w) = (n, 1, 1);
                    spatial = false;
                }
                ArchToken::Pool(k) => {
                    let last = hidden
                        .last_mut()
                        .filter(|(kind, pool)| matches!(kind, LayerKind::Conv(_)) && pool.is_none())
                        .ok_or_else(|| Error::config("arch", "pooling must directly follow a conv layer"))?;
                    if h % k != 0 || w % k != 0 {
                        return Err(Error::config("arch", format!("pool size {k} does not divide {h}x{w}")));
                    }
                    let geo = PoolGeometry { channels: c, in_h: h, in_w: w, k };
                    (h, w) = (h / k, w / k);
                    last.1 = Some(geo);
                }
                ArchToken::Readout => {}
            }
        }
        if hidden.is_empty() {
            return Err(Error::config("arch", "need at least one hidden layer"));
        }
        Ok((hidden, LayerKind::Fc { in_dim: c * h * w, out_dim: self.classes }))
    }

    pub fn build(&self, rng: &mut RngState) -> Result<Network> {
        self.validate()?;
        let (kinds, readout) = self.layer_kinds()?;
        let hidden = kinds
            .into_iter()
            .map(|(kind, pool)| HiddenLayer {
                params: LayerParams::init_uniform(kind, self.init_scale, rng),
                pool,
                standardize: self.weight_standardization && matches!(kind, LayerKind::Conv(_)),
            })
            .collect();
        let readout = LayerParams::init_uniform(readout, self.init_scale, rng);
        Ok(Network { spec: self.clone(), hidden, readout })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub params: LayerParams,
    pub pool: Option<PoolGeometry>,
    pub standardize: bool,
}

impl HiddenLayer {
    /// Number of spiking neurons.
    pub fn width(&self) -> usize {
        self.params.kind.out_dim()
    }

    /// Size of the activity handed to the next layer.
    pub fn out_dim(&self) -> usize {
        self.pool.map_or(self.width(), |p| p.out_dim())
    }

    pub fn effective_weight(&self) -> Result<Cow<'_, Tensor>> {
        if self.standardize {
            Ok(Cow::Owned(weight_standardize(&self.params.w, 1.0)?))
        } else {
            Ok(Cow::Borrowed(&self.params.w))
        }
    }

    /// Pulls `g` (B x out_dim) back through the pooling, if any.
    pub fn unpool(&self, g: &[f64], batch: usize) -> Vec<f64> {
        match self.pool {
            Some(p) => {
                let mut out = vec![0.0; batch * p.in_dim()];
                p.backward(g, batch, &mut out);
                out
            }
            None => g.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionPosition {
    /// Noise added to the transmitted spikes.
    #[default]
    AfterNeuron,
    /// Noise added to the input current, before integration.
    BeforeNeuron,
}

/// Noise injected during one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbRecord {
    /// Per hidden layer, `[batch, width]`.
    pub z: Vec<Tensor>,
    /// Optional noise on the readout output, `[batch, classes]`.
    pub z_out: Option<Tensor>,
    pub alpha: f64,
    pub position: InjectionPosition,
    /// +1 or -1.
    pub sign: f64,
    pub dist: NoiseDistribution,
}

impl PerturbRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        rng: &mut RngState,
        net: &Network,
        batch: usize,
        dist: NoiseDistribution,
        alpha: f64,
        position: InjectionPosition,
        sign: f64,
        perturb_readout: bool,
    ) -> Result<Self> {
        let z = net.hidden.iter().map(|l| crate::numerics::sample_noise(rng, dist, &[batch, l.width()])).collect::<Result<Vec<_>>>()?;
        let z_out = if perturb_readout { Some(crate::numerics::sample_noise(rng, dist, &[batch, net.classes()])?) } else { None };
        Ok(Self { z, z_out, alpha, position, sign, dist })
    }

    /// The injected direction `sign * z` for layer `l`.
    pub fn direction(&self, l: usize) -> Tensor {
        self.z[l].scale(self.sign)
    }

    fn scaled(&self) -> f64 {
        self.alpha * self.sign
    }
}

/// Per-rollout mutable state: membrane potentials, spikes and dropout masks.
#[derive(Clone, Debug)]
pub struct RolloutState {
    pub neurons: Vec<NeuronState>,
    pub masks: Vec<Option<Tensor>>,
    pub batch: usize,
    pub t: usize,
    weights: Vec<Tensor>,
    static_input: Option<(Tensor, Tensor)>,
}

impl RolloutState {
    /// Effective (possibly standardized) hidden weights used in this rollout.
    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }
}

/// Everything recorded for one time step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    /// Clean presynaptic activity feeding hidden layer `l`, `[batch, in_dim]`.
    pub inputs: Vec<Tensor>,
    /// Clean activity feeding the readout.
    pub readout_input: Tensor,
    pub currents: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub s: Vec<Tensor>,
    pub masks: Vec<Option<Tensor>>,
    pub perturb: Option<PerturbRecord>,
    /// Readout output as produced (perturbed when noise was injected).
    pub output: Tensor,
}

impl StepRecord {
    /// Number of emitted spikes per hidden layer.
    pub fn spike_counts(&self) -> Vec<f64> {
        self.s.iter().map(|s| s.data().iter().filter(|&&v| v != 0.0).count() as f64).collect()
    }

    pub fn batch(&self) -> usize {
        self.output.rows()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTape {
    pub steps: Vec<StepRecord>,
}

impl ForwardTape {
    pub fn push(&mut self, rec: StepRecord) {
        self.steps.push(rec);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `sum_t o[t]` over a complete tape.
pub fn accumulate_logits(tape: &ForwardTape) -> Result<Tensor> {
    let first = tape.steps.first().ok_or_else(|| Error::Missing("cannot accumulate logits of an empty tape".into()))?;
    let mut acc = first.output.clone();
    for rec in &tape.steps[1..] {
        acc.axpy(1.0, &rec.output)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: ModelSpec,
    pub hidden: Vec<HiddenLayer>,
    pub readout: LayerParams,
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.hidden[0].params.kind.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.readout.kind.out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(HiddenLayer::width).collect()
    }

    /// Downstream synapses reached by one spike of each hidden layer.
    pub fn fan_outs(&self) -> Vec<usize> {
        (0..self.hidden.len())
            .map(|l| match self.hidden.get(l + 1) {
                Some(next) => next.params.kind.fan_out(),
                None => self.readout.kind.fan_out(),
            })
            .collect()
    }

    /// Weight-carrying layers in order: hidden layers then the readout.
    pub fn params(&self) -> Vec<&LayerParams> {
        self.hidden.iter().map(|h| &h.params).chain(std::iter::once(&self.readout)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.hidden.iter_mut().map(|h| &mut h.params).chain(std::iter::once(&mut self.readout)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.w.len() + p.b.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.params() {
            p.validate()?;
        }
        Ok(())
    }

    /// Fresh resting state for a batch. Dropout masks are drawn when
    /// `dropout_rng` is given and the model has a nonzero rate.
    pub fn begin(&self, batch: usize, dropout_rng: Option<&mut RngState>) -> Result<RolloutState> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch must be nonempty".into()));
        }
        let neurons = self.hidden.iter().map(|l| NeuronState::resting(&[batch, l.width()])).collect();
        let p = self.spec.dropout;
        let masks = match dropout_rng {
            Some(rng) if p > 0.0 => self
                .hidden
                .iter()
                .map(|l| {
                    let keep = 1.0 / (1.0 - p);
                    let mut m = Tensor::zeros(&[batch, l.width()]);
                    m.data_mut().iter_mut().for_each(|v| *v = if rng.bernoulli(p) { 0.0 } else { keep });
                    Some(m)
                })
                .collect(),
            _ => vec![None; self.hidden.len()],
        };
        let weights = self.hidden.iter().map(|l| l.effective_weight().map(Cow::into_owned)).collect::<Result<Vec<_>>>()?;
        Ok(RolloutState { neurons, masks, batch, t: 0, weights, static_input: None })
    }

    /// Caches the first layer's current for an input that is constant over time.
    pub fn set_static_input(&self, st: &mut RolloutState, x: &Tensor) -> Result<()> {
        x.ensure_shape("static input", &[st.batch, self.input_dim()])?;
        let l0 = &self.hidden[0];
        let mut cur = Tensor::zeros(&[st.batch, l0.width()]);
        l0.params.kind.forward(st.weights[0].data(), l0.params.b.data(), x.data(), st.batch, cur.data_mut());
        st.static_input = Some((x.clone(), cur));
        Ok(())
    }

    /// One synchronous bottom-to-top sweep. `x_t = None` reuses the static input.
    pub fn forward_step(
        &self,
        st: &mut RolloutState,
        x_t: Option<&Tensor>,
        perturb: Option<PerturbRecord>,
        mut spike_rng: Option<&mut RngState>,
    ) -> Result<StepRecord> {
        let batch = st.batch;
        let nl = self.hidden.len();
        if let Some(p) = &perturb {
            if p.z.len() != nl {
                return Err(Error::shape("perturbation layers", &[nl], &[p.z.len()]));
            }
            for (l, z) in p.z.iter().enumerate() {
                z.ensure_shape("layer perturbation", &[batch, self.hidden[l].width()])?;
            }
            if let Some(zo) = &p.z_out {
                zo.ensure_shape("readout perturbation", &[batch, self.classes()])?;
            }
        }
        let (x0, cached) = match (x_t, &st.static_input) {
            (Some(x), _) => {
                x.ensure_shape("forward_step input", &[batch, self.input_dim()])?;
                (x.clone(), None)
            }
            (None, Some((x, cur))) => (x.clone(), Some(cur)),
            (None, None) => return Err(Error::Missing("no input frame and no static input".into())),
        };

        let mut inputs = Vec::with_capacity(nl);
        let mut currents = Vec::with_capacity(nl);
        let mut us = Vec::with_capacity(nl);
        let mut ss = Vec::with_capacity(nl);
        // activity as transmitted (noisy) and as recorded (clean)
        let mut clean = x0;
        let mut noisy: Option<Tensor> = None;
        let a1 = self.spec.surrogate.a1;

        for (l, layer) in self.hidden.iter().enumerate() {
            let width = layer.width();
            let mut cur = match (l, cached) {
                (0, Some(c)) => c.clone(),
                _ => {
                    let src = noisy.as_ref().unwrap_or(&clean);
                    let mut c = Tensor::zeros(&[batch, width]);
                    layer.params.kind.forward(st.weights[l].data(), layer.params.b.data(), src.data(), batch, c.data_mut());
                    c
                }
            };
            if let Some(p) = perturb.as_ref().filter(|p| p.position == InjectionPosition::BeforeNeuron) {
                cur.axpy(p.scaled(), &p.z[l])?;
            }
            let ns = &mut st.neurons[l];
            integrate(ns.u.data_mut(), ns.s.data(), cur.data(), &self.spec.lif);
            fire(ns.u.data(), ns.s.data_mut(), &self.spec.lif, self.spec.spike_mode, a1, spike_rng.as_deref_mut())?;

            let mut out = ns.s.clone();
            if let Some(m) = &st.masks[l] {
                out.data_mut().iter_mut().zip(m.data()).for_each(|(v, k)| *v *= k);
            }
            let mut out_noisy = None;
            if let Some(p) = perturb.as_ref().filter(|p| p.position == InjectionPosition::AfterNeuron) {
                let mut n = out.clone();
                n.axpy(p.scaled(), &p.z[l])?;
                out_noisy = Some(n);
            }
            let pool = |t: Tensor| -> Tensor {
                match layer.pool {
                    Some(g) => {
                        let mut o = Tensor::zeros(&[batch, g.out_dim()]);
                        g.forward(t.data(), batch, o.data_mut());
                        o
                    }
                    None => t,
                }
            };
            let next_noisy = out_noisy.map(pool);
            inputs.push(std::mem::replace(&mut clean, pool(out)));
            noisy = next_noisy;
            currents.push(cur);
            us.push(ns.u.clone());
            ss.push(ns.s.clone());
        }

        let mut output = Tensor::zeros(&[batch, self.classes()]);
        let src = noisy.as_ref().unwrap_or(&clean);
        self.readout.kind.forward(self.readout.w.data(), self.readout.b.data(), src.data(), batch, output.data_mut());
        if let Some(p) = &perturb {
            if let Some(zo) = &p.z_out {
                output.axpy(p.scaled(), zo)?;
            }
        }
        output.ensure_finite("readout output")?;
        let rec = StepRecord { t: st.t, inputs, readout_input: clean, currents, u: us, s: ss, masks: st.masks.clone(), perturb, output };
        st.t += 1;
        Ok(rec)
    }

    /// Noise-free rollout over `t_steps` frames; returns the full tape.
    pub fn rollout(&self, frames: &[Tensor]) -> Result<ForwardTape> {
        let batch = frames.first().ok_or_else(|| Error::Missing("no input frames".into()))?.rows();
        let mut st = self.begin(batch, None)?;
        let mut tape = ForwardTape::default();
        for x in frames {
            tape.push(self.forward_step(&mut st, Some(x), None, None)?);
        }
        Ok(tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_noise;

    fn fc_net(arch: &str, inputs: usize, classes: usize, seed: u64) -> Network {
        ModelSpec::new(arch, [inputs, 1, 1], classes).build(&mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn zero_weights_emit_readout_bias() {
        let mut net = fc_net("FC4-FC", 3, 2, 0);
        for p in net.params_mut() {
            p.w.fill(0.0);
        }
        net.readout.b = Tensor::from_vec(vec![0.3, -0.7]);
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let tape = net.rollout(&vec![x; 4]).unwrap();
        for rec in &tape.steps {
            for r in 0..2 {
                assert_eq!(rec.output.row(r), &[0.3, -0.7]);
            }
        }
    }

    #[test]
    fn identity_net_hand_iteration() {
        // u: 1 -> spike; 0.5*(1-1)+1 = 1 -> spike; again 1 -> spike
        let mut net = fc_net("FC2-FC", 2, 2, 0);
        net.hidden[0].params.w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        net.hidden[0].params.b.fill(0.0);
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let tape = net.rollout(&vec![x; 3]).unwrap();
        for rec in &tape.steps {
            assert_eq!(rec.u[0].data(), &[1.0, 1.0]);
            assert_eq!(rec.s[0].data(), &[1.0, 1.0]);
        }
        // input 0.6: u = 0.6, 0.9, 1.05 -> spikes only at step 3
        let x = Tensor::matrix(1, 2, vec![0.6, 0.6]).unwrap();
        let tape = net.rollout(&vec![x; 3]).unwrap();
        let spikes: Vec<f64> = tape.steps.iter().map(|r| r.s[0].data()[0]).collect();
        assert_eq!(spikes, vec![0.0, 0.0, 1.0]);
        assert!((tape.steps[2].u[0].data()[0] - 1.05).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_is_exactly_unperturbed() {
        let net = fc_net("FC6-FC5-FC", 4, 3, 7);
        let mut rng = RngState::new(9);
        let frames: Vec<Tensor> = (0..4).map(|_| sample_noise(&mut rng, NoiseDistribution::Gaussian, &[3, 4]).unwrap()).collect();
        let clean = net.rollout(&frames).unwrap();
        for position in [InjectionPosition::AfterNeuron, InjectionPosition::BeforeNeuron] {
            let mut st = net.begin(3, None).unwrap();
            for (x, rec) in frames.iter().zip(&clean.steps) {
                let p = PerturbRecord::sample(&mut rng, &net, 3, NoiseDistribution::Gaussian, 0.0, position, 1.0, true).unwrap();
                let got = net.forward_step(&mut st, Some(x), Some(p), None).unwrap();
                assert_eq!(got.output, rec.output);
                assert_eq!(got.u, rec.u);
            }
        }
    }

    #[test]
    fn noise_positions_act_where_declared() {
        let net = fc_net("FC5-FC", 3, 2, 1);
        let mut rng = RngState::new(3);
        let x = sample_noise(&mut rng, NoiseDistribution::Gaussian, &[2, 3]).unwrap();
        let clean = net.rollout(std::slice::from_ref(&x)).unwrap();
        let p = PerturbRecord::sample(&mut rng, &net, 2, NoiseDistribution::Gaussian, 0.1, InjectionPosition::BeforeNeuron, -1.0, false)
            .unwrap();
        let mut st = net.begin(2, None).unwrap();
        let rec = net.forward_step(&mut st, Some(&x), Some(p.clone()), None).unwrap();
        let mut expect_u = clean.steps[0].u[0].clone();
        expect_u.axpy(-0.1, &p.z[0]).unwrap();
        assert!(rec.u[0].max_abs_diff(&expect_u) < 1e-15);

        let p =
            PerturbRecord::sample(&mut rng, &net, 2, NoiseDistribution::Gaussian, 0.1, InjectionPosition::AfterNeuron, 1.0, false).unwrap();
        let mut st = net.begin(2, None).unwrap();
        let rec = net.forward_step(&mut st, Some(&x), Some(p.clone()), None).unwrap();
        assert_eq!(rec.u[0], clean.steps[0].u[0]);
        // readout sees s + 0.1 z
        let dz = p.z[0].scale(0.1).matmul(&net.readout.w.transpose()).unwrap();
        let expect = clean.steps[0].output.add(&dz).unwrap();
        assert!(rec.output.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn static_input_matches_per_frame_input() {
        let spec = ModelSpec::new("4C3-AP2-FC6-FC", [2, 4, 4], 3);
        let net = spec.build(&mut RngState::new(5)).unwrap();
        let mut rng = RngState::new(6);
        let x = sample_noise(&mut rng, NoiseDistribution::Gaussian, &[2, 32]).unwrap().scale(3.0);
        let a = net.rollout(&vec![x.clone(); 3]).unwrap();
        let mut st = net.begin(2, None).unwrap();
        net.set_static_input(&mut st, &x).unwrap();
        for rec in &a.steps {
            let b = net.forward_step(&mut st, None, None, None).unwrap();
            assert_eq!(b.output, rec.output);
            assert_eq!(b.s, rec.s);
        }
    }

    #[test]
    fn accumulate_logits_examples() {
        let rec = |v: Vec<f64>| StepRecord {
            t: 0,
            inputs: vec![],
            readout_input: Tensor::zeros(&[1, 1]),
            currents: vec![],
            u: vec![],
            s: vec![],
            masks: vec![],
            perturb: None,
            output: Tensor::matrix(1, 2, v).unwrap(),
        };
        let tape = ForwardTape { steps: vec![rec(vec![1.0, -1.0]), rec(vec![2.0, 0.0])] };
        assert_eq!(accumulate_logits(&tape).unwrap().data(), &[3.0, -1.0]);
        let tape = ForwardTape { steps: vec![rec(vec![0.5, 2.0]); 6] };
        assert_eq!(accumulate_logits(&tape).unwrap().data(), &[3.0, 12.0]);
        let tape = ForwardTape { steps: vec![rec(vec![0.25, 7.0])] };
        assert_eq!(accumulate_logits(&tape).unwrap().data(), &[0.25, 7.0]);
        assert!(accumulate_logits(&ForwardTape::default()).is_err());
    }

    #[test]
    fn standardization_rows() {
        let w = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let ws = weight_standardize(&w, 2f64.sqrt()).unwrap();
        assert!((ws.data()[0] - 1.0).abs() < 1e-15 && (ws.data()[1] + 1.0).abs() < 1e-15);

        let mut rng = RngState::new(11);
        let w = sample_noise(&mut rng, NoiseDistribution::Gaussian, &[4, 8]).unwrap();
        let ws = weight_standardize(&w, 8f64.sqrt()).unwrap();
        for r in 0..4 {
            let (m, v) = crate::numerics::mean_var(ws.row(r));
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }

        let c = Tensor::full(&[2, 5], 3.0);
        let ws = weight_standardize(&c, 1.0).unwrap();
        assert!(ws.data().iter().all(|v| v.is_finite() && *v == 0.0));
        assert!(weight_standardize(&Tensor::zeros(&[3, 1]), 1.0).is_err());
    }

    #[test]
    fn standardization_backward_matches_finite_differences() {
        let mut rng = RngState::new(12);
        let w = sample_noise(&mut rng, NoiseDistribution::Gaussian, &[3, 6]).unwrap();
        let probe = sample_noise(&mut rng, NoiseDistribution::Gaussian, &[3, 6]).unwrap();
        let f = |w: &Tensor| weight_standardize(w, 1.3).unwrap().dot(&probe);
        let g = weight_standardize_backward(&w, &probe, 1.3).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (f(&wp) - f(&wm)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn arch_parsing() {
        let spec = ModelSpec::new(preset_arch("conv5").unwrap(), [3, 32, 32], 10);
        let (hidden, readout) = spec.layer_kinds().unwrap();
        assert_eq!(hidden.len(), 4);
        assert_eq!(hidden.iter().filter(|(_, p)| p.is_some()).count(), 3);
        assert_eq!(readout, LayerKind::Fc { in_dim: 512 * 4 * 4, out_dim: 10 });
        for bad in ["FC300", "FC-FC10", "AP2-FC", "FC10-AP2-FC", "3X3-FC", "FC10-4C3-FC"] {
            assert!(ModelSpec::new(bad, [1, 8, 8], 10).validate().is_err(), "{bad}");
        }
        for name in PRESETS {
            assert!(parse_arch(preset_arch(name).unwrap()).is_ok());
        }
    }

    #[test]
    fn fan_outs_and_spike_counts() {
        let net = fc_net("FC7-FC5-FC", 3, 4, 2);
        assert_eq!(net.fan_outs(), vec![5, 4]);
        let x = Tensor::full(&[2, 3], 4.0);
        let tape = net.rollout(&[x]).unwrap();
        let rec = &tape.steps[0];
        let recount: Vec<f64> = rec.s.iter().map(|s| s.data().iter().sum()).collect();
        assert_eq!(rec.spike_counts(), recount);
    }

    #[test]
    fn dropout_mask_is_fixed_and_scaled() {
        let mut spec = ModelSpec::new("FC50-FC", [4, 1, 1], 2);
        spec.dropout = 0.2;
        let net = spec.build(&mut RngState::new(0)).unwrap();
        let mut rng = RngState::new(1);
        let mut st = net.begin(8, Some(&mut rng)).unwrap();
        let mask = st.masks[0].clone().unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        let x = Tensor::full(&[8, 4], 1.0);
        let r0 = net.forward_step(&mut st, Some(&x), None, None).unwrap();
        let r1 = net.forward_step(&mut st, Some(&x), None, None).unwrap();
        assert_eq!(r0.masks[0], r1.masks[0]);
        for (v, m) in r1.readout_input.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
