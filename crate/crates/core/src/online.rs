//! Temporal credit assignment with presynaptic traces, the optimizer and the
//! per-batch training step.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::credit::{
    bp_sg_errors, dfa_errors, loss_and_error, opzo_errors, opzo_update_feedback, zo_sp_grad, Engine, ErrorSignal, FeedbackKind,
    FeedbackRule, FeedbackState, LossOutput, LossSpec, SignalOptions,
};
use crate::data::{Batch, BatchInput};
use crate::error::{Error, Result};
use crate::local::{add_local, igl_errors, local_errors, IglSpec, LocalReadout, DEFAULT_LOCAL_SCALE};
use crate::network::{weight_standardize_backward, InjectionPosition, LayerParams, Network, PerturbRecord, RolloutState, StepRecord};
use crate::neuron::SpikeMode;
use crate::numerics::{NoiseDistribution, RngState, Tensor};

/// Presynaptic traces `â[t] = λ â[t-1] + s[t]`, one per weight layer input.
/// A `None` slot is tracked elsewhere (static first-layer input).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceState {
    pub traces: Vec<Option<Tensor>>,
}

impl TraceState {
    /// Zero traces for every weight layer of `net` (hidden layers, then the readout).
    pub fn zeros(net: &Network, batch: usize) -> Self {
        let traces = net.params().iter().map(|p| Some(Tensor::zeros(&[batch, p.kind.in_dim()]))).collect();
        Self { traces }
    }

    pub fn update(&mut self, spikes: &[&Tensor], leak: f64) -> Result<()> {
        update_traces(self, spikes, leak)
    }

    /// Feeds the clean activity recorded in `rec`.
    pub fn update_record(&mut self, rec: &StepRecord, leak: f64) -> Result<()> {
        let spikes: Vec<&Tensor> = rec.inputs.iter().chain(std::iter::once(&rec.readout_input)).collect();
        update_traces(self, &spikes, leak)
    }
}

pub fn update_traces(traces: &mut TraceState, spikes: &[&Tensor], leak: f64) -> Result<()> {
    if spikes.len() != traces.traces.len() {
        return Err(Error::shape("trace layers", &[traces.traces.len()], &[spikes.len()]));
    }
    for (tr, s) in traces.traces.iter_mut().zip(spikes) {
        if let Some(tr) = tr {
            s.ensure_shape("trace update", tr.shape())?;
            for (a, &v) in tr.data_mut().iter_mut().zip(s.data()) {
                *a = leak * *a + v;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradient buffers aligned with a parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccum {
    pub layers: Vec<LayerGrad>,
}

impl GradAccum {
    pub fn zeros_for(params: &[&LayerParams]) -> Self {
        let layers = params.iter().map(|p| LayerGrad { dw: Tensor::zeros(p.w.shape()), db: Tensor::zeros(p.b.shape()) }).collect();
        Self { layers }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.dw.fill(0.0);
            l.db.fill(0.0);
        }
    }

    /// Euclidean norm per layer, weights and bias together.
    pub fn norms(&self) -> Vec<f64> {
        self.layers.iter().map(|l| (l.dw.dot(&l.dw) + l.db.dot(&l.db)).sqrt()).collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for l in &self.layers {
            l.dw.ensure_finite("weight gradient")?;
            l.db.ensure_finite("bias gradient")?;
        }
        Ok(())
    }
}

/// `accum_W += scale * g â^T` and `accum_b += scale * g` for every weight layer
/// of `net`. Layers whose trace slot is `None` only receive the bias part.
pub fn three_factor_update(traces: &TraceState, error: &ErrorSignal, net: &Network, accum: &mut GradAccum, scale: f64) -> Result<()> {
    let params = net.params();
    if error.hidden.len() + 1 != params.len() || accum.layers.len() < params.len() || traces.traces.len() != params.len() {
        return Err(Error::shape("three-factor layers", &[params.len()], &[error.hidden.len() + 1]));
    }
    let signals = error.hidden.iter().chain(std::iter::once(&error.output));
    for (((p, g), tr), acc) in params.iter().zip(signals).zip(&traces.traces).zip(&mut accum.layers) {
        let batch = g.rows();
        g.ensure_shape("layer error", &[batch, p.kind.out_dim()])?;
        if let Some(tr) = tr {
            tr.ensure_shape("layer trace", &[batch, p.kind.in_dim()])?;
            p.kind.accumulate_weight(g.data(), tr.data(), batch, scale, acc.dw.data_mut());
        }
        p.kind.accumulate_bias(g.data(), batch, scale, acc.db.data_mut());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, weight_decay: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule: LrSchedule::Cosine }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lr) {
            return Err(Error::config("optim.lr", "must be finite and >= 0"));
        }
        if !ok(self.weight_decay) {
            return Err(Error::config("optim.weight_decay", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        Ok(())
    }
}

/// AdamW moments and schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub total_steps: u64,
}

impl OptimState {
    pub fn new(cfg: OptimConfig, shapes: &[&[usize]], total_steps: u64) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            total_steps,
        }
    }

    /// Learning rate for update index `k` (0-based); reaches 0 at `total_steps`.
    pub fn lr_at(&self, k: u64) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Cosine => {
                let frac = (k.min(self.total_steps) as f64) / (self.total_steps.max(1) as f64);
                0.5 * self.cfg.lr * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam step over aligned parameter and gradient lists.
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[&Tensor], opt: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::shape("optimizer parameters", &[opt.m.len()], &[params.len()]));
    }
    let lr = opt.lr_at(opt.step);
    opt.step += 1;
    let c = &opt.cfg;
    let bc1 = 1.0 - c.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - c.beta2.powi(opt.step as i32);
    let decay = 1.0 - lr * c.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut opt.m).zip(&mut opt.v) {
        g.ensure_shape("optimizer gradient", p.shape())?;
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((w, &gi), mi), vi) in it {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            *w = *w * decay - lr * upd;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub dist: NoiseDistribution,
    #[serde(default)]
    pub position: InjectionPosition,
    #[serde(default = "yes")]
    pub antithetic: bool,
    #[serde(default = "default_alpha_start")]
    pub alpha_start: f64,
    #[serde(default = "default_alpha_end")]
    pub alpha_end: f64,
}

fn yes() -> bool {
    true
}
fn default_alpha_start() -> f64 {
    0.2
}
fn default_alpha_end() -> f64 {
    0.01
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            dist: NoiseDistribution::Gaussian,
            position: InjectionPosition::AfterNeuron,
            antithetic: true,
            alpha_start: 0.2,
            alpha_end: 0.01,
        }
    }
}

impl NoiseConfig {
    /// Linear decay from `alpha_start` at the first epoch to `alpha_end` at the last.
    pub fn alpha(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.alpha_start;
        }
        let f = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        self.alpha_start + (self.alpha_end - self.alpha_start) * f
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_start > 0.0 && self.alpha_end > 0.0 && self.alpha_start.is_finite() && self.alpha_end.is_finite()) {
            return Err(Error::config("noise.alpha", "perturbation scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub rule: FeedbackRule,
}

fn default_momentum() -> f64 {
    0.99999
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self { momentum: default_momentum(), rule: FeedbackRule::Output }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_local_scale")]
    pub scale: f64,
    /// Hidden layers driven by a mid readout; `None` disables IGL.
    #[serde(default)]
    pub igl_split: Option<usize>,
    #[serde(default = "yes")]
    pub igl_train_readout: bool,
}

fn default_local_scale() -> f64 {
    DEFAULT_LOCAL_SCALE
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { enabled: false, scale: DEFAULT_LOCAL_SCALE, igl_split: None, igl_train_readout: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub engine: Engine,
    pub time_steps: usize,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub feedback: FeedbackConfig,
    #[serde(default)]
    pub signal: SignalOptions,
    #[serde(default)]
    pub local: LocalConfig,
}

impl TrainerConfig {
    pub fn new(engine: Engine, time_steps: usize) -> Self {
        Self {
            engine,
            time_steps,
            loss: LossSpec::default(),
            optim: OptimConfig::default(),
            noise: NoiseConfig::default(),
            feedback: FeedbackConfig::default(),
            signal: SignalOptions::default(),
            local: LocalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_steps == 0 {
            return Err(Error::config("time_steps", "must be positive"));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.noise.validate()?;
        if !(0.0..=1.0).contains(&self.feedback.momentum) {
            return Err(Error::config("feedback.momentum", "must lie in [0, 1]"));
        }
        if !(self.local.scale >= 0.0 && self.local.scale.is_finite()) {
            return Err(Error::config("local.scale", "must be finite and >= 0"));
        }
        if self.local.igl_split.is_some() && self.engine != Engine::Opzo {
            return Err(Error::config("local.igl_split", "intermediate global learning requires the opzo engine"));
        }
        if self.feedback.rule == FeedbackRule::DeltaScaled {
            return Err(Error::config("feedback.rule", "the delta rule needs a clean pass and is oracle-only"));
        }
        Ok(())
    }
}

/// One line of training telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub alpha: f64,
    pub lr: f64,
    pub grad_norms: Vec<f64>,
    pub firing_rates: Vec<f64>,
}

impl StepReport {
    pub fn csv_header(layers: usize, hidden: usize) -> String {
        let mut cols = vec!["step".to_string(), "loss".into(), "acc".into(), "alpha".into(), "lr".into()];
        cols.extend((0..layers).map(|l| format!("grad_norm_{l}")));
        cols.extend((0..hidden).map(|l| format!("firing_rate_{l}")));
        cols.join(",")
    }

    pub fn csv_line(&self) -> String {
        let mut cols =
            vec![self.step.to_string(), self.loss.to_string(), self.acc.to_string(), self.alpha.to_string(), self.lr.to_string()];
        cols.extend(self.grad_norms.iter().map(f64::to_string));
        cols.extend(self.firing_rates.iter().map(f64::to_string));
        cols.join(",")
    }

    pub fn json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Noise-free evaluation of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub correct: usize,
    pub total: usize,
    pub loss: f64,
    pub tape_spikes: Vec<f64>,
    /// `neurons * time_steps * batch` per hidden layer.
    pub neuron_steps: Vec<f64>,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

/// Training state: model, optimizer, feedback and random streams.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainerConfig,
    pub feedback: Option<FeedbackState>,
    pub local: Vec<LocalReadout>,
    pub igl: Option<IglSpec>,
    pub opt: OptimState,
    last_grads: Option<GradAccum>,
    noise_rng: RngState,
    dropout_rng: RngState,
    spike_rng: RngState,
}

impl Trainer {
    /// `rng` seeds the feedback matrices, local readouts and all training-time noise.
    pub fn new(net: Network, cfg: TrainerConfig, total_steps: u64, rng: &RngState) -> Result<Self> {
        cfg.validate()?;
        net.validate()?;
        let widths = net.widths();
        let m = net.classes();
        let feedback = match cfg.engine {
            Engine::Dfa => Some(FeedbackState::random_fixed(&widths, m, &mut rng.fork(10))),
            Engine::Opzo => Some(FeedbackState::momentum_jacobian(&widths, m, cfg.feedback.momentum)?),
            Engine::BpSg | Engine::ZoSp => None,
        };
        let mut local_rng = rng.fork(11);
        let local = if cfg.local.enabled { LocalReadout::for_all_layers(&net, cfg.local.scale, &mut local_rng)? } else { Vec::new() };
        let igl = match cfg.local.igl_split {
            Some(split) => IglSpec::new(&net, split, cfg.feedback.momentum, cfg.local.igl_train_readout, &mut rng.fork(12))?,
            None => None,
        };
        let mut trainer = Self {
            net,
            cfg,
            feedback,
            local,
            igl,
            opt: OptimState::new(OptimConfig::default(), &[], total_steps),
            last_grads: None,
            noise_rng: rng.fork(13),
            dropout_rng: rng.fork(14),
            spike_rng: rng.fork(15),
        };
        let shapes: Vec<Vec<usize>> = trainer.param_list().iter().map(|p| p.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        trainer.opt = OptimState::new(trainer.cfg.optim, &shape_refs, total_steps);
        Ok(trainer)
    }

    /// Every weight layer trained by the optimizer: network, local readouts, mid readout.
    fn layer_params(&self) -> Vec<&LayerParams> {
        let mut v = self.net.params();
        v.extend(self.local.iter().map(|r| &r.params));
        v.extend(self.igl.iter().map(|i| &i.readout.params));
        v
    }

    fn param_list(&self) -> Vec<&Tensor> {
        self.layer_params().into_iter().flat_map(|p| [&p.w, &p.b]).collect()
    }

    /// Gradients of the most recent training step, aligned with the network's
    /// weight layers followed by any local readouts.
    pub fn last_grads(&self) -> Option<&GradAccum> {
        self.last_grads.as_ref()
    }

    fn needs_noise(&self) -> bool {
        self.cfg.engine.perturbs()
    }

    /// One batch: `T` forward steps with per-step credit assignment, then one optimizer update.
    pub fn train_step(&mut self, batch: &Batch, alpha: f64) -> Result<StepReport> {
        let bsz = batch.labels.len();
        if bsz == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let t_steps = self.cfg.time_steps;
        batch.check(self.net.input_dim(), t_steps)?;
        let dropout_rng = (self.net.spec.dropout > 0.0).then_some(&mut self.dropout_rng);
        let mut st = self.net.begin(bsz, dropout_rng)?;
        let static_x = match &batch.input {
            BatchInput::Static(x) => {
                self.net.set_static_input(&mut st, x)?;
                Some(x)
            }
            BatchInput::Frames(_) => None,
        };
        let mut traces = TraceState::zeros(&self.net, bsz);
        if static_x.is_some() {
            traces.traces[0] = None;
        }
        let nl = self.net.hidden.len();
        let mut accum = GradAccum::zeros_for(&self.layer_params());
        let n_net = nl + 1;
        let scale = 1.0 / (bsz * t_steps) as f64;
        let leak = self.net.spec.lif.leak;
        let mut static_g = static_x.map(|_| Tensor::zeros(&[bsz, self.net.hidden[0].width()]));
        let mut c_t = 0.0;
        let mut loss_sum = 0.0;
        let mut logits = Tensor::zeros(&[bsz, self.net.classes()]);
        let mut spikes = vec![0.0; nl];
        let mut prev_z: Option<PerturbRecord> = None;

        for t in 0..t_steps {
            let perturb = if self.needs_noise() {
                let noise = self.cfg.noise;
                let sign = if noise.antithetic && t % 2 == 1 { -1.0 } else { 1.0 };
                match prev_z.take() {
                    Some(mut p) if sign < 0.0 => {
                        p.sign = -1.0;
                        p.alpha = alpha;
                        Some(p)
                    }
                    _ => Some(PerturbRecord::sample(
                        &mut self.noise_rng,
                        &self.net,
                        bsz,
                        noise.dist,
                        alpha,
                        noise.position,
                        1.0,
                        self.cfg.engine == Engine::ZoSp,
                    )?),
                }
            } else {
                None
            };
            let frame = match &batch.input {
                BatchInput::Static(_) => None,
                BatchInput::Frames(f) => Some(&f[t]),
            };
            let spike_rng = matches!(self.net.spec.spike_mode, SpikeMode::Stochastic(_)).then_some(&mut self.spike_rng);
            let rec = self.net.forward_step(&mut st, frame, perturb, spike_rng)?;
            let lo = loss_and_error(&rec.output, &batch.labels, &self.cfg.loss)?;
            if !lo.mean.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", self.opt.step)));
            }
            loss_sum += lo.mean;
            logits.axpy(1.0, &rec.output)?;
            for (acc, c) in spikes.iter_mut().zip(rec.spike_counts()) {
                *acc += c;
            }

            let mut signal = self.global_errors(&rec, &st, &lo)?;
            let readout_errors = self.add_local_terms(&rec, &batch.labels, &mut signal)?;

            traces.update_record(&rec, leak)?;
            three_factor_update(&traces, &signal, &self.net, &mut accum, scale)?;
            if let Some(g) = static_g.as_mut() {
                c_t = leak * c_t + 1.0;
                g.axpy(c_t, &signal.hidden[0])?;
            }
            for (idx, e, weight) in readout_errors {
                let (p, layer) = self.readout_layer(idx);
                let tr = traces.traces[layer + 1].as_ref().ok_or_else(|| Error::Missing("readout trace".into()))?;
                let acc = &mut accum.layers[idx];
                p.kind.accumulate_weight(e.data(), tr.data(), bsz, scale * weight, acc.dw.data_mut());
                p.kind.accumulate_bias(e.data(), bsz, scale * weight, acc.db.data_mut());
            }

            if let (Some(fb), Some(p)) = (self.feedback.as_mut(), rec.perturb.as_ref()) {
                if fb.kind == FeedbackKind::MomentumJacobian {
                    opzo_update_feedback(fb, p, &rec.output, None, self.cfg.feedback.rule)?;
                }
            }
            if let (Some(igl), Some(p)) = (self.igl.as_mut(), rec.perturb.as_ref()) {
                let (r_tilde, _) = igl.mid_error(&rec, &batch.labels, &self.cfg.loss)?;
                igl.update_feedback(p, &r_tilde, self.cfg.feedback.rule)?;
            }
            prev_z = rec.perturb;
        }

        if let (Some(x), Some(g)) = (static_x, static_g.as_ref()) {
            let l0 = &self.net.hidden[0].params;
            l0.kind.accumulate_weight(g.data(), x.data(), bsz, scale, accum.layers[0].dw.data_mut());
        }
        for (l, h) in self.net.hidden.iter().enumerate() {
            if h.standardize {
                accum.layers[l].dw = weight_standardize_backward(&h.params.w, &accum.layers[l].dw, 1.0)?;
            }
        }
        accum.ensure_finite()?;

        let lr = self.opt.lr_at(self.opt.step);
        self.apply(&accum)?;
        let correct = (0..bsz).filter(|&b| argmax(logits.row(b)) == batch.labels[b]).count();
        let firing_rates = self.net.hidden.iter().zip(&spikes).map(|(h, s)| s / (h.width() * bsz * t_steps) as f64).collect();
        let report = StepReport {
            step: self.opt.step,
            loss: loss_sum / t_steps as f64,
            acc: correct as f64 / bsz as f64,
            alpha: if self.needs_noise() { alpha } else { 0.0 },
            lr,
            grad_norms: accum.norms()[..n_net].to_vec(),
            firing_rates,
        };
        self.last_grads = Some(accum);
        Ok(report)
    }

    fn global_errors(&self, rec: &StepRecord, st: &RolloutState, lo: &LossOutput) -> Result<ErrorSignal> {
        let opts = self.cfg.signal;
        let fb = || self.feedback.as_ref().ok_or_else(|| Error::Missing("feedback state".into()));
        match self.cfg.engine {
            Engine::BpSg => bp_sg_errors(rec, &self.net, st.weights(), &lo.error),
            Engine::Dfa => dfa_errors(&lo.error, fb()?, rec, &self.net, opts),
            Engine::Opzo => opzo_errors(&lo.error, fb()?, rec, &self.net, opts),
            Engine::ZoSp => {
                let p = rec.perturb.as_ref().ok_or_else(|| Error::Missing("zo_sp step without perturbation".into()))?;
                zo_sp_grad(rec, &self.net, &lo.per_sample, p, opts)
            }
        }
    }

    /// Adds IGL and LL contributions to `signal`; returns the readout errors
    /// `(accum index, dL/dr, weight)` that train the auxiliary readouts.
    fn add_local_terms(&self, rec: &StepRecord, labels: &[usize], signal: &mut ErrorSignal) -> Result<Vec<(usize, Tensor, f64)>> {
        let n_net = self.net.hidden.len() + 1;
        let mut readout_errors = Vec::new();
        if let Some(igl) = &self.igl {
            let (_, ag) = igl.mid_error(rec, labels, &self.cfg.loss)?;
            let below = igl_errors(&ag.error, Some(igl), rec, &self.net, self.cfg.signal)?;
            for (l, s) in below.into_iter().enumerate() {
                signal.hidden[l] = s;
            }
            if igl.train_readout {
                readout_errors.push((n_net + self.local.len(), ag.error, 1.0));
            }
        }
        for (i, ro) in self.local.iter().enumerate() {
            if ro.scale == 0.0 {
                continue;
            }
            let lo = local_errors(rec, &self.net, ro, labels, &self.cfg.loss)?;
            add_local(signal, ro.layer, &lo.signal, ro.scale)?;
            readout_errors.push((n_net + i, lo.error, ro.scale));
        }
        Ok(readout_errors)
    }

    /// Auxiliary readout gradients, using the trace of the activity they read.
    fn readout_layer(&self, idx: usize) -> (&LayerParams, usize) {
        let n_net = self.net.hidden.len() + 1;
        if idx < n_net + self.local.len() {
            let ro = &self.local[idx - n_net];
            (&ro.params, ro.layer)
        } else {
            let igl = self.igl.as_ref().expect("mid readout");
            (&igl.readout.params, igl.readout.layer)
        }
    }

    fn apply(&mut self, accum: &GradAccum) -> Result<()> {
        let grads: Vec<&Tensor> = accum.layers.iter().flat_map(|g| [&g.dw, &g.db]).collect();
        let mut params: Vec<&mut Tensor> = Vec::new();
        for h in self.net.hidden.iter_mut() {
            params.push(&mut h.params.w);
            params.push(&mut h.params.b);
        }
        params.push(&mut self.net.readout.w);
        params.push(&mut self.net.readout.b);
        for r in self.local.iter_mut() {
            params.push(&mut r.params.w);
            params.push(&mut r.params.b);
        }
        for i in self.igl.iter_mut() {
            params.push(&mut i.readout.params.w);
            params.push(&mut i.readout.params.b);
        }
        optimizer_step(&mut params, &grads, &mut self.opt)
    }

    /// Noise-free forward pass; accuracy from the accumulated readout.
    pub fn evaluate(&self, batch: &Batch) -> Result<EvalOutput> {
        evaluate(&self.net, batch, self.cfg.time_steps, &self.cfg.loss)
    }
}

pub fn evaluate(net: &Network, batch: &Batch, time_steps: usize, loss: &LossSpec) -> Result<EvalOutput> {
    let bsz = batch.labels.len();
    batch.check(net.input_dim(), time_steps)?;
    let mut st = net.begin(bsz, None)?;
    if let BatchInput::Static(x) = &batch.input {
        net.set_static_input(&mut st, x)?;
    }
    let mut logits = Tensor::zeros(&[bsz, net.classes()]);
    let mut loss_sum = 0.0;
    let mut spikes = vec![0.0; net.hidden.len()];
    for t in 0..time_steps {
        let frame = match &batch.input {
            BatchInput::Static(_) => None,
            BatchInput::Frames(f) => Some(&f[t]),
        };
        let rec = net.forward_step(&mut st, frame, None, None)?;
        loss_sum += loss_and_error(&rec.output, &batch.labels, loss)?.mean;
        logits.axpy(1.0, &rec.output)?;
        for (acc, c) in spikes.iter_mut().zip(rec.spike_counts()) {
            *acc += c;
        }
    }
    let correct = (0..bsz).filter(|&b| argmax(logits.row(b)) == batch.labels[b]).count();
    let neuron_steps = net.hidden.iter().map(|h| (h.width() * bsz * time_steps) as f64).collect();
    Ok(EvalOutput { correct, total: bsz, loss: loss_sum / time_steps as f64, tape_spikes: spikes, neuron_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, synthetic_clusters, Augment, EncoderSpec};
    use crate::network::ModelSpec;
    use proptest::prelude::*;

    fn single_trace() -> TraceState {
        TraceState { traces: vec![Some(Tensor::zeros(&[1, 1]))] }
    }

    fn run_trace(seq: &[f64], leak: f64) -> f64 {
        let mut tr = single_trace();
        for &s in seq {
            tr.update(&[&Tensor::full(&[1, 1], s)], leak).unwrap();
        }
        tr.traces[0].as_ref().unwrap().data()[0]
    }

    #[test]
    fn trace_examples() {
        assert_eq!(run_trace(&[1.0, 0.0, 1.0], 0.5), 1.25);
        assert_eq!(run_trace(&[0.0; 5], 0.5), 0.0);
        assert_eq!(run_trace(&[1.0, 1.0, 0.0, 1.0], 0.0), 1.0);
        assert_eq!(run_trace(&[1.0, 1.0, 1.0, 0.0], 0.0), 0.0);
        let mut tr = single_trace();
        assert!(tr.update(&[&Tensor::zeros(&[1, 2])], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn trace_matches_closed_form(seq in prop::collection::vec(prop::bool::ANY, 1..=32), leak in 0.0f64..1.0) {
            let s: Vec<f64> = seq.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let t = s.len() - 1;
            let closed: f64 = (0..=t).map(|tau| leak.powi((t - tau) as i32) * s[tau]).sum();
            prop_assert!((run_trace(&s, leak) - closed).abs() < 1e-12);
        }
    }

    fn one_layer(w: usize) -> Network {
        ModelSpec::new(format!("FC{w}-FC"), [2, 1, 1], 2).build(&mut RngState::new(0)).unwrap()
    }

    #[test]
    fn three_factor_outer_product() {
        // readout of a 2-wide hidden layer: g = [1, 0], trace = [2, -1]
        let net = one_layer(2);
        let mut accum = GradAccum::zeros_for(&net.params());
        let traces = TraceState { traces: vec![None, Some(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap())] };
        let err = ErrorSignal { hidden: vec![Tensor::zeros(&[1, 2])], output: Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap() };
        three_factor_update(&traces, &err, &net, &mut accum, 1.0).unwrap();
        assert_eq!(accum.layers[1].dw.data(), &[2.0, -1.0, 0.0, 0.0]);
        assert_eq!(accum.layers[1].db.data(), &[1.0, 0.0]);

        let before = accum.clone();
        let zero = ErrorSignal { hidden: vec![Tensor::zeros(&[1, 2])], output: Tensor::zeros(&[1, 2]) };
        three_factor_update(&traces, &zero, &net, &mut accum, 1.0).unwrap();
        assert_eq!(accum, before);
    }

    fn scalar_opt(cfg: OptimConfig, total: u64) -> OptimState {
        OptimState::new(cfg, &[&[1]], total)
    }

    #[test]
    fn optimizer_examples() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = scalar_opt(cfg, 10);
        let mut p = Tensor::from_vec(vec![0.7]);
        for _ in 0..5 {
            optimizer_step(&mut [&mut p], &[&Tensor::zeros(&[1])], &mut opt).unwrap();
        }
        assert_eq!(p.data(), &[0.7]);

        let mut opt = scalar_opt(OptimConfig { schedule: LrSchedule::Constant, ..OptimConfig::default() }, 10);
        let mut prev = p.data()[0];
        for _ in 0..20 {
            optimizer_step(&mut [&mut p], &[&Tensor::full(&[1], 1.0)], &mut opt).unwrap();
            assert!(p.data()[0] < prev);
            prev = p.data()[0];
        }

        let opt = scalar_opt(OptimConfig::default(), 937);
        assert!(opt.lr_at(937).abs() < 1e-12);
        assert_eq!(opt.lr_at(0), 2e-4);
        assert!((opt.lr_at(937 / 2) - 1e-4).abs() < 1e-6);
    }

    fn toy_batch(frames: bool) -> Batch {
        let ds = synthetic_clusters(16, 5, 3, 0.3, &mut RngState::new(2)).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let b = make_batch(&ds, &idx, EncoderSpec::ConstantCurrent, 4, Augment::default(), &mut RngState::new(0)).unwrap();
        if !frames {
            return b;
        }
        match b.input {
            BatchInput::Static(x) => Batch { input: BatchInput::Frames(vec![x; 4]), labels: b.labels },
            BatchInput::Frames(_) => unreachable!(),
        }
    }

    fn trainer(engine: Engine) -> Trainer {
        let net = ModelSpec::new("FC8-FC6-FC", [5, 1, 1], 3).build(&mut RngState::new(1)).unwrap();
        Trainer::new(net, TrainerConfig::new(engine, 4), 100, &RngState::new(3)).unwrap()
    }

    #[test]
    fn static_fast_path_matches_per_frame_gradients() {
        for engine in Engine::ALL {
            let mut a = trainer(engine);
            let mut b = trainer(engine);
            let ra = a.train_step(&toy_batch(false), 0.1).unwrap();
            let rb = b.train_step(&toy_batch(true), 0.1).unwrap();
            assert_eq!(ra.loss, rb.loss);
            for (ga, gb) in a.last_grads().unwrap().layers.iter().zip(&b.last_grads().unwrap().layers) {
                assert!(ga.dw.max_abs_diff(&gb.dw) < 1e-12, "{engine}");
                assert!(ga.db.max_abs_diff(&gb.db) < 1e-12, "{engine}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        for engine in Engine::ALL {
            let mut a = trainer(engine);
            let mut b = trainer(engine);
            for _ in 0..3 {
                let ra = a.train_step(&toy_batch(false), 0.1).unwrap();
                let rb = b.train_step(&toy_batch(false), 0.1).unwrap();
                assert_eq!(ra.csv_line(), rb.csv_line());
            }
        }
    }

    #[test]
    fn report_formats_agree() {
        let mut t = trainer(Engine::Opzo);
        let r = t.train_step(&toy_batch(false), 0.2).unwrap();
        let header = StepReport::csv_header(3, 2);
        assert_eq!(header.split(',').count(), r.csv_line().split(',').count());
        let back: StepReport = serde_json::from_str(&r.json_line().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainerConfig::new(Engine::Dfa, 4);
        cfg.local.igl_split = Some(1);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainerConfig::new(Engine::Opzo, 0);
        assert!(cfg.validate().is_err());
        cfg.time_steps = 2;
        cfg.feedback.rule = FeedbackRule::DeltaScaled;
        assert!(cfg.validate().is_err());
    }
}
