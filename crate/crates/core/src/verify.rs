//! Self-contained Monte-Carlo and finite-difference checks of the estimators.
//!
//! Every check builds its own synthetic probe, so the suites run without data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::credit::{
    bp_sg_errors, dfa_errors, loss_and_error, opzo_errors, opzo_update_feedback, zo_single_point_grad, zo_two_point_grad, Engine,
    FeedbackRule, FeedbackState, LossSpec, SignalOptions, TwoPointMode,
};
use crate::data::{Batch, BatchInput};
use crate::metrics::{predict_variance, VarianceInputs};
use crate::network::{InjectionPosition, ModelSpec, PerturbRecord};
use crate::neuron::SpikeMode;
use crate::numerics::{fill_noise, sample_noise, NoiseDistribution, RngState, Tensor};
use crate::online::{Trainer, TrainerConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemmas,
    Prop1,
    Prop2,
    Fd,
    OracleEq,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Lemmas, Suite::Prop1, Suite::Prop2, Suite::Fd, Suite::OracleEq];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Lemmas => "lemmas",
            Suite::Prop1 => "prop1",
            Suite::Prop2 => "prop2",
            Suite::Fd => "fd",
            Suite::OracleEq => "oracle_eq",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{s}` (expected lemmas, prop1, prop2, fd or oracle_eq)")))
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let rng = RngState::new(seed);
    match suite {
        Suite::Lemmas => {
            let mut checks = estimator_unbiasedness(8, 1e-3, 200_000, &mut rng.fork(1))?;
            let probe = feedback_convergence(NoiseDistribution::Rademacher, 0.999, 10_000, &mut rng.fork(2))?;
            checks.push(probe.check(0.05));
            Ok(checks)
        }
        Suite::Prop1 => [NoiseDistribution::Gaussian, NoiseDistribution::Rademacher]
            .into_iter()
            .enumerate()
            .map(|(i, dist)| Ok(linear_probe_variance(dist, 100_000, &mut rng.fork(10 + i as u64))?.check(0.15)))
            .collect(),
        Suite::Prop2 => {
            let probe = feedback_convergence(NoiseDistribution::Rademacher, 0.999, 10_000, &mut rng.fork(2))?;
            Ok(vec![descent_direction(&probe, 1_000, &mut rng.fork(3))?])
        }
        Suite::Fd => Ok(vec![bp_finite_difference(&mut rng.fork(4))?.check(1e-4), loss_finite_difference(&mut rng.fork(5))?]),
        Suite::OracleEq => Ok(vec![exact_jacobian_equivalence(&mut rng.fork(6))?, identity_feedback_equivalence()?]),
    }
}

/// Per-coordinate running mean and variance of a vector-valued estimator.
#[derive(Clone, Debug)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { n: 0, mean: vec![0.0; d], m2: vec![0.0; d] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((mu, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *mu;
            *mu += d / n;
            *s += d * (v - *mu);
        }
    }

    /// Population variance per coordinate.
    fn var(&self) -> Vec<f64> {
        self.m2.iter().map(|s| s / self.n as f64).collect()
    }

    fn mean_var(&self) -> f64 {
        self.var().iter().sum::<f64>() / self.mean.len() as f64
    }

    /// Largest `|mean - target| / standard error` over coordinates.
    fn max_z(&self, target: &[f64]) -> f64 {
        let n = self.n as f64;
        self.mean
            .iter()
            .zip(self.var())
            .zip(target)
            .map(|((m, v), t)| (m - t).abs() / (v / n).sqrt().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Two-point (central and one-sided) and single-point estimators on
/// `f(θ) = ½‖θ − θ*‖²`: Monte-Carlo means within 4 standard errors of `∇f`.
pub fn estimator_unbiasedness(d: usize, alpha: f64, draws: usize, rng: &mut RngState) -> Result<Vec<Check>> {
    let theta = sample_noise(rng, NoiseDistribution::Gaussian, &[d])?;
    let star = sample_noise(rng, NoiseDistribution::Gaussian, &[d])?;
    let f = |t: &Tensor| 0.5 * t.data().iter().zip(star.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let grad: Vec<f64> = theta.data().iter().zip(star.data()).map(|(a, b)| a - b).collect();
    let (mut central, mut one_sided, mut single) = (Moments::new(d), Moments::new(d), Moments::new(d));
    let mut z = Tensor::zeros(&[d]);
    for _ in 0..draws {
        fill_noise(rng, NoiseDistribution::Gaussian, z.data_mut());
        central.push(zo_two_point_grad(f, &theta, &z, alpha, TwoPointMode::Central)?.data());
        one_sided.push(zo_two_point_grad(f, &theta, &z, alpha, TwoPointMode::OneSided)?.data());
        single.push(zo_single_point_grad(f, &theta, &z, alpha)?.data());
    }
    let (zc, zo, zs) = (central.max_z(&grad), one_sided.max_z(&grad), single.max_z(&grad));
    Ok(vec![
        Check::new(
            "two-point estimator unbiased",
            zc < 4.0 && zo < 4.0,
            format!("max |mean - grad| / se: central {zc:.2}, one-sided {zo:.2} (limit 4, {draws} draws)"),
        ),
        Check::new("single-point estimator unbiased", zs < 4.0, format!("max |mean - grad| / se: {zs:.2} (limit 4, {draws} draws)")),
    ])
}

/// A momentum feedback matrix fitted to the linear map `o = J (x + α z)`.
#[derive(Clone, Debug)]
pub struct FeedbackProbe {
    /// `[m, n]`.
    pub j: Tensor,
    /// `[n, m]`, the estimate of `J^T`.
    pub m: Tensor,
    pub rel_err: f64,
}

impl FeedbackProbe {
    pub fn check(&self, limit: f64) -> Check {
        Check::new(
            "momentum feedback converges to the Jacobian transpose",
            self.rel_err < limit,
            format!("‖M - J^T‖_F / ‖J^T‖_F = {:.4} (limit {limit})", self.rel_err),
        )
    }
}

/// Fits `M` to a random 2×3 linear map with `updates` feedback steps using the
/// `z Δo^T / α` rule.
pub fn feedback_convergence(dist: NoiseDistribution, momentum: f64, updates: usize, rng: &mut RngState) -> Result<FeedbackProbe> {
    let (m, n, alpha) = (2, 3, 0.1);
    let j = sample_noise(rng, NoiseDistribution::Gaussian, &[m, n])?;
    let mut fb = FeedbackState::momentum_jacobian(&[n], m, momentum)?;
    for _ in 0..updates {
        let x = sample_noise(rng, NoiseDistribution::Gaussian, &[1, n])?;
        let z = sample_noise(rng, dist, &[1, n])?;
        let mut xp = x.clone();
        xp.axpy(alpha, &z)?;
        let o = x.matmul(&j.transpose())?;
        let o_tilde = xp.matmul(&j.transpose())?;
        let p = PerturbRecord { z: vec![z], z_out: None, alpha, position: InjectionPosition::AfterNeuron, sign: 1.0, dist };
        opzo_update_feedback(&mut fb, &p, &o_tilde, Some(&o), FeedbackRule::DeltaScaled)?;
    }
    let mt = fb.matrices.remove(0);
    let jt = j.transpose();
    let diff = mt.zip_map(&jt, |a, b| a - b)?;
    let rel_err = diff.dot(&diff).sqrt() / jt.dot(&jt).sqrt();
    Ok(FeedbackProbe { j, m: mt, rel_err })
}

/// `⟨E[J^T e], E[M e]⟩ > 0` over `samples` inputs, with `e` the squared-error
/// gradient towards a random linear teacher.
pub fn descent_direction(probe: &FeedbackProbe, samples: usize, rng: &mut RngState) -> Result<Check> {
    let (m, n) = (probe.j.rows(), probe.j.cols());
    let teacher = sample_noise(rng, NoiseDistribution::Gaussian, &[m, n])?;
    let shift = sample_noise(rng, NoiseDistribution::Gaussian, &[1, n])?;
    let mut true_dir = Tensor::zeros(&[1, n]);
    let mut fb_dir = Tensor::zeros(&[1, n]);
    for _ in 0..samples {
        let mut x = sample_noise(rng, NoiseDistribution::Gaussian, &[1, n])?;
        x.axpy(1.0, &shift)?;
        let e = x.matmul(&probe.j.transpose())?.zip_map(&x.matmul(&teacher.transpose())?, |a, b| a - b)?;
        true_dir.axpy(1.0 / samples as f64, &e.matmul(&probe.j)?)?;
        fb_dir.axpy(1.0 / samples as f64, &e.matmul(&probe.m.transpose())?)?;
    }
    let inner = true_dir.dot(&fb_dir);
    let cos = inner / (true_dir.dot(&true_dir).sqrt() * fb_dir.dot(&fb_dir).sqrt());
    Ok(Check::new(
        "feedback direction is a descent direction",
        inner > 0.0,
        format!("<E[J^T e], E[M e]> = {inner:.4e} (cosine {cos:.4}, {samples} samples)"),
    ))
}

/// Measured and predicted per-element estimator variance on a linear probe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeVariance {
    pub dist: NoiseDistribution,
    pub inputs: VarianceInputs,
    pub measured_zo_sp: f64,
    pub predicted_zo_sp: f64,
    pub measured_pzo: f64,
    pub predicted_pzo: f64,
}

impl ProbeVariance {
    pub fn rel_err(&self) -> f64 {
        (self.measured_zo_sp - self.predicted_zo_sp).abs() / self.predicted_zo_sp
    }

    pub fn check(&self, limit: f64) -> Check {
        let name = match self.dist {
            NoiseDistribution::Gaussian => "single-point variance formula (gaussian)",
            NoiseDistribution::Rademacher => "single-point variance formula (rademacher)",
        };
        Check::new(
            name,
            self.rel_err() < limit,
            format!(
                "measured {:.4}, predicted {:.4}, rel err {:.4} (limit {limit}); pzo measured {:.4}, predicted {:.4}",
                self.measured_zo_sp,
                self.predicted_zo_sp,
                self.rel_err(),
                self.measured_pzo,
                self.predicted_pzo
            ),
        )
    }
}

/// Linear probe `o = W x` with `W` of shape `[2, 4]` (so `d = 8`, `m = 2`),
/// loss `L = y^T o` and random `(x, y)`. The loss is linear in `W`, so the
/// single-point variance formula holds exactly and only sampling error remains.
pub fn linear_probe_variance(dist: NoiseDistribution, draws: usize, rng: &mut RngState) -> Result<ProbeVariance> {
    const M: usize = 2;
    const K: usize = 4;
    const D: usize = M * K;
    let alpha = 0.5;
    let w = sample_noise(rng, NoiseDistribution::Gaussian, &[D])?;
    let mu_x = [0.5, -0.3, 0.8, 0.1];
    let mu_y = [0.4, -0.6];
    let sample = |rng: &mut RngState| -> ([f64; K], [f64; M]) {
        (std::array::from_fn(|b| mu_x[b] + rng.normal()), std::array::from_fn(|a| mu_y[a] + rng.normal()))
    };
    let loss = |theta: &[f64], x: &[f64; K], y: &[f64; M]| -> f64 {
        (0..M).map(|a| y[a] * (0..K).map(|b| theta[a * K + b] * x[b]).sum::<f64>()).sum()
    };

    // Decomposition terms from an independent sample.
    let (mut g_mom, mut e_mom, mut l_mom, mut j_mom) = (Moments::new(D), Moments::new(M), Moments::new(1), Moments::new(D * M));
    for _ in 0..draws {
        let (x, y) = sample(rng);
        let g: Vec<f64> = (0..D).map(|i| y[i / K] * x[i % K]).collect();
        g_mom.push(&g);
        e_mom.push(&y);
        l_mom.push(&[loss(w.data(), &x, &y)]);
        // J^T[(a, b), j] = δ_aj x_b
        let jt: Vec<f64> = (0..D * M).map(|k| if (k / M) / K == k % M { x[(k / M) % K] } else { 0.0 }).collect();
        j_mom.push(&jt);
    }
    let avg = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let v_theta = g_mom.mean_var();
    let s_theta = avg(g_mom.mean.iter().map(|m| m * m).collect());
    let v_o = e_mom.mean_var();
    let s_o = avg(e_mom.mean.iter().map(|m| m * m).collect());
    let v_l = l_mom.var()[0];
    let s_l = l_mom.mean[0].powi(2);
    let j_mean = j_mom.mean.clone();
    let e_var = e_mom.var();

    // Feedback fitted by weight perturbation on the same probe, then compared
    // against the numerically estimated mean Jacobian.
    let mut fb = FeedbackState::momentum_jacobian(&[D], M, 0.999)?;
    let mut z = Tensor::zeros(&[1, D]);
    for _ in 0..20_000 {
        let (x, _) = sample(rng);
        fill_noise(rng, dist, z.data_mut());
        let o: Vec<f64> = (0..M).map(|a| (0..K).map(|b| w.data()[a * K + b] * x[b]).sum()).collect();
        let o_tilde: Vec<f64> = (0..M).map(|a| (0..K).map(|b| (w.data()[a * K + b] + alpha * z.data()[a * K + b]) * x[b]).sum()).collect();
        let p = PerturbRecord { z: vec![z.clone()], z_out: None, alpha, position: InjectionPosition::AfterNeuron, sign: 1.0, dist };
        opzo_update_feedback(&mut fb, &p, &Tensor::matrix(1, M, o_tilde)?, Some(&Tensor::matrix(1, M, o)?), FeedbackRule::DeltaScaled)?;
    }
    let fm = &fb.matrices[0];
    let v_eps = avg(fm.data().iter().zip(&j_mean).map(|(a, b)| (a - b).powi(2)).collect());
    let v_om = (0..D).map(|i| (0..M).map(|j| e_var[j] * j_mean[i * M + j].powi(2)).sum::<f64>()).sum::<f64>() / D as f64;

    let inputs = VarianceInputs { d: D, m: M, batch: 1, beta: dist.beta(), alpha, v_theta, s_theta, v_l, s_l, v_o, s_o, v_eps, v_om };
    let (predicted_zo_sp, predicted_pzo) = predict_variance(&inputs)?;

    let (mut zo, mut pzo) = (Moments::new(D), Moments::new(D));
    let mut theta = vec![0.0; D];
    for _ in 0..draws {
        let (x, y) = sample(rng);
        fill_noise(rng, dist, z.data_mut());
        for ((t, w), z) in theta.iter_mut().zip(w.data()).zip(z.data()) {
            *t = w + alpha * z;
        }
        let lt = loss(&theta, &x, &y);
        let g: Vec<f64> = z.data().iter().map(|z| lt / alpha * z).collect();
        zo.push(&g);
        let pg: Vec<f64> = (0..D).map(|i| (0..M).map(|j| fm.data()[i * M + j] * y[j]).sum()).collect();
        pzo.push(&pg);
    }
    Ok(ProbeVariance { dist, inputs, measured_zo_sp: zo.mean_var(), predicted_zo_sp, measured_pzo: pzo.mean_var(), predicted_pzo })
}

#[derive(Clone, Debug)]
pub struct FdResult {
    pub max_rel_err: f64,
    pub params: usize,
}

impl FdResult {
    pub fn check(&self, limit: f64) -> Check {
        Check::new(
            "bp-sg gradient matches finite differences",
            self.max_rel_err < limit,
            format!("max rel err {:.3e} over {} parameters (limit {limit})", self.max_rel_err, self.params),
        )
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Parameters of a one-hidden-layer net in plain arrays.
struct SmallNet {
    w: Vec<f64>,
    b: Vec<f64>,
    wo: Vec<f64>,
    bo: Vec<f64>,
}

/// Clean states of a rollout that the detached objective treats as constants.
struct Detached {
    u: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    /// Input trace at each step.
    tx: Vec<Vec<f64>>,
    /// Hidden-spike trace at each step.
    ts: Vec<Vec<f64>>,
}

/// BP-SG on a sigmoid-relaxed one-hidden-layer net against central finite
/// differences (h = 1e-5) of the summed per-step loss with temporal paths
/// detached.
///
/// The detached objective keeps each step's spatial path live and lets the
/// weights act on the presynaptic traces, but freezes everything carried over
/// from earlier steps (reset, past spikes, past membrane):
///
/// u'[t] = u[t] + (W' − W) â_x[t] + (b' − b)
/// o'[t] = W_o' s'[t] + b_o' + (W_o' − W_o)(â_s[t] − s[t])
///
/// At the base point this equals the real rollout, and its exact gradient is
/// the online trace-based update.
pub fn bp_finite_difference(rng: &mut RngState) -> Result<FdResult> {
    let (n_in, width, classes, batch, t_steps) = (4, 5, 3, 2, 4);
    let mut spec = ModelSpec::new(format!("FC{width}-FC"), [n_in, 1, 1], classes);
    spec.spike_mode = SpikeMode::SigmoidRelaxed;
    let net = spec.build(&mut rng.fork(0))?;
    let x = sample_noise(rng, NoiseDistribution::Gaussian, &[batch, n_in])?.scale(1.5);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
    let loss = LossSpec::default();
    let (lam, v_th, a1) = (net.spec.lif.leak, net.spec.lif.v_th, net.spec.surrogate.a1);

    let base = SmallNet {
        w: net.hidden[0].params.w.data().to_vec(),
        b: net.hidden[0].params.b.data().to_vec(),
        wo: net.readout.w.data().to_vec(),
        bo: net.readout.b.data().to_vec(),
    };
    let spike = |u: f64| 1.0 / (1.0 + (-(u - v_th) / a1).exp());
    let affine = |w: &[f64], b: &[f64], a: &[f64], rows: usize, cols: usize| -> Vec<f64> {
        (0..batch).flat_map(|s| (0..rows).map(move |r| b[r] + (0..cols).map(|c| w[r * cols + c] * a[s * cols + c]).sum::<f64>())).collect()
    };

    // Independent rollout of the clean dynamics.
    let mut det = Detached { u: Vec::new(), s: Vec::new(), tx: Vec::new(), ts: Vec::new() };
    let (mut u, mut s) = (vec![0.0; batch * width], vec![0.0; batch * width]);
    let (mut tx, mut ts) = (vec![0.0; batch * n_in], vec![0.0; batch * width]);
    let cur = affine(&base.w, &base.b, x.data(), width, n_in);
    for _ in 0..t_steps {
        for k in 0..u.len() {
            u[k] = lam * (u[k] - v_th * s[k]) + cur[k];
            s[k] = spike(u[k]);
            ts[k] = lam * ts[k] + s[k];
        }
        for (t, xv) in tx.iter_mut().zip(x.data()) {
            *t = lam * *t + xv;
        }
        det.u.push(u.clone());
        det.s.push(s.clone());
        det.tx.push(tx.clone());
        det.ts.push(ts.clone());
    }

    let objective = |p: &SmallNet| -> Result<f64> {
        let mut total = 0.0;
        for t in 0..t_steps {
            let dw: Vec<f64> = p.w.iter().zip(&base.w).map(|(a, b)| a - b).collect();
            let db: Vec<f64> = p.b.iter().zip(&base.b).map(|(a, b)| a - b).collect();
            let du = affine(&dw, &db, &det.tx[t], width, n_in);
            let s_new: Vec<f64> = det.u[t].iter().zip(&du).map(|(u, d)| spike(u + d)).collect();
            let past: Vec<f64> = det.ts[t].iter().zip(&det.s[t]).map(|(a, b)| a - b).collect();
            let dwo: Vec<f64> = p.wo.iter().zip(&base.wo).map(|(a, b)| a - b).collect();
            let live = affine(&p.wo, &p.bo, &s_new, classes, width);
            let carried = affine(&dwo, &vec![0.0; classes], &past, classes, width);
            let o: Vec<f64> = live.iter().zip(&carried).map(|(a, b)| a + b).collect();
            total += loss_and_error(&Tensor::matrix(batch, classes, o)?, &labels, &loss)?.mean;
        }
        Ok(total / t_steps as f64)
    };

    let mut cfg = TrainerConfig::new(Engine::BpSg, t_steps);
    cfg.loss = loss;
    let mut trainer = Trainer::new(net, cfg, 1, &rng.fork(1))?;
    let batch_in = Batch { input: BatchInput::Static(x.clone()), labels: labels.clone() };
    trainer.train_step(&batch_in, 0.0)?;
    let grads = trainer.last_grads().ok_or_else(|| Error::Missing("gradients".into()))?;
    let analytic: Vec<f64> = [&grads.layers[0].dw, &grads.layers[0].db, &grads.layers[1].dw, &grads.layers[1].db]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();

    let h = 1e-5;
    let mut max_rel_err: f64 = 0.0;
    let mut idx = 0;
    for field in 0..4 {
        let len = match field {
            0 => base.w.len(),
            1 => base.b.len(),
            2 => base.wo.len(),
            _ => base.bo.len(),
        };
        for k in 0..len {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = SmallNet { w: base.w.clone(), b: base.b.clone(), wo: base.wo.clone(), bo: base.bo.clone() };
                let v = match field {
                    0 => &mut p.w,
                    1 => &mut p.b,
                    2 => &mut p.wo,
                    _ => &mut p.bo,
                };
                v[k] += delta;
                objective(&p)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            max_rel_err = max_rel_err.max(rel_err(analytic[idx], fd));
            idx += 1;
        }
    }
    Ok(FdResult { max_rel_err, params: idx })
}

/// The blended loss gradient against central differences.
pub fn loss_finite_difference(rng: &mut RngState) -> Result<Check> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for w in [1.0, 0.9, 0.0] {
        let spec = LossSpec { ce_weight: w };
        let o = sample_noise(rng, NoiseDistribution::Gaussian, &[3, 5])?.scale(2.0);
        let labels = [0, 2, 4];
        let e = loss_and_error(&o, &labels, &spec)?;
        for k in 0..o.len() {
            let mut op = o.clone();
            op.data_mut()[k] += h;
            let mut om = o.clone();
            om.data_mut()[k] -= h;
            // The mean loss carries a 1/B factor the per-sample error does not.
            let fd = (loss_and_error(&op, &labels, &spec)?.mean - loss_and_error(&om, &labels, &spec)?.mean) / (2.0 * h) * 3.0;
            worst = worst.max(rel_err(e.error.data()[k], fd));
        }
    }
    Ok(Check::new("loss gradient matches finite differences", worst < 1e-6, format!("max rel err {worst:.3e} (limit 1e-6)")))
}

/// Feedback set to the exact readout Jacobian makes OPZO and BP-SG agree.
pub fn exact_jacobian_equivalence(rng: &mut RngState) -> Result<Check> {
    let mut spec = ModelSpec::new("FC6-FC", [4, 1, 1], 3);
    spec.spike_mode = SpikeMode::SigmoidRelaxed;
    let net = spec.build(&mut rng.fork(0))?;
    let x = sample_noise(rng, NoiseDistribution::Gaussian, &[3, 4])?;
    let rec = net.rollout(&[x])?.steps.remove(0);
    let mut fb = FeedbackState::momentum_jacobian(&net.widths(), 3, 0.9)?;
    fb.matrices[0] = net.readout.w.transpose();
    let e = sample_noise(rng, NoiseDistribution::Gaussian, &[3, 3])?;
    let ws = vec![net.hidden[0].params.w.clone()];
    let bp = bp_sg_errors(&rec, &net, &ws, &e)?;
    let oz = opzo_errors(&e, &fb, &rec, &net, SignalOptions::default())?;
    let diff = bp.hidden[0].max_abs_diff(&oz.hidden[0]);
    Ok(Check::new("exact-jacobian feedback equals bp-sg", diff < 1e-9, format!("max abs diff {diff:.3e} (limit 1e-9)")))
}

/// Identity feedback without the surrogate factor passes the error through unchanged.
pub fn identity_feedback_equivalence() -> Result<Check> {
    let net = ModelSpec::new("FC3-FC", [2, 1, 1], 3).build(&mut RngState::new(0))?;
    let rec = net.rollout(&[Tensor::zeros(&[1, 2])])?.steps.remove(0);
    let mut fb = FeedbackState::random_fixed(&[3], 3, &mut RngState::new(0));
    fb.matrices[0] = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
    let e = Tensor::matrix(1, 3, vec![0.2, -1.0, 3.0])?;
    let sig = dfa_errors(&e, &fb, &rec, &net, SignalOptions { apply_surrogate: false })?;
    let same = sig.hidden[0].data() == e.data();
    Ok(Check::new("identity feedback returns the output error", same, format!("signal {:?}", sig.hidden[0].data())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn gaussian_feedback_example() {
        let probe = feedback_convergence(NoiseDistribution::Gaussian, 0.999, 10_000, &mut RngState::new(2022)).unwrap();
        assert!(probe.rel_err < 0.05, "{}", probe.rel_err);
    }

    #[test]
    fn quick_suites_pass() {
        for suite in [Suite::Fd, Suite::OracleEq] {
            for c in run_suite(suite, 0).unwrap() {
                assert!(c.passed, "{c}");
            }
        }
    }
}
