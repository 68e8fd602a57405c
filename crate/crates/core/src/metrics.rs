//! Gradient-variance measurement, spike accounting and the neuromorphic cost model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::credit::Engine;
use crate::network::ForwardTape;
use crate::online::GradAccum;
use crate::{Error, Result};

/// `Σ‖g_i − ḡ‖² / (batches · elements)` per layer, weights and biases together.
pub fn gradient_variance(batch_grads: &[GradAccum]) -> Result<Vec<f64>> {
    let mut acc = VarianceAccumulator::default();
    for g in batch_grads {
        acc.push(g)?;
    }
    acc.finish()
}

/// Streaming (Welford) form of [`gradient_variance`], so an epoch of batch
/// gradients never has to be held in memory.
#[derive(Clone, Debug, Default)]
pub struct VarianceAccumulator {
    count: usize,
    mean: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl VarianceAccumulator {
    pub fn push(&mut self, g: &GradAccum) -> Result<()> {
        let flat: Vec<Vec<f64>> = g.layers.iter().map(|l| l.dw.data().iter().chain(l.db.data()).copied().collect()).collect();
        if self.count == 0 {
            self.mean = flat.iter().map(|v| vec![0.0; v.len()]).collect();
            self.m2 = self.mean.clone();
        } else {
            let expected: Vec<usize> = self.mean.iter().map(Vec::len).collect();
            let actual: Vec<usize> = flat.iter().map(Vec::len).collect();
            if expected != actual {
                return Err(Error::shape("batch gradient layout", &expected, &actual));
            }
        }
        self.count += 1;
        let n = self.count as f64;
        for ((mean, m2), x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(&flat) {
            for ((mu, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(x) {
                let d = v - *mu;
                *mu += d / n;
                *s += d * (v - *mu);
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::TooFewSamples { required: 2, actual: self.count });
        }
        Ok(self.m2.iter().map(|m2| m2.iter().sum::<f64>() / (self.count * m2.len().max(1)) as f64).collect())
    }
}

/// Decomposition terms of the single-point and pseudo-zeroth-order variance formulas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceInputs {
    pub d: usize,
    pub m: usize,
    pub batch: usize,
    /// `Var[z_i²]`: 2 for Gaussian, 0 for Rademacher.
    pub beta: f64,
    pub alpha: f64,
    pub v_theta: f64,
    pub s_theta: f64,
    pub v_l: f64,
    pub s_l: f64,
    pub v_o: f64,
    pub s_o: f64,
    pub v_eps: f64,
    pub v_om: f64,
}

/// `(zo_sp, pzo)` average per-element variance predictions.
pub fn predict_variance(p: &VarianceInputs) -> Result<(f64, f64)> {
    if p.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if p.alpha == 0.0 {
        return Err(Error::InvalidArgument("alpha must be nonzero".into()));
    }
    let (d, m, b) = (p.d as f64, p.m as f64, p.batch as f64);
    let a2 = p.alpha * p.alpha;
    let zo = ((d + p.beta) * p.v_theta + (d + p.beta - 1.0) * p.s_theta + p.v_l / a2 + p.s_l / a2) / b;
    let pzo = (m * p.v_eps * p.v_o + m * p.v_eps * p.s_o + p.v_om) / b;
    Ok((zo, pzo))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub layer_variance: Vec<f64>,
    pub inputs: Option<VarianceInputs>,
    pub predicted_zo_sp: Option<f64>,
    pub predicted_pzo: Option<f64>,
}

impl VarianceReport {
    pub fn new(layer_variance: Vec<f64>, inputs: Option<VarianceInputs>) -> Result<Self> {
        if layer_variance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite("layer variance".into()));
        }
        let (predicted_zo_sp, predicted_pzo) = match &inputs {
            Some(p) => {
                if p.d < p.m {
                    return Err(Error::InvalidArgument(format!("d = {} must be at least m = {}", p.d, p.m)));
                }
                let (z, q) = predict_variance(p)?;
                (Some(z), Some(q))
            }
            None => (None, None),
        };
        Ok(Self { layer_variance, inputs, predicted_zo_sp, predicted_pzo })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,variance\n");
        for (l, v) in self.layer_variance.iter().enumerate() {
            out.push_str(&format!("{l},{v:e}\n"));
        }
        out
    }
}

/// Firing statistics over recorded rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Spikes per neuron per time step, per hidden layer.
    pub layer_rates: Vec<f64>,
    pub total_rate: f64,
    /// Spikes weighted by their fan-out, summed over layers.
    pub synops: f64,
    /// Per-sample SynOps (total divided by the number of samples seen).
    pub synops_per_sample: f64,
}

impl EfficiencyReport {
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<String> = (0..self.layer_rates.len()).map(|l| format!("layer{l}_fr")).collect();
        cols.extend(["total_fr".to_string(), "synops".into(), "synops_per_sample".into()]);
        let mut vals: Vec<String> = self.layer_rates.iter().map(|v| format!("{v:.6}")).collect();
        vals.push(format!("{:.6}", self.total_rate));
        vals.push(format!("{}", self.synops));
        vals.push(format!("{:.3}", self.synops_per_sample));
        format!("{}\n{}\n", cols.join(","), vals.join(","))
    }
}

/// Streaming spike counter, fed either from tapes or from evaluation summaries.
#[derive(Clone, Debug)]
pub struct EfficiencyAccumulator {
    fan_outs: Vec<usize>,
    spikes: Vec<f64>,
    neuron_steps: Vec<f64>,
    samples: usize,
}

impl EfficiencyAccumulator {
    pub fn new(fan_outs: &[usize]) -> Self {
        Self { fan_outs: fan_outs.to_vec(), spikes: vec![0.0; fan_outs.len()], neuron_steps: vec![0.0; fan_outs.len()], samples: 0 }
    }

    pub fn add_tape(&mut self, tape: &ForwardTape) -> Result<()> {
        let first = tape.steps.first().ok_or_else(|| Error::Missing("empty spike tape".into()))?;
        if first.s.len() != self.fan_outs.len() {
            return Err(Error::shape("tape layers", &[self.fan_outs.len()], &[first.s.len()]));
        }
        for rec in &tape.steps {
            for (l, (c, s)) in rec.spike_counts().into_iter().zip(&rec.s).enumerate() {
                self.spikes[l] += c;
                self.neuron_steps[l] += s.len() as f64;
            }
        }
        self.samples += first.batch();
        Ok(())
    }

    /// Adds pre-aggregated counts for `samples` samples.
    pub fn add_counts(&mut self, spikes: &[f64], neuron_steps: &[f64], samples: usize) -> Result<()> {
        if spikes.len() != self.fan_outs.len() || neuron_steps.len() != self.fan_outs.len() {
            return Err(Error::shape("spike counts", &[self.fan_outs.len()], &[spikes.len()]));
        }
        for l in 0..self.fan_outs.len() {
            self.spikes[l] += spikes[l];
            self.neuron_steps[l] += neuron_steps[l];
        }
        self.samples += samples;
        Ok(())
    }

    pub fn finish(&self) -> Result<EfficiencyReport> {
        if self.samples == 0 {
            return Err(Error::Missing("no spike tapes recorded".into()));
        }
        let layer_rates = self.spikes.iter().zip(&self.neuron_steps).map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 }).collect();
        let steps: f64 = self.neuron_steps.iter().sum();
        let total_rate = if steps > 0.0 { self.spikes.iter().sum::<f64>() / steps } else { 0.0 };
        let synops: f64 = self.spikes.iter().zip(&self.fan_outs).map(|(s, &f)| s * f as f64).sum();
        Ok(EfficiencyReport { layer_rates, total_rate, synops, synops_per_sample: synops / self.samples as f64 })
    }
}

pub fn efficiency_profile(tapes: &[ForwardTape], fan_outs: &[usize]) -> Result<EfficiencyReport> {
    let mut acc = EfficiencyAccumulator::new(fan_outs);
    for tape in tapes {
        acc.add_tape(tape)?;
    }
    acc.finish()
}

/// `N` hidden layers of width `n` feeding `m` outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub layers: u64,
    pub n: u64,
    pub m: u64,
}

impl CostModelInput {
    pub fn new(layers: u64, n: u64, m: u64) -> Result<Self> {
        for (name, v) in [("layers", layers), ("n", n), ("m", m)] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(Self { layers, n, m })
    }

    /// The formulas assume a narrow output; flag inputs where that fails.
    pub fn warning(&self) -> Option<String> {
        (self.m * 10 > self.n).then(|| format!("output width m = {} is not much smaller than n = {}", self.m, self.n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: Engine,
    pub memory: u64,
    pub ops: u64,
    /// Layers can run their backward step concurrently.
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub input: CostModelInput,
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn get(&self, method: Engine) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>16} {:>16}", "method", "memory", "ops")?;
        for r in &self.rows {
            let name = format!("{}{}", r.method, if r.parallel { "*" } else { "" });
            writeln!(f, "{name:<8} {:>16} {:>16}", r.memory, r.ops)?;
        }
        write!(f, "* parallel across layers")
    }
}

/// Exact error-backward costs on event-driven hardware; memory and ops coincide.
pub fn cost_model(input: &CostModelInput) -> CostTable {
    let CostModelInput { layers: big_n, n, m } = *input;
    let row = |method, cost, parallel| CostRow { method, memory: cost, ops: cost, parallel };
    CostTable {
        input: *input,
        rows: vec![
            row(Engine::BpSg, (big_n - 1) * n * n + m * n, false),
            row(Engine::Dfa, big_n * m * n, true),
            row(Engine::ZoSp, big_n * n, true),
            row(Engine::Opzo, big_n * m * n, true),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::StepRecord;
    use crate::numerics::{RngState, Tensor};
    use crate::online::LayerGrad;
    use proptest::prelude::*;

    fn grad(vals: &[f64]) -> GradAccum {
        GradAccum { layers: vec![LayerGrad { dw: Tensor::from_vec(vals.to_vec()), db: Tensor::zeros(&[0]) }] }
    }

    #[test]
    fn variance_examples() {
        let g = grad(&[0.3, -1.2, 4.0]);
        assert_eq!(gradient_variance(&[g.clone(), g.clone(), g]).unwrap(), vec![0.0]);
        assert_eq!(gradient_variance(&[grad(&[0.0]), grad(&[2.0])]).unwrap(), vec![1.0]);
        assert!(matches!(gradient_variance(&[grad(&[1.0])]), Err(Error::TooFewSamples { .. })));
    }

    proptest! {
        #[test]
        fn welford_matches_two_pass(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..12)) {
            let grads: Vec<GradAccum> = rows.iter().map(|r| grad(r)).collect();
            let got = gradient_variance(&grads).unwrap()[0];
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..4).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
            let ss: f64 = rows.iter().flat_map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2))).sum();
            prop_assert!((got - ss / (n * 4.0)).abs() <= 1e-10 * (1.0 + got.abs()));
        }

        #[test]
        fn duplicated_inputs_have_zero_variance(r in prop::collection::vec(-1e3f64..1e3, 1..8), k in 2usize..6) {
            let grads = vec![grad(&r); k];
            prop_assert_eq!(gradient_variance(&grads).unwrap(), vec![0.0]);
        }

        #[test]
        fn pzo_prediction_below_zo_sp(
            m in 1usize..10,
            dm in 1000usize..3000,
            vt in 1e-3f64..10.0,
            st in 1e-3f64..10.0,
            vl in 0.0f64..10.0,
            sl in 0.0f64..10.0,
            vo in 1e-3f64..10.0,
            so in 1e-3f64..10.0,
            ve in 0.0f64..1e-2,
            alpha in 1e-3f64..1.0,
            b in 1usize..256,
        ) {
            let d = dm * m;
            // Keep V_{o,M} at the scale of V_θ, as the remark after the proposition suggests.
            let p = VarianceInputs {
                d, m, batch: b, beta: 2.0, alpha,
                v_theta: vt, s_theta: st, v_l: vl, s_l: sl, v_o: vo, s_o: so, v_eps: ve, v_om: vt,
            };
            prop_assume!(d as f64 > m as f64 * ve * (vo + so) / (vt + st));
            let (zo, pzo) = predict_variance(&p).unwrap();
            prop_assert!(zo > pzo);
        }
    }

    #[test]
    fn prediction_examples() {
        let p = VarianceInputs {
            d: 4,
            m: 1,
            batch: 1,
            beta: 2.0,
            alpha: 1.0,
            v_theta: 1.0,
            s_theta: 1.0,
            v_l: 1.0,
            s_l: 1.0,
            ..Default::default()
        };
        assert_eq!(predict_variance(&p).unwrap().0, 13.0);
        let q = VarianceInputs { v_eps: 0.0, v_om: 3.0, batch: 4, v_o: 7.0, s_o: 2.0, ..p };
        assert_eq!(predict_variance(&q).unwrap().1, 0.75);
        assert!(predict_variance(&VarianceInputs { batch: 0, ..p }).is_err());
        assert!(predict_variance(&VarianceInputs { alpha: 0.0, ..p }).is_err());
    }

    fn tape(spikes: &[Vec<f64>], t: usize) -> ForwardTape {
        let mut tp = ForwardTape::default();
        for _ in 0..t {
            let s: Vec<Tensor> = spikes.iter().map(|v| Tensor::matrix(1, v.len(), v.clone()).unwrap()).collect();
            tp.push(StepRecord {
                t: 0,
                inputs: Vec::new(),
                readout_input: Tensor::zeros(&[1, 1]),
                currents: Vec::new(),
                u: Vec::new(),
                s,
                masks: Vec::new(),
                perturb: None,
                output: Tensor::zeros(&[1, 1]),
            });
        }
        tp
    }

    #[test]
    fn efficiency_examples() {
        let r = efficiency_profile(&[tape(&[vec![0.0; 3], vec![0.0; 2]], 4)], &[2, 10]).unwrap();
        assert_eq!(r.layer_rates, vec![0.0, 0.0]);
        assert_eq!(r.synops, 0.0);

        let r = efficiency_profile(&[tape(&[vec![1.0]], 6)], &[10]).unwrap();
        assert_eq!(r.layer_rates, vec![1.0]);
        assert_eq!(r.total_rate, 1.0);
        assert_eq!(r.synops, 60.0);

        assert!(efficiency_profile(&[], &[10]).is_err());
    }

    #[test]
    fn synops_match_brute_force_recount() {
        let mut rng = RngState::new(5);
        let fan_outs = [7usize, 3, 11];
        let widths = [5usize, 4, 6];
        let mut tapes = Vec::new();
        let mut brute = 0.0;
        let mut fired = 0.0;
        for _ in 0..3 {
            let mut tp = tape(&[vec![0.0; 5], vec![0.0; 4], vec![0.0; 6]], 5);
            for rec in tp.steps.iter_mut() {
                for (l, s) in rec.s.iter_mut().enumerate() {
                    for v in s.data_mut() {
                        if rng.bernoulli(0.3) {
                            *v = 1.0;
                            brute += fan_outs[l] as f64;
                            fired += 1.0;
                        }
                    }
                }
            }
            tapes.push(tp);
        }
        let r = efficiency_profile(&tapes, &fan_outs).unwrap();
        assert_eq!(r.synops, brute);
        let steps = (3 * 5 * widths.iter().sum::<usize>()) as f64;
        assert!((r.total_rate - fired / steps).abs() < 1e-15);
        assert!(r.layer_rates.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn cost_model_examples() {
        let t = cost_model(&CostModelInput::new(2, 800, 10).unwrap());
        assert_eq!(t.get(Engine::BpSg).unwrap().ops, 648_000);
        assert_eq!(t.get(Engine::Opzo).unwrap().ops, 16_000);
        assert_eq!(t.get(Engine::ZoSp).unwrap().ops, 1_600);
        assert_eq!(t.get(Engine::Dfa).unwrap().memory, 16_000);
        assert!(!t.get(Engine::BpSg).unwrap().parallel);
        assert!(t.get(Engine::Opzo).unwrap().parallel);

        let one = cost_model(&CostModelInput::new(1, 800, 10).unwrap());
        assert_eq!(one.get(Engine::BpSg).unwrap().memory, 8_000);

        let wide = CostModelInput::new(3, 100, 100).unwrap();
        assert!(wide.warning().is_some());
        let t = cost_model(&wide);
        let ratio = t.get(Engine::Opzo).unwrap().ops as f64 / t.get(Engine::BpSg).unwrap().ops as f64;
        assert!((1.0 / 3.0..=3.0).contains(&ratio));

        assert!(CostModelInput::new(0, 800, 10).is_err());
        assert!(CostModelInput::new(2, 800, 10).unwrap().warning().is_none());
    }
}
