//! Local readout supervision and intermediate global learning (IGL).

use serde::{Deserialize, Serialize};

use crate::credit::{loss_and_error, opzo_errors, opzo_update_feedback, ErrorSignal, FeedbackRule, FeedbackState, LossSpec, SignalOptions};
use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerParams, Network, PerturbRecord, StepRecord};
use crate::neuron::surrogate;
use crate::numerics::{RngState, Tensor};

/// Default weight of a local loss relative to the global one.
pub const DEFAULT_LOCAL_SCALE: f64 = 0.01;

/// Affine readout `r = R a + c` attached to the output activity of one hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalReadout {
    pub layer: usize,
    pub params: LayerParams,
    pub scale: f64,
}

impl LocalReadout {
    pub fn new(net: &Network, layer: usize, scale: f64, rng: &mut RngState) -> Result<Self> {
        let h = net.hidden.get(layer).ok_or_else(|| Error::config("local_learning", format!("no hidden layer {layer}")))?;
        let kind = LayerKind::Fc { in_dim: h.out_dim(), out_dim: net.classes() };
        Ok(Self { layer, params: LayerParams::init_uniform(kind, 1.0, rng), scale })
    }

    /// One readout per hidden layer.
    pub fn for_all_layers(net: &Network, scale: f64, rng: &mut RngState) -> Result<Vec<Self>> {
        (0..net.hidden.len()).map(|l| Self::new(net, l, scale, rng)).collect()
    }

    pub fn forward(&self, activity: &Tensor) -> Result<Tensor> {
        let batch = activity.rows();
        activity.ensure_shape("local readout input", &[batch, self.params.kind.in_dim()])?;
        let mut r = Tensor::zeros(&[batch, self.params.kind.out_dim()]);
        self.params.kind.forward(self.params.w.data(), self.params.b.data(), activity.data(), batch, r.data_mut());
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivityGrad {
    pub loss: f64,
    /// `dL/dr`, `[batch, classes]`.
    pub error: Tensor,
    /// `R^T dL/dr`, `[batch, in_dim]`.
    pub grad: Tensor,
}

/// Local loss of a readout and its gradient with respect to the activity.
pub fn local_activity_grad(activity: &Tensor, ro: &LocalReadout, labels: &[usize], loss: &LossSpec) -> Result<ActivityGrad> {
    let r = ro.forward(activity)?;
    let lo = loss_and_error(&r, labels, loss)?;
    let batch = activity.rows();
    let mut grad = Tensor::zeros(activity.shape());
    ro.params.kind.backward_input(ro.params.w.data(), lo.error.data(), batch, grad.data_mut());
    Ok(ActivityGrad { loss: lo.mean, error: lo.error, grad })
}

/// The activity of hidden layer `l` as seen downstream (pooled, masked, clean).
pub fn layer_activity(rec: &StepRecord, l: usize) -> &Tensor {
    rec.inputs.get(l + 1).unwrap_or(&rec.readout_input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutput {
    pub loss: f64,
    pub error: Tensor,
    /// Unscaled membrane-space contribution, `[batch, width]`.
    pub signal: Tensor,
}

/// Local error for the layer a readout is attached to: the activity gradient
/// pulled back through pooling, masked and weighted by the surrogate.
pub fn local_errors(rec: &StepRecord, net: &Network, ro: &LocalReadout, labels: &[usize], loss: &LossSpec) -> Result<LocalOutput> {
    let l = ro.layer;
    let layer = net.hidden.get(l).ok_or_else(|| Error::Missing(format!("hidden layer {l}")))?;
    let ag = local_activity_grad(layer_activity(rec, l), ro, labels, loss)?;
    let batch = rec.batch();
    let mut g = layer.unpool(ag.grad.data(), batch);
    let (v_th, a1) = (net.spec.lif.v_th, net.spec.surrogate.a1);
    for (gi, &u) in g.iter_mut().zip(rec.u[l].data()) {
        *gi *= surrogate(u, v_th, a1);
    }
    if let Some(m) = &rec.masks[l] {
        g.iter_mut().zip(m.data()).for_each(|(gi, k)| *gi *= k);
    }
    Ok(LocalOutput { loss: ag.loss, error: ag.error, signal: Tensor::new(vec![batch, layer.width()], g)? })
}

/// `signal.hidden[l] += scale * local`.
pub fn add_local(signal: &mut ErrorSignal, l: usize, local: &Tensor, scale: f64) -> Result<()> {
    let dst = signal.hidden.get_mut(l).ok_or_else(|| Error::Missing(format!("hidden layer {l}")))?;
    dst.axpy(scale, local)
}

/// Mid-network readout whose error trains the layers below it through
/// their own momentum feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IglSpec {
    /// Number of hidden layers driven by the mid readout; the readout sits
    /// on hidden layer `split - 1`.
    pub split: usize,
    pub readout: LocalReadout,
    pub feedback: FeedbackState,
    /// Train the mid readout with its own loss gradient.
    pub train_readout: bool,
}

impl IglSpec {
    /// `None` when the split is at the top, where IGL is plain OPZO.
    pub fn new(net: &Network, split: usize, momentum: f64, train_readout: bool, rng: &mut RngState) -> Result<Option<Self>> {
        let n = net.hidden.len();
        if split == 0 || split > n {
            return Err(Error::config("igl_split", format!("must lie in 1..={n}, got {split}")));
        }
        if split == n {
            return Ok(None);
        }
        let readout = LocalReadout::new(net, split - 1, 1.0, rng)?;
        let feedback = FeedbackState::momentum_jacobian(&net.widths()[..split], net.classes(), momentum)?;
        Ok(Some(Self { split, readout, feedback, train_readout }))
    }

    /// Mid readout output and loss gradient for this step.
    pub fn mid_error(&self, rec: &StepRecord, labels: &[usize], loss: &LossSpec) -> Result<(Tensor, ActivityGrad)> {
        let a = layer_activity(rec, self.split - 1);
        let r = self.readout.forward(a)?;
        let ag = local_activity_grad(a, &self.readout, labels, loss)?;
        Ok((r, ag))
    }

    /// Refreshes the lower feedback matrices from the perturbed mid readout.
    pub fn update_feedback(&mut self, perturb: &PerturbRecord, r_tilde: &Tensor, rule: FeedbackRule) -> Result<()> {
        let below = PerturbRecord { z: perturb.z[..self.split].to_vec(), z_out: None, ..perturb.clone() };
        opzo_update_feedback(&mut self.feedback, &below, r_tilde, None, rule)
    }
}

/// Signals for the layers below the split, driven by `e_mid`.
pub fn igl_errors(e_mid: &Tensor, igl: Option<&IglSpec>, rec: &StepRecord, net: &Network, opts: SignalOptions) -> Result<Vec<Tensor>> {
    let igl = igl.ok_or_else(|| Error::Missing("intermediate global learning is not configured".into()))?;
    let sub = sub_network(net, igl.split);
    let sub_rec = StepRecord {
        u: rec.u[..igl.split].to_vec(),
        masks: rec.masks[..igl.split].to_vec(),
        output: Tensor::zeros(e_mid.shape()),
        ..rec.clone()
    };
    Ok(opzo_errors(e_mid, &igl.feedback, &sub_rec, &sub, opts)?.hidden)
}

fn sub_network(net: &Network, split: usize) -> Network {
    Network { spec: net.spec.clone(), hidden: net.hidden[..split].to_vec(), readout: net.readout.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelSpec;
    use crate::numerics::{sample_noise, NoiseDistribution};

    fn setup() -> (Network, StepRecord) {
        let net = ModelSpec::new("FC6-FC5-FC", [4, 1, 1], 3).build(&mut RngState::new(1)).unwrap();
        let x = sample_noise(&mut RngState::new(2), NoiseDistribution::Gaussian, &[2, 4]).unwrap().scale(3.0);
        let rec = net.rollout(&[x]).unwrap().steps.remove(0);
        (net, rec)
    }

    #[test]
    fn zero_scale_adds_nothing() {
        let (net, rec) = setup();
        let ro = LocalReadout::new(&net, 0, 0.0, &mut RngState::new(3)).unwrap();
        let lo = local_errors(&rec, &net, &ro, &[0, 2], &LossSpec::default()).unwrap();
        let mut sig = ErrorSignal::zeros_like(&rec);
        sig.hidden[0] = Tensor::full(&[2, 6], 0.5);
        let before = sig.clone();
        add_local(&mut sig, 0, &lo.signal, ro.scale).unwrap();
        assert_eq!(sig, before);
    }

    #[test]
    fn perfect_local_fit_contributes_zero() {
        let kind = LayerKind::Fc { in_dim: 3, out_dim: 3 };
        let mut params = LayerParams::zeros(kind);
        params.w = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let ro = LocalReadout { layer: 0, params, scale: 1.0 };
        let y = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let ag = local_activity_grad(&y, &ro, &[1], &LossSpec { ce_weight: 0.0 }).unwrap();
        assert!(ag.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activity_grad_matches_finite_differences() {
        let mut rng = RngState::new(4);
        let net = ModelSpec::new("FC5-FC", [3, 1, 1], 4).build(&mut rng).unwrap();
        let ro = LocalReadout::new(&net, 0, 1.0, &mut rng).unwrap();
        let a = sample_noise(&mut rng, NoiseDistribution::Gaussian, &[1, 5]).unwrap();
        let spec = LossSpec::default();
        let ag = local_activity_grad(&a, &ro, &[3], &spec).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let mut ap = a.clone();
            ap.data_mut()[i] += h;
            let mut am = a.clone();
            am.data_mut()[i] -= h;
            let fp = local_activity_grad(&ap, &ro, &[3], &spec).unwrap().loss;
            let fm = local_activity_grad(&am, &ro, &[3], &spec).unwrap().loss;
            let fd = (fp - fm) / (2.0 * h);
            let g = ag.grad.data()[i];
            assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn additivity_is_exact() {
        let (net, rec) = setup();
        let ro = LocalReadout::new(&net, 1, 0.01, &mut RngState::new(5)).unwrap();
        let lo = local_errors(&rec, &net, &ro, &[1, 0], &LossSpec::default()).unwrap();
        let mut sig = ErrorSignal::zeros_like(&rec);
        sig.hidden[1] = sample_noise(&mut RngState::new(6), NoiseDistribution::Gaussian, &[2, 5]).unwrap();
        let global = sig.hidden[1].clone();
        add_local(&mut sig, 1, &lo.signal, 0.01).unwrap();
        for ((t, g), l) in sig.hidden[1].data().iter().zip(global.data()).zip(lo.signal.data()) {
            assert_eq!(*t, g + 0.01 * l);
        }
    }

    #[test]
    fn igl_split_bounds() {
        let (net, rec) = setup();
        let mut rng = RngState::new(7);
        assert!(IglSpec::new(&net, 0, 0.9, true, &mut rng).is_err());
        assert!(IglSpec::new(&net, 3, 0.9, true, &mut rng).is_err());
        assert!(IglSpec::new(&net, 2, 0.9, true, &mut rng).unwrap().is_none());
        assert!(igl_errors(&Tensor::zeros(&[2, 3]), None, &rec, &net, SignalOptions::default()).is_err());
        let mut igl = IglSpec::new(&net, 1, 0.9, true, &mut rng).unwrap().unwrap();
        igl.feedback.matrices[0] = Tensor::full(&[6, 3], 0.3);
        let sig = igl_errors(&Tensor::zeros(&[2, 3]), Some(&igl), &rec, &net, SignalOptions::default()).unwrap();
        assert_eq!(sig.len(), 1);
        assert!(sig[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nine_layer_split_shapes() {
        let spec = ModelSpec::new(
            crate::network::preset_arch("conv9").unwrap().replace("512", "8").replace("256", "6").replace("128", "4"),
            [3, 16, 16],
            10,
        );
        let net = spec.build(&mut RngState::new(0)).unwrap();
        assert_eq!(net.hidden.len() + 1, 9);
        let x = sample_noise(&mut RngState::new(1), NoiseDistribution::Gaussian, &[2, 3 * 256]).unwrap();
        let rec = net.rollout(&[x]).unwrap().steps.remove(0);
        let mut igl = IglSpec::new(&net, 4, 0.9, true, &mut RngState::new(2)).unwrap().unwrap();
        for m in igl.feedback.matrices.iter_mut() {
            m.fill(0.1);
        }
        let (_, ag) = igl.mid_error(&rec, &[1, 7], &LossSpec::default()).unwrap();
        let sig = igl_errors(&ag.error, Some(&igl), &rec, &net, SignalOptions::default()).unwrap();
        assert_eq!(sig.len(), 4);
        for (l, s) in sig.iter().enumerate() {
            assert_eq!(s.shape(), &[2, net.hidden[l].width()]);
        }
    }
}
