//! Batched linear operators: fully connected, 2-D convolution and average pooling.
//!
//! All operate on `[batch, features]` row-major buffers. Convolution is
//! lowered per sample to `im2col` followed by a GEMM.

use serde::{Deserialize, Serialize};

use crate::numerics::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn in_dim(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_dim(&self) -> usize {
        self.out_c * self.positions()
    }

    /// `cols[(c, ky, kx), (oy, ox)]` for one sample.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let npos = oh * ow;
        for c in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.in_h && (ix as usize) < self.in_w {
                                x[(c * self.in_h + iy as usize) * self.in_w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add inverse of [`Self::im2col`].
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let npos = oh * ow;
        for c in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            x[(c * self.in_h + iy as usize) * self.in_w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
}

impl PoolGeometry {
    pub fn out_h(&self) -> usize {
        self.in_h / self.k
    }

    pub fn out_w(&self) -> usize {
        self.in_w / self.k
    }

    pub fn in_dim(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn out_dim(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }

    pub fn forward(&self, x: &[f64], batch: usize, out: &mut [f64]) {
        let (ind, outd) = (self.in_dim(), self.out_dim());
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.k);
        let inv = 1.0 / (k * k) as f64;
        for b in 0..batch {
            let xs = &x[b * ind..(b + 1) * ind];
            let os = &mut out[b * outd..(b + 1) * outd];
            for c in 0..self.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            let row = (c * self.in_h + oy * k + dy) * self.in_w + ox * k;
                            acc += xs[row..row + k].iter().sum::<f64>();
                        }
                        os[(c * oh + oy) * ow + ox] = acc * inv;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::forward`]; overwrites `gin`.
    pub fn backward(&self, g: &[f64], batch: usize, gin: &mut [f64]) {
        let (ind, outd) = (self.in_dim(), self.out_dim());
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.k);
        let inv = 1.0 / (k * k) as f64;
        gin.iter_mut().for_each(|v| *v = 0.0);
        for b in 0..batch {
            let gs = &g[b * outd..(b + 1) * outd];
            let is = &mut gin[b * ind..(b + 1) * ind];
            for c in 0..self.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = gs[(c * oh + oy) * ow + ox] * inv;
                        for dy in 0..k {
                            let row = (c * self.in_h + oy * k + dy) * self.in_w + ox * k;
                            is[row..row + k].iter_mut().for_each(|x| *x = v);
                        }
                    }
                }
            }
        }
    }
}

/// Synaptic operator of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Fc { in_dim: usize, out_dim: usize },
    Conv(ConvGeometry),
    AvgPool(PoolGeometry),
}

impl LayerKind {
    pub fn in_dim(&self) -> usize {
        match self {
            LayerKind::Fc { in_dim, .. } => *in_dim,
            LayerKind::Conv(g) => g.in_dim(),
            LayerKind::AvgPool(p) => p.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LayerKind::Fc { out_dim, .. } => *out_dim,
            LayerKind::Conv(g) => g.out_dim(),
            LayerKind::AvgPool(p) => p.out_dim(),
        }
    }

    /// `[rows, fan_in]` of the weight matrix, `None` for parameter-free ops.
    pub fn weight_shape(&self) -> Option<[usize; 2]> {
        match self {
            LayerKind::Fc { in_dim, out_dim } => Some([*out_dim, *in_dim]),
            LayerKind::Conv(g) => Some([g.out_c, g.patch()]),
            LayerKind::AvgPool(_) => None,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            LayerKind::Fc { out_dim, .. } => *out_dim,
            LayerKind::Conv(g) => g.out_c,
            LayerKind::AvgPool(_) => 0,
        }
    }

    /// Number of downstream synapses touched by one active input unit.
    pub fn fan_out(&self) -> usize {
        match self {
            LayerKind::Fc { out_dim, .. } => *out_dim,
            // interior units; border units reach fewer positions
            LayerKind::Conv(g) => {
                let per_axis = g.kernel.div_ceil(g.stride);
                g.out_c * per_axis * per_axis
            }
            LayerKind::AvgPool(_) => 1,
        }
    }

    /// `out = op(x) + bias`.
    pub fn forward(&self, w: &[f64], bias: &[f64], x: &[f64], batch: usize, out: &mut [f64]) {
        match self {
            LayerKind::Fc { in_dim, out_dim } => {
                gemm(batch, *in_dim, *out_dim, 1.0, x, false, w, true, 0.0, out);
                for row in out.chunks_mut(*out_dim) {
                    for (o, b) in row.iter_mut().zip(bias) {
                        *o += b;
                    }
                }
            }
            LayerKind::Conv(g) => {
                let (ind, outd, patch, npos) = (g.in_dim(), g.out_dim(), g.patch(), g.positions());
                let mut cols = vec![0.0; patch * npos];
                for b in 0..batch {
                    g.im2col(&x[b * ind..(b + 1) * ind], &mut cols);
                    let os = &mut out[b * outd..(b + 1) * outd];
                    gemm(g.out_c, patch, npos, 1.0, w, false, &cols, false, 0.0, os);
                    for (c, plane) in os.chunks_mut(npos).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            }
            LayerKind::AvgPool(p) => p.forward(x, batch, out),
        }
    }

    /// `gin = op^T(g)`; overwrites `gin`.
    pub fn backward_input(&self, w: &[f64], g: &[f64], batch: usize, gin: &mut [f64]) {
        match self {
            LayerKind::Fc { in_dim, out_dim } => {
                gemm(batch, *out_dim, *in_dim, 1.0, g, false, w, false, 0.0, gin);
            }
            LayerKind::Conv(geo) => {
                let (ind, outd, patch, npos) = (geo.in_dim(), geo.out_dim(), geo.patch(), geo.positions());
                let mut cols = vec![0.0; patch * npos];
                gin.iter_mut().for_each(|v| *v = 0.0);
                for b in 0..batch {
                    gemm(patch, geo.out_c, npos, 1.0, w, true, &g[b * outd..(b + 1) * outd], false, 0.0, &mut cols);
                    geo.col2im(&cols, &mut gin[b * ind..(b + 1) * ind]);
                }
            }
            LayerKind::AvgPool(p) => p.backward(g, batch, gin),
        }
    }

    /// `dw += scale * g^T a` (correlation for conv), `db += scale * sum(g)`.
    pub fn accumulate_grad(&self, g: &[f64], a: &[f64], batch: usize, scale: f64, dw: &mut [f64], db: &mut [f64]) {
        self.accumulate_weight(g, a, batch, scale, dw);
        self.accumulate_bias(g, batch, scale, db);
    }

    pub fn accumulate_weight(&self, g: &[f64], a: &[f64], batch: usize, scale: f64, dw: &mut [f64]) {
        match self {
            LayerKind::Fc { in_dim, out_dim } => {
                gemm(*out_dim, batch, *in_dim, scale, g, true, a, false, 1.0, dw);
            }
            LayerKind::Conv(geo) => {
                let (ind, outd, patch, npos) = (geo.in_dim(), geo.out_dim(), geo.patch(), geo.positions());
                let mut cols = vec![0.0; patch * npos];
                for b in 0..batch {
                    geo.im2col(&a[b * ind..(b + 1) * ind], &mut cols);
                    let gs = &g[b * outd..(b + 1) * outd];
                    gemm(geo.out_c, npos, patch, scale, gs, false, &cols, true, 1.0, dw);
                }
            }
            LayerKind::AvgPool(_) => {}
        }
    }

    pub fn accumulate_bias(&self, g: &[f64], batch: usize, scale: f64, db: &mut [f64]) {
        let (outd, per) = match self {
            LayerKind::Fc { out_dim, .. } => (*out_dim, 1),
            LayerKind::Conv(geo) => (geo.out_dim(), geo.positions()),
            LayerKind::AvgPool(_) => return,
        };
        for row in g[..batch * outd].chunks(outd) {
            for (d, unit) in db.iter_mut().zip(row.chunks(per)) {
                *d += scale * unit.iter().sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, RngState};

    fn randn(rng: &mut RngState, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    fn naive_conv(g: &ConvGeometry, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
        let mut out = vec![0.0; g.out_dim()];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..g.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.in_h || ix as usize >= g.in_w {
                                    continue;
                                }
                                acc += w[((o * g.in_c + c) * k + ky) * k + kx] * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = RngState::new(1);
        for (stride, padding) in [(1, 1), (2, 0), (1, 0)] {
            let g = ConvGeometry { in_c: 2, in_h: 5, in_w: 6, out_c: 3, kernel: 3, stride, padding };
            let w = randn(&mut rng, g.out_c * g.patch());
            let b = randn(&mut rng, g.out_c);
            let x = randn(&mut rng, 2 * g.in_dim());
            let kind = LayerKind::Conv(g);
            let mut out = vec![0.0; 2 * g.out_dim()];
            kind.forward(&w, &b, &x, 2, &mut out);
            for s in 0..2 {
                let expect = naive_conv(&g, &w, &b, &x[s * g.in_dim()..(s + 1) * g.in_dim()]);
                for (a, e) in out[s * g.out_dim()..(s + 1) * g.out_dim()].iter().zip(&expect) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    /// `<op(x), y> == <x, op^T(y)>` for every operator.
    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = RngState::new(2);
        let kinds = [
            LayerKind::Fc { in_dim: 7, out_dim: 4 },
            LayerKind::Conv(ConvGeometry { in_c: 2, in_h: 6, in_w: 6, out_c: 3, kernel: 3, stride: 1, padding: 1 }),
            LayerKind::AvgPool(PoolGeometry { channels: 2, in_h: 4, in_w: 6, k: 2 }),
        ];
        for kind in kinds {
            let batch = 3;
            let nw = kind.weight_shape().map_or(0, |[r, c]| r * c);
            let w = randn(&mut rng, nw);
            let zero_bias = vec![0.0; kind.bias_len()];
            let x = randn(&mut rng, batch * kind.in_dim());
            let y = randn(&mut rng, batch * kind.out_dim());
            let mut fx = vec![0.0; y.len()];
            kind.forward(&w, &zero_bias, &x, batch, &mut fx);
            let mut bty = vec![0.0; x.len()];
            kind.backward_input(&w, &y, batch, &mut bty);
            assert!((dot(&fx, &y) - dot(&x, &bty)).abs() < 1e-10, "{kind:?}");
        }
    }

    /// Weight gradient of `<op_w(a), g>` is linear in `w`: check against directional derivative.
    #[test]
    fn weight_grad_matches_directional_derivative() {
        let mut rng = RngState::new(3);
        let kinds = [
            LayerKind::Fc { in_dim: 5, out_dim: 3 },
            LayerKind::Conv(ConvGeometry { in_c: 2, in_h: 5, in_w: 5, out_c: 2, kernel: 3, stride: 1, padding: 1 }),
        ];
        for kind in kinds {
            let batch = 2;
            let [r, c] = kind.weight_shape().unwrap();
            let w = randn(&mut rng, r * c);
            let dir = randn(&mut rng, r * c);
            let bias = randn(&mut rng, kind.bias_len());
            let a = randn(&mut rng, batch * kind.in_dim());
            let g = randn(&mut rng, batch * kind.out_dim());
            let mut dw = vec![0.0; r * c];
            let mut db = vec![0.0; kind.bias_len()];
            kind.accumulate_grad(&g, &a, batch, 1.0, &mut dw, &mut db);
            let objective = |w: &[f64], b: &[f64]| {
                let mut out = vec![0.0; g.len()];
                kind.forward(w, b, &a, batch, &mut out);
                dot(&out, &g)
            };
            let w2: Vec<f64> = w.iter().zip(&dir).map(|(x, d)| x + d).collect();
            let directional = objective(&w2, &bias) - objective(&w, &bias);
            assert!((directional - dot(&dw, &dir)).abs() < 1e-9);
            let b2: Vec<f64> = bias.iter().map(|v| v + 1.0).collect();
            let bias_dir = objective(&w, &b2) - objective(&w, &bias);
            assert!((bias_dir - db.iter().sum::<f64>()).abs() < 1e-9);
        }
    }

    #[test]
    fn one_by_one_conv_equals_fc() {
        let mut rng = RngState::new(4);
        let (cin, cout, batch) = (6, 4, 3);
        let w = randn(&mut rng, cout * cin);
        let b = randn(&mut rng, cout);
        let x = randn(&mut rng, batch * cin);
        let conv = LayerKind::Conv(ConvGeometry { in_c: cin, in_h: 1, in_w: 1, out_c: cout, kernel: 1, stride: 1, padding: 0 });
        let fc = LayerKind::Fc { in_dim: cin, out_dim: cout };
        let mut oc = vec![0.0; batch * cout];
        let mut of = vec![0.0; batch * cout];
        conv.forward(&w, &b, &x, batch, &mut oc);
        fc.forward(&w, &b, &x, batch, &mut of);
        assert_eq!(oc, of);
    }
}
