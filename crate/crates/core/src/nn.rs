//! A small fully-convolutional grid network with explicit backward passes.
//!
//! Layout is channel-first (`c, h, w`) throughout. The architecture is five
//! 3x3 convolutions (three with stride 2), a squeeze-style channel gate fed
//! by the spatial mean of the last feature map, and a 1x1 prediction head
//! with five channels per prior: `tx, ty, tw, th, to`.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const OUTPUTS_PER_PRIOR: usize = 5;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Weight and bias gradients of one convolution.
pub type ConvGrads = (Array2<f64>, Array1<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out_c, in_c * k * k)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Array2::from_shape_fn((out_c, in_c * kernel * kernel), |_| normal.sample(rng)),
            bias: Array1::zeros(out_c),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: ArrayView3<'_, f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; c * k * k * n];
        let src = x.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, n), cols).expect("im2col shape")
    }

    fn col2im(&self, cols: &Array2<f64>, in_shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_shape;
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let n = oh * ow;
        let mut out = vec![0.0; c * h * w];
        let cols = cols.as_standard_layout();
        let cols = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let srow = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[base + ix as usize] += srow[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((c, h, w), out).expect("col2im shape")
    }

    /// Returns the pre-activation output and the column buffer for backward.
    pub fn forward(&self, x: ArrayView3<'_, f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut out = self.weight.dot(&cols);
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += *b;
        }
        let out = out.into_shape_with_order((self.out_c, oh, ow)).expect("conv out shape");
        (out, cols)
    }

    /// Returns `(d_input, d_weight, d_bias)`; parameter gradients only when
    /// requested.
    pub fn backward(
        &self,
        in_shape: (usize, usize, usize),
        cols: &Array2<f64>,
        d_out: &Array3<f64>,
        want_params: bool,
    ) -> (Array3<f64>, Option<ConvGrads>) {
        let (oc, oh, ow) = d_out.dim();
        let d2 = d_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((oc, oh * ow))
            .expect("flatten d_out");
        let d_cols = self.weight.t().dot(&d2);
        let d_in = self.col2im(&d_cols, in_shape);
        let params = want_params.then(|| (d2.dot(&cols.t()), d2.sum_axis(Axis(1))));
        (d_in, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArch {
    pub input_size: usize,
    pub channels: [usize; 5],
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            input_size: 104,
            channels: [8, 16, 32, 32, 32],
        }
    }
}

impl ToyArch {
    pub const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

    pub fn grid_size(&self) -> usize {
        Self::STRIDES
            .iter()
            .fold(self.input_size, |n, s| (n + 2 - 3) / s + 1)
    }
}

/// Network parameters. `theta` of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub arch: ToyArch,
    pub convs: Vec<Conv2d>,
    /// `(c, c)` gate weights and bias.
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
    pub head: Conv2d,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ToyTape {
    input_shape: (usize, usize, usize),
    conv_in_shapes: Vec<(usize, usize, usize)>,
    conv_cols: Vec<Array2<f64>>,
    conv_pre: Vec<Array3<f64>>,
    feat: Array3<f64>,
    pooled: Array1<f64>,
    gate: Array1<f64>,
    head_cols: Array2<f64>,
    pub output: Array3<f64>,
}

/// Parameter gradients in the same layout as [`ToyNet::flat_params`].
pub type FlatGrad = Vec<f64>;

impl ToyNet {
    pub fn new(arch: ToyArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut in_c = 3;
        for (&out_c, &stride) in arch.channels.iter().zip(ToyArch::STRIDES.iter()) {
            convs.push(Conv2d::new(in_c, out_c, 3, stride, &mut rng));
            in_c = out_c;
        }
        let c = in_c;
        let gate_std = (1.0 / c as f64).sqrt();
        let normal = Normal::new(0.0, gate_std).expect("valid std");
        let gate_w = Array2::from_shape_fn((c, c), |_| normal.sample(&mut rng));
        let mut head = Conv2d::new(c, OUTPUTS_PER_PRIOR, 1, 1, &mut rng);
        head.weight.mapv_inplace(|v| v * 0.1);
        // start with low objectness so early training is not swamped by
        // background false positives
        head.bias[4] = -4.0;
        Self {
            arch,
            convs,
            gate_w,
            gate_b: Array1::from_elem(c, 1.0),
            head,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.arch.grid_size()
    }

    pub fn forward(&self, input: ArrayView3<'_, f64>) -> ToyTape {
        let input_shape = input.dim();
        let mut conv_in_shapes = Vec::with_capacity(self.convs.len());
        let mut conv_cols = Vec::with_capacity(self.convs.len());
        let mut conv_pre = Vec::with_capacity(self.convs.len());
        let mut act = input.to_owned();
        for conv in &self.convs {
            conv_in_shapes.push(act.dim());
            let (pre, cols) = conv.forward(act.view());
            act = pre.mapv(leaky);
            conv_cols.push(cols);
            conv_pre.push(pre);
        }
        let (c, h, w) = act.dim();
        let pooled = act
            .view()
            .into_shape_with_order((c, h * w))
            .expect("contiguous features")
            .mean_axis(Axis(1))
            .expect("non-empty grid");
        let gate = (self.gate_w.dot(&pooled) + &self.gate_b).mapv(sigmoid);
        let mut gated = act.clone();
        for (mut plane, g) in gated.axis_iter_mut(Axis(0)).zip(gate.iter()) {
            plane *= *g;
        }
        let (output, head_cols) = self.head.forward(gated.view());
        ToyTape {
            input_shape,
            conv_in_shapes,
            conv_cols,
            conv_pre,
            feat: act,
            pooled,
            gate,
            head_cols,
            output,
        }
    }

    /// Back-propagates `d_output` (same shape as `tape.output`). Returns the
    /// input gradient and, when requested, flat parameter gradients.
    pub fn backward(&self, tape: &ToyTape, d_output: &Array3<f64>, want_params: bool) -> (Array3<f64>, Option<FlatGrad>) {
        let (c, h, w) = tape.feat.dim();
        let (d_gated, head_grads) = self
            .head
            .backward(tape.feat.dim(), &tape.head_cols, d_output, want_params);

        // gate: gated = feat * s, s = sigmoid(W pooled + b)
        let mut d_feat = d_gated.clone();
        let mut d_s = Array1::zeros(c);
        for ch in 0..c {
            let plane_g = d_gated.index_axis(Axis(0), ch);
            let plane_f = tape.feat.index_axis(Axis(0), ch);
            d_s[ch] = (&plane_g * &plane_f).sum();
            d_feat.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * tape.gate[ch]);
        }
        let d_u = &d_s * &tape.gate.mapv(|s| s * (1.0 - s));
        let d_pooled = self.gate_w.t().dot(&d_u);
        let inv_area = 1.0 / (h * w) as f64;
        for ch in 0..c {
            let add = d_pooled[ch] * inv_area;
            d_feat.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + add);
        }

        let mut conv_grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; self.convs.len()];
        let mut d_act = d_feat;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let d_pre = &d_act * &tape.conv_pre[i].mapv(leaky_grad);
            let (d_in, g) = conv.backward(tape.conv_in_shapes[i], &tape.conv_cols[i], &d_pre, want_params);
            conv_grads[i] = g;
            d_act = d_in;
        }
        debug_assert_eq!(d_act.dim(), tape.input_shape);

        let flat = want_params.then(|| {
            let mut flat = Vec::with_capacity(self.num_params());
            for g in conv_grads.iter() {
                let (dw, db) = g.as_ref().expect("param grads requested");
                flat.extend(dw.iter());
                flat.extend(db.iter());
            }
            let d_gate_w = d_u
                .view()
                .insert_axis(Axis(1))
                .dot(&tape.pooled.view().insert_axis(Axis(0)));
            flat.extend(d_gate_w.iter());
            flat.extend(d_u.iter());
            let (dw, db) = head_grads.expect("param grads requested");
            flat.extend(dw.iter());
            flat.extend(db.iter());
            flat
        });
        (d_act, flat)
    }

    pub fn num_params(&self) -> usize {
        self.convs
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|c| c.weight.len() + c.bias.len())
            .sum::<usize>()
            + self.gate_w.len()
            + self.gate_b.len()
    }

    /// All parameters in a fixed order: convs (weight, bias), gate (weight,
    /// bias), head (weight, bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for conv in &self.convs {
            out.extend(conv.weight.iter());
            out.extend(conv.bias.iter());
        }
        out.extend(self.gate_w.iter());
        out.extend(self.gate_b.iter());
        out.extend(self.head.weight.iter());
        out.extend(self.head.bias.iter());
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter count");
        let mut offset = 0;
        let mut fill = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        };
        for conv in self.convs.iter_mut() {
            fill(conv.weight.as_slice_mut().expect("contiguous"));
            fill(conv.bias.as_slice_mut().expect("contiguous"));
        }
        fill(self.gate_w.as_slice_mut().expect("contiguous"));
        fill(self.gate_b.as_slice_mut().expect("contiguous"));
        fill(self.head.weight.as_slice_mut().expect("contiguous"));
        fill(self.head.bias.as_slice_mut().expect("contiguous"));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.flat_params().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(arch: ToyArch, bytes: &[u8]) -> Option<Self> {
        let mut net = Self::new(arch, 0);
        if bytes.len() != net.num_params() * 8 {
            return None;
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        net.set_flat_params(&flat);
        Some(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_net() -> ToyNet {
        ToyNet::new(
            ToyArch {
                input_size: 24,
                channels: [3, 4, 4, 4, 4],
            },
            5,
        )
    }

    fn random_input(n: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, n, n), |_| rng.gen())
    }

    #[test]
    fn grid_size_for_default_arch() {
        assert_eq!(ToyArch::default().grid_size(), 13);
        let net = ToyNet::new(ToyArch::default(), 1);
        let tape = net.forward(random_input(104, 1).view());
        assert_eq!(tape.output.dim(), (5, 13, 13));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, 2, &mut rng);
        let x = random_input(7, 3).slice_move(ndarray::s![..2, .., ..]);
        let (out, _) = conv.forward(x.view());
        let (oh, ow) = conv.out_hw(7, 7);
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && iy < 7 && ix < 7 {
                                    acc += conv.weight[[o, (ci * 3 + ky) * 3 + kx]] * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - out[[o, oy, ox]]).abs() < 1e-12);
                }
            }
        }
    }

    fn weighted_loss(net: &ToyNet, x: &Array3<f64>, wts: &Array3<f64>) -> f64 {
        (&net.forward(x.view()).output * wts).sum()
    }

    #[test]
    fn input_and_param_gradients_match_finite_differences() {
        let net = small_net();
        let x = random_input(24, 7);
        let tape = net.forward(x.view());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let wts = Array3::from_shape_fn(tape.output.dim(), |_| rng.gen_range(-1.0..1.0));
        let (dx, dp) = net.backward(&tape, &wts, true);
        let dp = dp.unwrap();
        let h = 1e-5;
        for _ in 0..10 {
            let idx = (rng.gen_range(0..3), rng.gen_range(0..24), rng.gen_range(0..24));
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = (weighted_loss(&net, &p, &wts) - weighted_loss(&net, &m, &wts)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() <= 1e-6 + 1e-4 * fd.abs(), "input {idx:?}: {fd} vs {}", dx[idx]);
        }
        let theta = net.flat_params();
        for _ in 0..15 {
            let i = rng.gen_range(0..theta.len());
            let mut a = net.clone();
            let mut t = theta.clone();
            t[i] += h;
            a.set_flat_params(&t);
            let mut b = net.clone();
            t[i] -= 2.0 * h;
            b.set_flat_params(&t);
            let fd = (weighted_loss(&a, &x, &wts) - weighted_loss(&b, &x, &wts)) / (2.0 * h);
            assert!((fd - dp[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {i}: {fd} vs {}", dp[i]);
        }
    }

    #[test]
    fn byte_round_trip() {
        let net = small_net();
        let back = ToyNet::from_bytes(net.arch, &net.to_bytes()).unwrap();
        assert_eq!(back, net);
        assert!(ToyNet::from_bytes(net.arch, &[0u8; 8]).is_none());
    }
}
