//! Forward ops and their backward rules.
//!
//! The layer set is exactly what the segmentation models need: 3x3 "same"
//! convolution, 2x2 max-pooling, 2x2-stride-2 transposed convolution,
//! channel-wise dense (1x1 conv), relu/sigmoid, inverted dropout, channel
//! concatenation, two masked losses, and two small reductions used in tests.
//!
//! Layout for 4-d tensors is N x H x W x C row-major.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{BackwardCtx, BackwardOp, Graph, NodeId};
use super::tensor::Tensor;

/// Clamp applied to predictions inside the cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-7;
/// Additive smoothing constant of the dice loss.
pub const DICE_EPSILON: f64 = 1.0;

const SIGMOID_MIN: f64 = f64::MIN_POSITIVE;
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv2d: odd kernel, stride 1, "same" zero padding
// ---------------------------------------------------------------------------

struct Conv2dBack {
    input: NodeId,
    kernel: NodeId,
    bias: NodeId,
}

impl BackwardOp for Conv2dBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let input = &ctx.values[self.input.0];
        let kernel = &ctx.values[self.kernel.0];
        let (n, h, w, c_in) = input.dims4().expect("checked at forward");
        let k = kernel.shape()[0];
        let c_out = kernel.shape()[3];
        let pad = k / 2;
        let gout = ctx.grad_out;

        if let Some(gb) = ctx.accumulate(self.bias) {
            for base in (0..n * h * w * c_out).step_by(c_out) {
                for (co, g) in gb.iter_mut().enumerate() {
                    *g += gout[base + co];
                }
            }
        }

        let x = input.data();
        if let Some(gk) = ctx.accumulate(self.kernel) {
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let out_base = ((ni * h + hi) * w + wi) * c_out;
                        for kh in 0..k {
                            let ih = hi + kh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kw in 0..k {
                                let iw = wi + kw;
                                if iw < pad || iw - pad >= w {
                                    continue;
                                }
                                let iw = iw - pad;
                                let in_base = ((ni * h + ih) * w + iw) * c_in;
                                let k_base = (kh * k + kw) * c_in * c_out;
                                for ci in 0..c_in {
                                    let v = x[in_base + ci];
                                    let row = k_base + ci * c_out;
                                    for co in 0..c_out {
                                        gk[row + co] += v * gout[out_base + co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        if ctx.requires_grad[self.input.0] {
            let kdata = kernel.data();
            let gx = ctx.accumulate(self.input).expect("requires grad");
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let out_base = ((ni * h + hi) * w + wi) * c_out;
                        for kh in 0..k {
                            let ih = hi + kh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kw in 0..k {
                                let iw = wi + kw;
                                if iw < pad || iw - pad >= w {
                                    continue;
                                }
                                let iw = iw - pad;
                                let in_base = ((ni * h + ih) * w + iw) * c_in;
                                let k_base = (kh * k + kw) * c_in * c_out;
                                for ci in 0..c_in {
                                    let row = k_base + ci * c_out;
                                    let mut acc = 0.0;
                                    for co in 0..c_out {
                                        acc += kdata[row + co] * gout[out_base + co];
                                    }
                                    gx[in_base + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// maxpool2
// ---------------------------------------------------------------------------

struct MaxPool2Back {
    input: NodeId,
    /// Flat input index of the winning element per output element.
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPool2Back {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let gout = ctx.grad_out;
        if let Some(gx) = ctx.accumulate(self.input) {
            for (o, &src) in self.argmax.iter().enumerate() {
                gx[src] += gout[o];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d_transpose: 2x2 kernel, stride 2 (disjoint output blocks)
// ---------------------------------------------------------------------------

struct ConvTranspose2dBack {
    input: NodeId,
    kernel: NodeId,
    bias: NodeId,
}

impl BackwardOp for ConvTranspose2dBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let input = &ctx.values[self.input.0];
        let kernel = &ctx.values[self.kernel.0];
        let (n, h, w, c_in) = input.dims4().expect("checked at forward");
        let c_out = kernel.shape()[3];
        let (oh, ow) = (2 * h, 2 * w);
        let gout = ctx.grad_out;

        if let Some(gb) = ctx.accumulate(self.bias) {
            for base in (0..n * oh * ow * c_out).step_by(c_out) {
                for (co, g) in gb.iter_mut().enumerate() {
                    *g += gout[base + co];
                }
            }
        }

        let x = input.data();
        if let Some(gk) = ctx.accumulate(self.kernel) {
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let in_base = ((ni * h + hi) * w + wi) * c_in;
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let out_base =
                                    ((ni * oh + 2 * hi + kh) * ow + 2 * wi + kw) * c_out;
                                let k_base = (kh * 2 + kw) * c_in * c_out;
                                for ci in 0..c_in {
                                    let v = x[in_base + ci];
                                    let row = k_base + ci * c_out;
                                    for co in 0..c_out {
                                        gk[row + co] += v * gout[out_base + co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        if ctx.requires_grad[self.input.0] {
            let kdata = kernel.data();
            let gx = ctx.accumulate(self.input).expect("requires grad");
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let in_base = ((ni * h + hi) * w + wi) * c_in;
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let out_base =
                                    ((ni * oh + 2 * hi + kh) * ow + 2 * wi + kw) * c_out;
                                let k_base = (kh * 2 + kw) * c_in * c_out;
                                for ci in 0..c_in {
                                    let row = k_base + ci * c_out;
                                    let mut acc = 0.0;
                                    for co in 0..c_out {
                                        acc += kdata[row + co] * gout[out_base + co];
                                    }
                                    gx[in_base + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// dense_channelwise (1x1 convolution)
// ---------------------------------------------------------------------------

struct DenseChannelwiseBack {
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
}

impl BackwardOp for DenseChannelwiseBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let input = &ctx.values[self.input.0];
        let weight = &ctx.values[self.weight.0];
        let (c_in, c_out) = (weight.shape()[0], weight.shape()[1]);
        let positions = input.numel() / c_in;
        let gout = ctx.grad_out;

        if let Some(gb) = ctx.accumulate(self.bias) {
            for p in 0..positions {
                let base = p * c_out;
                for (co, g) in gb.iter_mut().enumerate() {
                    *g += gout[base + co];
                }
            }
        }

        let x = input.data();
        if let Some(gw) = ctx.accumulate(self.weight) {
            for p in 0..positions {
                let in_base = p * c_in;
                let out_base = p * c_out;
                for ci in 0..c_in {
                    let v = x[in_base + ci];
                    let row = ci * c_out;
                    for co in 0..c_out {
                        gw[row + co] += v * gout[out_base + co];
                    }
                }
            }
        }

        if ctx.requires_grad[self.input.0] {
            let wdata = weight.data();
            let gx = ctx.accumulate(self.input).expect("requires grad");
            for p in 0..positions {
                let in_base = p * c_in;
                let out_base = p * c_out;
                for ci in 0..c_in {
                    let row = ci * c_out;
                    let mut acc = 0.0;
                    for co in 0..c_out {
                        acc += wdata[row + co] * gout[out_base + co];
                    }
                    gx[in_base + ci] += acc;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

struct ReluBack {
    input: NodeId,
}

impl BackwardOp for ReluBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.values[self.input.0].data();
        let gout = ctx.grad_out;
        if let Some(gx) = ctx.accumulate(self.input) {
            for i in 0..gx.len() {
                if x[i] > 0.0 {
                    gx[i] += gout[i];
                }
            }
        }
    }
}

struct SigmoidBack {
    input: NodeId,
    out: NodeId,
}

impl BackwardOp for SigmoidBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let y = ctx.values[self.out.0].data();
        let gout = ctx.grad_out;
        if let Some(gx) = ctx.accumulate(self.input) {
            for i in 0..gx.len() {
                gx[i] += gout[i] * y[i] * (1.0 - y[i]);
            }
        }
    }
}

struct DropoutBack {
    input: NodeId,
    mask: Vec<f64>,
}

impl BackwardOp for DropoutBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let gout = ctx.grad_out;
        if let Some(gx) = ctx.accumulate(self.input) {
            for i in 0..gx.len() {
                gx[i] += gout[i] * self.mask[i];
            }
        }
    }
}

struct ConcatChannelsBack {
    a: NodeId,
    b: NodeId,
    c_a: usize,
    c_b: usize,
}

impl BackwardOp for ConcatChannelsBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let c = self.c_a + self.c_b;
        let positions = ctx.grad_out.len() / c;
        let gout = ctx.grad_out;
        if let Some(ga) = ctx.accumulate(self.a) {
            for p in 0..positions {
                let src = p * c;
                let dst = p * self.c_a;
                ga[dst..dst + self.c_a]
                    .iter_mut()
                    .zip(&gout[src..src + self.c_a])
                    .for_each(|(g, &u)| *g += u);
            }
        }
        if let Some(gb) = ctx.accumulate(self.b) {
            for p in 0..positions {
                let src = p * c + self.c_a;
                let dst = p * self.c_b;
                gb[dst..dst + self.c_b]
                    .iter_mut()
                    .zip(&gout[src..src + self.c_b])
                    .for_each(|(g, &u)| *g += u);
            }
        }
    }
}

struct SumBack {
    input: NodeId,
}

impl BackwardOp for SumBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let g = ctx.grad_out[0];
        if let Some(gx) = ctx.accumulate(self.input) {
            for v in gx.iter_mut() {
                *v += g;
            }
        }
    }
}

struct SquareBack {
    input: NodeId,
}

impl BackwardOp for SquareBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.values[self.input.0].data();
        let gout = ctx.grad_out;
        if let Some(gx) = ctx.accumulate(self.input) {
            for i in 0..gx.len() {
                gx[i] += 2.0 * x[i] * gout[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// masked losses
// ---------------------------------------------------------------------------

struct BceLossBack {
    pred: NodeId,
    target: Vec<f64>,
    valid: Vec<bool>,
    n_valid: f64,
}

impl BackwardOp for BceLossBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let p = ctx.values[self.pred.0].data();
        let g = ctx.grad_out[0];
        if let Some(gp) = ctx.accumulate(self.pred) {
            for (i, gi) in gp.iter_mut().enumerate() {
                if !self.valid[i] {
                    continue;
                }
                // The clamp has zero derivative outside its band.
                if p[i] <= BCE_CLAMP || p[i] >= 1.0 - BCE_CLAMP {
                    continue;
                }
                let pc = p[i];
                *gi += g * (pc - self.target[i]) / (pc * (1.0 - pc)) / self.n_valid;
            }
        }
    }
}

struct DiceLossBack {
    pred: NodeId,
    target: Vec<f64>,
    valid: Vec<bool>,
    numerator: f64,
    denominator: f64,
}

impl BackwardOp for DiceLossBack {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let g = ctx.grad_out[0];
        let d2 = self.denominator * self.denominator;
        if let Some(gp) = ctx.accumulate(self.pred) {
            for (i, gi) in gp.iter_mut().enumerate() {
                if !self.valid[i] {
                    continue;
                }
                // L = 1 - N/D with N = 2*sum(p*t) + eps, D = sum(p) + sum(t) + eps
                *gi += g * (self.numerator - 2.0 * self.target[i] * self.denominator) / d2;
            }
        }
    }
}

fn check_loss_inputs(graph: &Graph, pred: NodeId, target: &Tensor, valid: &[bool]) -> Result<f64> {
    let p = graph.value(pred);
    check_same_shape("loss prediction/target", p, target)?;
    if valid.len() != p.numel() {
        return Err(Error::ShapeMismatch(format!(
            "loss valid mask has {} entries for {} pixels",
            valid.len(),
            p.numel()
        )));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::DegenerateInput(
            "loss over a mask with zero valid pixels".into(),
        ));
    }
    Ok(n_valid as f64)
}

// ---------------------------------------------------------------------------
// forward entry points
// ---------------------------------------------------------------------------

impl Graph {
    /// 2-d cross-correlation with bias: odd kernel, stride 1, "same" zero
    /// padding. Input N x H x W x Cin, kernel k x k x Cin x Cout, bias Cout.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, h, w, c_in) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let (k, c_out) = match kshape[..] {
            [kh, kw, kc_in, kc_out] if kh == kw => {
                if kh % 2 == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d kernel size {kh} must be odd"
                    )));
                }
                if kc_in != c_in {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d kernel expects {kc_in} input channels, input has {c_in}"
                    )));
                }
                (kh, kc_out)
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d kernel must be k x k x Cin x Cout, got {kshape:?}"
                )))
            }
        };
        if self.value(bias).shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }

        let pad = k / 2;
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * h * w * c_out];
        let mut acc = vec![0.0; c_out];
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    acc.copy_from_slice(bd);
                    for kh in 0..k {
                        let ih = hi + kh;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let ih = ih - pad;
                        for kw in 0..k {
                            let iw = wi + kw;
                            if iw < pad || iw - pad >= w {
                                continue;
                            }
                            let iw = iw - pad;
                            let in_base = ((ni * h + ih) * w + iw) * c_in;
                            let k_base = (kh * k + kw) * c_in * c_out;
                            for ci in 0..c_in {
                                let v = x[in_base + ci];
                                let row = k_base + ci * c_out;
                                for (co, a) in acc.iter_mut().enumerate() {
                                    *a += v * kd[row + co];
                                }
                            }
                        }
                    }
                    let out_base = ((ni * h + hi) * w + wi) * c_out;
                    out[out_base..out_base + c_out].copy_from_slice(&acc);
                }
            }
        }
        let value = Tensor::new(vec![n, h, w, c_out], out)?;
        Ok(self.push_op(
            value,
            &[input, kernel, bias],
            Box::new(Conv2dBack {
                input,
                kernel,
                bias,
            }),
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order, which fixes the backward routing.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, h, w, c) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "maxpool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for ni in 0..n {
            for ho in 0..oh {
                for wo in 0..ow {
                    for ci in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let idx =
                                    ((ni * h + 2 * ho + dh) * w + 2 * wo + dw) * c + ci;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * oh + ho) * ow + wo) * c + ci;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push_op(value, &[input], Box::new(MaxPool2Back { input, argmax })))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2: every input
    /// pixel scatters into a disjoint 2x2 output block, doubling H and W.
    pub fn conv2d_transpose(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (n, h, w, c_in) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let c_out = match kshape[..] {
            [2, 2, kc_in, kc_out] => {
                if kc_in != c_in {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d_transpose kernel expects {kc_in} input channels, input has {c_in}"
                    )));
                }
                kc_out
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d_transpose kernel must be 2 x 2 x Cin x Cout, got {kshape:?}"
                )))
            }
        };
        if self.value(bias).shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d_transpose bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }

        let (oh, ow) = (2 * h, 2 * w);
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * oh * ow * c_out];
        for base in (0..out.len()).step_by(c_out) {
            out[base..base + c_out].copy_from_slice(bd);
        }
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let in_base = ((ni * h + hi) * w + wi) * c_in;
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let out_base = ((ni * oh + 2 * hi + kh) * ow + 2 * wi + kw) * c_out;
                            let k_base = (kh * 2 + kw) * c_in * c_out;
                            for ci in 0..c_in {
                                let v = x[in_base + ci];
                                let row = k_base + ci * c_out;
                                for co in 0..c_out {
                                    out[out_base + co] += v * kd[row + co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c_out], out)?;
        Ok(self.push_op(
            value,
            &[input, kernel, bias],
            Box::new(ConvTranspose2dBack {
                input,
                kernel,
                bias,
            }),
        ))
    }

    /// Per-position dense layer (equivalent to a 1x1 convolution).
    /// Weight Cin x Cout, bias Cout.
    pub fn dense_channelwise(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let in_shape = self.value(input).shape().to_vec();
        let c_in = *in_shape.last().ok_or_else(|| {
            Error::ShapeMismatch("dense_channelwise input must have at least one axis".into())
        })?;
        let wshape = self.value(weight).shape().to_vec();
        let c_out = match wshape[..] {
            [wc_in, wc_out] if wc_in == c_in => wc_out,
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "dense_channelwise weight must be [{c_in}, Cout], got {wshape:?}"
                )))
            }
        };
        if self.value(bias).shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "dense_channelwise bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }

        let positions = self.value(input).numel() / c_in;
        let x = self.value(input).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; positions * c_out];
        for p in 0..positions {
            let in_base = p * c_in;
            let out_base = p * c_out;
            out[out_base..out_base + c_out].copy_from_slice(bd);
            for ci in 0..c_in {
                let v = x[in_base + ci];
                let row = ci * c_out;
                for co in 0..c_out {
                    out[out_base + co] += v * wd[row + co];
                }
            }
        }
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = c_out;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(
            value,
            &[input, weight, bias],
            Box::new(DenseChannelwiseBack {
                input,
                weight,
                bias,
            }),
        ))
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out).expect("same shape");
        self.push_op(value, &[input], Box::new(ReluBack { input }))
    }

    /// Elementwise logistic function, clamped to stay strictly inside (0, 1)
    /// for every finite input.
    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_MIN, SIGMOID_MAX))
            .collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out).expect("same shape");
        let out_id = NodeId(self.len());
        let id = self.push_op(value, &[input], Box::new(SigmoidBack { input, out: out_id }));
        debug_assert_eq!(id, out_id);
        id
    }

    /// Inverted dropout: during training each element is zeroed independently
    /// with probability `rate` and survivors are scaled by 1/(1-rate), so
    /// inference is the identity. With `training == false` or `rate == 0` the
    /// input node is returned unchanged.
    pub fn dropout(
        &mut self,
        input: NodeId,
        rate: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out).expect("same shape");
        Ok(self.push_op(value, &[input], Box::new(DropoutBack { input, mask })))
    }

    /// Stack two tensors along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ha, wa, c_a) = self.value(a).dims4()?;
        let (nb, hb, wb, c_b) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels spatial dims differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let positions = na * ha * wa;
        let c = c_a + c_b;
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = vec![0.0; positions * c];
        for p in 0..positions {
            out[p * c..p * c + c_a].copy_from_slice(&xa[p * c_a..(p + 1) * c_a]);
            out[p * c + c_a..(p + 1) * c].copy_from_slice(&xb[p * c_b..(p + 1) * c_b]);
        }
        let value = Tensor::new(vec![na, ha, wa, c], out)?;
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(ConcatChannelsBack { a, b, c_a, c_b }),
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().sum();
        self.push_op(Tensor::scalar(s), &[input], Box::new(SumBack { input }))
    }

    /// Elementwise square.
    pub fn square(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), out).expect("same shape");
        self.push_op(value, &[input], Box::new(SquareBack { input }))
    }

    /// Binary cross-entropy averaged over valid pixels. Predictions are
    /// clamped to [1e-7, 1 - 1e-7] before the logs.
    pub fn bce_loss(&mut self, pred: NodeId, target: &Tensor, valid: &[bool]) -> Result<NodeId> {
        let n_valid = check_loss_inputs(self, pred, target, valid)?;
        let p = self.value(pred).data();
        let t = target.data();
        let mut total = 0.0;
        for i in 0..p.len() {
            if !valid[i] {
                continue;
            }
            let pc = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= t[i] * pc.ln() + (1.0 - t[i]) * (1.0 - pc).ln();
        }
        let value = Tensor::scalar(total / n_valid);
        Ok(self.push_op(
            value,
            &[pred],
            Box::new(BceLossBack {
                pred,
                target: t.to_vec(),
                valid: valid.to_vec(),
                n_valid,
            }),
        ))
    }

    /// Dice loss over valid pixels:
    /// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), eps = 1.
    pub fn dice_loss(&mut self, pred: NodeId, target: &Tensor, valid: &[bool]) -> Result<NodeId> {
        check_loss_inputs(self, pred, target, valid)?;
        let p = self.value(pred).data();
        let t = target.data();
        let mut sum_pt = 0.0;
        let mut sum_p = 0.0;
        let mut sum_t = 0.0;
        for i in 0..p.len() {
            if !valid[i] {
                continue;
            }
            sum_pt += p[i] * t[i];
            sum_p += p[i];
            sum_t += t[i];
        }
        let numerator = 2.0 * sum_pt + DICE_EPSILON;
        let denominator = sum_p + sum_t + DICE_EPSILON;
        let value = Tensor::scalar(1.0 - numerator / denominator);
        Ok(self.push_op(
            value,
            &[pred],
            Box::new(DiceLossBack {
                pred,
                target: t.to_vec(),
                valid: valid.to_vec(),
                numerator,
                denominator,
            }),
        ))
    }
}
