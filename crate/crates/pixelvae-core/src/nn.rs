//! Convolution family and activation blocks.
//!
//! Everything autoregressive in the model rests on the masked convolutions
//! here. A mask is a binary [kh, kw] stencil over the kernel window; the
//! masked convolution is mathematically a plain convolution whose weights
//! are multiplied by the mask at every forward and gradient evaluation. The
//! implementation gathers only the active taps, which is bit-identical to
//! pre-masking the weights (bias is added last, so signed zeros cannot
//! leak) and skips most of the work for the sparse stacks.
//!
//! Convolutions lower to im2col plus the matmul kernels from [`crate::tensor`].

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{domain, Stream};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Geometry of one convolution layer.
///
/// `kernel` may be even for transposed convolutions (the usual stride-2
/// upsampler uses 4x4); masked convolutions require odd square kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> ConvSpec {
        ConvSpec { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding }
    }

    /// Shape-preserving stride-1 spec for an odd kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> ConvSpec {
        ConvSpec::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
        {
            return Err(Error::InvalidShape(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// floor((in + 2 pad - kernel) / stride) + 1, each axis; must stay >= 1.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let dim = |i: usize, k: usize| -> Result<usize> {
            let span = i as isize + 2 * self.padding as isize - k as isize;
            if span < 0 {
                return Err(Error::InvalidShape(format!(
                    "kernel {k} larger than padded input {i} (+{})",
                    2 * self.padding
                )));
            }
            Ok(span as usize / self.stride + 1)
        };
        Ok((dim(h, self.kernel_h)?, dim(w, self.kernel_w)?))
    }

    /// (in - 1) * stride - 2 pad + kernel, each axis; must stay >= 1.
    pub fn transposed_out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let dim = |i: usize, k: usize| -> Result<usize> {
            let o = (i as isize - 1) * self.stride as isize - 2 * self.padding as isize + k as isize;
            if o < 1 {
                return Err(Error::InvalidShape(format!(
                    "transposed output collapses: in {i}, kernel {k}, spec {self:?}"
                )));
            }
            Ok(o as usize)
        };
        Ok((dim(h, self.kernel_h)?, dim(w, self.kernel_w)?))
    }
}

// ---- low-level kernels ----

/// Gathered patches for the active taps only: rows are (channel, tap),
/// columns are output positions. `taps` lists (ky, kx) kernel offsets.
#[allow(clippy::too_many_arguments)]
fn im2col_taps(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    taps: &[(usize, usize)],
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let t = taps.len();
    let mut cols = vec![0.0; c_in * t * ho * wo];
    for ci in 0..c_in {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for (ti, &(ky, kx)) in taps.iter().enumerate() {
            let row = (ci * t + ti) * ho * wo;
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - pad_h as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = iy as usize * w;
                let dst = row + oy * wo;
                for ox in 0..wo {
                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                    if ix >= 0 && ix < w as isize {
                        cols[dst + ox] = xc[src + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_taps`]: scatter-add patch gradients back to pixels.
#[allow(clippy::too_many_arguments)]
fn col2im_taps(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    taps: &[(usize, usize)],
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let t = taps.len();
    let mut x = vec![0.0; c_in * h * w];
    for ci in 0..c_in {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for (ti, &(ky, kx)) in taps.iter().enumerate() {
            let row = (ci * t + ti) * ho * wo;
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - pad_h as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dst = iy as usize * w;
                let src = row + oy * wo;
                for ox in 0..wo {
                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                    if ix >= 0 && ix < w as isize {
                        xc[dst + ix as usize] += cols[src + ox];
                    }
                }
            }
        }
    }
    x
}

fn all_taps(kh: usize, kw: usize) -> Vec<(usize, usize)> {
    (0..kh).flat_map(|ky| (0..kw).map(move |kx| (ky, kx))).collect()
}

/// Weights restricted to the active taps, laid out [c_out, c_in * taps].
fn gather_weights(
    w: &[f64],
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    taps: &[(usize, usize)],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(c_out * c_in * taps.len());
    for co in 0..c_out {
        for ci in 0..c_in {
            let base = (co * c_in + ci) * kh * kw;
            for &(ky, kx) in taps {
                out.push(w[base + ky * kw + kx]);
            }
        }
    }
    out
}

/// Scatter tap-restricted weight gradients back to full kernel layout,
/// leaving masked positions at exactly zero.
fn scatter_weights(
    gw: &[f64],
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    taps: &[(usize, usize)],
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * c_in * kh * kw];
    let t = taps.len();
    for co in 0..c_out {
        for ci in 0..c_in {
            let base = (co * c_in + ci) * kh * kw;
            for (ti, &(ky, kx)) in taps.iter().enumerate() {
                out[base + ky * kw + kx] = gw[(co * c_in + ci) * t + ti];
            }
        }
    }
    out
}

/// Shared forward/backward machinery for plain and masked convolutions.
/// `taps` selects the active kernel positions; a plain convolution passes
/// the full window. Padding may differ per axis for masked kernels.
struct ConvPlan {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    taps: Vec<(usize, usize)>,
}

impl ConvPlan {
    fn forward(&self, x: &[f64], n: usize, h: usize, w: usize, wt: &[f64], b: &[f64], ho: usize, wo: usize) -> Vec<f64> {
        let t = self.taps.len();
        let ckk = self.c_in * t;
        let wa = gather_weights(wt, self.c_out, self.c_in, self.kh, self.kw, &self.taps);
        let mut out = vec![0.0; n * self.c_out * ho * wo];
        for i in 0..n {
            let cols = im2col_taps(
                &x[i * self.c_in * h * w..],
                self.c_in,
                h,
                w,
                &self.taps,
                self.stride,
                self.pad_h,
                self.pad_w,
                ho,
                wo,
            );
            let y = matmul_nn(&wa, &cols, self.c_out, ckk, ho * wo);
            let dst = &mut out[i * self.c_out * ho * wo..(i + 1) * self.c_out * ho * wo];
            for co in 0..self.c_out {
                let bias = b[co];
                for (o, v) in dst[co * ho * wo..(co + 1) * ho * wo].iter_mut().zip(&y[co * ho * wo..]) {
                    *o = v + bias;
                }
            }
        }
        out
    }

    /// Gradient w.r.t. the input: W^T g scattered back through col2im.
    fn input_grad(&self, g: &[f64], n: usize, h: usize, w: usize, wt: &[f64], ho: usize, wo: usize) -> Vec<f64> {
        let t = self.taps.len();
        let ckk = self.c_in * t;
        let wa = gather_weights(wt, self.c_out, self.c_in, self.kh, self.kw, &self.taps);
        let mut gx = vec![0.0; n * self.c_in * h * w];
        for i in 0..n {
            let gcols = matmul_tn(&wa, &g[i * self.c_out * ho * wo..(i + 1) * self.c_out * ho * wo], ckk, self.c_out, ho * wo);
            let gi = col2im_taps(&gcols, self.c_in, h, w, &self.taps, self.stride, self.pad_h, self.pad_w, ho, wo);
            gx[i * self.c_in * h * w..(i + 1) * self.c_in * h * w].copy_from_slice(&gi);
        }
        gx
    }

    /// Gradient w.r.t. the weights, in full kernel layout (masked taps zero).
    fn weight_grad(&self, x: &[f64], g: &[f64], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let t = self.taps.len();
        let ckk = self.c_in * t;
        let mut gwa = vec![0.0; self.c_out * ckk];
        for i in 0..n {
            let cols = im2col_taps(
                &x[i * self.c_in * h * w..],
                self.c_in,
                h,
                w,
                &self.taps,
                self.stride,
                self.pad_h,
                self.pad_w,
                ho,
                wo,
            );
            let part = matmul_nt(&g[i * self.c_out * ho * wo..(i + 1) * self.c_out * ho * wo], &cols, self.c_out, ho * wo, ckk);
            for (acc, v) in gwa.iter_mut().zip(&part) {
                *acc += v;
            }
        }
        scatter_weights(&gwa, self.c_out, self.c_in, self.kh, self.kw, &self.taps)
    }

    fn bias_grad(&self, g: &[f64], n: usize, ho: usize, wo: usize) -> Vec<f64> {
        let mut gb = vec![0.0; self.c_out];
        for i in 0..n {
            for co in 0..self.c_out {
                let base = (i * self.c_out + co) * ho * wo;
                gb[co] += g[base..base + ho * wo].iter().sum::<f64>();
            }
        }
        gb
    }
}

fn check_conv_args(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor, transposed: bool) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("conv input must be NCHW, got {s:?}")));
    }
    let data_channels = if transposed { spec.out_channels } else { spec.in_channels };
    let bias_channels = if transposed { spec.in_channels } else { spec.out_channels };
    if s[1] != data_channels {
        return Err(Error::InvalidShape(format!(
            "input has {} channels, spec wants {data_channels}",
            s[1]
        )));
    }
    if weights.shape() != [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w] {
        return Err(Error::InvalidShape(format!(
            "weights {:?} do not match spec {spec:?}",
            weights.shape()
        )));
    }
    if bias.shape() != [bias_channels] {
        return Err(Error::InvalidShape(format!(
            "bias {:?}, expected [{bias_channels}]",
            bias.shape()
        )));
    }
    Ok((s[0], s[2], s[3]))
}

/// Standard cross-correlation with stride and zero padding.
///
/// input [N, in, H, W], weights [out, in, kh, kw], bias [out].
pub fn conv2d(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, h, w) = check_conv_args(input, spec, weights, bias, false)?;
    let (ho, wo) = spec.out_hw(h, w)?;
    let plan = Rc::new(ConvPlan {
        c_in: spec.in_channels,
        c_out: spec.out_channels,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad_h: spec.padding,
        pad_w: spec.padding,
        taps: all_taps(spec.kernel_h, spec.kernel_w),
    });
    conv_with_plan(input, weights, bias, plan, n, h, w, ho, wo)
}

fn conv_with_plan(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    plan: Rc<ConvPlan>,
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Result<Tensor> {
    let data = plan.forward(input.data(), n, h, w, weights.data(), bias.data(), ho, wo);
    let (x, wt, b) = (input.clone(), weights.clone(), bias.clone());
    let (tx, tw, tb) = (x.is_tracked(), wt.is_tracked(), b.is_tracked());
    let c_out = plan.c_out;
    Ok(Tensor::from_op(
        vec![n, c_out, ho, wo],
        data,
        vec![x.clone(), wt.clone(), b],
        move |g| {
            vec![
                tx.then(|| plan.input_grad(g, n, h, w, wt.data(), ho, wo)),
                tw.then(|| plan.weight_grad(x.data(), g, n, h, w, ho, wo)),
                tb.then(|| plan.bias_grad(g, n, ho, wo)),
            ]
        },
    ))
}

/// Linear adjoint of [`conv2d`] with the same spec and weights:
/// <conv2d(a), b> == <a, conv2d_transposed(b)> for zero bias.
///
/// input [N, out, Hi, Wi] -> output [N, in, (Hi-1) stride - 2 pad + kernel, ...];
/// bias has `in` entries (the output channels of this op).
pub fn conv2d_transposed(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, hi, wi) = check_conv_args(input, spec, weights, bias, true)?;
    let (ho, wo) = spec.transposed_out_hw(hi, wi)?;
    // Sanity: the paired forward conv maps (ho, wo) back to (hi, wi).
    let (back_h, back_w) = spec.out_hw(ho, wo)?;
    if (back_h, back_w) != (hi, wi) {
        return Err(Error::InvalidShape(format!(
            "transposed geometry not invertible: {hi}x{wi} -> {ho}x{wo} -> {back_h}x{back_w}"
        )));
    }
    let plan = Rc::new(ConvPlan {
        c_in: spec.in_channels,
        c_out: spec.out_channels,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad_h: spec.padding,
        pad_w: spec.padding,
        taps: all_taps(spec.kernel_h, spec.kernel_w),
    });
    // Forward here is the conv's input-gradient; the roles of (hi, wi) and
    // (ho, wo) swap relative to conv2d.
    let mut data = plan.input_grad(input.data(), n, ho, wo, weights.data(), hi, wi);
    let c_img = spec.in_channels;
    for i in 0..n {
        for c in 0..c_img {
            let base = (i * c_img + c) * ho * wo;
            let bv = bias.data()[c];
            for v in &mut data[base..base + ho * wo] {
                *v += bv;
            }
        }
    }
    let (x, wt, b) = (input.clone(), weights.clone(), bias.clone());
    let (tx, tw, tb) = (x.is_tracked(), wt.is_tracked(), b.is_tracked());
    Ok(Tensor::from_op(
        vec![n, c_img, ho, wo],
        data,
        vec![x.clone(), wt.clone(), b],
        move |g| {
            let zero_bias = vec![0.0; plan.c_out];
            vec![
                // d/d input: the paired forward convolution of g.
                tx.then(|| plan.forward(g, n, ho, wo, wt.data(), &zero_bias, hi, wi)),
                // d/d weights: same kernel as conv2d's weight grad with
                // (input, upstream) roles swapped, by the adjoint identity.
                tw.then(|| plan.weight_grad(g, x.data(), n, ho, wo, hi, wi)),
                tb.then(|| {
                    let mut gb = vec![0.0; c_img];
                    for i in 0..n {
                        for c in 0..c_img {
                            let base = (i * c_img + c) * ho * wo;
                            gb[c] += g[base..base + ho * wo].iter().sum::<f64>();
                        }
                    }
                    gb
                }),
            ]
        },
    ))
}

// ---- masks ----

/// Kind A excludes the center tap (first autoregressive layer, reading raw
/// pixels); kind B includes it (subsequent layers, reading features that
/// already exclude the current pixel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    A,
    B,
}

/// Which causal stencil the mask implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    /// All raster-order predecessors inside the window. Composing these
    /// leaves the classic blind spot above-right of the pixel.
    Single,
    /// Rows strictly above center, all columns. Kind is irrelevant here:
    /// the center row is excluded either way.
    Vertical,
    /// Same-row columns: strictly left for kind A, left-inclusive for B.
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stack: StackKind,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, kernel: usize, stack: StackKind) -> MaskSpec {
        MaskSpec { kind, kernel_h: kernel, kernel_w: kernel, stack }
    }
}

/// Binary [kh, kw] mask tensor for `spec`. Kernel sizes must be odd.
pub fn build_mask(spec: &MaskSpec) -> Result<Tensor> {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
        return Err(Error::InvalidShape(format!("mask kernel must be odd, got {kh}x{kw}")));
    }
    let (ch, cw) = (kh / 2, kw / 2);
    let include_center = spec.kind == MaskKind::B;
    let mut m = vec![0.0; kh * kw];
    for r in 0..kh {
        for c in 0..kw {
            let on = match spec.stack {
                StackKind::Single => r < ch || (r == ch && (c < cw || (c == cw && include_center))),
                StackKind::Vertical => r < ch,
                StackKind::Horizontal => r == ch && (c < cw || (c == cw && include_center)),
            };
            if on {
                m[r * kw + c] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[kh, kw], m)
}

/// Chain mask for vertical-stack layers after the first: rows up to and
/// including the center row, all columns. Features on the center row
/// already depend only on strictly-higher image rows, so including it keeps
/// the stack causal while letting context grow downward to row i-1.
pub(crate) fn vertical_chain_mask(kernel: usize) -> Result<Tensor> {
    let (kh, kw) = (kernel, kernel);
    if kh % 2 == 0 {
        return Err(Error::InvalidShape(format!("mask kernel must be odd, got {kh}x{kw}")));
    }
    let ch = kh / 2;
    let mut m = vec![0.0; kh * kw];
    for r in 0..=ch {
        for c in 0..kw {
            m[r * kw + c] = 1.0;
        }
    }
    Tensor::from_vec(&[kh, kw], m)
}

/// Convolution restricted to the taps where `mask` is 1. Stride must be 1
/// and padding must preserve shape; the mask applies to forward values and
/// weight gradients alike (masked taps never receive gradient).
pub fn masked_conv2d_with_mask(
    input: &Tensor,
    mask: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let (n, h, w) = check_conv_args(input, spec, weights, bias, false)?;
    if spec.stride != 1 {
        return Err(Error::Contract(format!("masked conv needs stride 1, got {}", spec.stride)));
    }
    if spec.kernel_h != spec.kernel_w || spec.padding != spec.kernel_h / 2 {
        return Err(Error::Contract(format!(
            "masked conv needs a square shape-preserving spec, got {spec:?}"
        )));
    }
    if mask.shape() != [spec.kernel_h, spec.kernel_w] {
        return Err(Error::InvalidShape(format!(
            "mask {:?} does not fit kernel {}x{}",
            mask.shape(),
            spec.kernel_h,
            spec.kernel_w
        )));
    }
    let mut taps = Vec::new();
    for ky in 0..spec.kernel_h {
        for kx in 0..spec.kernel_w {
            let v = mask.data()[ky * spec.kernel_w + kx];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!("mask entries must be 0 or 1, got {v}")));
            }
            if v == 1.0 {
                taps.push((ky, kx));
            }
        }
    }
    let plan = Rc::new(ConvPlan {
        c_in: spec.in_channels,
        c_out: spec.out_channels,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: 1,
        pad_h: spec.kernel_h / 2,
        pad_w: spec.kernel_w / 2,
        taps,
    });
    conv_with_plan(input, weights, bias, plan, n, h, w, h, w)
}

/// Masked convolution with the mask built from `mask_spec`. Kernel sizes of
/// the two specs must agree.
pub fn masked_conv2d(
    input: &Tensor,
    mask_spec: &MaskSpec,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    if (mask_spec.kernel_h, mask_spec.kernel_w) != (spec.kernel_h, spec.kernel_w) {
        return Err(Error::InvalidShape(format!(
            "mask kernel {}x{} vs conv kernel {}x{}",
            mask_spec.kernel_h, mask_spec.kernel_w, spec.kernel_h, spec.kernel_w
        )));
    }
    let mask = build_mask(mask_spec)?;
    masked_conv2d_with_mask(input, &mask, spec, weights, bias)
}

// ---- gated activation ----

/// Splits 2C channels into halves and applies tanh(h1) * sigmoid(h2).
pub fn gated_activation(pre: &Tensor) -> Result<Tensor> {
    let s = pre.shape();
    if s.len() != 4 || s[1] % 2 != 0 {
        return Err(Error::InvalidShape(format!("gated activation wants [N,2C,H,W], got {s:?}")));
    }
    let c = s[1] / 2;
    let h1 = pre.slice_channels(0, c)?;
    let h2 = pre.slice_channels(c, 2 * c)?;
    h1.tanh().mul(&h2.sigmoid())
}

/// How the conditioning signal is mapped to the 2C gate channels.
pub enum CondParams {
    /// 1x1 convolution from a spatial feature map.
    Conv1x1 { weights: Tensor, bias: Tensor },
    /// Linear map from a flat latent vector, broadcast over space.
    Dense { weights: Tensor, bias: Tensor },
}

/// Conditioning input for a gated block.
pub enum Condition<'a> {
    /// [N, Cf, H, W] feature map (e.g. upsampled latent features).
    Spatial(&'a Tensor),
    /// [N, D] flat latent vector.
    Flat(&'a Tensor),
}

/// One gated unit: feature path producing 2C pre-activation channels plus
/// an optional condition path, combined as tanh(h1+c1) * sigmoid(h2+c2).
pub struct GatedBlockParams {
    pub spec: ConvSpec,
    /// Mask on the feature convolution; `None` means a full window.
    pub mask: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
    pub condition: Option<CondParams>,
}

pub fn gated_block(
    features: &Tensor,
    condition: Option<Condition<'_>>,
    params: &GatedBlockParams,
) -> Result<Tensor> {
    if params.spec.out_channels % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "gated feature path must yield 2C channels, got {}",
            params.spec.out_channels
        )));
    }
    let pre = match &params.mask {
        Some(m) => masked_conv2d_with_mask(features, m, &params.spec, &params.weights, &params.bias)?,
        None => conv2d(features, &params.spec, &params.weights, &params.bias)?,
    };
    let (h, w) = (pre.shape()[2], pre.shape()[3]);
    let two_c = params.spec.out_channels;
    let contrib = match (condition, &params.condition) {
        (None, _) => None,
        (Some(Condition::Spatial(t)), Some(CondParams::Conv1x1 { weights, bias })) => {
            let cf = t.shape()[1];
            let spec = ConvSpec::new(cf, two_c, 1, 1, 0);
            Some(conv2d(t, &spec, weights, bias)?)
        }
        (Some(Condition::Flat(t)), Some(CondParams::Dense { weights, bias })) => {
            Some(t.dense(weights, bias)?.broadcast_spatial(h, w)?)
        }
        // Pre-mapped conditions may be added directly when already 2C wide.
        (Some(Condition::Spatial(t)), None) => Some(t.clone()),
        (Some(Condition::Flat(t)), None) => Some(t.broadcast_spatial(h, w)?),
        (Some(_), Some(_)) => {
            return Err(Error::Contract(
                "condition form does not match the condition-path parameters".into(),
            ))
        }
    };
    let pre = match contrib {
        Some(c) => {
            if c.shape() != pre.shape() {
                return Err(Error::InvalidShape(format!(
                    "condition contribution {:?} vs pre-activation {:?}",
                    c.shape(),
                    pre.shape()
                )));
            }
            pre.add(&c)?
        }
        None => pre,
    };
    gated_activation(&pre)
}

// ---- probing and init ----

/// Input pixels with nonzero gradient into the logit at `target`, for a
/// single-channel pixel-logit function evaluated at one random image.
/// Returned in raster order. A network that ignores its input (zero
/// autoregressive layers) yields the empty set.
pub fn receptive_field_probe<F>(
    network: F,
    height: usize,
    width: usize,
    target: (usize, usize),
    seed: u64,
) -> Result<Vec<(usize, usize)>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if target.0 >= height || target.1 >= width {
        return Err(Error::Contract(format!("target {target:?} outside {height}x{width}")));
    }
    let mut s = Stream::new(seed, domain::PROBE, 1);
    let x = Tensor::from_vec(&[1, 1, height, width], s.normal_vec(height * width))?.tracked_view();
    let logits = network(&x)?;
    let ls = logits.shape();
    if ls.len() != 4 || ls[0] != 1 || ls[2] != height || ls[3] != width {
        return Err(Error::InvalidShape(format!("probe network produced {ls:?}")));
    }
    let logit_map = if ls[1] == 1 { logits } else { logits.slice_channels(0, 1)? };
    if !logit_map.is_tracked() {
        return Ok(Vec::new());
    }
    let mut pick = vec![0.0; height * width];
    pick[target.0 * width + target.1] = 1.0;
    let pick = Tensor::from_vec(&[1, 1, height, width], pick)?;
    let loss = logit_map.mul(&pick)?.sum_all();
    let grads = loss.backward()?;
    let g = match grads.wrt(&x) {
        Some(g) => g,
        None => return Ok(Vec::new()),
    };
    let mut set = Vec::new();
    for i in 0..height {
        for j in 0..width {
            if libm::fabs(g.data()[i * width + j]) > 1e-12 {
                set.push((i, j));
            }
        }
    }
    Ok(set)
}

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases are zeroed at the
/// call sites. Untracked; training wraps parameters in tracked views.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, stream: &mut Stream) -> Result<Tensor> {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (stream.uniform() * 2.0 - 1.0) * bound).collect();
    Tensor::from_vec(shape, data)
}
