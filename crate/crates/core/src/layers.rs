//! Per-layer forward and backward kernels, plus weight initialization.
//!
//! Every kernel is generic over the scalar type: training and inference run
//! in `f32`, while gradient checking re-runs the same code paths in `f64`.
//! Images and feature maps are `(C, H, W)`; dense vectors are rank 1.
//!
//! Backward passes are hand-derived per layer. Gradients of a scalar loss
//! are propagated output-to-input; parameter gradients accumulate into
//! caller-provided buffers so a batch can be reduced in a fixed order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Execution mode: training uses batch statistics and stochastic masks,
/// inference uses running statistics and deterministic scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Output extent of a convolution: `O = (W - N + 2P) / S + 1`.
pub fn conv_output_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    let span = input as i64 - kernel as i64 + 2 * padding as i64;
    if span < 0 {
        return Err(Error::Config(format!(
            "kernel {kernel} with padding {padding} does not fit input extent {input}"
        )));
    }
    if span as usize % stride != 0 {
        return Err(Error::Config(format!(
            "stride {stride} does not divide span {} (input {input}, kernel {kernel}, padding {padding})",
            span
        )));
    }
    Ok(span as usize / stride + 1)
}

#[inline]
fn conv_loop_range(out_extent: usize, input: usize, k: usize, padding: usize, stride: usize) -> (usize, usize) {
    // Output positions whose input index k + o*S - P stays inside [0, input).
    let min = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let max_i = input as i64 - 1 - k as i64 + padding as i64;
    if max_i < 0 {
        return (1, 0); // empty
    }
    let max = ((max_i as usize) / stride).min(out_extent.saturating_sub(1));
    (min, max)
}

/// Dot product with eight fixed accumulator lanes. The reduction order is
/// fixed (so results are reproducible) while each lane maps onto a SIMD
/// element.
#[inline]
pub(crate) fn dot_lanes<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let pa = &a[i * 8..i * 8 + 8];
        let pb = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut tail = S::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let even = (lanes[0] + lanes[4]) + (lanes[2] + lanes[6]);
    let odd = (lanes[1] + lanes[5]) + (lanes[3] + lanes[7]);
    (even + odd) + tail
}

/// Convolve `(C, H, W)` input with filters `(F, C, kh, kw)`, add per-filter
/// bias. No activation is applied here.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::shape_mismatch(x.shape(), w.shape(), "conv2d input/filters"));
    }
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (filters, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c_in {
        return Err(Error::shape_mismatch(x.shape(), w.shape(), "conv2d channel depth"));
    }
    if b.shape() != [filters] {
        return Err(Error::shape_mismatch(b.shape(), &[filters], "conv2d bias"));
    }
    let oh = conv_output_extent(h, kh, padding, stride)?;
    let ow = conv_output_extent(wd, kw, padding, stride)?;

    let mut out = vec![S::ZERO; filters * oh * ow];
    for f in 0..filters {
        let out_plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
        let bias = b.data()[f];
        for v in out_plane.iter_mut() {
            *v = bias;
        }
        for c in 0..c_in {
            let x_plane = &x.data()[c * h * wd..(c + 1) * h * wd];
            for ky in 0..kh {
                let (oy_min, oy_max) = conv_loop_range(oh, h, ky, padding, stride);
                if oy_min > oy_max {
                    continue;
                }
                for kx in 0..kw {
                    let (ox_min, ox_max) = conv_loop_range(ow, wd, kx, padding, stride);
                    if ox_min > ox_max {
                        continue;
                    }
                    let wv = w.data()[((f * c_in + c) * kh + ky) * kw + kx];
                    for oy in oy_min..=oy_max {
                        let iy = oy * stride + ky - padding;
                        let x_row = &x_plane[iy * wd..];
                        let out_row = &mut out_plane[oy * ow..];
                        if stride == 1 {
                            let ix0 = ox_min + kx - padding;
                            let n = ox_max - ox_min + 1;
                            for (o, &xv) in out_row[ox_min..ox_min + n].iter_mut().zip(&x_row[ix0..ix0 + n]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox_min..=ox_max {
                                let ix = ox * stride + kx - padding;
                                out_row[ox] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![filters, oh, ow], out)
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_backward_input<S: Scalar>(
    input_shape: &[usize],
    w: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Tensor<S> {
    let (c_in, h, wd) = (input_shape[0], input_shape[1], input_shape[2]);
    let (filters, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let mut grad_x = vec![S::ZERO; c_in * h * wd];

    grad_x
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(c, gx_plane)| {
            for f in 0..filters {
                let g_plane = &grad_out.data()[f * oh * ow..(f + 1) * oh * ow];
                for ky in 0..kh {
                    let (oy_min, oy_max) = conv_loop_range(oh, h, ky, padding, stride);
                    if oy_min > oy_max {
                        continue;
                    }
                    for kx in 0..kw {
                        let (ox_min, ox_max) = conv_loop_range(ow, wd, kx, padding, stride);
                        if ox_min > ox_max {
                            continue;
                        }
                        let wv = w.data()[((f * c_in + c) * kh + ky) * kw + kx];
                        for oy in oy_min..=oy_max {
                            let iy = oy * stride + ky - padding;
                            let gx_row = &mut gx_plane[iy * wd..(iy + 1) * wd];
                            let g_row = &g_plane[oy * ow..];
                            if stride == 1 {
                                let ix0 = ox_min + kx - padding;
                                let n = ox_max - ox_min + 1;
                                for (gx, &gv) in gx_row[ix0..ix0 + n].iter_mut().zip(&g_row[ox_min..ox_min + n]) {
                                    *gx += wv * gv;
                                }
                            } else {
                                for ox in ox_min..=ox_max {
                                    let ix = ox * stride + kx - padding;
                                    gx_row[ix] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![c_in, h, wd], grad_x).expect("shape by construction")
}

/// Accumulate filter and bias gradients for one sample into `grad_w`/`grad_b`.
/// Filters are processed in parallel; each writes a disjoint slice, so the
/// accumulation order is deterministic.
pub fn conv2d_backward_params_acc<S: Scalar>(
    x: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    padding: usize,
    kernel: (usize, usize),
    grad_w: &mut Tensor<S>,
    grad_b: &mut Tensor<S>,
) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = kernel;
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let gw = grad_w.data_mut();
    let gb = grad_b.data_mut();

    gw.par_chunks_mut(c_in * kh * kw)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(f, (gw_f, gb_f))| {
            let g_plane = &grad_out.data()[f * oh * ow..(f + 1) * oh * ow];
            let mut bias_acc = S::ZERO;
            for &g in g_plane {
                bias_acc += g;
            }
            *gb_f += bias_acc;
            for c in 0..c_in {
                let x_plane = &x.data()[c * h * wd..(c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy_min, oy_max) = conv_loop_range(oh, h, ky, padding, stride);
                    if oy_min > oy_max {
                        continue;
                    }
                    for kx in 0..kw {
                        let (ox_min, ox_max) = conv_loop_range(ow, wd, kx, padding, stride);
                        if ox_min > ox_max {
                            continue;
                        }
                        let mut acc = S::ZERO;
                        for oy in oy_min..=oy_max {
                            let iy = oy * stride + ky - padding;
                            let x_row = &x_plane[iy * wd..];
                            let g_row = &g_plane[oy * ow..];
                            if stride == 1 {
                                let ix0 = ox_min + kx - padding;
                                let n = ox_max - ox_min + 1;
                                acc += dot_lanes(&g_row[ox_min..ox_min + n], &x_row[ix0..ix0 + n]);
                            } else {
                                for ox in ox_min..=ox_max {
                                    let ix = ox * stride + kx - padding;
                                    acc += g_row[ox] * x_row[ix];
                                }
                            }
                        }
                        gw_f[(c * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        });
}

/// All three convolution gradients at once (gradient-check convenience).
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let grad_x = conv2d_backward_input(x.shape(), w, grad_out, stride, padding);
    let mut grad_w = Tensor::zeros(w.shape());
    let mut grad_b = Tensor::zeros(&[w.shape()[0]]);
    conv2d_backward_params_acc(
        x,
        grad_out,
        stride,
        padding,
        (w.shape()[2], w.shape()[3]),
        &mut grad_w,
        &mut grad_b,
    );
    (grad_x, grad_w, grad_b)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Non-overlapping 2x2 max pooling. Extents must be even; there is no
/// implicit padding. Returns the pooled map and the flat input offset of
/// each selected maximum (ties to the first position in row-major order).
pub fn maxpool2x2_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    if x.rank() != 3 {
        return Err(Error::shape_mismatch(x.shape(), &[0, 0, 0], "maxpool2x2 input"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "maxpool2x2 requires even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * 2) * w + ox * 2;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &cand in &candidates[1..] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out.push(plane[best]);
                argmax.push((ci * h * w + best) as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

/// Route gradients back to the positions recorded by the forward pass.
pub fn maxpool2x2_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Tensor<S> {
    let mut grad_x = Tensor::zeros(input_shape);
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        grad_x.data_mut()[idx as usize] += *g;
    }
    grad_x
}

/// Per-channel mean over the spatial extent: `(C, H, W) -> (C)`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(Error::shape_mismatch(x.shape(), &[0, 0, 0], "global_avg_pool input"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let area = S::from_f64((h * w) as f64);
    let mut out = Vec::with_capacity(c);
    for ci in 0..c {
        let mut acc = S::ZERO;
        for &v in &x.data()[ci * h * w..(ci + 1) * h * w] {
            acc += v;
        }
        out.push(acc / area);
    }
    Tensor::new(vec![c], out)
}

pub fn global_avg_pool_backward<S: Scalar>(grad_out: &Tensor<S>, input_shape: &[usize]) -> Tensor<S> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let inv_area = S::ONE / S::from_f64((h * w) as f64);
    let mut grad_x = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        let g = grad_out.data()[ci] * inv_area;
        grad_x.extend(std::iter::repeat(g).take(h * w));
    }
    Tensor::new(input_shape.to_vec(), grad_x).expect("shape by construction")
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Number of normalized features of a sample: channels for `(C, H, W)` maps,
/// units for rank-1 vectors.
pub fn bn_feature_count(shape: &[usize]) -> usize {
    shape[0]
}

fn bn_feature_span(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

pub struct BnCache<S: Scalar> {
    pub xhat: Vec<Tensor<S>>,
    pub inv_std: Vec<S>,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
    /// Elements per feature across the batch (batch size x spatial span).
    pub count: usize,
}

/// Train-mode batch normalization over a batch of samples, per feature:
/// `xhat = (x - mu_B) / sqrt(var_B + eps)`, `y = gamma * xhat + beta`.
pub fn batchnorm_forward_train<S: Scalar>(
    xs: &[Tensor<S>],
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<(Vec<Tensor<S>>, BnCache<S>)> {
    if xs.len() < 2 {
        return Err(Error::Config(
            "batch normalization requires batch size >= 2 in train mode".into(),
        ));
    }
    let shape = xs[0].shape().to_vec();
    let features = bn_feature_count(&shape);
    let span = bn_feature_span(&shape);
    if gamma.shape() != [features] || beta.shape() != [features] {
        return Err(Error::shape_mismatch(gamma.shape(), &[features], "batchnorm gamma/beta"));
    }
    let count = xs.len() * span;
    let denom = S::from_f64(count as f64);

    let mut mean = vec![S::ZERO; features];
    for x in xs {
        for f in 0..features {
            for &v in &x.data()[f * span..(f + 1) * span] {
                mean[f] += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m = *m / denom;
    }
    let mut var = vec![S::ZERO; features];
    for x in xs {
        for f in 0..features {
            for &v in &x.data()[f * span..(f + 1) * span] {
                let d = v - mean[f];
                var[f] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v = *v / denom;
    }
    let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();

    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let mut xh = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for f in 0..features {
            let g = gamma.data()[f];
            let b = beta.data()[f];
            for &v in &x.data()[f * span..(f + 1) * span] {
                let h = (v - mean[f]) * inv_std[f];
                xh.push(h);
                y.push(g * h + b);
            }
        }
        xhat.push(Tensor::new(shape.clone(), xh)?);
        out.push(Tensor::new(shape.clone(), y)?);
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            count,
        },
    ))
}

/// Fold the batch statistics into the exponentially averaged running stats:
/// `new = m * old + (1 - m) * batch`, with the unbiased variance estimate
/// `n / (n - 1) * var_B`.
pub fn batchnorm_update_running<S: Scalar>(
    cache: &BnCache<S>,
    momentum: S,
    running_mean: &mut Tensor<S>,
    running_var: &mut Tensor<S>,
) {
    let n = cache.count as f64;
    let unbias = S::from_f64(n / (n - 1.0));
    let keep = momentum;
    let take = S::ONE - momentum;
    for (rm, &bm) in running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
        *rm = keep * *rm + take * bm;
    }
    for (rv, &bv) in running_var.data_mut().iter_mut().zip(&cache.batch_var) {
        *rv = keep * *rv + take * (unbias * bv);
    }
}

/// Inference-mode normalization of a single sample using running statistics.
pub fn batchnorm_forward_infer<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let features = bn_feature_count(x.shape());
    let span = bn_feature_span(x.shape());
    if gamma.shape() != [features] {
        return Err(Error::shape_mismatch(gamma.shape(), &[features], "batchnorm gamma"));
    }
    let mut out = Vec::with_capacity(x.len());
    for f in 0..features {
        let inv = S::ONE / (running_var.data()[f] + eps).sqrt();
        let g = gamma.data()[f];
        let b = beta.data()[f];
        let m = running_mean.data()[f];
        for &v in &x.data()[f * span..(f + 1) * span] {
            out.push(g * (v - m) * inv + b);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward through train-mode batch normalization. Batch statistics are
/// functions of the inputs, so samples couple through the mean/variance
/// terms.
pub fn batchnorm_backward<S: Scalar>(
    grad_out: &[Tensor<S>],
    cache: &BnCache<S>,
    gamma: &Tensor<S>,
) -> (Vec<Tensor<S>>, Tensor<S>, Tensor<S>) {
    let shape = cache.xhat[0].shape().to_vec();
    let features = bn_feature_count(&shape);
    let span = bn_feature_span(&shape);
    let n = S::from_f64(cache.count as f64);

    let mut grad_gamma = vec![S::ZERO; features];
    let mut grad_beta = vec![S::ZERO; features];
    let mut sum_dxhat = vec![S::ZERO; features];
    let mut sum_dxhat_xhat = vec![S::ZERO; features];
    for (g, xh) in grad_out.iter().zip(&cache.xhat) {
        for f in 0..features {
            let gslice = &g.data()[f * span..(f + 1) * span];
            let hslice = &xh.data()[f * span..(f + 1) * span];
            for (&gv, &hv) in gslice.iter().zip(hslice) {
                grad_beta[f] += gv;
                grad_gamma[f] += gv * hv;
                let dxh = gv * gamma.data()[f];
                sum_dxhat[f] += dxh;
                sum_dxhat_xhat[f] += dxh * hv;
            }
        }
    }

    let mut grad_x = Vec::with_capacity(grad_out.len());
    for (g, xh) in grad_out.iter().zip(&cache.xhat) {
        let mut gx = Vec::with_capacity(g.len());
        for f in 0..features {
            let scale = cache.inv_std[f] / n;
            let gslice = &g.data()[f * span..(f + 1) * span];
            let hslice = &xh.data()[f * span..(f + 1) * span];
            for (&gv, &hv) in gslice.iter().zip(hslice) {
                let dxh = gv * gamma.data()[f];
                gx.push(scale * (n * dxh - sum_dxhat[f] - hv * sum_dxhat_xhat[f]));
            }
        }
        grad_x.push(Tensor::new(shape.clone(), gx).expect("shape by construction"));
    }
    (
        grad_x,
        Tensor::from_vec(grad_gamma),
        Tensor::from_vec(grad_beta),
    )
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Train-mode dropout: each unit is zeroed with probability `rate`, survivors
/// pass unchanged. Returns the keep mask for the backward pass.
pub fn dropout_train<S: Scalar>(x: &Tensor<S>, rate: f32, rng: &mut ChaCha8Rng) -> (Tensor<S>, Vec<bool>) {
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f32>() >= rate).collect();
    let data = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v } else { S::ZERO })
        .collect();
    (
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved"),
        mask,
    )
}

/// Inference-mode dropout scales activations by the keep probability
/// `(1 - rate)` to account for all units being present.
pub fn dropout_infer<S: Scalar>(x: &Tensor<S>, rate: f32) -> Tensor<S> {
    let keep = S::from_f64(1.0 - rate as f64);
    x.map(|v| v * keep)
}

pub fn dropout_backward<S: Scalar>(grad_out: &Tensor<S>, mask: &[bool]) -> Tensor<S> {
    let data = grad_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &keep)| if keep { g } else { S::ZERO })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Elu,
    Softmax,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "softplus" => Activation::Softplus,
            "elu" => Activation::Elu,
            "softmax" => Activation::Softmax,
            other => return Err(Error::Config(format!("unknown activation {other:?}"))),
        })
    }
}

/// Apply an activation. Softmax requires a rank-1 input (the executor feeds
/// it one sample vector at a time) and is computed with max subtraction.
pub fn activation_forward<S: Scalar>(kind: Activation, x: &Tensor<S>) -> Result<Tensor<S>> {
    match kind {
        Activation::Relu => Ok(x.map(|v| v.maximum(S::ZERO))),
        Activation::Sigmoid => Ok(x.map(sigmoid)),
        Activation::Tanh => Ok(x.map(|v| v.tanh())),
        Activation::Softplus => Ok(x.map(|v| (S::ONE + v.exp()).ln())),
        Activation::Elu => Ok(x.map(|v| if v >= S::ZERO { v } else { v.exp() - S::ONE })),
        Activation::Softmax => {
            if x.rank() != 1 {
                return Err(Error::shape_mismatch(x.shape(), &[0], "softmax input must be a vector"));
            }
            let mut max = x.data()[0];
            for &v in x.data() {
                max = max.maximum(v);
            }
            let mut exps: Vec<S> = x.data().iter().map(|&v| (v - max).exp()).collect();
            let mut sum = S::ZERO;
            for &e in &exps {
                sum += e;
            }
            for e in exps.iter_mut() {
                *e = *e / sum;
            }
            Tensor::new(x.shape().to_vec(), exps)
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    S::ONE / (S::ONE + (-v).exp())
}

/// Backward through an activation, given both the cached input and output.
pub fn activation_backward<S: Scalar>(
    kind: Activation,
    x: &Tensor<S>,
    out: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let data: Vec<S> = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > S::ZERO { g } else { S::ZERO })
            .collect(),
        Activation::Sigmoid => out
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&o, &g)| o * (S::ONE - o) * g)
            .collect(),
        Activation::Tanh => out
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&o, &g)| (S::ONE - o * o) * g)
            .collect(),
        Activation::Softplus => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| sigmoid(v) * g)
            .collect(),
        Activation::Elu => x
            .data()
            .iter()
            .zip(out.data())
            .zip(grad_out.data())
            .map(|((&v, &o), &g)| if v >= S::ZERO { g } else { (o + S::ONE) * g })
            .collect(),
        Activation::Softmax => {
            // Jacobian-vector product: dx_i = y_i * (g_i - sum_j y_j g_j)
            let mut dot = S::ZERO;
            for (&o, &g) in out.data().iter().zip(grad_out.data()) {
                dot += o * g;
            }
            out.data()
                .iter()
                .zip(grad_out.data())
                .map(|(&o, &g)| o * (g - dot))
                .collect()
        }
    };
    Tensor::new(grad_out.shape().to_vec(), data).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// Dense layer forward: `z = W x + b` with `W: (out, in)`.
pub fn fully_connected_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    crate::tensor::matvec_affine(w, x, b)
}

pub fn fully_connected_backward_input<S: Scalar>(w: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut grad_x = vec![S::ZERO; cols];
    for i in 0..rows {
        let g = grad_out.data()[i];
        let row = &w.data()[i * cols..(i + 1) * cols];
        for (gx, &wv) in grad_x.iter_mut().zip(row) {
            *gx += wv * g;
        }
    }
    Tensor::from_vec(grad_x)
}

pub fn fully_connected_backward_params_acc<S: Scalar>(
    x: &Tensor<S>,
    grad_out: &Tensor<S>,
    grad_w: &mut Tensor<S>,
    grad_b: &mut Tensor<S>,
) {
    let cols = x.len();
    for (i, &g) in grad_out.data().iter().enumerate() {
        grad_b.data_mut()[i] += g;
        let row = &mut grad_w.data_mut()[i * cols..(i + 1) * cols];
        for (wv, &xv) in row.iter_mut().zip(x.data()) {
            *wv += g * xv;
        }
    }
}

// ---------------------------------------------------------------------------
// Weight initialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightInit {
    /// `w ~ U(-s, s)` with a fixed scale.
    Uniform { scale: f64 },
    /// `w ~ N(0, sigma)`.
    Gaussian { stddev: f64 },
    /// `w ~ U(-s, s)` with `s = sqrt(6 / (F_in + F_out))`.
    Glorot,
    /// Rows or columns of the SVD of a Gaussian matrix, scaled by `gain`.
    Orthogonal { gain: f64 },
}

/// Fan-in/fan-out of a weight shape: `(out, in)` for dense layers,
/// `(f, c, kh, kw)` for convolution filters.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[1], shape[0]),
        4 => {
            let receptive = shape[2] * shape[3];
            (shape[1] * receptive, shape[0] * receptive)
        }
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

pub fn init_weights(init: &WeightInit, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::Config(format!("degenerate weight shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    match *init {
        WeightInit::Uniform { scale } => {
            let data = (0..n)
                .map(|_| rng.gen_range(-scale..scale) as f32)
                .collect();
            Tensor::new(shape.to_vec(), data)
        }
        WeightInit::Gaussian { stddev } => {
            let normal = rand_distr::Normal::new(0.0f64, stddev).map_err(|e| Error::Config(e.to_string()))?;
            let data = (0..n).map(|_| rng.sample(normal) as f32).collect();
            Tensor::new(shape.to_vec(), data)
        }
        WeightInit::Glorot => {
            let (fan_in, fan_out) = fans(shape);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..n).map(|_| rng.gen_range(-s..s) as f32).collect();
            Tensor::new(shape.to_vec(), data)
        }
        WeightInit::Orthogonal { gain } => {
            if shape.len() < 2 {
                return Err(Error::Config(
                    "orthogonal init requires a matrix shape (conv filters flatten to (f, c*h*w))".into(),
                ));
            }
            // Conv filters flatten to (f, c*kh*kw) before the SVD.
            let rows = shape[0];
            let cols: usize = shape[1..].iter().product();
            let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
            let gauss = nalgebra::DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(normal));
            let svd = gauss.svd(true, true);
            let u = svd.u.expect("svd requested u");
            let v_t = svd.v_t.expect("svd requested v_t");
            // Thin U has orthonormal columns when rows >= cols; thin V^T has
            // orthonormal rows otherwise. Either one matches the target shape.
            let ortho = if rows >= cols { u } else { v_t };
            let data = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .map(|(r, c)| (ortho[(r, c)] * gain) as f32)
                .collect();
            Tensor::new(shape.to_vec(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_output_formula() {
        // AlexNet Conv-4 row: 13x13 input, 3x3 kernel, P=1, S=1 stays 13.
        assert_eq!(conv_output_extent(13, 3, 1, 1).unwrap(), 13);
        assert_eq!(conv_output_extent(96, 5, 2, 1).unwrap(), 96);
        assert!(conv_output_extent(10, 3, 0, 2).is_err()); // (10-3) % 2 != 0
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = Tensor::<f32>::filled(&[1, 3, 3], 1.0);
        let w = Tensor::<f32>::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::from_vec(vec![0.0f32]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_grad_out_gives_zero_grads() {
        let mut r = rng(3);
        let x = random_tensor(&[2, 6, 6], &mut r);
        let w = random_tensor(&[3, 2, 3, 3], &mut r);
        let g = Tensor::<f64>::zeros(&[3, 6, 6]);
        let (gx, gw, gb) = conv2d_backward(&x, &w, &g, 1, 1);
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_conv_matches_fully_connected() {
        // A 1x1 conv on a (C,1,1) input is exactly a dense layer on the
        // flattened input; both gradients must agree.
        let mut r = rng(4);
        let x = random_tensor(&[5, 1, 1], &mut r);
        let w = random_tensor(&[3, 5, 1, 1], &mut r);
        let b = random_tensor(&[3], &mut r);
        let g = random_tensor(&[3, 1, 1], &mut r);

        let conv_out = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        let (cgx, cgw, cgb) = conv2d_backward(&x, &w, &g, 1, 0);

        let xf = x.clone().reshape(&[5]).unwrap();
        let wf = w.clone().reshape(&[3, 5]).unwrap();
        let gf = g.clone().reshape(&[3]).unwrap();
        let fc_out = fully_connected_forward(&xf, &wf, &b).unwrap();
        let fgx = fully_connected_backward_input(&wf, &gf);
        let mut fgw = Tensor::zeros(&[3, 5]);
        let mut fgb = Tensor::zeros(&[3]);
        fully_connected_backward_params_acc(&xf, &gf, &mut fgw, &mut fgb);

        for (a, e) in conv_out.data().iter().zip(fc_out.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in cgx.data().iter().zip(fgx.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in cgw.data().iter().zip(fgw.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in cgb.data().iter().zip(fgb.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let constant = Tensor::<f32>::filled(&[2, 4, 4], 0.5);
        let (y, _) = maxpool2x2_forward(&constant).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));

        assert!(maxpool2x2_forward(&Tensor::<f32>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_energy_is_conserved() {
        let mut r = rng(5);
        let x = random_tensor(&[2, 6, 6], &mut r);
        let (_, arg) = maxpool2x2_forward(&x).unwrap();
        let g = random_tensor(&[2, 3, 3], &mut r);
        let gx = maxpool2x2_backward(&g, &arg, x.shape());
        let sum_in: f64 = gx.data().iter().sum();
        let sum_out: f64 = g.data().iter().sum();
        assert!((sum_in - sum_out).abs() < 1e-12);
    }

    #[test]
    fn gap_means_channels() {
        let x = Tensor::<f32>::filled(&[3, 4, 4], 1.0);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
        let mixed = Tensor::new(vec![1, 1, 2], vec![0.0f32, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&mixed).unwrap().data(), &[1.0]);
    }

    #[test]
    fn gap_matches_reduction_oracle() {
        let mut r = rng(6);
        let x = random_tensor(&[4, 5, 3], &mut r);
        let y = global_avg_pool(&x).unwrap();
        let flat = x.clone().reshape(&[4, 15]).unwrap();
        let oracle = crate::tensor::reduce_axis(crate::tensor::ReduceOp::Mean, &flat, 1).unwrap();
        for (a, e) in y.data().iter().zip(oracle.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_infer_identity_with_unit_stats() {
        let x = Tensor::from_vec(vec![0.3f32, -0.7, 1.1]);
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mean = Tensor::zeros(&[3]);
        // eps shifts the denominator; use eps = 0 to check exact identity
        let var = Tensor::filled(&[3], 1.0);
        let y = batchnorm_forward_infer(&x, &gamma, &beta, &mean, &var, 0.0).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let mut r = rng(7);
        let xs: Vec<Tensor<f64>> = (0..16).map(|_| random_tensor(&[4], &mut r)).collect();
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let (out, _) = batchnorm_forward_train(&xs, &gamma, &beta, 1e-9).unwrap();
        for f in 0..4 {
            let vals: Vec<f64> = out.iter().map(|t| t.data()[f]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batchnorm_rejects_batch_of_one() {
        let xs = vec![Tensor::<f32>::zeros(&[4])];
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        assert!(batchnorm_forward_train(&xs, &gamma, &beta, 1e-3).is_err());
    }

    #[test]
    fn dropout_conventions() {
        let x = Tensor::from_vec(vec![2.0f32, 4.0]);
        // p = 0 is the identity in both modes
        let (train, mask) = dropout_train(&x, 0.0, &mut rng(1));
        assert_eq!(train.data(), x.data());
        assert!(mask.iter().all(|&k| k));
        assert_eq!(dropout_infer(&x, 0.0).data(), x.data());
        // inference multiplies by the keep probability
        assert_eq!(dropout_infer(&x, 0.5).data(), &[1.0, 2.0]);
        // fixed seed reproduces the mask bit-exactly
        let big = Tensor::<f32>::filled(&[128], 1.0);
        let (a, ma) = dropout_train(&big, 0.5, &mut rng(9));
        let (b, mb) = dropout_train(&big, 0.5, &mut rng(9));
        assert_eq!(a.data(), b.data());
        assert_eq!(ma, mb);
        // survivors pass unchanged
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn activation_values() {
        let relu = activation_forward(Activation::Relu, &Tensor::from_vec(vec![-3.0f32, 2.0])).unwrap();
        assert_eq!(relu.data(), &[0.0, 2.0]);
        let sm = activation_forward(Activation::Softmax, &Tensor::from_vec(vec![0.0f32, 0.0])).unwrap();
        assert_eq!(sm.data(), &[0.5, 0.5]);
        assert!(Activation::parse("swish").is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = rng(8);
        for _ in 0..50 {
            let x = random_tensor(&[7], &mut r);
            let y = activation_forward(Activation::Softmax, &x).unwrap();
            let sum: f64 = y.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn glorot_respects_bound() {
        let mut r = rng(10);
        let w = init_weights(&WeightInit::Glorot, &[100, 100], &mut r).unwrap();
        let s = (6.0f64 / 200.0).sqrt();
        assert!((s - 0.1732).abs() < 1e-3);
        assert!(w.data().iter().all(|&v| (v as f64) > -s && (v as f64) < s));
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut r = rng(11);
        let gain = 1.5f64;
        let w = init_weights(&WeightInit::Orthogonal { gain }, &[16, 16], &mut r).unwrap();
        // W^T W should equal gain^2 * I
        for i in 0..16 {
            for j in 0..16 {
                let mut acc = 0.0f64;
                for k in 0..16 {
                    acc += w.at(&[k, i]) as f64 * w.at(&[k, j]) as f64;
                }
                let expect = if i == j { gain * gain } else { 0.0 };
                assert!((acc - expect).abs() < 1e-4, "W^T W [{i},{j}] = {acc}");
            }
        }
    }

    #[test]
    fn seeded_init_reproduces() {
        for init in [
            WeightInit::Uniform { scale: 0.05 },
            WeightInit::Gaussian { stddev: 0.1 },
            WeightInit::Glorot,
            WeightInit::Orthogonal { gain: 1.0 },
        ] {
            let a = init_weights(&init, &[8, 12], &mut rng(21)).unwrap();
            let b = init_weights(&init, &[8, 12], &mut rng(21)).unwrap();
            assert_eq!(a.data(), b.data());
        }
        assert!(init_weights(&WeightInit::Glorot, &[], &mut rng(0)).is_err());
    }
}
