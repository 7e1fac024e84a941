//! Layer kernels: forward passes and their hand-written backward passes.
//!
//! Every kernel operates on rank-4 tensors laid out `[batch, channel,
//! height, width]` and is a pure function — parameters come in as plain
//! tensors, caches needed by the backward pass are returned explicitly.
//! The graph module composes these into a network; the gradient-check
//! module probes each one against central finite differences.
//!
//! The convolution kernels use a shift-and-accumulate schedule: for each
//! kernel tap the valid output window is computed once and the tap's
//! contribution is applied to contiguous rows, which keeps the inner loop
//! a straight multiply-add over slices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{GradPair, Tensor};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Spatial geometry of a convolution: stride, dilation and zero padding,
/// identical on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Unit stride and dilation with the given padding.
    pub fn padded(padding: usize) -> Self {
        ConvGeom { stride: 1, dilation: 1, padding }
    }

    /// Unit stride with `dilation` and matching padding, which keeps the
    /// output of a 3x3 kernel the same size as its input.
    pub fn dilated(dilation: usize) -> Self {
        ConvGeom { stride: 1, dilation, padding: dilation }
    }
}

/// One output dimension of a convolution:
/// `floor((size + 2*padding - ((k - 1) * dilation + 1)) / stride) + 1`.
fn conv_out_dim(size: usize, k: usize, geom: &ConvGeom) -> Result<usize> {
    let extent = (k - 1) * geom.dilation + 1;
    let padded = size + 2 * geom.padding;
    if extent > padded {
        return Err(Error::Shape(format!(
            "kernel extent {extent} exceeds padded input {padded}"
        )));
    }
    Ok((padded - extent) / geom.stride + 1)
}

/// Validates operand shapes and returns the `[n, out_ch, out_h, out_w]`
/// shape a convolution will produce.
pub fn conv2d_output_shape(
    x_shape: &[usize],
    w_shape: &[usize],
    b_shape: &[usize],
    geom: &ConvGeom,
) -> Result<[usize; 4]> {
    let [n, cin, h, w] = match x_shape {
        &[n, c, h, w] => [n, c, h, w],
        s => return Err(Error::Shape(format!("conv input must be rank 4, got {s:?}"))),
    };
    let [cout, wcin, kh, kw] = match w_shape {
        &[o, i, kh, kw] => [o, i, kh, kw],
        s => return Err(Error::Shape(format!("conv weights must be rank 4, got {s:?}"))),
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv weights expect {wcin} input channels, input has {cin}"
        )));
    }
    if b_shape != [cout] {
        return Err(Error::Shape(format!(
            "conv bias shape {b_shape:?} does not match {cout} output channels"
        )));
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::Shape("conv stride and dilation must be positive".into()));
    }
    let out_h = conv_out_dim(h, kh, geom)?;
    let out_w = conv_out_dim(w, kw, geom)?;
    Ok([n, cout, out_h, out_w])
}

/// The output rows a kernel tap touches. For tap offset `kd = k*dilation -
/// padding` the input coordinate of output `o` is `o*stride + kd`; the
/// returned half-open range holds exactly the outputs whose input
/// coordinate lands inside `[0, size)`.
#[inline]
fn valid_out_range(out_size: usize, in_size: usize, stride: usize, kd: isize) -> (usize, usize) {
    // o*stride + kd >= 0  =>  o >= ceil(-kd / stride)
    let lo = if kd >= 0 { 0 } else { ((-kd) as usize).div_ceil(stride) };
    // o*stride + kd <= in_size-1  =>  o <= (in_size-1-kd) / stride
    let hi_num = in_size as isize - 1 - kd;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

/// 2D convolution with zero padding, stride and dilation.
pub fn conv2d(x: &Tensor, weights: &Tensor, bias: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let [n, cout, out_h, out_w] =
        conv2d_output_shape(x.shape(), weights.shape(), bias.shape(), geom)?;
    let (_, cin, h, w) = x.dims4()?;
    let (kh, kw) = (weights.shape()[2], weights.shape()[3]);

    let mut out = Tensor::zeros(&[n, cout, out_h, out_w])?;
    let xd = x.data();
    let wd = weights.data();
    let bd = bias.data();
    let od = out.data_mut();

    for bn in 0..n {
        for co in 0..cout {
            let obase = (bn * cout + co) * out_h * out_w;
            od[obase..obase + out_h * out_w].fill(bd[co]);
            for ci in 0..cin {
                let ibase = (bn * cin + ci) * h * w;
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let kdy = (ky * geom.dilation) as isize - geom.padding as isize;
                    let (oy0, oy1) = valid_out_range(out_h, h, geom.stride, kdy);
                    for kx in 0..kw {
                        let wv = wd[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let kdx = (kx * geom.dilation) as isize - geom.padding as isize;
                        let (ox0, ox1) = valid_out_range(out_w, w, geom.stride, kdx);
                        if ox1 <= ox0 {
                            continue;
                        }
                        if geom.stride == 1 {
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + kdy) as usize;
                                let ix0 = (ox0 as isize + kdx) as usize;
                                let dst = &mut od[obase + oy * out_w + ox0
                                    ..obase + oy * out_w + ox1];
                                let src = &xd[ibase + iy * w + ix0..][..ox1 - ox0];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            }
                        } else {
                            for oy in oy0..oy1 {
                                let iy = (oy as isize * geom.stride as isize + kdy) as usize;
                                for ox in ox0..ox1 {
                                    let ix =
                                        (ox as isize * geom.stride as isize + kdx) as usize;
                                    od[obase + oy * out_w + ox] +=
                                        wv * xd[ibase + iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d`]: distributes `upstream` (gradient at the
/// output) to the input, the weights and the bias.
pub fn conv2d_backward(
    x: &Tensor,
    weights: &Tensor,
    geom: &ConvGeom,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let (cout, cin, kh, kw) = weights.dims4()?;
    let expect =
        conv2d_output_shape(x.shape(), weights.shape(), &[cout], geom)?;
    if upstream.shape() != expect {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match conv output {:?}",
            upstream.shape(),
            expect
        )));
    }
    let (n, _, h, w) = x.dims4()?;
    let (out_h, out_w) = (expect[2], expect[3]);

    let mut gx = Tensor::zeros_like(x);
    let mut gw = Tensor::zeros_like(weights);
    let mut gb = vec![0.0f64; cout];

    let xd = x.data();
    let wd = weights.data();
    let ud = upstream.data();
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();

    for bn in 0..n {
        for co in 0..cout {
            let ubase = (bn * cout + co) * out_h * out_w;
            gb[co] += ud[ubase..ubase + out_h * out_w].iter().sum::<f64>();
            for ci in 0..cin {
                let ibase = (bn * cin + ci) * h * w;
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let kdy = (ky * geom.dilation) as isize - geom.padding as isize;
                    let (oy0, oy1) = valid_out_range(out_h, h, geom.stride, kdy);
                    for kx in 0..kw {
                        let kdx = (kx * geom.dilation) as isize - geom.padding as isize;
                        let (ox0, ox1) = valid_out_range(out_w, w, geom.stride, kdx);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let wv = wd[wbase + ky * kw + kx];
                        let mut wacc = 0.0f64;
                        if geom.stride == 1 {
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + kdy) as usize;
                                let ix0 = (ox0 as isize + kdx) as usize;
                                let up = &ud[ubase + oy * out_w + ox0
                                    ..ubase + oy * out_w + ox1];
                                let src = &xd[ibase + iy * w + ix0..][..ox1 - ox0];
                                let dst = &mut gxd[ibase + iy * w + ix0..][..ox1 - ox0];
                                for ((u, s), d) in up.iter().zip(src).zip(dst) {
                                    wacc += u * s;
                                    *d += wv * u;
                                }
                            }
                        } else {
                            for oy in oy0..oy1 {
                                let iy = (oy as isize * geom.stride as isize + kdy) as usize;
                                for ox in ox0..ox1 {
                                    let ix =
                                        (ox as isize * geom.stride as isize + kdx) as usize;
                                    let u = ud[ubase + oy * out_w + ox];
                                    wacc += u * xd[ibase + iy * w + ix];
                                    gxd[ibase + iy * w + ix] += wv * u;
                                }
                            }
                        }
                        gwd[wbase + ky * kw + kx] += wacc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: gx, weights: gw, bias: Tensor::from_vec(&[cout], gb)? })
}

/// A convolution's learnable state plus its fixed geometry.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `[out_ch, in_ch, kh, kw]`.
    pub weights: GradPair,
    /// `[out_ch]`.
    pub bias: GradPair,
    pub geom: ConvGeom,
}

impl ConvParams {
    /// Initializes weights from a zero-mean normal with variance
    /// `2 / fan_in` (`fan_in = in_ch * kh * kw`) and zero biases. The
    /// generator stream is keyed by `name`, so the same parameter name
    /// always draws the same values for a given seed.
    pub fn he_init(
        name: &str,
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        geom: ConvGeom,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = (in_ch * kh * kw) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = rand_distr::Normal::new(0.0, std)
            .map_err(|e| Error::Config(format!("bad init distribution: {e}")))?;
        let mut rng = rng::stream(&[seed, rng::tag::INIT, rng::name_hash(name)]);
        let data: Vec<f64> =
            (0..out_ch * in_ch * kh * kw).map(|_| rng.sample(normal)).collect();
        Ok(ConvParams {
            weights: GradPair::new(Tensor::from_vec(&[out_ch, in_ch, kh, kw], data)?),
            bias: GradPair::new(Tensor::zeros(&[out_ch])?),
            geom,
        })
    }

    /// All-zero weights and biases: the layer initially outputs zero
    /// everywhere regardless of input.
    pub fn zero_init(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        Ok(ConvParams {
            weights: GradPair::new(Tensor::zeros(&[out_ch, in_ch, kh, kw])?),
            bias: GradPair::new(Tensor::zeros(&[out_ch])?),
            geom,
        })
    }

    /// Forward pass with the current parameter values.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weights.value, &self.bias.value, &self.geom)
    }

    /// Backward pass: accumulates weight and bias gradients in place and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let grads = conv2d_backward(x, &self.weights.value, &self.geom, upstream)?;
        self.weights.accumulate(&grads.weights)?;
        self.bias.accumulate(&grads.bias)?;
        Ok(grads.input)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.value.shape()[1]
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Element-wise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

/// Backward pass of [`relu`]: passes the upstream gradient where the input
/// was positive and zero elsewhere (the subgradient at exactly zero is
/// taken as zero).
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "relu upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(v, u)| if *v > 0.0 { *u } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Odd trailing rows or columns are handled
/// by clamping window coordinates to the edge (replicate padding), so the
/// output is `ceil(h/2) x ceil(w/2)`. Besides the pooled tensor it returns
/// the flat input index of each window's maximum; ties go to the first
/// element in row-major window order.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let out_h = h.div_ceil(2);
    let out_w = w.div_ceil(2);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w])?;
    let mut argmax = vec![0usize; n * c * out_h * out_w];
    let xd = x.data();
    let od = out.data_mut();

    for plane in 0..n * c {
        let ibase = plane * h * w;
        let obase = plane * out_h * out_w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    let iy = (2 * oy + dy).min(h - 1);
                    for dx in 0..2 {
                        let ix = (2 * ox + dx).min(w - 1);
                        let idx = ibase + iy * w + ix;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                od[obase + oy * out_w + ox] = best;
                argmax[obase + oy * out_w + ox] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Backward pass of [`maxpool2x2`]: routes each upstream element to the
/// input position that won its window.
pub fn maxpool2x2_backward(
    x_shape: &[usize],
    argmax: &[usize],
    upstream: &Tensor,
) -> Result<Tensor> {
    let mut gx = Tensor::zeros(x_shape)?;
    if argmax.len() != upstream.len() {
        return Err(Error::Shape(format!(
            "pool argmax length {} does not match upstream {}",
            argmax.len(),
            upstream.len()
        )));
    }
    let gxd = gx.data_mut();
    for (&idx, &u) in argmax.iter().zip(upstream.data()) {
        if idx >= gxd.len() {
            return Err(Error::Shape("pool argmax index out of range".into()));
        }
        gxd[idx] += u;
    }
    Ok(gx)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Batch-norm learnable state: per-channel scale and shift plus running
/// statistics for evaluation mode.
#[derive(Debug, Clone)]
pub struct BNParams {
    /// Per-channel scale, initialized to one.
    pub gamma: GradPair,
    /// Per-channel shift, initialized to zero.
    pub beta: GradPair,
    /// Exponential moving average of batch means.
    pub running_mean: Tensor,
    /// Exponential moving average of biased batch variances.
    pub running_var: Tensor,
    /// Added to the variance before the square root.
    pub epsilon: f64,
    /// Weight of the newest batch in the running averages.
    pub momentum: f64,
}

impl BNParams {
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("batchnorm needs at least one channel".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("batchnorm epsilon must be positive, got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("batchnorm momentum must be in [0,1], got {momentum}")));
        }
        Ok(BNParams {
            gamma: GradPair::new(Tensor::new(&[channels], 1.0)?),
            beta: GradPair::new(Tensor::zeros(&[channels])?),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::new(&[channels], 1.0)?,
            epsilon,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

/// Per-batch values the batch-norm backward pass needs.
#[derive(Debug)]
pub struct BnCache {
    /// Normalized input `(x - mean) / sqrt(var + eps)`.
    pub x_hat: Tensor,
    /// Per-channel `1 / sqrt(var + eps)`.
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean.
    pub batch_mean: Vec<f64>,
    /// Per-channel biased batch variance.
    pub batch_var: Vec<f64>,
}

/// Training-mode batch normalization: normalizes with the statistics of
/// this batch. Each channel is normalized over batch and space; errors if
/// that population has fewer than two elements, because a variance of a
/// single value carries no information.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = x.dims4()?;
    check_bn_shapes(c, gamma, beta)?;
    let count = n * h * w;
    if count <= 1 {
        return Err(Error::Shape(format!(
            "batchnorm needs more than one value per channel, got {count}"
        )));
    }

    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for bn in 0..n {
            let base = (bn * c + ch) * h * w;
            sum += xd[base..base + h * w].iter().sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0;
        for bn in 0..n {
            let base = (bn * c + ch) * h * w;
            sq += xd[base..base + h * w].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count as f64;
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut x_hat = Tensor::zeros_like(x);
    let mut out = Tensor::zeros_like(x);
    {
        let xh = x_hat.data_mut();
        let od = out.data_mut();
        let gd = gamma.data();
        let bd = beta.data();
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * h * w;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + h * w {
                    let xh_v = (xd[i] - m) * is;
                    xh[i] = xh_v;
                    od[i] = g * xh_v + b;
                }
            }
        }
    }
    Ok((out, BnCache { x_hat, inv_std, batch_mean: mean, batch_var: var }))
}

/// Evaluation-mode batch normalization: normalizes with running statistics
/// and is a per-element affine map, independent of batch composition.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    check_bn_shapes(c, gamma, beta)?;
    check_bn_shapes(c, running_mean, running_var)?;
    let mut out = Tensor::zeros_like(x);
    let od = out.data_mut();
    let xd = x.data();
    for bn in 0..n {
        for ch in 0..c {
            let is = 1.0 / (running_var.data()[ch] + epsilon).sqrt();
            let (m, g, b) = (running_mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
            let base = (bn * c + ch) * h * w;
            for i in base..base + h * w {
                od[i] = g * (xd[i] - m) * is + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of a batch-norm layer.
#[derive(Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward pass of [`batchnorm_train`]. With `g = upstream * gamma` the
/// input gradient is `inv_std * (g - mean(g) - x_hat * mean(g * x_hat))`,
/// the mean taken per channel over batch and space — the two subtracted
/// terms are the batch mean's and batch variance's share of the gradient.
pub fn batchnorm_backward_train(
    cache: &BnCache,
    gamma: &Tensor,
    upstream: &Tensor,
) -> Result<BnGrads> {
    let (n, c, h, w) = upstream.dims4()?;
    if cache.x_hat.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "batchnorm upstream shape {:?} does not match cached {:?}",
            upstream.shape(),
            cache.x_hat.shape()
        )));
    }
    check_bn_shapes(c, gamma, gamma)?;
    let count = (n * h * w) as f64;
    let ud = upstream.data();
    let xh = cache.x_hat.data();
    let gd = gamma.data();

    let mut gx = Tensor::zeros_like(upstream);
    let mut ggamma = vec![0.0f64; c];
    let mut gbeta = vec![0.0f64; c];
    let gxd = gx.data_mut();

    for ch in 0..c {
        // Per-channel sums over batch and space.
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for bn in 0..n {
            let base = (bn * c + ch) * h * w;
            for i in base..base + h * w {
                let g = ud[i] * gd[ch];
                sum_g += g;
                sum_gx += g * xh[i];
                ggamma[ch] += ud[i] * xh[i];
                gbeta[ch] += ud[i];
            }
        }
        let mean_g = sum_g / count;
        let mean_gx = sum_gx / count;
        let is = cache.inv_std[ch];
        for bn in 0..n {
            let base = (bn * c + ch) * h * w;
            for i in base..base + h * w {
                let g = ud[i] * gd[ch];
                gxd[i] = is * (g - mean_g - xh[i] * mean_gx);
            }
        }
    }
    Ok(BnGrads {
        input: gx,
        gamma: Tensor::from_vec(&[c], ggamma)?,
        beta: Tensor::from_vec(&[c], gbeta)?,
    })
}

/// Backward pass of [`batchnorm_eval`]: the running statistics are
/// constants, so the input gradient is a per-channel scaling.
pub fn batchnorm_backward_eval(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: f64,
    upstream: &Tensor,
) -> Result<BnGrads> {
    let (n, c, h, w) = x.dims4()?;
    if upstream.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "batchnorm upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let ud = upstream.data();
    let xd = x.data();
    let mut gx = Tensor::zeros_like(x);
    let mut ggamma = vec![0.0f64; c];
    let mut gbeta = vec![0.0f64; c];
    let gxd = gx.data_mut();
    for ch in 0..c {
        let is = 1.0 / (running_var.data()[ch] + epsilon).sqrt();
        let m = running_mean.data()[ch];
        let g = gamma.data()[ch];
        for bn in 0..n {
            let base = (bn * c + ch) * h * w;
            for i in base..base + h * w {
                gxd[i] = ud[i] * g * is;
                ggamma[ch] += ud[i] * (xd[i] - m) * is;
                gbeta[ch] += ud[i];
            }
        }
    }
    Ok(BnGrads {
        input: gx,
        gamma: Tensor::from_vec(&[c], ggamma)?,
        beta: Tensor::from_vec(&[c], gbeta)?,
    })
}

fn check_bn_shapes(c: usize, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != [c] || b.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm parameter shapes {:?}/{:?} do not match {c} channels",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Training-mode inverted dropout: each element is zeroed with probability
/// `rate` and kept scaled by `1/(1-rate)` otherwise, so the expected value
/// of the output equals the input and evaluation mode is the identity.
///
/// Returns the output and the applied mask (entries `0` or `1/(1-rate)`).
/// For rank-4 input each sample in the batch draws from its own stream
/// keyed by `(seed, sample index)`, so masks do not depend on batch
/// assembly order.
pub fn dropout_train(x: &Tensor, rate: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
    }
    let mut mask = Tensor::new(x.shape(), 1.0)?;
    if rate > 0.0 {
        let scale = 1.0 / (1.0 - rate);
        let (samples, per_sample) = match x.shape() {
            &[n, ..] if x.shape().len() == 4 => (n, x.len() / n),
            _ => (1, x.len()),
        };
        let md = mask.data_mut();
        for s in 0..samples {
            let mut rng = rng::stream(&[seed, rng::tag::DROPOUT, s as u64]);
            for v in md[s * per_sample..(s + 1) * per_sample].iter_mut() {
                *v = if rng.random::<f64>() < rate { 0.0 } else { scale };
            }
        }
    }
    let out = Tensor::from_vec(
        x.shape(),
        x.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect(),
    )?;
    Ok((out, mask))
}

/// Backward pass of [`dropout_train`]: the same mask applied to the
/// upstream gradient.
pub fn dropout_backward(mask: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if mask.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "dropout upstream shape {:?} does not match mask {:?}",
            upstream.shape(),
            mask.shape()
        )));
    }
    Tensor::from_vec(
        mask.shape(),
        mask.data().iter().zip(upstream.data()).map(|(m, u)| m * u).collect(),
    )
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

/// Precomputed 1D interpolation: for each output coordinate the two source
/// indices and the weight of the second one.
fn bilinear_axis(out_size: usize, in_size: usize) -> Vec<(usize, usize, f64)> {
    (0..out_size)
        .map(|o| {
            if out_size == 1 || in_size == 1 {
                return (0, 0, 0.0);
            }
            // With out_size == in_size the scale is exactly 1.0, the source
            // coordinate is exactly `o` and the fraction exactly 0, making
            // same-size resize a bit-exact identity.
            let scale = (in_size - 1) as f64 / (out_size - 1) as f64;
            let src = o as f64 * scale;
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear interpolation to `(out_h, out_w)` with corner alignment: output
/// corners sample input corners exactly, and interior points interpolate
/// between the four neighbors of `src = out_coord * (in-1)/(out-1)`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("bilinear resize target must be positive".into()));
    }
    let ys = bilinear_axis(out_h, h);
    let xs = bilinear_axis(out_w, w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w])?;
    let od = out.data_mut();
    let xd = x.data();
    for plane in 0..n * c {
        let ibase = plane * h * w;
        let obase = plane * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = ibase + y0 * w;
            let row1 = ibase + y1 * w;
            let orow = obase + oy * out_w;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = (1.0 - fx) * xd[row0 + x0] + fx * xd[row0 + x1];
                let bot = (1.0 - fx) * xd[row1 + x0] + fx * xd[row1 + x1];
                od[orow + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`bilinear_resize`]: scatters each upstream element to
/// the four source pixels with the forward interpolation weights.
pub fn bilinear_resize_backward(in_h: usize, in_w: usize, upstream: &Tensor) -> Result<Tensor> {
    let (n, c, out_h, out_w) = upstream.dims4()?;
    let ys = bilinear_axis(out_h, in_h);
    let xs = bilinear_axis(out_w, in_w);
    let mut gx = Tensor::zeros(&[n, c, in_h, in_w])?;
    let gxd = gx.data_mut();
    let ud = upstream.data();
    for plane in 0..n * c {
        let ibase = plane * in_h * in_w;
        let obase = plane * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = ibase + y0 * in_w;
            let row1 = ibase + y1 * in_w;
            let orow = obase + oy * out_w;
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let u = ud[orow + ox];
                gxd[row0 + x0] += (1.0 - fy) * (1.0 - fx) * u;
                gxd[row0 + x1] += (1.0 - fy) * fx * u;
                gxd[row1 + x0] += fy * (1.0 - fx) * u;
                gxd[row1 + x1] += fy * fx * u;
            }
        }
    }
    Ok(gx)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Channel-wise softmax of a `[n, k, h, w]` tensor: at every pixel the
/// channel vector is exponentiated and normalized to sum to one. The
/// channel maximum is subtracted before exponentiation, so the largest
/// exponent is exactly zero and overflow cannot occur.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = x.dims4()?;
    let mut out = Tensor::zeros_like(x);
    let od = out.data_mut();
    let xd = x.data();
    let plane = h * w;
    for bn in 0..n {
        let base = bn * k * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..k {
                m = m.max(xd[base + ch * plane + p]);
            }
            let mut sum = 0.0;
            for ch in 0..k {
                let e = (xd[base + ch * plane + p] - m).exp();
                od[base + ch * plane + p] = e;
                sum += e;
            }
            for ch in 0..k {
                od[base + ch * plane + p] /= sum;
            }
        }
    }
    Ok(out)
}

/// Per-pixel channel argmax of a `[n, k, h, w]` tensor, one label map per
/// batch element. Ties resolve to the lowest channel index. Errors when
/// the channel count exceeds what a `u8` label can hold.
pub fn argmax_channels(x: &Tensor) -> Result<Vec<crate::tensor::LabelMap>> {
    let (n, k, h, w) = x.dims4()?;
    if k > 256 {
        return Err(Error::Shape(format!("{k} channels exceed the 256-class label range")));
    }
    let xd = x.data();
    let plane = h * w;
    let mut maps = Vec::with_capacity(n);
    for bn in 0..n {
        let base = bn * k * plane;
        let mut data = vec![0u8; plane];
        for (p, slot) in data.iter_mut().enumerate() {
            let mut best = xd[base + p];
            let mut best_k = 0usize;
            for ch in 1..k {
                let v = xd[base + ch * plane + p];
                if v > best {
                    best = v;
                    best_k = ch;
                }
            }
            *slot = best_k as u8;
        }
        maps.push(crate::tensor::LabelMap::from_vec(h, w, data)?);
    }
    Ok(maps)
}

/// Backward pass of [`softmax_channels`] given the forward output `probs`:
/// `dx_k = p_k * (u_k - sum_j u_j * p_j)` per pixel.
pub fn softmax_backward(probs: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if probs.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "softmax upstream shape {:?} does not match output {:?}",
            upstream.shape(),
            probs.shape()
        )));
    }
    let (n, k, h, w) = probs.dims4()?;
    let mut gx = Tensor::zeros_like(probs);
    let gxd = gx.data_mut();
    let pd = probs.data();
    let ud = upstream.data();
    let plane = h * w;
    for bn in 0..n {
        let base = bn * k * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for ch in 0..k {
                let i = base + ch * plane + p;
                dot += ud[i] * pd[i];
            }
            for ch in 0..k {
                let i = base + ch * plane + p;
                gxd[i] = pd[i] * (ud[i] - dot);
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(shape: &[usize]) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| i as f64).collect()).unwrap()
    }

    /// Literal definition of convolution: six nested loops over the output
    /// and kernel, reading zero outside the input.
    fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, geom: &ConvGeom) -> Tensor {
        let [n, cout, out_h, out_w] =
            conv2d_output_shape(x.shape(), w.shape(), b.shape(), geom).unwrap();
        let (_, cin, h, wid) = x.dims4().unwrap();
        let (_, _, kh, kw) = w.dims4().unwrap();
        let mut out = Tensor::zeros(&[n, cout, out_h, out_w]).unwrap();
        for bn in 0..n {
            for co in 0..cout {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * geom.stride + ky * geom.dilation) as isize
                                        - geom.padding as isize;
                                    let ix = (ox * geom.stride + kx * geom.dilation) as isize
                                        - geom.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wid
                                    {
                                        acc += w.at4(co, ci, ky, kx)
                                            * x.at4(bn, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bn * cout + co) * out_h + oy) * out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(&[seed]);
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn conv_matches_naive_enumeration() {
        for (dilation, stride, padding, kh) in
            [(1, 1, 1, 3), (2, 1, 2, 3), (3, 1, 3, 3), (1, 2, 0, 2), (2, 2, 3, 3), (1, 1, 0, 1)]
        {
            let geom = ConvGeom { stride, dilation, padding };
            let x = random_tensor(&[2, 3, 11, 13], 100 + dilation as u64);
            let w = random_tensor(&[4, 3, kh, kh], 200 + stride as u64);
            let b = random_tensor(&[4], 300 + padding as u64);
            let fast = conv2d(&x, &w, &b, &geom).unwrap();
            let slow = naive_conv2d(&x, &w, &b, &geom);
            assert_eq!(fast.shape(), slow.shape());
            let max_diff = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1e-12, "dilation {dilation} stride {stride}: diff {max_diff}");
        }
    }

    #[test]
    fn dilated_conv_on_ones_counts_taps() {
        // All-ones 9x9 input, all-ones 3x3 kernel, dilation 3, padding 3:
        // the center output sees all nine taps, the corners only four.
        let x = Tensor::new(&[1, 1, 9, 9], 1.0).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let out = conv2d(&x, &w, &b, &ConvGeom::dilated(3)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 9, 9]);
        assert_eq!(out.at4(0, 0, 4, 4), 9.0);
        assert_eq!(out.at4(0, 0, 0, 0), 4.0);
        assert_eq!(out.at4(0, 0, 0, 4), 6.0);
    }

    #[test]
    fn conv_output_shape_formula_and_errors() {
        // floor((h + 2p - ((k-1)d + 1)) / s) + 1 across a few geometries.
        let shape = conv2d_output_shape(
            &[1, 1, 10, 10],
            &[1, 1, 3, 3],
            &[1],
            &ConvGeom { stride: 2, dilation: 1, padding: 0 },
        )
        .unwrap();
        assert_eq!(shape, [1, 1, 4, 4]);
        // Kernel extent larger than the padded input must error.
        assert!(conv2d_output_shape(
            &[1, 1, 4, 4],
            &[1, 1, 3, 3],
            &[1],
            &ConvGeom { stride: 1, dilation: 2, padding: 0 },
        )
        .is_err());
        // Channel mismatch must error.
        assert!(conv2d_output_shape(&[1, 2, 8, 8], &[1, 3, 3, 3], &[1], &ConvGeom::padded(1))
            .is_err());
    }

    #[test]
    fn conv_backward_matches_naive_on_weights() {
        // Check the weight gradient against the naive definition: perturbing
        // one weight changes the output by the matching input patch sum.
        let geom = ConvGeom::dilated(2);
        let x = random_tensor(&[1, 2, 7, 7], 42);
        let w = random_tensor(&[3, 2, 3, 3], 43);
        let b = random_tensor(&[3], 44);
        let up = random_tensor(&[1, 3, 7, 7], 45);
        let grads = conv2d_backward(&x, &w, &geom, &up).unwrap();

        // Bias gradient is the plain upstream sum per output channel.
        for co in 0..3 {
            let expect: f64 = (0..7 * 7).map(|i| up.data()[co * 49 + i]).sum();
            assert!((grads.bias.data()[co] - expect).abs() < 1e-12);
        }

        // Directional check: sum of elementwise products of analytic grads
        // with random directions equals the change predicted by linearity.
        let eps = 1e-6;
        let mut w2 = w.clone();
        let dir = random_tensor(&[3, 2, 3, 3], 46);
        for (v, d) in w2.data_mut().iter_mut().zip(dir.data()) {
            *v += eps * d;
        }
        let y1 = conv2d(&x, &w, &b, &geom).unwrap();
        let y2 = conv2d(&x, &w2, &b, &geom).unwrap();
        let measured: f64 = y2
            .data()
            .iter()
            .zip(y1.data())
            .zip(up.data())
            .map(|((a, b), u)| (a - b) * u)
            .sum::<f64>()
            / eps;
        let predicted: f64 =
            grads.weights.data().iter().zip(dir.data()).map(|(g, d)| g * d).sum();
        assert!((measured - predicted).abs() < 1e-5, "{measured} vs {predicted}");
    }

    #[test]
    fn relu_clamps_and_routes_gradient() {
        let x = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
        let up = Tensor::new(&[1, 1, 1, 4], 1.0).unwrap();
        let g = relu_backward(&x, &up).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_handles_even_odd_and_ties() {
        // 3x3 input: odd edges replicate, so output is 2x2.
        let x = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![
                1.0, 2.0, 3.0, //
                4.0, 5.0, 6.0, //
                7.0, 8.0, 9.0,
            ],
        )
        .unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);

        let up = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
        let g = maxpool2x2_backward(&[1, 1, 3, 3], &idx, &up).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 100.0, 1000.0]);

        // Constant window: the tie goes to the first element in row-major
        // order, so the gradient routes to the window's top-left pixel.
        let flat = Tensor::new(&[1, 1, 2, 2], 7.0).unwrap();
        let (y, idx) = maxpool2x2(&flat).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn batchnorm_normalizes_with_hand_computed_stats() {
        // One channel, four values: mean 2.5, biased variance 1.25.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::new(&[1], 1.0).unwrap();
        let beta = Tensor::zeros(&[1]).unwrap();
        let (y, cache) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
        assert!((cache.batch_mean[0] - 2.5).abs() < 1e-12);
        assert!((cache.batch_var[0] - 1.25).abs() < 1e-12);
        let is = 1.0 / (1.25f64 + 1e-5).sqrt();
        assert!((y.data()[0] - (1.0 - 2.5) * is).abs() < 1e-12);
        // Normalized output has zero mean and unit variance (up to eps).
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);

        // A single value per channel cannot be normalized.
        let tiny = Tensor::new(&[1, 1, 1, 1], 3.0).unwrap();
        assert!(batchnorm_train(&tiny, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let gamma = Tensor::new(&[1], 2.0).unwrap();
        let beta = Tensor::new(&[1], 0.5).unwrap();
        let rm = Tensor::new(&[1], 4.0).unwrap();
        let rv = Tensor::new(&[1], 4.0).unwrap();
        let y = batchnorm_eval(&x, &gamma, &beta, &rm, &rv, 0.0).unwrap();
        // (3-4)/2 * 2 + 0.5 = -0.5 ; (5-4)/2 * 2 + 0.5 = 1.5
        assert!((y.data()[0] - -0.5).abs() < 1e-12);
        assert!((y.data()[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_inverted_and_seed_stable() {
        let x = Tensor::new(&[2, 1, 8, 8], 1.0).unwrap();
        let (y, mask) = dropout_train(&x, 0.5, 7).unwrap();
        let (y2, _) = dropout_train(&x, 0.5, 7).unwrap();
        assert_eq!(y.data(), y2.data());
        // Kept elements are scaled by 1/(1-rate).
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        // Mask mean approximates 1 (inverted dropout is unbiased).
        let mean: f64 = mask.data().iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.3, "mask mean {mean}");
        // Rate zero is the identity.
        let (y0, m0) = dropout_train(&x, 0.0, 7).unwrap();
        assert_eq!(y0.data(), x.data());
        assert!(m0.data().iter().all(|&v| v == 1.0));
        // Per-sample streams: first sample's mask is independent of batch
        // size, so tile evaluation and batch evaluation agree.
        let big = Tensor::new(&[3, 1, 8, 8], 1.0).unwrap();
        let (yb, _) = dropout_train(&big, 0.5, 7).unwrap();
        assert_eq!(&yb.data()[..64], &y.data()[..64]);
        assert!(dropout_train(&x, 1.0, 7).is_err());
    }

    #[test]
    fn bilinear_matches_hand_oracle_and_identity() {
        // 2x2 -> 3x3 with corner alignment.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap();
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in y.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        // Same-size resize is a bit-exact identity.
        let z = seq_tensor(&[2, 3, 5, 7]);
        let same = bilinear_resize(&z, 5, 7).unwrap();
        assert_eq!(z.data(), same.data());
        // Upsample then check corners are preserved exactly.
        let up = bilinear_resize(&x, 9, 9).unwrap();
        assert_eq!(up.at4(0, 0, 0, 0), 0.0);
        assert_eq!(up.at4(0, 0, 8, 8), 3.0);
    }

    #[test]
    fn bilinear_backward_conserves_mass() {
        // The scatter weights per upstream element sum to one, so the
        // gradient total equals the upstream total.
        let up = random_tensor(&[1, 2, 9, 9], 5);
        let g = bilinear_resize_backward(4, 4, &up).unwrap();
        let su: f64 = up.data().iter().sum();
        let sg: f64 = g.data().iter().sum();
        assert!((su - sg).abs() < 1e-10);
    }

    #[test]
    fn softmax_is_a_simplex_and_stable() {
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![1000.0, 1001.0, 999.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.all_finite());
        assert!(p.data()[1] > p.data()[0] && p.data()[0] > p.data()[2]);

        // Uniform logits give uniform probabilities.
        let u = Tensor::new(&[2, 4, 3, 3], -7.0).unwrap();
        let p = softmax_channels(&u).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
