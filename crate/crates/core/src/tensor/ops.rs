//! Forward kernels and the matching gradient kernels used by the tape.
//!
//! Convolutions lower to im2col + GEMM. The GEMM itself is delegated to
//! `matrixmultiply`.

use super::Tensor;
use crate::error::{Error, Result};

/// Probability floor applied before taking logs in [`cross_entropy`].
pub const PROB_FLOOR: f32 = 1e-12;

/// `c = beta * c + op(a) * op(b)` with row-major storage.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. A transposed operand is stored in
/// its untransposed layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the strides
    // above address only within them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D sliding window over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be positive".into()));
        }
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::InvalidShape("kernel extents must be positive".into()));
        }
        if kernel_h > height + 2 * padding || kernel_w > width + 2 * padding {
            return Err(Error::ShapeMismatch(format!(
                "{kernel_h}x{kernel_w} kernel does not fit a {height}x{width} input with padding {padding}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `input` into a `[C*kH*kW, outH*outW]` matrix.
pub(crate) fn im2col(input: &[f32], g: &Window) -> Vec<f32> {
    let cols_w = g.out_len();
    let mut cols = vec![0.0f32; g.patch_len() * cols_w];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - pad;
                        if iw >= 0 && iw < g.width as isize {
                            dst[oh * g.out_w + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `[C, H, W]` buffer.
pub(crate) fn col2im(cols: &[f32], g: &Window) -> Vec<f32> {
    let cols_w = g.out_len();
    let mut out = vec![0.0f32; g.channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - pad;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
    out
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::ShapeMismatch(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub(crate) fn conv2d_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Window> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(kernels, 4, "conv2d kernels")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let k = kernels.shape();
    if k[1] != c {
        return Err(Error::ShapeMismatch(format!(
            "kernels expect {} input channels, input has {c}",
            k[1]
        )));
    }
    Window::new(c, h, w, k[2], k[3], stride, padding)
}

/// Returns the output and the unfolded input, which the backward pass reuses.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f32>)> {
    let g = conv2d_geometry(input, kernels, stride, padding)?;
    let c_out = kernels.shape()[0];
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0f32; c_out * g.out_len()];
    gemm(
        false,
        false,
        c_out,
        g.patch_len(),
        g.out_len(),
        kernels.data(),
        &cols,
        0.0,
        &mut out,
    );
    Ok((Tensor::from_parts(vec![c_out, g.out_h, g.out_w], out), cols))
}

/// Direct 2-D cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kH, kW]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_forward(input, kernels, stride, padding).map(|(out, _)| out)
}

/// Gradients of conv2d w.r.t. input and kernels.
pub(crate) fn conv2d_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
    kernels: &Tensor,
    cols: &[f32],
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernels: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let k = kernels.shape();
    let g = Window::new(
        input_shape[0],
        input_shape[1],
        input_shape[2],
        k[2],
        k[3],
        stride,
        padding,
    )
    .expect("geometry validated in forward");
    let c_out = k[0];
    let grad_input = need_input.then(|| {
        let mut dcols = vec![0.0f32; g.patch_len() * g.out_len()];
        gemm(
            true,
            false,
            g.patch_len(),
            c_out,
            g.out_len(),
            kernels.data(),
            grad_out.data(),
            0.0,
            &mut dcols,
        );
        Tensor::from_parts(input_shape.to_vec(), col2im(&dcols, &g))
    });
    let grad_kernels = need_kernels.then(|| {
        let mut dk = vec![0.0f32; kernels.len()];
        gemm(
            false,
            true,
            c_out,
            g.out_len(),
            g.patch_len(),
            grad_out.data(),
            cols,
            0.0,
            &mut dk,
        );
        Tensor::from_parts(k.to_vec(), dk)
    });
    (grad_input, grad_kernels)
}

/// Geometry of the convolution whose adjoint is the requested transposed
/// convolution: it maps the transposed output back onto the input grid.
pub(crate) fn conv_transpose_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Window> {
    expect_rank(input, 3, "conv2d_transpose input")?;
    expect_rank(kernels, 4, "conv2d_transpose kernels")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let k = kernels.shape();
    if k[0] != c {
        return Err(Error::ShapeMismatch(format!(
            "transposed kernels expect {} input channels, input has {c}",
            k[0]
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidShape("stride must be positive".into()));
    }
    let out_h = ((h - 1) * stride + k[2]) as isize - 2 * padding as isize;
    let out_w = ((w - 1) * stride + k[3]) as isize - 2 * padding as isize;
    if out_h < 1 || out_w < 1 {
        return Err(Error::ShapeMismatch(format!(
            "padding {padding} leaves no output for a {h}x{w} input"
        )));
    }
    let g = Window::new(
        k[1],
        out_h as usize,
        out_w as usize,
        k[2],
        k[3],
        stride,
        padding,
    )?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok(g)
}

/// Transposed convolution ("deconvolution") of `[C_in, H, W]` with
/// `[C_in, C_out, kH, kW]`, producing `[C_out, (H-1)s - 2p + kH, ...]`.
pub fn conv2d_transpose(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_transpose_geometry(input, kernels, stride, padding)?;
    let c_in = input.shape()[0];
    let mut cols = vec![0.0f32; g.patch_len() * g.out_len()];
    gemm(
        true,
        false,
        g.patch_len(),
        c_in,
        g.out_len(),
        kernels.data(),
        input.data(),
        0.0,
        &mut cols,
    );
    Ok(Tensor::from_parts(
        vec![g.channels, g.height, g.width],
        col2im(&cols, &g),
    ))
}

pub(crate) fn conv2d_transpose_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernels: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = conv_transpose_geometry(input, kernels, stride, padding)
        .expect("geometry validated in forward");
    let c_in = input.shape()[0];
    let dcols = im2col(grad_out.data(), &g);
    let grad_input = need_input.then(|| {
        let mut dx = vec![0.0f32; input.len()];
        gemm(
            false,
            false,
            c_in,
            g.patch_len(),
            g.out_len(),
            kernels.data(),
            &dcols,
            0.0,
            &mut dx,
        );
        Tensor::from_parts(input.shape().to_vec(), dx)
    });
    let grad_kernels = need_kernels.then(|| {
        let mut dk = vec![0.0f32; kernels.len()];
        gemm(
            false,
            true,
            c_in,
            g.out_len(),
            g.patch_len(),
            input.data(),
            &dcols,
            0.0,
            &mut dk,
        );
        Tensor::from_parts(kernels.shape().to_vec(), dk)
    });
    (grad_input, grad_kernels)
}

/// Max pooling; also returns, per output element, the flat input index that
/// won. Ties go to the first element in row-major window order.
pub(crate) fn maxpool2d_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<u32>)> {
    expect_rank(input, 3, "maxpool2d input")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidShape("window and stride must be positive".into()));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if window > h || window > w {
        return Err(Error::ShapeMismatch(format!(
            "pool window {window} exceeds {h}x{w} input"
        )));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut argmax = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = base + oh * stride * w + ow * stride;
                for i in 0..window {
                    let row = base + (oh * stride + i) * w + ow * stride;
                    for j in 0..window {
                        if x[row + j] > x[best] {
                            best = row + j;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, out_h, out_w], out), argmax))
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    maxpool2d_forward(input, window, stride).map(|(out, _)| out)
}

fn check_linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    expect_rank(input, 1, "fully_connected input")?;
    expect_rank(weights, 2, "fully_connected weights")?;
    expect_rank(bias, 1, "fully_connected bias")?;
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n || bias.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} need input [{n}] and bias [{m}], got {:?} and {:?}",
            weights.shape(),
            input.shape(),
            bias.shape()
        )));
    }
    Ok((m, n))
}

/// `weights · input + bias`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = check_linear(input, weights, bias)?;
    let mut out = bias.data().to_vec();
    gemm(false, false, m, n, 1, weights.data(), input.data(), 1.0, &mut out);
    Ok(Tensor::from_parts(vec![m], out))
}

pub(crate) fn fully_connected_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    need_input: bool,
    need_weights: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    let grad_input = need_input.then(|| {
        let mut dx = vec![0.0f32; n];
        gemm(true, false, n, m, 1, weights.data(), grad_out.data(), 0.0, &mut dx);
        Tensor::from_parts(vec![n], dx)
    });
    let grad_weights = need_weights.then(|| {
        let mut dw = vec![0.0f32; m * n];
        gemm(false, false, m, 1, n, grad_out.data(), input.data(), 0.0, &mut dw);
        Tensor::from_parts(vec![m, n], dw)
    });
    (grad_input, grad_weights)
}

/// Max-shifted softmax over a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 1, "softmax input")?;
    let max = logits.max();
    let exps: Vec<f64> = logits
        .data()
        .iter()
        .map(|&z| ((z - max) as f64).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor::from_parts(
        logits.shape().to_vec(),
        exps.iter().map(|e| (e / total) as f32).collect(),
    ))
}

pub(crate) fn softmax_backward(grad_out: &Tensor, probs: &Tensor) -> Tensor {
    let dot: f64 = grad_out
        .data()
        .iter()
        .zip(probs.data())
        .map(|(&g, &p)| g as f64 * p as f64)
        .sum();
    let dot = dot as f32;
    Tensor::from_parts(
        probs.shape().to_vec(),
        grad_out
            .data()
            .iter()
            .zip(probs.data())
            .map(|(&g, &p)| p * (g - dot))
            .collect(),
    )
}

/// Returns the hot index of a one-hot vector of length `classes`.
pub fn one_hot_index(target: &Tensor, classes: usize) -> Result<usize> {
    if target.rank() != 1 || target.len() != classes {
        return Err(Error::InvalidTarget(format!(
            "target shape {:?} does not match prediction length {classes}",
            target.shape()
        )));
    }
    let mut hot = None;
    for (i, &v) in target.data().iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::InvalidTarget(
                "target must contain a single 1 and zeros elsewhere".into(),
            ));
        }
    }
    hot.ok_or_else(|| Error::InvalidTarget("target has no hot entry".into()))
}

/// Categorical cross-entropy `-log(pred[target])`, probabilities clamped to
/// `[PROB_FLOOR, 1]`.
pub fn cross_entropy(pred: &Tensor, target_onehot: &Tensor) -> Result<f32> {
    expect_rank(pred, 1, "cross_entropy prediction")?;
    let idx = one_hot_index(target_onehot, pred.len())?;
    Ok(-pred.data()[idx].clamp(PROB_FLOOR, 1.0).ln())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    x.map(f32::tanh)
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

fn check_channel_vector(features: &Tensor, vector: &Tensor) -> Result<()> {
    expect_rank(features, 3, "feature map")?;
    if vector.rank() != 1 || vector.len() != features.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "per-channel vector {:?} does not match {} channels",
            vector.shape(),
            features.shape()[0]
        )));
    }
    Ok(())
}

/// `out[c, h, w] = features[c, h, w] + bias[c]`.
pub fn add_channel_bias(features: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_channel_vector(features, bias)?;
    let plane = features.shape()[1] * features.shape()[2];
    let mut out = features.data().to_vec();
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.data()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(Tensor::from_parts(features.shape().to_vec(), out))
}

/// Spatial mean of every channel of a `[C, H, W]` map.
pub fn channel_means(features: &Tensor) -> Result<Tensor> {
    expect_rank(features, 3, "feature map")?;
    let plane = features.shape()[1] * features.shape()[2];
    Ok(Tensor::from_parts(
        vec![features.shape()[0]],
        features
            .data()
            .chunks(plane)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect(),
    ))
}

/// Crops `[C, H, W]` to `[C, height, width]` starting at `(top, left)`.
pub fn crop(input: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    expect_rank(input, 3, "crop input")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::ShapeMismatch(format!(
            "crop {height}x{width} at ({top}, {left}) does not fit {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for i in 0..height {
            let start = ch * h * w + (top + i) * w + left;
            out.extend_from_slice(&input.data()[start..start + width]);
        }
    }
    Ok(Tensor::from_parts(vec![c, height, width], out))
}
