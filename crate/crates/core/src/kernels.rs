//! Forward and backward numeric kernels.
//!
//! Every kernel allocates a fresh output and never mutates its inputs.
//! Backward kernels compute the vector-Jacobian product with respect to the
//! kernel's data input only; parameters are treated as constants.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stride and zero padding for a 2D convolution, as `[vertical, horizontal]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: [1, 1],
            padding: [0, 0],
        }
    }
}

/// Window and stride for max pooling, as `[vertical, horizontal]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dParams {
    pub window: [usize; 2],
    pub stride: [usize; 2],
}

fn sliding_extent(
    op: &'static str,
    extent: usize,
    pad: usize,
    window: usize,
    stride: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::NonIntegralExtent {
            op,
            detail: "stride must be positive".into(),
        });
    }
    let padded = extent + 2 * pad;
    if window == 0 || window > padded {
        return Err(Error::NonIntegralExtent {
            op,
            detail: format!("window {window} does not fit padded extent {padded}"),
        });
    }
    if !(padded - window).is_multiple_of(stride) {
        return Err(Error::NonIntegralExtent {
            op,
            detail: format!("({padded} - {window}) / {stride} + 1 is fractional"),
        });
    }
    Ok((padded - window) / stride + 1)
}

/// Output shape of [`conv2d`] for an input `[N, C, H, W]` and kernel
/// `[K, C, kh, kw]`.
pub fn conv2d_output_shape(
    input: [usize; 4],
    kernel: [usize; 4],
    params: Conv2dParams,
) -> Result<[usize; 4]> {
    let [n, c, h, w] = input;
    let [k, kc, kh, kw] = kernel;
    if c != kc {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    let oh = sliding_extent("conv2d", h, params.padding[0], kh, params.stride[0])?;
    let ow = sliding_extent("conv2d", w, params.padding[1], kw, params.stride[1])?;
    Ok([n, k, oh, ow])
}

/// Output shape of [`maxpool2d`]. The window must fit inside the input.
pub fn maxpool2d_output_shape(input: [usize; 4], params: Pool2dParams) -> Result<[usize; 4]> {
    let [n, c, h, w] = input;
    if params.window[0] > h || params.window[1] > w {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d",
            left: input.to_vec(),
            right: params.window.to_vec(),
        });
    }
    let oh = sliding_extent("maxpool2d", h, 0, params.window[0], params.stride[0])?;
    let ow = sliding_extent("maxpool2d", w, 0, params.window[1], params.stride[1])?;
    Ok([n, c, oh, ow])
}

/// 2D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let in_dims = input.dims4("conv2d")?;
    let k_dims = kernel.dims4("conv2d")?;
    let [n, k, oh, ow] = conv2d_output_shape(in_dims, k_dims, params)?;
    if bias.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: bias.shape().to_vec(),
            right: vec![k],
        });
    }
    let [_, c, h, w] = in_dims;
    let [_, _, kh, kw] = k_dims;
    let [sh, sw] = params.stride;
    let [ph, pw] = params.padding;
    let x = input.data();
    let wt = kernel.data();

    let mut out = vec![T::zero(); n * k * oh * ow];
    for b in 0..n {
        for oc in 0..k {
            let plane = &mut out[(b * k + oc) * oh * ow..][..oh * ow];
            plane.fill(bias.data()[oc]);
            for ic in 0..c {
                let src = &x[(b * c + ic) * h * w..][..h * w];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = wt[((oc * c + ic) * kh + dy) * kw + dx];
                        for oy in 0..oh {
                            let iy = (oy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..][..w];
                            let dst = &mut plane[oy * ow..][..ow];
                            for (ox, o) in dst.iter_mut().enumerate() {
                                let ix = (ox * sw + dx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o = *o + wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, k, oh, ow], out))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: [usize; 4],
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let k_dims = kernel.dims4("conv2d backward")?;
    let expected = conv2d_output_shape(input_shape, k_dims, params)?;
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: grad_out.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    let [n, c, h, w] = input_shape;
    let [k, _, kh, kw] = k_dims;
    let [_, _, oh, ow] = expected;
    let [sh, sw] = params.stride;
    let [ph, pw] = params.padding;
    let g = grad_out.data();
    let wt = kernel.data();

    let mut out = vec![T::zero(); n * c * h * w];
    for b in 0..n {
        for oc in 0..k {
            let gplane = &g[(b * k + oc) * oh * ow..][..oh * ow];
            for ic in 0..c {
                let dst = &mut out[(b * c + ic) * h * w..][..h * w];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = wt[((oc * c + ic) * kh + dy) * kw + dx];
                        for oy in 0..oh {
                            let iy = (oy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let grow = &gplane[oy * ow..][..ow];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let ix = (ox * sw + dx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    let slot = &mut dst[iy as usize * w + ix as usize];
                                    *slot = *slot + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}

/// Max pooling. Also returns, for every output element, the flat input index
/// of the winning element. Ties go to the first element in row-major window
/// order.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    params: Pool2dParams,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let in_dims = input.dims4("maxpool2d")?;
    let [n, c, oh, ow] = maxpool2d_output_shape(in_dims, params)?;
    let [_, _, h, w] = in_dims;
    let [wh, ww] = params.window;
    let [sh, sw] = params.stride;
    let x = input.data();

    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * sh * w + ox * sw;
                let mut best = x[best_idx];
                for dy in 0..wh {
                    for dx in 0..ww {
                        let idx = base + (oy * sh + dy) * w + ox * sw + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

/// Routes each output gradient to the input element that won the forward max.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: [usize; 4],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d backward",
            left: grad_out.shape().to_vec(),
            right: vec![argmax.len()],
        });
    }
    let len = input_shape.iter().product();
    let mut out = vec![T::zero(); len];
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        out[idx] = out[idx] + g;
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}

/// Spatial mean of every feature map: `[N, C, H, W] -> [N, C]`.
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("global_average_pool")?;
    let z = T::from_f64((h * w) as f64);
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / z)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_average_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: [usize; 4],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "global_average_pool backward",
            left: grad_out.shape().to_vec(),
            right: vec![n, c],
        });
    }
    let z = T::from_f64((h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g / z, h * w));
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}

/// Affine layer: `input · weightᵀ + bias`, with `weight` stored `[M, D]`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, d] = input.dims2("dense")?;
    let [m, wd] = weight.dims2("dense")?;
    if d != wd {
        return Err(Error::ShapeMismatch {
            op: "dense",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "dense bias",
            left: bias.shape().to_vec(),
            right: vec![m],
        });
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = Vec::with_capacity(n * m);
    for row in x.chunks_exact(d) {
        for (j, wrow) in wt.chunks_exact(d).enumerate() {
            let dot = row
                .iter()
                .zip(wrow)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            out.push(dot + bias.data()[j]);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn dense_backward_input<T: Scalar>(grad_out: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, m] = grad_out.dims2("dense backward")?;
    let [wm, d] = weight.dims2("dense backward")?;
    if m != wm {
        return Err(Error::ShapeMismatch {
            op: "dense backward",
            left: grad_out.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let g = grad_out.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); n * d];
    for b in 0..n {
        let dst = &mut out[b * d..][..d];
        for j in 0..m {
            let gv = g[b * m + j];
            for (o, &wv) in dst.iter_mut().zip(&wt[j * d..][..d]) {
                *o = *o + gv * wv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Standard ReLU backward: passes the gradient where the forward input was
/// strictly positive. The subgradient at exactly zero is taken as 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, forward_input: &Tensor<T>) -> Result<Tensor<T>> {
    relu_mask(grad_out, forward_input, |x, _| x > T::zero())
}

/// Guided-backpropagation ReLU backward: passes the gradient only where the
/// forward input was positive and the incoming gradient is positive.
pub fn relu_backward_guided<T: Scalar>(
    grad_out: &Tensor<T>,
    forward_input: &Tensor<T>,
) -> Result<Tensor<T>> {
    relu_mask(grad_out, forward_input, |x, g| x > T::zero() && g > T::zero())
}

fn relu_mask<T: Scalar>(
    grad_out: &Tensor<T>,
    forward_input: &Tensor<T>,
    keep: impl Fn(T, T) -> bool,
) -> Result<Tensor<T>> {
    if grad_out.shape() != forward_input.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu backward",
            left: grad_out.shape().to_vec(),
            right: forward_input.shape().to_vec(),
        });
    }
    let out = grad_out
        .data()
        .iter()
        .zip(forward_input.data())
        .map(|(&g, &x)| if keep(x, g) { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(grad_out.shape().to_vec(), out))
}

/// Row-wise softmax over `[N, M]`, stabilised by subtracting the row max.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, m] = input.dims2("softmax")?;
    let mut out = Vec::with_capacity(n * m);
    for row in input.data().chunks_exact(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&x| (x - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Softmax backward given the forward *output* `probs`.
pub fn softmax_backward<T: Scalar>(grad_out: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, m] = probs.dims2("softmax backward")?;
    if grad_out.shape() != probs.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax backward",
            left: grad_out.shape().to_vec(),
            right: probs.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(probs.len());
    for (g, y) in grad_out.data().chunks_exact(m).zip(probs.data().chunks_exact(m)) {
        let dot = g.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        out.extend(g.iter().zip(y).map(|(&gi, &yi)| yi * (gi - dot)));
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), out))
}
