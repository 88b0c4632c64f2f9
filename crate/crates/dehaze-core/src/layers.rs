//! Convolution, transposed convolution, max pooling, and activations with
//! explicit forward/backward passes over N×C×H×W arrays.
//!
//! Convolutions run as im2col + matrix multiply. A transposed convolution is
//! the adjoint of a strided convolution, so its three passes reuse the
//! convolution kernels with the input/output roles swapped. Weight layouts:
//! conv `(out, in, k, k)`, transposed conv `(in, out, k, k)`.

use ndarray::{Array1, Array2, Array4, ArrayView1, Axis, NdFloat};
use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity attached to a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply<T: NdFloat>(&self, x: &mut Array4<T>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(T::zero())),
            Activation::Tanh => x.mapv_inplace(|v| v.tanh()),
            Activation::None => {}
        }
    }

    /// Input gradient given the activation *output* and the output gradient.
    pub fn backward<T: NdFloat>(&self, y: &Array4<T>, grad_y: &Array4<T>) -> Array4<T> {
        match self {
            Activation::Relu => {
                let mut g = grad_y.clone();
                g.zip_mut_with(y, |gv, &yv| {
                    if yv <= T::zero() {
                        *gv = T::zero();
                    }
                });
                g
            }
            Activation::Tanh => {
                let mut g = grad_y.clone();
                g.zip_mut_with(y, |gv, &yv| *gv = *gv * (T::one() - yv * yv));
                g
            }
            Activation::None => grad_y.clone(),
        }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn tconv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfold x into a (C·k·k) × (N·OH·OW) matrix of receptive fields.
fn im2col<T: NdFloat>(x: &Array4<T>, kernel: usize, stride: usize, pad: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let oh = conv_output_size(h, kernel, stride, pad);
    let ow = conv_output_size(w, kernel, stride, pad);
    let mut cols = Array2::zeros((c * kernel * kernel, n * oh * ow));
    let x_std = x.as_standard_layout();
    let x_slice = x_std.as_slice().expect("standard layout is contiguous");
    let cols_slice = cols.as_slice_mut().expect("cols is contiguous");
    let col_w = n * oh * ow;

    for ci in 0..c {
        for u in 0..kernel {
            for v in 0..kernel {
                let row = (ci * kernel + u) * kernel + v;
                let row_base = row * col_w;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + u) as isize - pad as isize;
                        let dst_base = row_base + (ni * oh + oy) * ow;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = x_base + iy as usize * w;
                        if stride == 1 {
                            // Contiguous run: ix = ox - pad + v for ox in 0..ow.
                            let ix0 = v as isize - pad as isize;
                            let ox_start = (-ix0).max(0) as usize;
                            let ox_end = (w as isize - ix0).min(ow as isize).max(0) as usize;
                            if ox_start < ox_end {
                                let src0 = (src_row as isize + ix0 + ox_start as isize) as usize;
                                cols_slice[dst_base + ox_start..dst_base + ox_end]
                                    .copy_from_slice(&x_slice[src0..src0 + (ox_end - ox_start)]);
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride + v) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cols_slice[dst_base + ox] = x_slice[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (C·k·k) × (N·OH·OW) matrix back into an N×C×H×W array, summing
/// overlapping contributions. Adjoint of [`im2col`].
fn col2im<T: NdFloat>(
    cols: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let oh = conv_output_size(h, kernel, stride, pad);
    let ow = conv_output_size(w, kernel, stride, pad);
    let mut x = Array4::zeros((n, c, h, w));
    let x_slice = x.as_slice_mut().expect("x is contiguous");
    let cols_slice = cols.as_slice().expect("cols is contiguous");
    let col_w = n * oh * ow;

    for ci in 0..c {
        for u in 0..kernel {
            for v in 0..kernel {
                let row = (ci * kernel + u) * kernel + v;
                let row_base = row * col_w;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base = row_base + (ni * oh + oy) * ow;
                        let dst_row = x_base + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + v) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x_slice[dst_row + ix as usize] += cols_slice[src_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y[n,o] = b[o] + sum_{c,u,v} w[o,c,u,v] * x[n,c,·]`.
pub fn conv2d_forward<T: NdFloat>(
    x: &Array4<T>,
    w: &Array4<T>,
    b: Option<&ArrayView1<T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, width) = x.dim();
    let (out_c, in_c, kernel, k2) = w.dim();
    assert_eq!(c, in_c, "conv input channels");
    assert_eq!(kernel, k2, "square kernels only");
    let oh = conv_output_size(h, kernel, stride, pad);
    let ow = conv_output_size(width, kernel, stride, pad);

    let cols = im2col(x, kernel, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((out_c, in_c * kernel * kernel))
        .expect("weight reshapes");
    // (O, C·k·k) × (C·k·k, N·OH·OW)
    let y_mat = w_mat.dot(&cols);

    let mut y = Array4::zeros((n, out_c, oh, ow));
    for o in 0..out_c {
        let bias = b.map(|b| b[o]).unwrap_or_else(T::zero);
        let src = y_mat.index_axis(Axis(0), o);
        for ni in 0..n {
            let mut dst = y.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), o);
            let start = ni * oh * ow;
            for (d, &s) in dst
                .iter_mut()
                .zip(src.slice(ndarray::s![start..start + oh * ow]).iter())
            {
                *d = s + bias;
            }
        }
    }
    y
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input<T: NdFloat>(
    grad_y: &Array4<T>,
    w: &Array4<T>,
    input_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, out_c, oh, ow) = grad_y.dim();
    let (wo, in_c, kernel, _) = w.dim();
    assert_eq!(out_c, wo, "grad/weight channel mismatch");
    let (h, width) = input_hw;
    debug_assert_eq!(oh, conv_output_size(h, kernel, stride, pad));
    debug_assert_eq!(ow, conv_output_size(width, kernel, stride, pad));

    let gy_mat = grad_y_as_matrix(grad_y);
    let w_mat = w
        .view()
        .into_shape_with_order((out_c, in_c * kernel * kernel))
        .expect("weight reshapes");
    // (C·k·k, O) × (O, N·OH·OW)
    let cols = w_mat.t().dot(&gy_mat);
    col2im(&cols, n, in_c, h, width, kernel, stride, pad)
}

/// Gradient of a convolution with respect to its weights.
pub fn conv2d_backward_weight<T: NdFloat>(
    x: &Array4<T>,
    grad_y: &Array4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (_, c, _, _) = x.dim();
    let (_, out_c, _, _) = grad_y.dim();
    let cols = im2col(x, kernel, stride, pad);
    let gy_mat = grad_y_as_matrix(grad_y);
    // (O, N·OH·OW) × (N·OH·OW, C·k·k)
    let gw = gy_mat.dot(&cols.t());
    gw.into_shape_with_order((out_c, c, kernel, kernel))
        .expect("gradient reshapes")
}

/// Per-channel sum of an output gradient: the bias gradient.
pub fn bias_grad<T: NdFloat>(grad_y: &Array4<T>) -> Array1<T> {
    let (n, c, _, _) = grad_y.dim();
    let mut g = Array1::zeros(c);
    for ni in 0..n {
        let plane = grad_y.index_axis(Axis(0), ni);
        for ci in 0..c {
            let mut acc = T::zero();
            for &v in plane.index_axis(Axis(0), ci).iter() {
                acc += v;
            }
            g[ci] += acc;
        }
    }
    g
}

/// Rearrange (N,O,OH,OW) into (O, N·OH·OW) matching the im2col column order.
fn grad_y_as_matrix<T: NdFloat>(grad_y: &Array4<T>) -> Array2<T> {
    let (n, out_c, oh, ow) = grad_y.dim();
    let mut m = Array2::zeros((out_c, n * oh * ow));
    for ni in 0..n {
        let src = grad_y.index_axis(Axis(0), ni);
        for o in 0..out_c {
            let start = ni * oh * ow;
            let mut dst = m.index_axis_mut(Axis(0), o);
            let mut dst = dst.slice_mut(ndarray::s![start..start + oh * ow]);
            for (d, &s) in dst.iter_mut().zip(src.index_axis(Axis(0), o).iter()) {
                *d = s;
            }
        }
    }
    m
}

/// Transposed convolution forward: the adjoint of [`conv2d_forward`].
/// Weight layout `(in, out, k, k)`.
pub fn tconv2d_forward<T: NdFloat>(
    x: &Array4<T>,
    w: &Array4<T>,
    b: Option<&ArrayView1<T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (_, in_c, h, width) = x.dim();
    let (w_in, out_c, kernel, _) = w.dim();
    assert_eq!(in_c, w_in, "tconv input channels");
    let oh = tconv_output_size(h, kernel, stride, pad);
    let ow = tconv_output_size(width, kernel, stride, pad);
    let mut y = conv2d_backward_input(x, w, (oh, ow), stride, pad);
    if let Some(b) = b {
        for ni in 0..y.dim().0 {
            let mut sample = y.index_axis_mut(Axis(0), ni);
            for o in 0..out_c {
                sample.index_axis_mut(Axis(0), o).mapv_inplace(|v| v + b[o]);
            }
        }
    }
    y
}

/// Gradient of a transposed convolution with respect to its input.
pub fn tconv2d_backward_input<T: NdFloat>(
    grad_y: &Array4<T>,
    w: &Array4<T>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    conv2d_forward(grad_y, w, None, stride, pad)
}

/// Gradient of a transposed convolution with respect to its weights.
pub fn tconv2d_backward_weight<T: NdFloat>(
    x: &Array4<T>,
    grad_y: &Array4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    conv2d_backward_weight(grad_y, x, kernel, stride, pad)
}

/// 2×2 max pooling with stride 2. The cache stores, per output cell, which
/// corner of its window held the maximum (ties break to the first seen).
pub fn maxpool2_forward<T: NdFloat>(x: &Array4<T>) -> (Array4<T>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut arg = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = src[[2 * oy, 2 * ox]];
                    let mut best_at = 0u8;
                    for (pos, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = src[[2 * oy + dy, 2 * ox + dx]];
                        if v > best {
                            best = v;
                            best_at = pos as u8 + 1;
                        }
                    }
                    y[[ni, ci, oy, ox]] = best;
                    arg[[ni, ci, oy, ox]] = best_at;
                }
            }
        }
    }
    (y, arg)
}

/// Route pooled gradients back to the argmax positions.
pub fn maxpool2_backward<T: NdFloat>(
    grad_y: &Array4<T>,
    argmax: &Array4<u8>,
    input_hw: (usize, usize),
) -> Array4<T> {
    let (n, c, oh, ow) = grad_y.dim();
    let mut gx = Array4::zeros((n, c, input_hw.0, input_hw.1));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (dy, dx) = match argmax[[ni, ci, oy, ox]] {
                        0 => (0, 0),
                        1 => (0, 1),
                        2 => (1, 0),
                        _ => (1, 1),
                    };
                    gx[[ni, ci, 2 * oy + dy, 2 * ox + dx]] += grad_y[[ni, ci, oy, ox]];
                }
            }
        }
    }
    gx
}
