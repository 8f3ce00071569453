//! Raw tensor kernels shared by the tape ops: im2col-based convolution,
//! transposed convolution, 2x2 max pooling, and instance normalization.
//!
//! All kernels work on single images in channels-height-width layout. The
//! matrix products go through `ndarray::dot`, which dispatches to an
//! optimized GEMM.

use crate::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, ArrayView4, ArrayViewMut3};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution along one axis.
pub fn conv_t_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfold `x` into a (C*k*k, OH*OW) patch matrix. Out-of-bounds taps are zero.
pub fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let mut cols = Array2::<F>::zeros((c * kernel * kernel, oh * ow));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let row_base = row * oh * ow;
                for out_i in 0..oh {
                    let in_i = (out_i * stride + ki) as isize - pad as isize;
                    if in_i < 0 || in_i >= h as isize {
                        continue;
                    }
                    let x_base = (ci * h + in_i as usize) * w;
                    let o_base = row_base + out_i * ow;
                    for out_j in 0..ow {
                        let in_j = (out_j * stride + kj) as isize - pad as isize;
                        if in_j < 0 || in_j >= w as isize {
                            continue;
                        }
                        cs[o_base + out_j] = xs[x_base + in_j as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: fold a patch matrix back into an image, summing
/// overlapping contributions.
pub fn col2im_add<F: Scalar>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    debug_assert_eq!(cols.dim(), (c * kernel * kernel, oh * ow));
    let mut out = Array3::<F>::zeros((c, h, w));
    let os = out.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let row_base = row * oh * ow;
                for out_i in 0..oh {
                    let in_i = (out_i * stride + ki) as isize - pad as isize;
                    if in_i < 0 || in_i >= h as isize {
                        continue;
                    }
                    let x_base = (ci * h + in_i as usize) * w;
                    let o_base = row_base + out_i * ow;
                    for out_j in 0..ow {
                        let in_j = (out_j * stride + kj) as isize - pad as isize;
                        if in_j < 0 || in_j >= w as isize {
                            continue;
                        }
                        os[x_base + in_j as usize] += cs[o_base + out_j];
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward pass. `w` has shape (OC, IC, k, k), `b` shape (OC).
pub fn conv2d_forward<F: Scalar>(
    x: &ArrayView3<F>,
    w: &ArrayView4<F>,
    b: &ArrayView1<F>,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (oc, ic, k, _) = w.dim();
    let (c, h, width) = x.dim();
    assert_eq!(c, ic, "conv2d: input has {c} channels, weight expects {ic}");
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(width, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w_mat = w
        .to_shape((oc, ic * k * k))
        .expect("contiguous weight")
        .to_owned();
    let mut out_mat = w_mat.dot(&cols);
    for (mut row, bias) in out_mat.outer_iter_mut().zip(b.iter()) {
        row.mapv_inplace(|v| v + *bias);
    }
    out_mat
        .into_shape((oc, oh, ow))
        .expect("conv output reshape")
}

/// Convolution backward pass. Returns the requested gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    x: &ArrayView3<F>,
    w: &ArrayView4<F>,
    g_out: &ArrayView3<F>,
    stride: usize,
    pad: usize,
    want_gx: bool,
    want_gw: bool,
) -> (Option<Array3<F>>, Option<Array2<F>>, Array1<F>) {
    let (oc, ic, k, _) = w.dim();
    let (_, h, width) = x.dim();
    let (goc, oh, ow) = g_out.dim();
    assert_eq!(goc, oc);
    let g_mat = g_out
        .to_shape((oc, oh * ow))
        .expect("contiguous grad")
        .to_owned();
    let gb = g_mat.sum_axis(ndarray::Axis(1));
    let gw = if want_gw {
        let cols = im2col(x, k, stride, pad);
        Some(g_mat.dot(&cols.t()))
    } else {
        None
    };
    let gx = if want_gx {
        let w_mat = w
            .to_shape((oc, ic * k * k))
            .expect("contiguous weight")
            .to_owned();
        let d_cols = w_mat.t().dot(&g_mat);
        Some(col2im_add(&d_cols, ic, h, width, k, stride, pad))
    } else {
        None
    };
    (gx, gw, gb)
}

/// Transposed-convolution forward pass. `w` has shape (IC, OC, k, k).
pub fn conv_t2d_forward<F: Scalar>(
    x: &ArrayView3<F>,
    w: &ArrayView4<F>,
    b: &ArrayView1<F>,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (ic, oc, k, _) = w.dim();
    let (c, h, width) = x.dim();
    assert_eq!(c, ic, "conv_t2d: input has {c} channels, weight expects {ic}");
    let oh = conv_t_out_size(h, k, stride, pad);
    let ow = conv_t_out_size(width, k, stride, pad);
    let x_mat = x
        .to_shape((ic, h * width))
        .expect("contiguous input")
        .to_owned();
    let w_mat = w
        .to_shape((ic, oc * k * k))
        .expect("contiguous weight")
        .to_owned();
    let cols = w_mat.t().dot(&x_mat);
    let mut out = col2im_add(&cols, oc, oh, ow, k, stride, pad);
    for (mut plane, bias) in out.outer_iter_mut().zip(b.iter()) {
        plane.mapv_inplace(|v| v + *bias);
    }
    out
}

/// Transposed-convolution backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv_t2d_backward<F: Scalar>(
    x: &ArrayView3<F>,
    w: &ArrayView4<F>,
    g_out: &ArrayView3<F>,
    stride: usize,
    pad: usize,
    want_gx: bool,
    want_gw: bool,
) -> (Option<Array3<F>>, Option<Array2<F>>, Array1<F>) {
    let (ic, oc, k, _) = w.dim();
    let (_, h, width) = x.dim();
    let gb = g_out.sum_axis(ndarray::Axis(1)).sum_axis(ndarray::Axis(1));
    // The forward pass is out = col2im(W^T x), so the gradient folds back
    // through im2col of g_out.
    let g_cols = im2col(g_out, k, stride, pad);
    debug_assert_eq!(g_cols.dim().1, h * width);
    let gx = if want_gx {
        let w_mat = w
            .to_shape((ic, oc * k * k))
            .expect("contiguous weight")
            .to_owned();
        let gx_mat = w_mat.dot(&g_cols);
        Some(
            gx_mat
                .into_shape((ic, h, width))
                .expect("conv_t input grad reshape"),
        )
    } else {
        None
    };
    let gw = if want_gw {
        let x_mat = x
            .to_shape((ic, h * width))
            .expect("contiguous input")
            .to_owned();
        Some(x_mat.dot(&g_cols.t()))
    } else {
        None
    };
    (gx, gw, gb)
}

/// 2x2 stride-2 max pool. Returns the pooled map and the flat input index of
/// each selected element (needed to route gradients back).
pub fn max_pool2_forward<F: Scalar>(x: &ArrayView3<F>) -> (Array3<F>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Array3::<F>::zeros((c, oh, ow));
    let mut idx = vec![0u32; c * oh * ow];
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_at = 0usize;
                for di in 0..2 {
                    for dj in 0..2 {
                        let flat = (ci * h + oi * 2 + di) * w + oj * 2 + dj;
                        if xs[flat] > best {
                            best = xs[flat];
                            best_at = flat;
                        }
                    }
                }
                let o_flat = (ci * oh + oi) * ow + oj;
                os[o_flat] = best;
                idx[o_flat] = best_at as u32;
            }
        }
    }
    (out, idx)
}

/// Scatter pooled gradients back to the argmax positions.
pub fn max_pool2_backward<F: Scalar>(
    g_out: &ArrayView3<F>,
    idx: &[u32],
    gx: &mut ArrayViewMut3<F>,
) {
    let gs = g_out.as_slice().expect("standard layout");
    let xs = gx.as_slice_mut().expect("standard layout");
    for (g, &at) in gs.iter().zip(idx.iter()) {
        xs[at as usize] += *g;
    }
}

/// Per-channel instance normalization with affine parameters.
/// Returns the output plus the saved per-channel mean and 1/std.
pub fn instance_norm_forward<F: Scalar>(
    x: &ArrayView3<F>,
    gamma: &ArrayView1<F>,
    beta: &ArrayView1<F>,
    eps: F,
) -> (Array3<F>, Vec<F>, Vec<F>) {
    let (c, h, w) = x.dim();
    let n = F::from_usize(h * w).unwrap();
    let mut out = Array3::<F>::zeros((c, h, w));
    let mut means = Vec::with_capacity(c);
    let mut inv_stds = Vec::with_capacity(c);
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let mean = plane.sum() / n;
        let var = plane.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv_std = F::one() / (var + eps).sqrt();
        let g = gamma[ci];
        let b = beta[ci];
        let mut out_plane = out.index_axis_mut(ndarray::Axis(0), ci);
        out_plane.zip_mut_with(&plane, |o, &v| *o = (v - mean) * inv_std * g + b);
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

/// Instance-norm backward pass; returns (gx, g_gamma, g_beta).
pub fn instance_norm_backward<F: Scalar>(
    x: &ArrayView3<F>,
    gamma: &ArrayView1<F>,
    g_out: &ArrayView3<F>,
    means: &[F],
    inv_stds: &[F],
) -> (Array3<F>, Array1<F>, Array1<F>) {
    let (c, h, w) = x.dim();
    let n = F::from_usize(h * w).unwrap();
    let mut gx = Array3::<F>::zeros((c, h, w));
    let mut g_gamma = Array1::<F>::zeros(c);
    let mut g_beta = Array1::<F>::zeros(c);
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let g_plane = g_out.index_axis(ndarray::Axis(0), ci);
        let mean = means[ci];
        let inv_std = inv_stds[ci];
        let g = gamma[ci];
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        let mut sum_g = F::zero();
        let mut sum_g_xhat = F::zero();
        for (&v, &go) in plane.iter().zip(g_plane.iter()) {
            let xhat = (v - mean) * inv_std;
            let dxhat = go * g;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            sum_g += go;
            sum_g_xhat += go * xhat;
        }
        g_beta[ci] = sum_g;
        g_gamma[ci] = sum_g_xhat;
        let mut gx_plane = gx.index_axis_mut(ndarray::Axis(0), ci);
        for ((gx_v, &v), &go) in gx_plane.iter_mut().zip(plane.iter()).zip(g_plane.iter()) {
            let xhat = (v - mean) * inv_std;
            let dxhat = go * g;
            *gx_v = inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
    }
    (gx, g_gamma, g_beta)
}
