//! Convolution kernels (forward and gradient) on plain `ndarray` tensors.
//!
//! All variants lower to im2col plus a matrix product per sample. Batch
//! elements are independent, so they run through [`crate::parallel`]; the
//! cross-batch reductions for weight gradients are ordinary ordered sums over
//! the per-sample partials, keeping results bit-identical across thread
//! counts.
//!
//! Conventions (matching the usual deep-learning layout):
//! - 2D input `[B, C, H, W]`, kernel `[O, C, KH, KW]`
//! - transposed 2D kernel `[C, O, KH, KW]`, output size given explicitly
//! - 1D input `[B, C, T]`, kernel `[O, C, K]`, stride 1, "same" padding
//! - per-sample 1D kernel `[B, O, C, K]` (one kernel per batch element)

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::parallel::par_map_indexed;

/// Output length of a strided convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Left padding for a stride-1 "same" convolution.
pub fn same_pad(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Output positions `o` with `0 <= o*stride + offset - pad < limit`.
fn valid_out_range(
    limit: usize,
    offset: usize,
    stride: usize,
    pad: usize,
    out_count: usize,
) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    if limit + pad <= offset {
        return (0, 0);
    }
    let hi = ((limit - 1 + pad - offset) / stride + 1).min(out_count);
    (lo.min(hi), hi)
}

/// col[(c, ky, kx), (oy, ox)] = x[c, oy*sh + ky - ph, ox*sw + kx - pw] (0 outside).
fn im2col_2d(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let (oh, ow) = out_hw;
    let mut col = Array2::<f64>::zeros((c_in * kh * kw, oh * ow));
    for c in 0..c_in {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(h, ky, stride.0, pad.0, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_out_range(w, kx, stride.1, pad.1, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let n = ox_hi - ox_lo;
                let ix_lo = ox_lo * stride.1 + kx - pad.1;
                let ix_end = ix_lo + (n - 1) * stride.1 + 1;
                let row = (c * kh + ky) * kw + kx;
                let mut col_row = col.row_mut(row);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride.0 + ky - pad.0;
                    col_row
                        .slice_mut(s![oy * ow + ox_lo..oy * ow + ox_hi])
                        .assign(&x.slice(s![c, iy, ix_lo..ix_end;stride.1]));
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col_2d`]: scatter-add columns back onto a `[C, H, W]` grid.
fn col2im_2d(
    col: &ArrayView2<f64>,
    c_in: usize,
    hw: (usize, usize),
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> Array3<f64> {
    let (h, w) = hw;
    let (oh, ow) = out_hw;
    let mut x = Array3::<f64>::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(h, ky, stride.0, pad.0, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_out_range(w, kx, stride.1, pad.1, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let n = ox_hi - ox_lo;
                let ix_lo = ox_lo * stride.1 + kx - pad.1;
                let ix_end = ix_lo + (n - 1) * stride.1 + 1;
                let row = (c * kh + ky) * kw + kx;
                let col_row = col.row(row);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride.0 + ky - pad.0;
                    let mut dst = x.slice_mut(s![c, iy, ix_lo..ix_end;stride.1]);
                    dst += &col_row.slice(s![oy * ow + ox_lo..oy * ow + ox_hi]);
                }
            }
        }
    }
    x
}

/// Strided 2D convolution (cross-correlation) with zero padding.
pub fn conv2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Array4<f64> {
    let (batch, c_in, h, wid) = x.dim();
    let (c_out, cw, kh, kw) = w.dim();
    assert_eq!(c_in, cw, "conv2d channel mismatch");
    let oh = conv_out_len(h, kh, stride.0, pad.0);
    let ow = conv_out_len(wid, kw, stride.1, pad.1);
    let w_mat = w.view().into_shape_with_order((c_out, cw * kh * kw)).unwrap();

    let samples = par_map_indexed(batch, |i| {
        let col = im2col_2d(&x.index_axis(Axis(0), i), kh, kw, stride, pad, (oh, ow));
        let mut out = w_mat.dot(&col); // [O, OH*OW]
        if let Some(bias) = b {
            for (mut row, &bv) in out.rows_mut().into_iter().zip(bias.iter()) {
                row += bv;
            }
        }
        out.into_shape_with_order((c_out, oh, ow)).unwrap()
    });

    let mut out = Array4::<f64>::zeros((batch, c_out, oh, ow));
    for (i, sample) in samples.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&sample);
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_grads(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    g: &ArrayView4<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (batch, c_in, h, wid) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = g.dim();
    let w_mat = w.view().into_shape_with_order((c_out, c_in * kh * kw)).unwrap();

    let per_sample = par_map_indexed(batch, |i| {
        let g_mat = g
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_out, oh * ow))
            .unwrap()
            .into_owned();
        let col = im2col_2d(&x.index_axis(Axis(0), i), kh, kw, stride, pad, (oh, ow));
        let dw_i = g_mat.dot(&col.t()); // [O, C*KH*KW]
        let dcol = w_mat.t().dot(&g_mat); // [C*KH*KW, OH*OW]
        let dx_i = col2im_2d(&dcol.view(), c_in, (h, wid), kh, kw, stride, pad, (oh, ow));
        (dx_i, dw_i)
    });

    let mut dx = Array4::<f64>::zeros((batch, c_in, h, wid));
    let mut dw_mat = Array2::<f64>::zeros((c_out, c_in * kh * kw));
    for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), i).assign(&dx_i);
        dw_mat += &dw_i;
    }
    let dw = dw_mat
        .into_shape_with_order((c_out, c_in, kh, kw))
        .unwrap();
    let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    (dx, dw, db)
}

/// Transposed 2D convolution. `out_hw` picks the exact output size among the
/// `stride` possibilities (the implicit output padding must be `< stride`).
pub fn conv_t2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>, // [C_in, C_out, KH, KW]
    b: Option<&Array1<f64>>,
    stride: (usize, usize),
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> Array4<f64> {
    let (batch, c_in, h, wid) = x.dim();
    let (cw, c_out, kh, kw) = w.dim();
    assert_eq!(c_in, cw, "conv_t2d channel mismatch");
    let (oh, ow) = out_hw;
    let base_h = (h - 1) * stride.0 + kh - 2 * pad.0;
    let base_w = (wid - 1) * stride.1 + kw - 2 * pad.1;
    assert!(
        oh >= base_h && oh - base_h < stride.0 && ow >= base_w && ow - base_w < stride.1,
        "conv_t2d output size {:?} unreachable from input {:?}",
        out_hw,
        (h, wid)
    );
    let w_mat = w.view().into_shape_with_order((c_in, c_out * kh * kw)).unwrap();

    let samples = par_map_indexed(batch, |i| {
        let x_mat = x
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_in, h * wid))
            .unwrap()
            .into_owned();
        let tmp = w_mat.t().dot(&x_mat); // [O*KH*KW, H*W]
        let mut out = col2im_2d(&tmp.view(), c_out, (oh, ow), kh, kw, stride, pad, (h, wid));
        if let Some(bias) = b {
            for (mut ch, &bv) in out.outer_iter_mut().zip(bias.iter()) {
                ch += bv;
            }
        }
        out
    });

    let mut out = Array4::<f64>::zeros((batch, c_out, oh, ow));
    for (i, sample) in samples.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&sample);
    }
    out
}

/// Gradients of [`conv_t2d`].
pub fn conv_t2d_grads(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    g: &ArrayView4<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (batch, c_in, h, wid) = x.dim();
    let (_, c_out, kh, kw) = w.dim();
    let (_, _, _oh, _ow) = g.dim();
    let w_mat = w.view().into_shape_with_order((c_in, c_out * kh * kw)).unwrap();

    let per_sample = par_map_indexed(batch, |i| {
        // dtmp[(o,ky,kx),(h,w)] = g[o, h*s+ky-p, w*s+kx-p]
        let dtmp = im2col_2d(&g.index_axis(Axis(0), i), kh, kw, stride, pad, (h, wid));
        let x_mat = x
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_in, h * wid))
            .unwrap()
            .into_owned();
        let dw_i = x_mat.dot(&dtmp.t()); // [C_in, O*KH*KW]
        let dx_i = w_mat.dot(&dtmp); // [C_in, H*W]
        (dx_i, dw_i)
    });

    let mut dx = Array4::<f64>::zeros((batch, c_in, h, wid));
    let mut dw_mat = Array2::<f64>::zeros((c_in, c_out * kh * kw));
    for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), i)
            .assign(&dx_i.into_shape_with_order((c_in, h, wid)).unwrap());
        dw_mat += &dw_i;
    }
    let dw = dw_mat
        .into_shape_with_order((c_in, c_out, kh, kw))
        .unwrap();
    let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    (dx, dw, db)
}

/// col[(c, k), t] = x[c, t + k - pad] (0 outside), stride 1.
fn im2col_1d(x: &ArrayView2<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c_in, t_len) = x.dim();
    let mut col = Array2::<f64>::zeros((c_in * k, t_len));
    for c in 0..c_in {
        for kk in 0..k {
            let row = c * k + kk;
            let shift = kk as isize - pad as isize;
            let (src_lo, src_hi) = (0.max(shift), (t_len as isize).min(t_len as isize + shift));
            if src_lo >= src_hi {
                continue;
            }
            let dst_lo = (src_lo - shift) as usize;
            let n = (src_hi - src_lo) as usize;
            col.slice_mut(s![row, dst_lo..dst_lo + n])
                .assign(&x.slice(s![c, src_lo as usize..src_lo as usize + n]));
        }
    }
    col
}

fn col2im_1d(col: &ArrayView2<f64>, c_in: usize, t_len: usize, k: usize, pad: usize) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((c_in, t_len));
    for c in 0..c_in {
        for kk in 0..k {
            let row = c * k + kk;
            let shift = kk as isize - pad as isize;
            let (src_lo, src_hi) = (0.max(shift), (t_len as isize).min(t_len as isize + shift));
            if src_lo >= src_hi {
                continue;
            }
            let dst_lo = (src_lo - shift) as usize;
            let n = (src_hi - src_lo) as usize;
            let mut dst = x.slice_mut(s![c, src_lo as usize..src_lo as usize + n]);
            dst += &col.slice(s![row, dst_lo..dst_lo + n]);
        }
    }
    x
}

/// Stride-1 "same" 1D convolution, shared kernel across the batch.
pub fn conv1d(x: &ArrayView3<f64>, w: &ArrayView3<f64>, b: Option<&Array1<f64>>) -> Array3<f64> {
    let (batch, c_in, t_len) = x.dim();
    let (c_out, cw, k) = w.dim();
    assert_eq!(c_in, cw, "conv1d channel mismatch");
    let pad = same_pad(k);
    let w_mat = w.view().into_shape_with_order((c_out, cw * k)).unwrap();

    let samples = par_map_indexed(batch, |i| {
        let col = im2col_1d(&x.index_axis(Axis(0), i), k, pad);
        let mut out = w_mat.dot(&col);
        if let Some(bias) = b {
            for (mut row, &bv) in out.rows_mut().into_iter().zip(bias.iter()) {
                row += bv;
            }
        }
        out
    });

    let mut out = Array3::<f64>::zeros((batch, c_out, t_len));
    for (i, sample) in samples.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&sample);
    }
    out
}

/// Gradients of [`conv1d`].
pub fn conv1d_grads(
    x: &ArrayView3<f64>,
    w: &ArrayView3<f64>,
    g: &ArrayView3<f64>,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (batch, c_in, t_len) = x.dim();
    let (c_out, _, k) = w.dim();
    let pad = same_pad(k);
    let w_mat = w.view().into_shape_with_order((c_out, c_in * k)).unwrap();

    let per_sample = par_map_indexed(batch, |i| {
        let g_mat = g.index_axis(Axis(0), i).into_owned();
        let col = im2col_1d(&x.index_axis(Axis(0), i), k, pad);
        let dw_i = g_mat.dot(&col.t());
        let dcol = w_mat.t().dot(&g_mat);
        let dx_i = col2im_1d(&dcol.view(), c_in, t_len, k, pad);
        (dx_i, dw_i)
    });

    let mut dx = Array3::<f64>::zeros((batch, c_in, t_len));
    let mut dw_mat = Array2::<f64>::zeros((c_out, c_in * k));
    for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), i).assign(&dx_i);
        dw_mat += &dw_i;
    }
    let dw = dw_mat.into_shape_with_order((c_out, c_in, k)).unwrap();
    let db = g.sum_axis(Axis(2)).sum_axis(Axis(0));
    (dx, dw, db)
}

/// Stride-1 "same" 1D convolution with a separate kernel per batch element.
pub fn conv1d_per_sample(x: &ArrayView3<f64>, w: &ArrayView4<f64>) -> Array3<f64> {
    let (batch, c_in, t_len) = x.dim();
    let (bw, c_out, cw, k) = w.dim();
    assert_eq!(batch, bw, "conv1d_per_sample batch mismatch");
    assert_eq!(c_in, cw, "conv1d_per_sample channel mismatch");
    let pad = same_pad(k);

    let samples = par_map_indexed(batch, |i| {
        let col = im2col_1d(&x.index_axis(Axis(0), i), k, pad);
        let w_mat = w
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_out, cw * k))
            .unwrap()
            .into_owned();
        w_mat.dot(&col)
    });

    let mut out = Array3::<f64>::zeros((batch, c_out, t_len));
    for (i, sample) in samples.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&sample);
    }
    out
}

/// Gradients of [`conv1d_per_sample`]; the kernel gradient stays per-sample.
pub fn conv1d_per_sample_grads(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    g: &ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>) {
    let (batch, c_in, t_len) = x.dim();
    let (_, c_out, _, k) = w.dim();
    let pad = same_pad(k);

    let per_sample = par_map_indexed(batch, |i| {
        let g_mat = g.index_axis(Axis(0), i).into_owned();
        let col = im2col_1d(&x.index_axis(Axis(0), i), k, pad);
        let dw_i = g_mat.dot(&col.t()); // [O, C*K]
        let w_mat = w
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_out, c_in * k))
            .unwrap()
            .into_owned();
        let dcol = w_mat.t().dot(&g_mat);
        let dx_i = col2im_1d(&dcol.view(), c_in, t_len, k, pad);
        (dx_i, dw_i)
    });

    let mut dx = Array3::<f64>::zeros((batch, c_in, t_len));
    let mut dw = Array4::<f64>::zeros((batch, c_out, c_in, k));
    for (i, (dx_i, dw_i)) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), i).assign(&dx_i);
        dw.index_axis_mut(Axis(0), i)
            .assign(&dw_i.into_shape_with_order((c_out, c_in, k)).unwrap());
    }
    (dx, dw)
}
