//! Convolution kernels shared by the graph operations: "same" zero-padded
//! stride-1 convolution via banded im2col + GEMM, and the stride-2 2x2
//! transposed convolution.
//!
//! Work is split per batch item. Reductions over the batch (weight and bias
//! gradients) are summed in batch order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use super::element::{gemm, MatMut, MatRef};
use super::{Element, Shape, Tensor};
use crate::error::{shape_err, Result};

/// Target number of output columns per im2col band.
const BAND_COLS: usize = 4096;

fn band_rows(width: usize) -> usize {
    (BAND_COLS / width).max(1)
}

/// Rebuild `cols` as the row-major `cin*k*k` x `(r1-r0)*w` matrix of receptive
/// fields of output rows `r0..r1`. The buffer is reused, never pre-zeroed.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(x_item: &[T], cin: usize, h: usize, w: usize, k: usize, r0: usize, r1: usize, cols: &mut Vec<T>) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let zeros = |cols: &mut Vec<T>, n: usize| cols.extend(std::iter::repeat_n(T::zero(), n));
    cols.clear();
    for ci in 0..cin {
        let src_plane = &x_item[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let shift = kx as isize - pad;
                for yy in r0..r1 {
                    let sy = yy as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        zeros(cols, w);
                        continue;
                    }
                    let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                    let s = (shift.unsigned_abs()).min(w);
                    if shift >= 0 {
                        cols.extend_from_slice(&src[s..]);
                        zeros(cols, s);
                    } else {
                        zeros(cols, s);
                        cols.extend_from_slice(&src[..w - s]);
                    }
                }
            }
        }
    }
}

pub(crate) fn check_conv_weights(x: Shape, w: Shape) -> Result<usize> {
    let k = w.height;
    if w.width != k || !(k == 1 || k == 3) {
        return Err(shape_err!("convolution kernel must be 1x1 or 3x3, weights have shape {w}"));
    }
    if w.channels != x.channels {
        return Err(shape_err!(
            "convolution expects {} input channels, input {x} has {}",
            w.channels,
            x.channels
        ));
    }
    Ok(k)
}

/// `y[b, co] = bias[co] + sum_ci w[co, ci] * x[b, ci]` with zero "same" padding.
pub(crate) fn conv2d_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let k = check_conv_weights(xs, ws)?;
    let (cin, cout) = (ws.channels, ws.batch);
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(shape_err!("bias has {} entries for {cout} output channels", b.len()));
        }
    }
    let (h, wd) = (xs.height, xs.width);
    let plane = h * wd;
    let kk = cin * k * k;
    let mut out = Tensor::zeros(Shape::new(xs.batch, cout, h, wd));
    let weights = MatRef::row_major(w.data(), cout, kk);
    out.data_mut()
        .par_chunks_mut(cout * plane)
        .enumerate()
        .for_each(|(b, out_item)| {
            let x_item = x.item(b);
            if k == 1 {
                gemm(
                    T::one(),
                    weights,
                    MatRef::row_major(x_item, cin, plane),
                    T::zero(),
                    MatMut::row_major(out_item, cout, plane),
                );
            } else if !(k == 3 && T::conv3x3_direct(x_item, cin, h, wd, w.data(), cout, out_item)) {
                let rows = band_rows(wd);
                let mut cols = Vec::with_capacity(kk * rows * wd);
                for r0 in (0..h).step_by(rows) {
                    let r1 = (r0 + rows).min(h);
                    let len = (r1 - r0) * wd;
                    im2col(x_item, cin, h, wd, k, r0, r1, &mut cols);
                    gemm(
                        T::one(),
                        weights,
                        MatRef::row_major(&cols[..kk * len], kk, len),
                        T::zero(),
                        MatMut {
                            data: &mut out_item[r0 * wd..],
                            rows: cout,
                            cols: len,
                            rs: plane,
                            cs: 1,
                        },
                    );
                }
            }
            if let Some(bias) = bias {
                for (co, &bv) in bias.iter().enumerate() {
                    out_item[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    Ok(out)
}

/// Gradient with respect to the input: a "same" convolution of the upstream
/// gradient with the spatially flipped, channel-transposed kernel.
pub(crate) fn conv2d_input_grad<T: Element>(dy: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let ws = w.shape();
    let k = ws.height;
    let flipped = Tensor::from_fn(Shape::new(ws.channels, ws.batch, k, k), |[ci, co, ky, kx]| {
        w.at(co, ci, k - 1 - ky, k - 1 - kx)
    });
    conv2d_forward(dy, &flipped, None)
}

/// Gradients with respect to the weights and the bias.
pub(crate) fn conv2d_param_grads<T: Element>(x: &Tensor<T>, dy: &Tensor<T>, w_shape: Shape) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let (cin, cout, k) = (w_shape.channels, w_shape.batch, w_shape.height);
    let (h, wd) = (xs.height, xs.width);
    let plane = h * wd;
    let kk = cin * k * k;
    let partials: Vec<(Vec<T>, Vec<f64>)> = (0..xs.batch)
        .into_par_iter()
        .map(|b| {
            let x_item = x.item(b);
            let dy_item = dy.item(b);
            let mut dw = vec![T::zero(); cout * kk];
            if k == 1 {
                gemm(
                    T::one(),
                    MatRef::row_major(dy_item, cout, plane),
                    MatRef::row_major(x_item, cin, plane).t(),
                    T::zero(),
                    MatMut::row_major(&mut dw, cout, kk),
                );
            } else {
                let rows = band_rows(wd);
                let mut cols = Vec::with_capacity(kk * rows * wd);
                for r0 in (0..h).step_by(rows) {
                    let r1 = (r0 + rows).min(h);
                    let len = (r1 - r0) * wd;
                    im2col(x_item, cin, h, wd, k, r0, r1, &mut cols);
                    gemm(
                        T::one(),
                        MatRef {
                            data: &dy_item[r0 * wd..],
                            rows: cout,
                            cols: len,
                            rs: plane,
                            cs: 1,
                        },
                        MatRef::row_major(&cols[..kk * len], kk, len).t(),
                        T::one(),
                        MatMut::row_major(&mut dw, cout, kk),
                    );
                }
            }
            let db = (0..cout)
                .map(|co| dy_item[co * plane..(co + 1) * plane].iter().map(|v| v.f64()).sum())
                .collect();
            (dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); cout * kk];
    let mut db = vec![0.0f64; cout];
    for (pw, pb) in partials {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a = *a + b);
        db.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    (
        Tensor::new(w_shape, dw).unwrap(),
        Tensor::new(Shape::new(1, cout, 1, 1), db.into_iter().map(T::of).collect()).unwrap(),
    )
}

pub(crate) fn check_upconv_weights(x: Shape, w: Shape) -> Result<()> {
    if w.height != 2 || w.width != 2 {
        return Err(shape_err!("up-convolution weights must be (in, out, 2, 2), got {w}"));
    }
    if w.batch != x.channels {
        return Err(shape_err!(
            "up-convolution expects {} input channels, input {x} has {}",
            w.batch,
            x.channels
        ));
    }
    Ok(())
}

/// Stride-2 transposed convolution with a 2x2 kernel:
/// `y[b, co, 2i+dy, 2j+dx] = sum_ci x[b, ci, i, j] w[ci, co, dy, dx]`.
pub(crate) fn upconv2_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_upconv_weights(xs, ws)?;
    let (cin, cout) = (ws.batch, ws.channels);
    let (h, wd) = (xs.height, xs.width);
    let plane = h * wd;
    let out_w = 2 * wd;
    let mut out = Tensor::zeros(Shape::new(xs.batch, cout, 2 * h, out_w));
    let taps = MatRef::row_major(w.data(), cin, cout * 4).t();
    out.data_mut()
        .par_chunks_mut(cout * 4 * plane)
        .enumerate()
        .for_each(|(b, out_item)| {
            let mut tmp = vec![T::zero(); cout * 4 * plane];
            gemm(
                T::one(),
                taps,
                MatRef::row_major(x.item(b), cin, plane),
                T::zero(),
                MatMut::row_major(&mut tmp, cout * 4, plane),
            );
            for co in 0..cout {
                let dst = &mut out_item[co * 4 * plane..(co + 1) * 4 * plane];
                for tap in 0..4 {
                    let (dy, dx) = (tap / 2, tap % 2);
                    let src = &tmp[(co * 4 + tap) * plane..(co * 4 + tap + 1) * plane];
                    for i in 0..h {
                        let row = &mut dst[(2 * i + dy) * out_w..(2 * i + dy + 1) * out_w];
                        for j in 0..wd {
                            row[2 * j + dx] = src[i * wd + j];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Input and weight gradients of [`upconv2_forward`].
pub(crate) fn upconv2_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, cout) = (ws.batch, ws.channels);
    let (h, wd) = (xs.height, xs.width);
    let plane = h * wd;
    let out_w = 2 * wd;
    let taps = MatRef::row_major(w.data(), cin, cout * 4);
    let partials: Vec<(Option<Vec<T>>, Vec<T>)> = (0..xs.batch)
        .into_par_iter()
        .map(|b| {
            let dy_item = dy.item(b);
            let mut gathered = vec![T::zero(); cout * 4 * plane];
            for co in 0..cout {
                let src = &dy_item[co * 4 * plane..(co + 1) * 4 * plane];
                for tap in 0..4 {
                    let (ty, tx) = (tap / 2, tap % 2);
                    let dst = &mut gathered[(co * 4 + tap) * plane..(co * 4 + tap + 1) * plane];
                    for i in 0..h {
                        let row = &src[(2 * i + ty) * out_w..(2 * i + ty + 1) * out_w];
                        for j in 0..wd {
                            dst[i * wd + j] = row[2 * j + tx];
                        }
                    }
                }
            }
            let gathered_mat = MatRef::row_major(&gathered, cout * 4, plane);
            let dx = need_input.then(|| {
                let mut dx = vec![T::zero(); cin * plane];
                gemm(T::one(), taps, gathered_mat, T::zero(), MatMut::row_major(&mut dx, cin, plane));
                dx
            });
            let mut dw = vec![T::zero(); cin * cout * 4];
            gemm(
                T::one(),
                MatRef::row_major(x.item(b), cin, plane),
                gathered_mat.t(),
                T::zero(),
                MatMut::row_major(&mut dw, cin, cout * 4),
            );
            (dx, dw)
        })
        .collect();
    let mut dw = vec![T::zero(); ws.numel()];
    let mut dx = need_input.then(|| Vec::with_capacity(xs.numel()));
    for (px, pw) in partials {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a = *a + b);
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.extend(px);
        }
    }
    (
        dx.map(|d| Tensor::new(xs, d).unwrap()),
        Tensor::new(ws, dw).unwrap(),
    )
}
