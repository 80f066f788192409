//! 2-D convolution (cross-correlation) with analytic backward.
//!
//! Activations are (batch, in_ch, h, w); weights are (out_ch, in_ch, kh, kw).
//! The `f32` path lowers each batch item to an im2col matrix and multiplies
//! with blocked GEMM; the `f64` path accumulates in the plain
//! channel-then-kernel loop order so extended-precision results are directly
//! comparable with a naive sliding-window reference.
//!
//! Batch items are processed independently on fixed-size chunks, so results
//! do not depend on the number of worker threads.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Output spatial extent: floor((extent + 2*padding - kernel) / stride) + 1.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

fn check_geometry<E: Scalar>(
    op: &'static str,
    input: &Tensor<E>,
    weights: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    if input.shape().len() != 4 || weights.shape().len() != 4 {
        return Err(Error::dimension(
            op,
            format!(
                "expected 4-d input and weights, got {:?} and {:?}",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    let (batch, in_ch, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (out_ch, w_in_ch, kh, kw) = (
        weights.dim(0),
        weights.dim(1),
        weights.dim(2),
        weights.dim(3),
    );
    if in_ch != w_in_ch {
        return Err(Error::dimension(
            op,
            format!("input has {in_ch} channels, weights expect {w_in_ch}"),
        ));
    }
    if stride == 0 {
        return Err(Error::geometry(op, "stride must be positive"));
    }
    let out_h = conv_out_extent(h, kh, stride, padding);
    let out_w = conv_out_extent(w, kw, stride, padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok(ConvGeom {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            padding,
        }),
        _ => Err(Error::geometry(
            op,
            format!("{h}x{w} input, {kh}x{kw} kernel, stride {stride}, padding {padding} gives empty output"),
        )),
    }
}

/// Copies one batch item into a (in_ch, h+2p, w+2p) buffer with constant fill.
fn pad_item<E: Scalar>(item: &[E], g: &ConvGeom, pad_value: E, out: &mut [E]) {
    let (ph, pw) = (g.h + 2 * g.padding, g.w + 2 * g.padding);
    debug_assert_eq!(out.len(), g.in_ch * ph * pw);
    if g.padding == 0 {
        out.copy_from_slice(item);
        return;
    }
    out.fill(pad_value);
    for c in 0..g.in_ch {
        for y in 0..g.h {
            let src = c * g.h * g.w + y * g.w;
            let dst = c * ph * pw + (y + g.padding) * pw + g.padding;
            out[dst..dst + g.w].copy_from_slice(&item[src..src + g.w]);
        }
    }
}

/// im2col: cols[(c*kh + dy)*kw + dx][i*out_w + j] = padded[c, i*s + dy, j*s + dx].
fn im2col<E: Scalar>(padded: &[E], g: &ConvGeom, cols: &mut [E]) {
    let pw = g.w + 2 * g.padding;
    let ph = g.h + 2 * g.padding;
    let spatial = g.out_h * g.out_w;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &padded[c * ph * pw..(c + 1) * ph * pw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for i in 0..g.out_h {
                    let src_row = i * g.stride + dy;
                    let src = &plane[src_row * pw + dx..];
                    let dst_row = &mut dst[i * g.out_w..(i + 1) * g.out_w];
                    if g.stride == 1 {
                        dst_row.copy_from_slice(&src[..g.out_w]);
                    } else {
                        for (j, d) in dst_row.iter_mut().enumerate() {
                            *d = src[j * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution forward with constant spatial padding of `pad_value`.
pub fn conv2d_forward_padded<E: Scalar>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    stride: usize,
    padding: usize,
    pad_value: E,
) -> Result<Tensor<E>> {
    let g = check_geometry("conv2d_forward", input, weights, stride, padding)?;
    let mut out = Tensor::zeros(&[g.batch, g.out_ch, g.out_h, g.out_w]);
    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.out_ch * g.out_h * g.out_w;
    let ckk = g.in_ch * g.kh * g.kw;
    let spatial = g.out_h * g.out_w;
    let padded_len = g.in_ch * (g.h + 2 * g.padding) * (g.w + 2 * g.padding);

    let w_data = weights.data();
    out.data_mut()
        .par_chunks_mut(out_stride)
        .zip(input.data().par_chunks(in_stride))
        .for_each_init(
            || (vec![E::ZERO; padded_len], vec![E::ZERO; ckk * spatial]),
            |(padded, cols), (out_item, in_item)| {
                pad_item(in_item, &g, pad_value, padded);
                if E::USE_GEMM {
                    im2col(padded, &g, cols);
                    unsafe {
                        E::gemm(
                            g.out_ch,
                            ckk,
                            spatial,
                            E::ONE,
                            w_data.as_ptr(),
                            ckk as isize,
                            1,
                            cols.as_ptr(),
                            spatial as isize,
                            1,
                            E::ZERO,
                            out_item.as_mut_ptr(),
                            spatial as isize,
                            1,
                        );
                    }
                } else {
                    forward_direct(padded, w_data, &g, out_item);
                }
            },
        );
    Ok(out)
}

/// Reference-order direct convolution on one padded item (extended precision).
fn forward_direct<E: Scalar>(padded: &[E], w: &[E], g: &ConvGeom, out_item: &mut [E]) {
    let pw = g.w + 2 * g.padding;
    let ph = g.h + 2 * g.padding;
    for k in 0..g.out_ch {
        let w_filter = &w[k * g.in_ch * g.kh * g.kw..(k + 1) * g.in_ch * g.kh * g.kw];
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let mut acc = E::ZERO;
                for c in 0..g.in_ch {
                    let plane = &padded[c * ph * pw..(c + 1) * ph * pw];
                    let wc = &w_filter[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                    for dy in 0..g.kh {
                        let row = &plane[(i * g.stride + dy) * pw + j * g.stride..];
                        let wr = &wc[dy * g.kw..(dy + 1) * g.kw];
                        for dx in 0..g.kw {
                            acc += wr[dx] * row[dx];
                        }
                    }
                }
                out_item[(k * g.out_h + i) * g.out_w + j] = acc;
            }
        }
    }
}

/// out[b,k,i,j] = sum over (c,dy,dx) of weights[k,c,dy,dx] * input window (zero padding).
pub fn conv2d_forward<E: Scalar>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    conv2d_forward_padded(input, weights, stride, padding, E::ZERO)
}

/// Gradients of a scalar loss w.r.t. convolution input and weights.
///
/// `pad_value` must match the forward call: padding cells are constants, so
/// they receive no input gradient, but they do contribute to the weight
/// gradient when nonzero.
pub fn conv2d_backward_padded<E: Scalar>(
    grad_out: &Tensor<E>,
    saved_input: &Tensor<E>,
    weights: &Tensor<E>,
    stride: usize,
    padding: usize,
    pad_value: E,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let g = check_geometry("conv2d_backward", saved_input, weights, stride, padding)?;
    if grad_out.shape() != [g.batch, g.out_ch, g.out_h, g.out_w] {
        return Err(Error::dimension(
            "conv2d_backward",
            format!(
                "grad_out shape {:?}, expected {:?}",
                grad_out.shape(),
                [g.batch, g.out_ch, g.out_h, g.out_w]
            ),
        ));
    }

    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.out_ch * g.out_h * g.out_w;
    let ckk = g.in_ch * g.kh * g.kw;
    let spatial = g.out_h * g.out_w;
    let ph = g.h + 2 * g.padding;
    let pw = g.w + 2 * g.padding;
    let padded_len = g.in_ch * ph * pw;
    let w_data = weights.data();

    // Fixed chunking keeps the cross-batch weight-gradient reduction order
    // independent of the thread count.
    const CHUNK: usize = 32;
    let n_chunks = g.batch.div_ceil(CHUNK);

    let mut grad_input = Tensor::zeros(saved_input.shape());

    let chunk_grads: Vec<Vec<E>> = grad_input
        .data_mut()
        .par_chunks_mut(in_stride * CHUNK)
        .zip(saved_input.data().par_chunks(in_stride * CHUNK))
        .zip(grad_out.data().par_chunks(out_stride * CHUNK))
        .map(|((gin_chunk, in_chunk), gout_chunk)| {
            let mut gw_local = vec![E::ZERO; g.out_ch * ckk];
            let mut padded = vec![E::ZERO; padded_len];
            let mut cols = vec![E::ZERO; ckk * spatial];
            let mut gpad = vec![E::ZERO; padded_len];
            let items = in_chunk.len() / in_stride;
            for it in 0..items {
                let in_item = &in_chunk[it * in_stride..(it + 1) * in_stride];
                let gout_item = &gout_chunk[it * out_stride..(it + 1) * out_stride];
                let gin_item = &mut gin_chunk[it * in_stride..(it + 1) * in_stride];
                pad_item(in_item, &g, pad_value, &mut padded);
                if E::USE_GEMM {
                    im2col(&padded, &g, &mut cols);
                    unsafe {
                        // gw_local += gout_item (K x S) * cols^T (S x CKK)
                        E::gemm(
                            g.out_ch,
                            spatial,
                            ckk,
                            E::ONE,
                            gout_item.as_ptr(),
                            spatial as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            spatial as isize,
                            E::ONE,
                            gw_local.as_mut_ptr(),
                            ckk as isize,
                            1,
                        );
                        // cols_grad (CKK x S) = W^T (CKK x K) * gout_item (K x S)
                        E::gemm(
                            ckk,
                            g.out_ch,
                            spatial,
                            E::ONE,
                            w_data.as_ptr(),
                            1,
                            ckk as isize,
                            gout_item.as_ptr(),
                            spatial as isize,
                            1,
                            E::ZERO,
                            cols.as_mut_ptr(),
                            spatial as isize,
                            1,
                        );
                    }
                    col2im(&cols, &g, &mut gpad);
                } else {
                    backward_direct(&padded, w_data, gout_item, &g, &mut gw_local, &mut gpad);
                }
                crop_padding(&gpad, &g, gin_item);
            }
            gw_local
        })
        .collect();

    let mut grad_weights = Tensor::zeros(weights.shape());
    debug_assert_eq!(chunk_grads.len(), n_chunks);
    for chunk in &chunk_grads {
        for (gw, c) in grad_weights.data_mut().iter_mut().zip(chunk.iter()) {
            *gw += *c;
        }
    }
    Ok((grad_input, grad_weights))
}

/// Gradients for a zero-padded convolution (the standard full-precision case).
pub fn conv2d_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    saved_input: &Tensor<E>,
    weights: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    conv2d_backward_padded(grad_out, saved_input, weights, stride, padding, E::ZERO)
}

/// Scatter-add of column gradients back onto the padded input grid.
fn col2im<E: Scalar>(cols: &[E], g: &ConvGeom, gpad: &mut [E]) {
    gpad.fill(E::ZERO);
    let pw = g.w + 2 * g.padding;
    let ph = g.h + 2 * g.padding;
    let spatial = g.out_h * g.out_w;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut gpad[c * ph * pw..(c + 1) * ph * pw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let src = &cols[row * spatial..(row + 1) * spatial];
                for i in 0..g.out_h {
                    let dst_row = (i * g.stride + dy) * pw + dx;
                    for j in 0..g.out_w {
                        plane[dst_row + j * g.stride] += src[i * g.out_w + j];
                    }
                }
                row += 1;
            }
        }
    }
}

fn backward_direct<E: Scalar>(
    padded: &[E],
    w: &[E],
    gout_item: &[E],
    g: &ConvGeom,
    gw: &mut [E],
    gpad: &mut [E],
) {
    gpad.fill(E::ZERO);
    let pw = g.w + 2 * g.padding;
    let ph = g.h + 2 * g.padding;
    let kk = g.kh * g.kw;
    for k in 0..g.out_ch {
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let go = gout_item[(k * g.out_h + i) * g.out_w + j];
                for c in 0..g.in_ch {
                    let plane_base = c * ph * pw;
                    for dy in 0..g.kh {
                        let row_base = plane_base + (i * g.stride + dy) * pw + j * g.stride;
                        for dx in 0..g.kw {
                            let widx = (k * g.in_ch + c) * kk + dy * g.kw + dx;
                            gw[widx] += go * padded[row_base + dx];
                            gpad[row_base + dx] += go * w[widx];
                        }
                    }
                }
            }
        }
    }
}

/// Drops padding cells: gradient w.r.t. constant padding is discarded.
fn crop_padding<E: Scalar>(gpad: &[E], g: &ConvGeom, gin_item: &mut [E]) {
    if g.padding == 0 {
        gin_item.copy_from_slice(gpad);
        return;
    }
    let pw = g.w + 2 * g.padding;
    let ph = g.h + 2 * g.padding;
    for c in 0..g.in_ch {
        for y in 0..g.h {
            let src = c * ph * pw + (y + g.padding) * pw + g.padding;
            let dst = c * g.h * g.w + y * g.w;
            gin_item[dst..dst + g.w].copy_from_slice(&gpad[src..src + g.w]);
        }
    }
}
