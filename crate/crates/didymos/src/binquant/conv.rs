//! Bit-packed binary convolution.
//!
//! Both operands are sign tensors packed with channels innermost
//! ([`BitLayout::ChannelRows`]); each output element is a sum of XNOR/popcount
//! row products. Spatial padding inserts logical +1 pixels, consistent with
//! sign(0) = +1 under quantize-then-pad.

use rayon::prelude::*;

use super::bits::{BitLayout, BitTensor, WORD_BITS};
use crate::tensor::{conv_out_extent, Tensor};
use crate::{Error, Result};

/// A padding pixel: all valid channel bits +1, pad bits 0.
fn plus_one_row(c: usize) -> Vec<u64> {
    let wpr = c.div_ceil(WORD_BITS).max(1);
    let mut row = vec![u64::MAX; wpr];
    let tail = c % WORD_BITS;
    if c == 0 {
        row[0] = 0;
    } else if tail != 0 {
        row[wpr - 1] = (1u64 << tail) - 1;
    }
    row
}

#[inline(always)]
fn conv_item(
    padded: &[u64],
    weights: &[u64],
    out_item: &mut [f32],
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    pw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    wpr: usize,
    bias: i64,
) {
    for k in 0..out_ch {
        let w_filter = &weights[k * kh * kw * wpr..(k + 1) * kh * kw * wpr];
        for i in 0..out_h {
            for j in 0..out_w {
                let mut popsum = 0u32;
                for dy in 0..kh {
                    let row_base = ((i * stride + dy) * pw + j * stride) * wpr;
                    let act = &padded[row_base..row_base + kw * wpr];
                    let wrow = &w_filter[dy * kw * wpr..(dy + 1) * kw * wpr];
                    for (a, w) in act.iter().zip(wrow.iter()) {
                        popsum += (!(a ^ w)).count_ones();
                    }
                }
                out_item[(k * out_h + i) * out_w + j] = (2 * popsum as i64 + bias) as f32;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
#[allow(clippy::too_many_arguments)]
unsafe fn conv_item_popcnt(
    padded: &[u64],
    weights: &[u64],
    out_item: &mut [f32],
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    pw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    wpr: usize,
    bias: i64,
) {
    conv_item(
        padded, weights, out_item, out_ch, out_h, out_w, pw, kh, kw, stride, wpr, bias,
    );
}

fn have_popcnt() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("popcnt")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Binary convolution of packed sign tensors. The integer-valued output is
/// exactly `conv2d_forward` applied to the unpacked {-1,+1} tensors with the
/// spatial border treated as +1.
pub fn binary_conv2d(
    act_bits: &BitTensor,
    weight_bits: &BitTensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor<f32>> {
    if act_bits.layout() != BitLayout::ChannelRows || weight_bits.layout() != BitLayout::ChannelRows
    {
        return Err(Error::invalid_input(
            "binary_conv2d",
            "operands must be packed with channel rows",
        ));
    }
    let (batch, c, h, w) = (
        act_bits.shape()[0],
        act_bits.shape()[1],
        act_bits.shape()[2],
        act_bits.shape()[3],
    );
    let (out_ch, wc, kh, kw) = (
        weight_bits.shape()[0],
        weight_bits.shape()[1],
        weight_bits.shape()[2],
        weight_bits.shape()[3],
    );
    if c != wc {
        return Err(Error::dimension(
            "binary_conv2d",
            format!("activation channels {c} vs weight channels {wc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::geometry("binary_conv2d", "stride must be positive"));
    }
    let (out_h, out_w) = match (
        conv_out_extent(h, kh, stride, padding),
        conv_out_extent(w, kw, stride, padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::geometry(
                "binary_conv2d",
                format!("{h}x{w} input, {kh}x{kw} kernel, stride {stride}, padding {padding}"),
            ))
        }
    };

    let wpr = act_bits.words_per_row();
    debug_assert_eq!(wpr, weight_bits.words_per_row());
    let pad_bits = act_bits.pad_bits() as i64;
    // Per packed row the dot is 2*(pop - pad) - c; over kh*kw rows the
    // popcounts sum and the constant folds into one bias term.
    let rows = (kh * kw) as i64;
    let bias = -rows * (2 * pad_bits + c as i64);

    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    let act_row_stride = wpr;
    let act_item_words = h * w * wpr;
    let out_stride = out_ch * out_h * out_w;
    let ones = plus_one_row(c);
    let use_popcnt = have_popcnt();

    let mut out = Tensor::zeros(&[batch, out_ch, out_h, out_w]);
    out.data_mut()
        .par_chunks_mut(out_stride)
        .zip(act_bits.words().par_chunks(act_item_words))
        .for_each_init(
            || vec![0u64; ph * pw * wpr],
            |padded, (out_item, act_item)| {
                // Assemble the padded pixel grid for this batch item.
                if padding == 0 {
                    padded.copy_from_slice(act_item);
                } else {
                    for y in 0..ph {
                        for x in 0..pw {
                            let dst = (y * pw + x) * act_row_stride;
                            let inside = y >= padding && y < padding + h && x >= padding && x < padding + w;
                            if inside {
                                let src = ((y - padding) * w + (x - padding)) * act_row_stride;
                                padded[dst..dst + wpr].copy_from_slice(&act_item[src..src + wpr]);
                            } else {
                                padded[dst..dst + wpr].copy_from_slice(&ones);
                            }
                        }
                    }
                }
                #[cfg(target_arch = "x86_64")]
                if use_popcnt {
                    unsafe {
                        conv_item_popcnt(
                            padded,
                            weight_bits.words(),
                            out_item,
                            out_ch,
                            out_h,
                            out_w,
                            pw,
                            kh,
                            kw,
                            stride,
                            wpr,
                            bias,
                        );
                    }
                    return;
                }
                let _ = use_popcnt;
                conv_item(
                    padded,
                    weight_bits.words(),
                    out_item,
                    out_ch,
                    out_h,
                    out_w,
                    pw,
                    kh,
                    kw,
                    stride,
                    wpr,
                    bias,
                );
            },
        );
    Ok(out)
}
