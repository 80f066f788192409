//! Bilinear resampling of 2-D rasters.

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Bilinear resize of a (h, w) tensor onto a corner-aligned sampling grid:
/// output sample j maps to source coordinate `j * (w_in - 1) / (w_out - 1)`,
/// so equal extents reproduce the input exactly.
pub fn bilinear_resize<E: Scalar>(
    input: &Tensor<E>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    if input.shape().len() != 2 {
        return Err(Error::dimension(
            "bilinear_resize",
            format!("expected 2-d raster, got {:?}", input.shape()),
        ));
    }
    let (h, w) = (input.dim(0), input.dim(1));
    if h < 2 || w < 2 || out_h < 1 || out_w < 1 {
        return Err(Error::geometry(
            "bilinear_resize",
            format!("degenerate extents {h}x{w} -> {out_h}x{out_w}"),
        ));
    }
    let src = input.data();
    let mut out = Tensor::zeros(&[out_h, out_w]);

    let map = |j: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };

    // Exact at integer grid coordinates, so equal extents reproduce the
    // input bit for bit.
    let lerp = |a: f64, b: f64, f: f64| {
        if f == 0.0 {
            a
        } else if f == 1.0 {
            b
        } else {
            a + (b - a) * f
        }
    };

    for i in 0..out_h {
        let sy = map(i, out_h, h);
        let y0 = (sy.floor() as usize).min(h - 2);
        let fy = sy - y0 as f64;
        for j in 0..out_w {
            let sx = map(j, out_w, w);
            let x0 = (sx.floor() as usize).min(w - 2);
            let fx = sx - x0 as f64;
            let p00 = src[y0 * w + x0].to_f64();
            let p01 = src[y0 * w + x0 + 1].to_f64();
            let p10 = src[(y0 + 1) * w + x0].to_f64();
            let p11 = src[(y0 + 1) * w + x0 + 1].to_f64();
            let top = lerp(p00, p01, fx);
            let bot = lerp(p10, p11, fx);
            out.data_mut()[i * out_w + j] = E::from_f64(lerp(top, bot, fy));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let data: Vec<f64> = (0..32 * 32).map(|i| (i % 7) as f64 * 0.1).collect();
        let t = Tensor::from_vec(&[32, 32], data.clone()).unwrap();
        let out = bilinear_resize(&t, 32, 32).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::<f64>::filled(&[17, 23], 0.42);
        let out = bilinear_resize(&t, 32, 32).unwrap();
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn downsampled_ramp_keeps_endpoints_and_slope() {
        // 64x64 linear ramp along x resized to 32x32 stays a linear ramp with
        // the same endpoints (corner-aligned grid).
        let data: Vec<f64> = (0..64 * 64).map(|i| (i % 64) as f64).collect();
        let t = Tensor::from_vec(&[64, 64], data).unwrap();
        let out = bilinear_resize(&t, 32, 32).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let expect = j as f64 * 63.0 / 31.0;
                let got = out.data()[i * 32 + j];
                assert!((got - expect).abs() < 1e-9, "({i},{j}): {got} vs {expect}");
            }
        }
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[31] - 63.0).abs() < 1e-9);
    }

    #[test]
    fn output_stays_within_input_range() {
        let data: Vec<f64> = (0..8 * 8).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let t = Tensor::from_vec(&[8, 8], data.clone()).unwrap();
        let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = bilinear_resize(&t, 32, 32).unwrap();
        for &v in out.data() {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        let t = Tensor::<f64>::zeros(&[1, 8]);
        assert!(bilinear_resize(&t, 32, 32).is_err());
    }
}
