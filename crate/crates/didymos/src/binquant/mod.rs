//! Binary quantization: sign forward, tanh surrogate backward, the t/k
//! schedule, weight standardization, bit packing, and the XNOR/popcount
//! convolution kernels.

mod bits;
mod conv;

pub use bits::{
    hamming, pack_signs, pack_signs_channel_rows, unpack, xnor_dot, BitLayout, BitTensor,
    WORD_BITS,
};
pub use conv::binary_conv2d;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Sigma guard for degenerate (constant) filters in weight standardization.
pub const SIGMA_GUARD: f64 = 1e-12;

/// Default schedule bounds for the surrogate sharpness.
pub const T_MIN: f64 = 0.1;
pub const T_MAX: f64 = 10.0;

/// Optional learned scaling applied to binary convolution outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScalingVariant {
    /// No explicit scaling; the following normalization layer's affine
    /// parameters absorb the factor.
    None,
    /// One factor per output channel.
    PerChannel,
    /// Separate factors per output channel, output row, and output column,
    /// combined multiplicatively.
    SpatialChannel,
}

impl ScalingVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScalingVariant::None => "none",
            ScalingVariant::PerChannel => "per_channel",
            ScalingVariant::SpatialChannel => "spatial_channel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ScalingVariant::None),
            "per_channel" => Ok(ScalingVariant::PerChannel),
            "spatial_channel" => Ok(ScalingVariant::SpatialChannel),
            other => Err(Error::Config(format!("unknown scaling variant '{other}'"))),
        }
    }
}

/// Quantization state: schedule bounds, current surrogate parameters, and the
/// configured scaling variant.
#[derive(Clone, Copy, Debug)]
pub struct QuantConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub scaling_variant: ScalingVariant,
    pub t: f64,
    pub k: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            t_min: T_MIN,
            t_max: T_MAX,
            scaling_variant: ScalingVariant::None,
            t: T_MIN,
            k: 1.0 / T_MIN,
        }
    }
}

impl QuantConfig {
    /// Sets (t, k) from the epoch schedule.
    pub fn at_epoch(mut self, epoch: usize, total_epochs: usize) -> Result<Self> {
        let (t, k) = schedule_with_bounds(epoch, total_epochs, self.t_min, self.t_max)?;
        self.t = t;
        self.k = k;
        Ok(self)
    }
}

/// Surrogate sharpness schedule:
/// `t = T_min * 10^((i/n) * log10(T_max / T_min))`, `k = max(1/t, 1)`.
pub fn schedule(epoch: usize, total_epochs: usize) -> Result<(f64, f64)> {
    schedule_with_bounds(epoch, total_epochs, T_MIN, T_MAX)
}

pub fn schedule_with_bounds(
    epoch: usize,
    total_epochs: usize,
    t_min: f64,
    t_max: f64,
) -> Result<(f64, f64)> {
    if total_epochs == 0 {
        return Err(Error::invalid_input("schedule", "total epochs must be >= 1"));
    }
    if epoch > total_epochs {
        return Err(Error::invalid_input(
            "schedule",
            format!("epoch {epoch} beyond total {total_epochs}"),
        ));
    }
    if !(t_min > 0.0 && t_max > t_min) {
        return Err(Error::Config(format!("invalid bounds {t_min}..{t_max}")));
    }
    let frac = epoch as f64 / total_epochs as f64;
    let t = t_min * 10f64.powf(frac * (t_max / t_min).log10());
    let k = (1.0 / t).max(1.0);
    Ok((t, k))
}

/// Hard sign quantization: +1 where x >= 0, -1 where x < 0.
pub fn sign_forward<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let minus = E::from_f64(-1.0);
    x.map(|v| if v.to_f64() >= 0.0 { E::ONE } else { minus })
}

/// Surrogate value g(x) = k * tanh(t * x); stands in for sign during
/// gradient checking and near the schedule end approaches the hard sign.
pub fn surrogate_forward<E: Scalar>(x: &Tensor<E>, t: f64, k: f64) -> Tensor<E> {
    let te = E::from_f64(t);
    let ke = E::from_f64(k);
    x.map(|v| ke * (te * v).tanh())
}

/// Backward of the sign surrogate: grad * k * t * (1 - tanh^2(t * x)).
pub fn surrogate_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    saved_x: &Tensor<E>,
    t: f64,
    k: f64,
) -> Result<Tensor<E>> {
    if grad_out.shape() != saved_x.shape() {
        return Err(Error::dimension(
            "surrogate_backward",
            format!("{:?} vs {:?}", grad_out.shape(), saved_x.shape()),
        ));
    }
    let te = E::from_f64(t);
    let kt = E::from_f64(k * t);
    let mut out = Tensor::zeros(saved_x.shape());
    for ((o, &g), &x) in out
        .data_mut()
        .iter_mut()
        .zip(grad_out.data())
        .zip(saved_x.data())
    {
        let th = (te * x).tanh();
        *o = g * kt * (E::ONE - th * th);
    }
    Ok(out)
}

/// Per-filter statistics saved by [`weight_standardize`].
#[derive(Clone, Debug)]
pub struct StandardizeSaved<E: Scalar> {
    pub mu: Vec<E>,
    /// Guarded population standard deviation actually divided by.
    pub sigma: Vec<E>,
    /// Filters whose raw sigma fell below [`SIGMA_GUARD`].
    pub degenerate: Vec<bool>,
}

impl<E: Scalar> StandardizeSaved<E> {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Standardizes each filter of a (out_ch, in_ch, kh, kw) weight tensor to
/// zero mean and unit population standard deviation.
pub fn weight_standardize<E: Scalar>(w: &Tensor<E>) -> Result<(Tensor<E>, StandardizeSaved<E>)> {
    if w.shape().len() != 4 {
        return Err(Error::dimension(
            "weight_standardize",
            format!("expected 4-d weights, got {:?}", w.shape()),
        ));
    }
    let filters = w.dim(0);
    let per = w.len() / filters.max(1);
    if per < 2 {
        return Err(Error::invalid_input(
            "weight_standardize",
            "filters need at least 2 elements",
        ));
    }
    let mut out = Tensor::zeros(w.shape());
    let mut mu = Vec::with_capacity(filters);
    let mut sigma = Vec::with_capacity(filters);
    let mut degenerate = Vec::with_capacity(filters);
    for f in 0..filters {
        let src = &w.data()[f * per..(f + 1) * per];
        let m = src.iter().map(|v| v.to_f64()).sum::<f64>() / per as f64;
        let var = src.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>() / per as f64;
        let raw_sigma = var.sqrt();
        let is_degenerate = raw_sigma < SIGMA_GUARD;
        let s = if is_degenerate { SIGMA_GUARD } else { raw_sigma };
        let dst = &mut out.data_mut()[f * per..(f + 1) * per];
        for (d, v) in dst.iter_mut().zip(src) {
            *d = E::from_f64((v.to_f64() - m) / s);
        }
        mu.push(E::from_f64(m));
        sigma.push(E::from_f64(s));
        degenerate.push(is_degenerate);
    }
    Ok((out, StandardizeSaved { mu, sigma, degenerate }))
}

/// Backward of [`weight_standardize`]:
/// `dL/dw = (g - mean(g) - w_hat * mean(g * w_hat)) / sigma` per filter
/// (the `w_hat` term drops when sigma sat at the guard).
pub fn weight_standardize_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    standardized: &Tensor<E>,
    saved: &StandardizeSaved<E>,
) -> Result<Tensor<E>> {
    if grad_out.shape() != standardized.shape() {
        return Err(Error::dimension(
            "weight_standardize_backward",
            format!("{:?} vs {:?}", grad_out.shape(), standardized.shape()),
        ));
    }
    let filters = standardized.dim(0);
    let per = standardized.len() / filters.max(1);
    let mut out = Tensor::zeros(standardized.shape());
    for f in 0..filters {
        let g = &grad_out.data()[f * per..(f + 1) * per];
        let wh = &standardized.data()[f * per..(f + 1) * per];
        let g_mean = g.iter().map(|v| v.to_f64()).sum::<f64>() / per as f64;
        let gw_mean = g
            .iter()
            .zip(wh)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum::<f64>()
            / per as f64;
        let inv_sigma = 1.0 / saved.sigma[f].to_f64();
        let dst = &mut out.data_mut()[f * per..(f + 1) * per];
        if saved.degenerate[f] {
            for ((d, gi), _) in dst.iter_mut().zip(g).zip(wh) {
                *d = E::from_f64((gi.to_f64() - g_mean) * inv_sigma);
            }
        } else {
            for ((d, gi), whi) in dst.iter_mut().zip(g).zip(wh) {
                *d = E::from_f64((gi.to_f64() - g_mean - whi.to_f64() * gw_mean) * inv_sigma);
            }
        }
    }
    Ok(out)
}

/// Learned scaling factors for binary convolution outputs.
#[derive(Clone, Debug)]
pub struct ScalingFactors<E: Scalar> {
    pub lambda: Vec<E>,
    pub alpha: Vec<E>,
    pub beta: Vec<E>,
}

impl<E: Scalar> ScalingFactors<E> {
    pub fn ones(out_ch: usize, out_h: usize, out_w: usize) -> Self {
        ScalingFactors {
            lambda: vec![E::ONE; out_ch],
            alpha: vec![E::ONE; out_h],
            beta: vec![E::ONE; out_w],
        }
    }
}

fn check_factors<E: Scalar>(
    z: &Tensor<E>,
    variant: ScalingVariant,
    f: &ScalingFactors<E>,
) -> Result<()> {
    if z.shape().len() != 4 {
        return Err(Error::dimension("apply_scaling", "expected 4-d tensor"));
    }
    let (k, h, w) = (z.dim(1), z.dim(2), z.dim(3));
    let ok = match variant {
        ScalingVariant::None => true,
        ScalingVariant::PerChannel => f.lambda.len() == k,
        ScalingVariant::SpatialChannel => {
            f.lambda.len() == k && f.alpha.len() == h && f.beta.len() == w
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::dimension(
            "apply_scaling",
            format!(
                "factor lengths ({}, {}, {}) vs extents ({k}, {h}, {w})",
                f.lambda.len(),
                f.alpha.len(),
                f.beta.len()
            ),
        ))
    }
}

/// Applies the configured scaling variant elementwise.
pub fn apply_scaling<E: Scalar>(
    z: &Tensor<E>,
    variant: ScalingVariant,
    factors: &ScalingFactors<E>,
) -> Result<Tensor<E>> {
    check_factors(z, variant, factors)?;
    if variant == ScalingVariant::None {
        return Ok(z.clone());
    }
    let (b, k, h, w) = (z.dim(0), z.dim(1), z.dim(2), z.dim(3));
    let mut out = Tensor::zeros(z.shape());
    let zd = z.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ki in 0..k {
            for i in 0..h {
                for j in 0..w {
                    let idx = ((bi * k + ki) * h + i) * w + j;
                    let scale = match variant {
                        ScalingVariant::None => unreachable!(),
                        ScalingVariant::PerChannel => factors.lambda[ki],
                        ScalingVariant::SpatialChannel => {
                            factors.alpha[i] * factors.beta[j] * factors.lambda[ki]
                        }
                    };
                    od[idx] = zd[idx] * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`apply_scaling`]: gradients for the input and the factors.
pub fn apply_scaling_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    saved_z: &Tensor<E>,
    variant: ScalingVariant,
    factors: &ScalingFactors<E>,
) -> Result<(Tensor<E>, ScalingFactors<E>)> {
    check_factors(saved_z, variant, factors)?;
    if grad_out.shape() != saved_z.shape() {
        return Err(Error::dimension("apply_scaling_backward", "shape mismatch"));
    }
    let (b, k, h, w) = (
        saved_z.dim(0),
        saved_z.dim(1),
        saved_z.dim(2),
        saved_z.dim(3),
    );
    let mut grad_z = Tensor::zeros(saved_z.shape());
    let mut gf = ScalingFactors {
        lambda: vec![E::ZERO; factors.lambda.len()],
        alpha: vec![E::ZERO; factors.alpha.len()],
        beta: vec![E::ZERO; factors.beta.len()],
    };
    if variant == ScalingVariant::None {
        grad_z.data_mut().copy_from_slice(grad_out.data());
        return Ok((grad_z, gf));
    }
    let zd = saved_z.data();
    let gd = grad_out.data();
    let gzd = grad_z.data_mut();
    for bi in 0..b {
        for ki in 0..k {
            for i in 0..h {
                for j in 0..w {
                    let idx = ((bi * k + ki) * h + i) * w + j;
                    let (g, z) = (gd[idx], zd[idx]);
                    match variant {
                        ScalingVariant::None => unreachable!(),
                        ScalingVariant::PerChannel => {
                            gzd[idx] = g * factors.lambda[ki];
                            gf.lambda[ki] += g * z;
                        }
                        ScalingVariant::SpatialChannel => {
                            let (a, be, l) = (factors.alpha[i], factors.beta[j], factors.lambda[ki]);
                            gzd[idx] = g * a * be * l;
                            gf.lambda[ki] += g * z * a * be;
                            gf.alpha[i] += g * z * be * l;
                            gf.beta[j] += g * z * a * l;
                        }
                    }
                }
            }
        }
    }
    Ok((grad_z, gf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_zero_maps_to_plus_one() {
        let x = Tensor::from_vec(&[3], vec![-0.3_f64, 0.2, 0.0]).unwrap();
        let s = sign_forward(&x);
        assert_eq!(s.data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn sign_is_idempotent() {
        let x = Tensor::from_vec(&[5], vec![-2.0_f64, -0.1, 0.0, 0.5, 9.0]).unwrap();
        let s1 = sign_forward(&x);
        let s2 = sign_forward(&s1);
        assert_eq!(s1.data(), s2.data());
    }

    #[test]
    fn surrogate_derivative_at_zero_is_kt() {
        // tanh'(0) = 1, so d/dx [k tanh(t x)] at 0 is k*t; with t=k=1 it's 1.
        let x = Tensor::from_vec(&[1], vec![0.0_f64]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0_f64]).unwrap();
        let out = surrogate_backward(&g, &x, 1.0, 1.0).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_saturates_for_large_inputs() {
        let x = Tensor::from_vec(&[2], vec![50.0_f64, -50.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![1.0_f64, 1.0]).unwrap();
        let out = surrogate_backward(&g, &x, 1.0, 1.0).unwrap();
        assert!(out.data()[0].abs() < 1e-12);
        assert!(out.data()[1].abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradient_bounded_by_kt() {
        for epoch in [0_usize, 3, 7, 10] {
            let (t, k) = schedule(epoch, 10).unwrap();
            let xs: Vec<f64> = (-50..50).map(|i| i as f64 * 0.13).collect();
            let x = Tensor::from_vec(&[xs.len()], xs).unwrap();
            let g = Tensor::filled(&[x.len()], 1.0_f64);
            let out = surrogate_backward(&g, &x, t, k).unwrap();
            for &v in out.data() {
                assert!(v.abs() <= k * t + 1e-12);
            }
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let (t0, k0) = schedule(0, 200).unwrap();
        assert!((t0 - 0.1).abs() < 1e-12);
        assert!((k0 - 10.0).abs() < 1e-12);
        let (tn, kn) = schedule(200, 200).unwrap();
        assert!((tn - 10.0).abs() < 1e-9);
        assert!((kn - 1.0).abs() < 1e-12);
        let (tm, km) = schedule(100, 200).unwrap();
        assert!((tm - 1.0).abs() < 1e-12);
        assert!((km - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotone_in_epoch() {
        for n in [1_usize, 7, 200, 10_000] {
            let mut last = 0.0;
            for i in 0..=n {
                let (t, k) = schedule(i, n).unwrap();
                assert!(t >= last);
                assert!((k - (1.0 / t).max(1.0)).abs() < 1e-12);
                last = t;
            }
        }
        assert!(schedule(1, 0).is_err());
    }

    #[test]
    fn standardize_known_filter() {
        // [1,2,3]: mu=2, population sigma=sqrt(2/3).
        let w = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0_f64, 2.0, 3.0]).unwrap();
        let (out, saved) = weight_standardize(&w).unwrap();
        let expect = (2.0_f64 / 3.0).sqrt();
        assert!((out.data()[0] + 1.0 / expect * 1.0).abs() < 1e-12);
        assert!((out.data()[0] + 1.2247448713915890).abs() < 1e-9);
        assert!(out.data()[1].abs() < 1e-12);
        assert!((out.data()[2] - 1.2247448713915890).abs() < 1e-9);
        assert!(!saved.degenerate[0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let vals = vec![0.3_f64, -1.1, 0.9, -0.4, 0.7, -0.4];
        let w = Tensor::from_vec(&[1, 1, 2, 3], vals).unwrap();
        let (s1, _) = weight_standardize(&w).unwrap();
        let (s2, _) = weight_standardize(&s1).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // mean 0, population std 1
        let m: f64 = s1.data().iter().sum::<f64>() / 6.0;
        let v: f64 = s1.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-6);
        assert!((v.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn standardize_constant_filter_flags_degenerate() {
        let w = Tensor::<f64>::filled(&[1, 1, 2, 2], 3.5);
        let (out, saved) = weight_standardize(&w).unwrap();
        assert!(saved.degenerate[0]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_none_is_identity() {
        let z = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0_f32, -2.0, 3.0, 4.0]).unwrap();
        let f = ScalingFactors::ones(2, 1, 2);
        let out = apply_scaling(&z, ScalingVariant::None, &f).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn scaling_per_channel_doubles() {
        let z = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0_f32, -2.0, 3.0, 4.0]).unwrap();
        let f = ScalingFactors {
            lambda: vec![2.0, 2.0],
            alpha: vec![],
            beta: vec![],
        };
        let out = apply_scaling(&z, ScalingVariant::PerChannel, &f).unwrap();
        assert_eq!(out.data(), &[2.0, -4.0, 6.0, 8.0]);
    }

    #[test]
    fn scaling_spatial_channel_matches_triple_loop() {
        let z = Tensor::from_vec(&[2, 2, 2, 3], (0..24).map(|i| i as f64 * 0.5 - 3.0).collect())
            .unwrap();
        let f = ScalingFactors {
            lambda: vec![1.5, -0.5],
            alpha: vec![2.0, 0.25],
            beta: vec![1.0, 3.0, -1.0],
        };
        let out = apply_scaling(&z, ScalingVariant::SpatialChannel, &f).unwrap();
        for b in 0..2 {
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..3 {
                        let idx = ((b * 2 + k) * 2 + i) * 3 + j;
                        let expect = z.data()[idx] * f.alpha[i] * f.beta[j] * f.lambda[k];
                        assert!((out.data()[idx] - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_rejects_bad_lengths() {
        let z = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
        let f = ScalingFactors {
            lambda: vec![1.0; 3],
            alpha: vec![],
            beta: vec![],
        };
        assert!(apply_scaling(&z, ScalingVariant::PerChannel, &f).is_err());
    }

    #[test]
    fn standardized_random_filters_have_balanced_signs() {
        // Zero-skew init: after standardize + sign the +1 fraction sits near
        // one half on average.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let filters = 128;
        let per = 72; // 8 channels x 3 x 3
        let mut total_plus = 0usize;
        for _ in 0..filters {
            let vals: Vec<f64> = (0..per).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let w = Tensor::from_vec(&[1, 8, 3, 3], vals).unwrap();
            let (ws, _) = weight_standardize(&w).unwrap();
            let s = sign_forward(&ws);
            total_plus += s.data().iter().filter(|&&v| v > 0.0).count();
        }
        let frac = total_plus as f64 / (filters * per) as f64;
        assert!((0.4..=0.6).contains(&frac), "fraction {frac}");
    }
}
