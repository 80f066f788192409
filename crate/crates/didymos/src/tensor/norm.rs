//! Normalization and activation layers: FRN + TLU, the final batch
//! normalization, and L2 normalization.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Fixed FRN epsilon. Non-learnable; guards the root at degenerate inputs.
pub const FRN_EPS: f64 = 1e-6;

/// Final-BN epsilon. Small enough that an already-standardized batch passes
/// through essentially unchanged.
pub const BN_EPS: f64 = 1e-8;

/// Norms below this are treated as degenerate in [`l2_normalize`].
pub const L2_DEGENERATE: f64 = 1e-12;

/// Per-channel filter response normalization parameters.
#[derive(Clone, Debug)]
pub struct FrnParams<'a, E: Scalar> {
    pub gamma: &'a [E],
    pub beta: &'a [E],
    pub tau: &'a [E],
    pub eps: E,
}

/// State saved by the FRN forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct FrnSaved<E: Scalar> {
    /// Per-channel mean of squares actually used by the forward pass.
    pub nu2: Vec<E>,
}

/// Gradients produced by [`frn_tlu_backward`].
pub struct FrnGrads<E: Scalar> {
    pub grad_x: Tensor<E>,
    pub grad_gamma: Vec<E>,
    pub grad_beta: Vec<E>,
    pub grad_tau: Vec<E>,
}

fn frn_check<E: Scalar>(x: &Tensor<E>, p: &FrnParams<E>) -> Result<usize> {
    if x.shape().len() != 4 {
        return Err(Error::dimension(
            "frn_tlu",
            format!("expected 4-d activations, got {:?}", x.shape()),
        ));
    }
    let ch = x.dim(1);
    if p.gamma.len() != ch || p.beta.len() != ch || p.tau.len() != ch {
        return Err(Error::dimension(
            "frn_tlu",
            format!(
                "channel count {ch} vs params ({}, {}, {})",
                p.gamma.len(),
                p.beta.len(),
                p.tau.len()
            ),
        ));
    }
    if !(p.eps.to_f64() > 0.0) {
        return Err(Error::invalid_input("frn_tlu", "eps must be positive"));
    }
    Ok(ch)
}

/// Batch mean of squares per channel.
pub fn frn_batch_nu2<E: Scalar>(x: &Tensor<E>) -> Vec<E> {
    let (b, ch, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let n = (b * plane) as f64;
    let data = x.data();
    let mut nu2 = vec![E::ZERO; ch];
    nu2.par_iter_mut().enumerate().for_each(|(c, out)| {
        let mut acc = E::ZERO;
        for bi in 0..b {
            let base = (bi * ch + c) * plane;
            for &v in &data[base..base + plane] {
                acc += v * v;
            }
        }
        *out = E::from_f64(acc.to_f64() / n);
    });
    nu2
}

/// FRN + TLU forward.
///
/// Per channel c: `nu2 = mean over batch and spatial of x^2`,
/// `y = gamma * x / sqrt(nu2 + eps) + beta`, output `max(y, tau)`.
/// When `nu2_override` is given (inference with frozen statistics) those
/// values are used instead of the batch statistics.
pub fn frn_tlu_forward<E: Scalar>(
    x: &Tensor<E>,
    p: &FrnParams<E>,
    nu2_override: Option<&[E]>,
) -> Result<(Tensor<E>, FrnSaved<E>)> {
    let ch = frn_check(x, p)?;
    let nu2 = match nu2_override {
        Some(v) => {
            if v.len() != ch {
                return Err(Error::dimension("frn_tlu", "nu2 override length"));
            }
            v.to_vec()
        }
        None => frn_batch_nu2(x),
    };
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(chunk, o)| {
            let c = chunk % ch;
            let r = E::from_f64(1.0 / (nu2[c].to_f64() + p.eps.to_f64()).sqrt());
            let (gamma, beta, tau) = (p.gamma[c], p.beta[c], p.tau[c]);
            let base = chunk * plane;
            for (i, ov) in o.iter_mut().enumerate() {
                let y = gamma * (xd[base + i] * r) + beta;
                *ov = y.maximum(tau);
            }
        });
    debug_assert_eq!(b * ch, x.len() / plane);
    Ok((out, FrnSaved { nu2 }))
}

/// FRN + TLU backward (training statistics).
///
/// The TLU subgradient at `y == tau` takes the pass-through branch.
pub fn frn_tlu_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    saved_x: &Tensor<E>,
    p: &FrnParams<E>,
    saved: &FrnSaved<E>,
) -> Result<FrnGrads<E>> {
    let ch = frn_check(saved_x, p)?;
    if grad_out.shape() != saved_x.shape() {
        return Err(Error::dimension(
            "frn_tlu_backward",
            format!("{:?} vs {:?}", grad_out.shape(), saved_x.shape()),
        ));
    }
    let (b, h, w) = (saved_x.dim(0), saved_x.dim(2), saved_x.dim(3));
    let plane = h * w;
    let n = (b * plane) as f64;
    let xd = saved_x.data();
    let gd = grad_out.data();

    let mut grad_x = Tensor::zeros(saved_x.shape());
    let mut grad_gamma = vec![E::ZERO; ch];
    let mut grad_beta = vec![E::ZERO; ch];
    let mut grad_tau = vec![E::ZERO; ch];

    // Two passes per channel: reductions first, then the elementwise gradient.
    let gxd = grad_x.data_mut();
    let per_channel: Vec<(E, E, E, E)> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let r = 1.0 / (saved.nu2[c].to_f64() + p.eps.to_f64()).sqrt();
            let re = E::from_f64(r);
            let (gamma, beta, tau) = (p.gamma[c], p.beta[c], p.tau[c]);
            let mut s_gy = E::ZERO; // sum of gy
            let mut s_gy_xhat = E::ZERO; // sum of gy * xhat
            let mut s_gxhat_x = E::ZERO; // sum of (gy*gamma) * x
            let mut s_gtau = E::ZERO;
            for bi in 0..b {
                let base = (bi * ch + c) * plane;
                for i in 0..plane {
                    let x = xd[base + i];
                    let xhat = x * re;
                    let y = gamma * xhat + beta;
                    let g = gd[base + i];
                    if y >= tau {
                        s_gy += g;
                        s_gy_xhat += g * xhat;
                        s_gxhat_x += g * gamma * x;
                    } else {
                        s_gtau += g;
                    }
                }
            }
            (s_gy, s_gy_xhat, s_gxhat_x, s_gtau)
        })
        .collect();

    for (c, &(s_gy, s_gy_xhat, _, s_gtau)) in per_channel.iter().enumerate() {
        grad_beta[c] = s_gy;
        grad_gamma[c] = s_gy_xhat;
        grad_tau[c] = s_gtau;
    }

    gxd.par_chunks_mut(plane).enumerate().for_each(|(chunk, gx)| {
        let c = chunk % ch;
        let r = 1.0 / (saved.nu2[c].to_f64() + p.eps.to_f64()).sqrt();
        let re = E::from_f64(r);
        let r3_over_n = E::from_f64(r * r * r / n);
        let (gamma, beta, tau) = (p.gamma[c], p.beta[c], p.tau[c]);
        let s = per_channel[c].2; // sum of gxhat * x over the channel
        let base = chunk * plane;
        for (i, gxi) in gx.iter_mut().enumerate() {
            let x = xd[base + i];
            let y = gamma * (x * re) + beta;
            let gy = if y >= tau { gd[base + i] } else { E::ZERO };
            let gxhat = gy * gamma;
            *gxi = re * gxhat - r3_over_n * s * x;
        }
    });

    Ok(FrnGrads {
        grad_x,
        grad_gamma,
        grad_beta,
        grad_tau,
    })
}

/// Running statistics for the final batch normalization (no affine).
#[derive(Clone, Debug)]
pub struct BatchNormStats<E: Scalar> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Scalar> BatchNormStats<E> {
    pub fn identity(dim: usize) -> Self {
        BatchNormStats {
            mean: vec![E::ZERO; dim],
            var: vec![E::ONE; dim],
        }
    }
}

/// Saved state from a training-mode BN forward.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<E: Scalar> {
    pub stats: BatchNormStats<E>,
}

/// Final batch normalization over a (batch, dim) tensor: per-dimension
/// standardization, no learned affine. In training mode the batch statistics
/// are used (and returned); in inference the provided running statistics.
pub fn batchnorm_final_forward<E: Scalar>(
    x: &Tensor<E>,
    running: Option<&BatchNormStats<E>>,
) -> Result<(Tensor<E>, BatchNormSaved<E>)> {
    if x.shape().len() != 2 {
        return Err(Error::dimension(
            "batchnorm_final",
            format!("expected (batch, dim), got {:?}", x.shape()),
        ));
    }
    let (b, d) = (x.dim(0), x.dim(1));
    let stats = match running {
        Some(s) => {
            if s.mean.len() != d || s.var.len() != d {
                return Err(Error::dimension("batchnorm_final", "running stats length"));
            }
            s.clone()
        }
        None => {
            if b < 2 {
                return Err(Error::statistics(
                    "batchnorm_final",
                    format!("training mode needs batch >= 2, got {b}"),
                ));
            }
            let xd = x.data();
            let mut mean = vec![E::ZERO; d];
            let mut var = vec![E::ZERO; d];
            mean.par_iter_mut()
                .zip(var.par_iter_mut())
                .enumerate()
                .for_each(|(j, (mj, vj))| {
                    let mut s = 0.0;
                    for i in 0..b {
                        s += xd[i * d + j].to_f64();
                    }
                    let mu = s / b as f64;
                    let mut q = 0.0;
                    for i in 0..b {
                        let t = xd[i * d + j].to_f64() - mu;
                        q += t * t;
                    }
                    *mj = E::from_f64(mu);
                    *vj = E::from_f64(q / b as f64);
                });
            BatchNormStats { mean, var }
        }
    };

    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    let inv: Vec<E> = stats
        .var
        .iter()
        .map(|&v| E::from_f64(1.0 / (v.to_f64() + BN_EPS).sqrt()))
        .collect();
    od.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        for j in 0..d {
            row[j] = (xd[i * d + j] - stats.mean[j]) * inv[j];
        }
    });
    Ok((out, BatchNormSaved { stats }))
}

/// Backward of the training-mode final BN.
pub fn batchnorm_final_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    saved_x: &Tensor<E>,
    saved: &BatchNormSaved<E>,
) -> Result<Tensor<E>> {
    if grad_out.shape() != saved_x.shape() || saved_x.shape().len() != 2 {
        return Err(Error::dimension(
            "batchnorm_final_backward",
            format!("{:?} vs {:?}", grad_out.shape(), saved_x.shape()),
        ));
    }
    let (b, d) = (saved_x.dim(0), saved_x.dim(1));
    let xd = saved_x.data();
    let gd = grad_out.data();
    let mut grad_x = Tensor::zeros(saved_x.shape());
    let gxd = grad_x.data_mut();

    // Column-wise: dL/dx_i = (1/(B*s)) * (B*g_i - sum g - xhat_i * sum(g*xhat)).
    let cols: Vec<(f64, f64, f64, f64)> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mu = saved.stats.mean[j].to_f64();
            let s = (saved.stats.var[j].to_f64() + BN_EPS).sqrt();
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..b {
                let g = gd[i * d + j].to_f64();
                let xh = (xd[i * d + j].to_f64() - mu) / s;
                sum_g += g;
                sum_gx += g * xh;
            }
            (mu, s, sum_g, sum_gx)
        })
        .collect();

    gxd.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        for j in 0..d {
            let (mu, s, sum_g, sum_gx) = cols[j];
            let g = gd[i * d + j].to_f64();
            let xh = (xd[i * d + j].to_f64() - mu) / s;
            row[j] = E::from_f64((b as f64 * g - sum_g - xh * sum_gx) / (b as f64 * s));
        }
    });
    Ok(grad_x)
}

/// L2-normalizes a vector. Returns the unit vector, the input norm, and a
/// degeneracy flag; a (near-)zero vector maps to the first basis vector.
pub fn l2_normalize<E: Scalar>(x: &[E]) -> (Vec<E>, E, bool) {
    let norm2: E = x.iter().map(|&v| v * v).sum();
    let norm = norm2.sqrt();
    if norm.to_f64() <= L2_DEGENERATE {
        let mut out = vec![E::ZERO; x.len()];
        if !out.is_empty() {
            out[0] = E::ONE;
        }
        return (out, norm, true);
    }
    let inv = E::ONE / norm;
    (x.iter().map(|&v| v * inv).collect(), norm, false)
}

/// Backward of [`l2_normalize`]: dL/dx = (g - y * (y . g)) / norm.
///
/// The degenerate branch is a constant, so its gradient is zero.
pub fn l2_normalize_backward<E: Scalar>(
    grad_out: &[E],
    y: &[E],
    norm: E,
    degenerate: bool,
) -> Vec<E> {
    if degenerate {
        return vec![E::ZERO; grad_out.len()];
    }
    let dot: E = y.iter().zip(grad_out).map(|(&a, &b)| a * b).sum();
    let inv = E::ONE / norm;
    grad_out
        .iter()
        .zip(y)
        .map(|(&g, &yi)| (g - yi * dot) * inv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frn_params(ch: usize, gamma: f64, beta: f64, tau: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![gamma; ch], vec![beta; ch], vec![tau; ch])
    }

    #[test]
    fn frn_zero_input_stays_zero() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        let (g, b, t) = frn_params(3, 1.0, 0.0, -1e30);
        let p = FrnParams {
            gamma: &g,
            beta: &b,
            tau: &t,
            eps: FRN_EPS,
        };
        let (out, _) = frn_tlu_forward(&x, &p, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frn_constant_positive_input_normalizes_to_one() {
        // x = v > 0 everywhere: x / sqrt(mean x^2) = 1, above tau = 0.
        let x = Tensor::<f64>::filled(&[2, 2, 3, 3], 0.7);
        let (g, b, t) = frn_params(2, 1.0, 0.0, 0.0);
        let p = FrnParams {
            gamma: &g,
            beta: &b,
            tau: &t,
            eps: FRN_EPS,
        };
        let (out, saved) = frn_tlu_forward(&x, &p, None).unwrap();
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-5, "{v}");
        }
        assert!((saved.nu2[0] - 0.49).abs() < 1e-12);
    }

    #[test]
    fn frn_matches_two_pass_reference() {
        // Independent recomputation with a separate mean-of-squares pass.
        let mut v = 0.3_f64;
        let data: Vec<f64> = (0..2 * 2 * 4 * 4)
            .map(|_| {
                v = (v * 97.0 + 13.0).rem_euclid(7.0) - 3.5;
                v
            })
            .collect();
        let x = Tensor::from_vec(&[2, 2, 4, 4], data.clone()).unwrap();
        let (g, b, t) = frn_params(2, 1.3, -0.2, -0.1);
        let p = FrnParams {
            gamma: &g,
            beta: &b,
            tau: &t,
            eps: FRN_EPS,
        };
        let (out, _) = frn_tlu_forward(&x, &p, None).unwrap();

        for c in 0..2 {
            let mut sq = 0.0;
            let mut count = 0.0;
            for bi in 0..2 {
                for s in 0..16 {
                    sq += data[(bi * 2 + c) * 16 + s].powi(2);
                    count += 1.0;
                }
            }
            let nu2 = sq / count;
            for bi in 0..2 {
                for s in 0..16 {
                    let xv = data[(bi * 2 + c) * 16 + s];
                    let y = 1.3 * xv / (nu2 + FRN_EPS).sqrt() - 0.2;
                    let expect = y.max(-0.1);
                    let got = out.data()[(bi * 2 + c) * 16 + s];
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tlu_saturated_gives_zero_input_gradient() {
        // Everything below tau: grad_x = 0 and tau collects all gradient.
        let x = Tensor::<f64>::filled(&[1, 1, 2, 2], -5.0);
        let (g, b, t) = frn_params(1, 1.0, 0.0, 10.0);
        let p = FrnParams {
            gamma: &g,
            beta: &b,
            tau: &t,
            eps: FRN_EPS,
        };
        let (_, saved) = frn_tlu_forward(&x, &p, None).unwrap();
        let gout = Tensor::<f64>::filled(&[1, 1, 2, 2], 1.0);
        let grads = frn_tlu_backward(&gout, &x, &p, &saved).unwrap();
        assert!(grads.grad_x.data().iter().all(|&v| v == 0.0));
        assert_eq!(grads.grad_tau[0], 4.0);
    }

    #[test]
    fn tlu_inactive_gives_zero_tau_gradient() {
        let x = Tensor::<f64>::filled(&[1, 1, 2, 2], 5.0);
        let (g, b, t) = frn_params(1, 1.0, 0.0, -100.0);
        let p = FrnParams {
            gamma: &g,
            beta: &b,
            tau: &t,
            eps: FRN_EPS,
        };
        let (_, saved) = frn_tlu_forward(&x, &p, None).unwrap();
        let gout = Tensor::<f64>::filled(&[1, 1, 2, 2], 1.0);
        let grads = frn_tlu_backward(&gout, &x, &p, &saved).unwrap();
        assert_eq!(grads.grad_tau[0], 0.0);
    }

    #[test]
    fn bn_standardized_batch_passes_through() {
        // Columns with zero mean, unit population variance.
        let x = Tensor::from_vec(&[2, 2], vec![1.0_f64, -1.0, -1.0, 1.0]).unwrap();
        let (out, _) = batchnorm_final_forward(&x, None).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bn_constant_dimension_maps_to_zero() {
        let x = Tensor::from_vec(&[3, 1], vec![2.5_f64, 2.5, 2.5]).unwrap();
        let (out, _) = batchnorm_final_forward(&x, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_rejects_tiny_batch_in_training() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        assert!(matches!(
            batchnorm_final_forward(&x, None),
            Err(Error::Statistics { .. })
        ));
    }

    #[test]
    fn bn_random_batch_is_standardized() {
        let mut v = 0.1_f64;
        let data: Vec<f64> = (0..40)
            .map(|_| {
                v = (v * 37.0 + 11.0).rem_euclid(9.0) - 4.5;
                v
            })
            .collect();
        let x = Tensor::from_vec(&[10, 4], data).unwrap();
        let (out, _) = batchnorm_final_forward(&x, None).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| out.data()[i * 4 + j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 10.0;
            let var: f64 = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_three_four_five() {
        let (out, norm, degenerate) = l2_normalize(&[3.0_f64, 4.0]);
        assert!(!degenerate);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((out[0] - 0.6).abs() < 1e-12);
        assert!((out[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_unit_vector_unchanged() {
        let (out, _, _) = l2_normalize(&[0.0_f64, 1.0, 0.0]);
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn l2_zero_vector_falls_back_to_basis() {
        let (out, _, degenerate) = l2_normalize(&[0.0_f64; 5]);
        assert!(degenerate);
        assert_eq!(out[0], 1.0);
        assert!(out[1..].iter().all(|&v| v == 0.0));
    }
}
