//! Dense tensor numerics for the descriptor networks.
//!
//! Activations are laid out batch-channels-height-width and weights
//! out-in-kh-kw, row-major, so the innermost spatial loops stay contiguous.
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for gradient checking.

mod adam;
mod conv;
mod norm;
mod resize;

pub use adam::{adam_step, AdamConfig};
pub use conv::{
    conv2d_backward, conv2d_backward_padded, conv2d_forward, conv2d_forward_padded,
    conv_out_extent,
};
pub use norm::{
    batchnorm_final_backward, batchnorm_final_forward, frn_batch_nu2, frn_tlu_backward,
    frn_tlu_forward, l2_normalize, l2_normalize_backward, BatchNormSaved, BatchNormStats,
    FrnGrads, FrnParams, FrnSaved, BN_EPS, FRN_EPS, L2_DEGENERATE,
};
pub use resize::bilinear_resize;

use crate::{Error, Result};

/// Floating-point element type of a [`Tensor`].
///
/// `f32` is the training precision; `f64` is the extended-precision mode used
/// by the finite-difference test suites.
pub trait Scalar:
    Copy
    + Clone
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    /// `f32` convolutions run through blocked GEMM; the extended-precision
    /// `f64` mode uses direct loops whose accumulation order matches the
    /// naive reference definition exactly.
    const USE_GEMM: bool;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// C := alpha * A (m×k) * B (k×n) + beta * C, row-major strides.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given extents/strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $use_gemm:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const USE_GEMM: bool = $use_gemm;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, true);
impl_scalar!(f64, matrixmultiply::dgemm, false);

/// Dense row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; len],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dimension(
                "tensor_from_vec",
                format!("shape {shape:?} wants {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterprets the tensor with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dimension(
                "tensor_reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extent along dimension `d`.
    pub fn dim(&self, d: usize) -> usize {
        self.shape[d]
    }

    /// Flat index for a 4-D tensor.
    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        for (i, &x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::non_finite(op, format!("element {i} = {x}")));
            }
        }
        Ok(())
    }

    pub fn scale_inplace(&mut self, s: E) {
        for x in &mut self.data {
            *x = *x * s;
        }
    }

    /// self += other (same shape).
    pub fn add_assign(&mut self, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dimension(
                "tensor_add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }
}

/// A learnable parameter: value, gradient, and Adam moment slots.
#[derive(Clone, Debug)]
pub struct Param<E: Scalar = f32> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

impl<E: Scalar> Param<E> {
    pub fn new(value: Tensor<E>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = E::ZERO;
        }
    }

    pub fn cast<F: Scalar>(&self) -> Param<F> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        t.data_mut()[2] = f32::NAN;
        assert!(t.ensure_finite("test").is_err());
    }

    #[test]
    fn idx4_row_major() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4, 5]);
        assert_eq!(t.idx4(0, 0, 0, 0), 0);
        assert_eq!(t.idx4(0, 0, 0, 4), 4);
        assert_eq!(t.idx4(0, 0, 1, 0), 5);
        assert_eq!(t.idx4(1, 2, 3, 4), 119);
    }
}
