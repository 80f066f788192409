//! Bit-packed {-1, +1} tensors and the XNOR/popcount inner product.
//!
//! Encoding: +1 maps to bit 1 and -1 to bit 0, least-significant bit first
//! within each 64-bit word. Trailing pad bits of a row are always stored as 0;
//! [`xnor_dot`] corrects for them explicitly (two 0 pads XNOR to 1).

use super::super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const WORD_BITS: usize = 64;

/// How the logical tensor is grouped into packed rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitLayout {
    /// One row holding the whole tensor in row-major element order.
    Flat,
    /// One row per leading-index group with the channel axis packed innermost:
    /// activations (b, c, h, w) become rows over (b, h, w) of c bits each,
    /// weights (k, c, kh, kw) become rows over (k, kh, kw) of c bits each.
    ChannelRows,
}

/// Bit-packed sign tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BitTensor {
    words: Vec<u64>,
    shape: Vec<usize>,
    layout: BitLayout,
    /// Logical bits per packed row.
    row_bits: usize,
    /// Number of packed rows.
    rows: usize,
}

impl BitTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> BitLayout {
        self.layout
    }

    pub fn logical_len(&self) -> usize {
        self.rows * self.row_bits
    }

    pub fn row_bits(&self) -> usize {
        self.row_bits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn words_per_row(&self) -> usize {
        self.row_bits.div_ceil(WORD_BITS).max(1)
    }

    /// Trailing pad bits per packed row (stored as 0).
    pub fn pad_bits(&self) -> usize {
        self.words_per_row() * WORD_BITS - self.row_bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[r * wpr..(r + 1) * wpr]
    }

    /// Builds a packed tensor from raw parts; rows of `row_bits` logical bits.
    pub fn from_rows(
        words: Vec<u64>,
        shape: Vec<usize>,
        layout: BitLayout,
        row_bits: usize,
        rows: usize,
    ) -> Self {
        debug_assert_eq!(words.len(), rows * row_bits.div_ceil(WORD_BITS).max(1));
        BitTensor {
            words,
            shape,
            layout,
            row_bits,
            rows,
        }
    }
}

fn sign_bit<E: Scalar>(v: E, op: &'static str) -> Result<bool> {
    let x = v.to_f64();
    if x == 1.0 {
        Ok(true)
    } else if x == -1.0 {
        Ok(false)
    } else {
        Err(Error::invalid_input(op, format!("entry {x} is not +/-1")))
    }
}

/// Packs a {-1,+1} tensor into a single flat row.
pub fn pack_signs<E: Scalar>(x: &Tensor<E>) -> Result<BitTensor> {
    let n = x.len();
    let wpr = n.div_ceil(WORD_BITS).max(1);
    let mut words = vec![0u64; wpr];
    for (i, &v) in x.data().iter().enumerate() {
        if sign_bit(v, "pack_signs")? {
            words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
        }
    }
    Ok(BitTensor {
        words,
        shape: x.shape().to_vec(),
        layout: BitLayout::Flat,
        row_bits: n,
        rows: 1,
    })
}

/// Packs a 4-d {-1,+1} tensor with channels innermost: one packed row of
/// `c` bits per (outer, y, x) position. Used by the binary convolution for
/// both activations (b,c,h,w) and weights (k,c,kh,kw).
pub fn pack_signs_channel_rows<E: Scalar>(x: &Tensor<E>) -> Result<BitTensor> {
    if x.shape().len() != 4 {
        return Err(Error::dimension(
            "pack_signs_channel_rows",
            format!("expected 4-d tensor, got {:?}", x.shape()),
        ));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let rows = n * h * w;
    let wpr = c.div_ceil(WORD_BITS).max(1);
    let mut words = vec![0u64; rows * wpr];
    let data = x.data();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xj in 0..w {
                    let v = data[((ni * c + ci) * h + y) * w + xj];
                    if sign_bit(v, "pack_signs_channel_rows")? {
                        let row = (ni * h + y) * w + xj;
                        words[row * wpr + ci / WORD_BITS] |= 1u64 << (ci % WORD_BITS);
                    }
                }
            }
        }
    }
    Ok(BitTensor {
        words,
        shape: x.shape().to_vec(),
        layout: BitLayout::ChannelRows,
        row_bits: c,
        rows,
    })
}

/// Unpacks back to a {-1,+1} tensor; exact round trip of the pack functions.
pub fn unpack<E: Scalar>(bits: &BitTensor) -> Tensor<E> {
    let plus = E::ONE;
    let minus = E::from_f64(-1.0);
    let wpr = bits.words_per_row();
    let mut out = Tensor::zeros(&bits.shape);
    match bits.layout {
        BitLayout::Flat => {
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let set = bits.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1;
                *v = if set { plus } else { minus };
            }
        }
        BitLayout::ChannelRows => {
            let (n, c, h, w) = (
                bits.shape[0],
                bits.shape[1],
                bits.shape[2],
                bits.shape[3],
            );
            let data = out.data_mut();
            for ni in 0..n {
                for y in 0..h {
                    for xj in 0..w {
                        let row = (ni * h + y) * w + xj;
                        let rw = &bits.words[row * wpr..(row + 1) * wpr];
                        for ci in 0..c {
                            let set = rw[ci / WORD_BITS] >> (ci % WORD_BITS) & 1 == 1;
                            data[((ni * c + ci) * h + y) * w + xj] =
                                if set { plus } else { minus };
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
pub(crate) fn xnor_popcount(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0u32;
    for (&x, &y) in a.iter().zip(b) {
        acc += (!(x ^ y)).count_ones();
    }
    acc
}

#[inline]
pub(crate) fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0u32;
    for (&x, &y) in a.iter().zip(b) {
        acc += (x ^ y).count_ones();
    }
    acc
}

/// Inner product of two packed {-1,+1} rows of equal logical length `d`:
/// `2 * (popcount(XNOR(words)) - pad_bits) - d`. Both rows store pad bits as
/// 0, so each pad position XNORs to 1 and must be subtracted.
pub fn xnor_dot(u: &BitTensor, v: &BitTensor) -> Result<i64> {
    if u.rows != 1 || v.rows != 1 || u.row_bits != v.row_bits {
        return Err(Error::dimension(
            "xnor_dot",
            format!(
                "expected single rows of equal length, got {}x{} vs {}x{}",
                u.rows, u.row_bits, v.rows, v.row_bits
            ),
        ));
    }
    let d = u.row_bits as i64;
    let agreements = xnor_popcount(&u.words, &v.words) as i64 - u.pad_bits() as i64;
    Ok(2 * agreements - d)
}

/// Hamming distance between two packed rows (pad bits XOR to 0, no correction).
pub fn hamming(u: &BitTensor, v: &BitTensor) -> Result<u32> {
    if u.rows != 1 || v.rows != 1 || u.row_bits != v.row_bits {
        return Err(Error::dimension("hamming", "row shape mismatch"));
    }
    Ok(xor_popcount(&u.words, &v.words))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signs(v: &[i8]) -> Tensor<f32> {
        Tensor::from_vec(&[v.len()], v.iter().map(|&s| s as f32).collect()).unwrap()
    }

    #[test]
    fn pack_length_64_all_plus_one() {
        let t = Tensor::<f32>::filled(&[64], 1.0);
        let bits = pack_signs(&t).unwrap();
        assert_eq!(bits.words(), &[u64::MAX]);
        assert_eq!(bits.pad_bits(), 0);
    }

    #[test]
    fn pack_length_67_pads_and_round_trips() {
        let vals: Vec<i8> = (0..67).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect();
        let t = signs(&vals);
        let bits = pack_signs(&t).unwrap();
        assert_eq!(bits.words_per_row(), 2);
        assert_eq!(bits.pad_bits(), 128 - 67);
        // Trailing pad bits are zero in storage.
        assert_eq!(bits.words()[1] >> 3, 0);
        let back: Tensor<f32> = unpack(&bits);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn pack_empty_tensor() {
        let t = Tensor::<f32>::zeros(&[0]);
        let bits = pack_signs(&t).unwrap();
        assert_eq!(bits.logical_len(), 0);
        let back: Tensor<f32> = unpack(&bits);
        assert_eq!(back.len(), 0);
    }

    #[test]
    fn pack_rejects_non_sign_entries() {
        let t = Tensor::from_vec(&[2], vec![1.0_f32, 0.5]).unwrap();
        assert!(pack_signs(&t).is_err());
    }

    #[test]
    fn xnor_dot_self_is_length() {
        let vals: Vec<i8> = (0..256).map(|i| if (i * 7) % 5 < 2 { 1 } else { -1 }).collect();
        let bits = pack_signs(&signs(&vals)).unwrap();
        assert_eq!(xnor_dot(&bits, &bits).unwrap(), 256);
    }

    #[test]
    fn xnor_dot_antipodal_is_negative_length() {
        let vals: Vec<i8> = (0..100).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let neg: Vec<i8> = vals.iter().map(|&v| -v).collect();
        let a = pack_signs(&signs(&vals)).unwrap();
        let b = pack_signs(&signs(&neg)).unwrap();
        assert_eq!(xnor_dot(&a, &b).unwrap(), -100);
    }

    #[test]
    fn xnor_dot_mixed_case() {
        // [+1,-1,+1,-1] . [+1,+1,-1,-1] = 1 - 1 - 1 + 1 = 0.
        let a = pack_signs(&signs(&[1, -1, 1, -1])).unwrap();
        let b = pack_signs(&signs(&[1, 1, -1, -1])).unwrap();
        assert_eq!(xnor_dot(&a, &b).unwrap(), 0);
    }

    #[test]
    fn xnor_dot_rejects_length_mismatch() {
        let a = pack_signs(&signs(&[1, -1])).unwrap();
        let b = pack_signs(&signs(&[1, -1, 1])).unwrap();
        assert!(xnor_dot(&a, &b).is_err());
    }

    #[test]
    fn channel_rows_round_trip() {
        let vals: Vec<f32> = (0..2 * 67 * 3 * 3)
            .map(|i| if (i * 13) % 7 < 3 { 1.0 } else { -1.0 })
            .collect();
        let t = Tensor::from_vec(&[2, 67, 3, 3], vals).unwrap();
        let bits = pack_signs_channel_rows(&t).unwrap();
        assert_eq!(bits.rows(), 2 * 9);
        assert_eq!(bits.row_bits(), 67);
        let back: Tensor<f32> = unpack(&bits);
        assert_eq!(back.data(), t.data());
    }
}
