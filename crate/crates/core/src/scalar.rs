//! Floating point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in checkpoints and manifests ("f32" / "f64").
    const NAME: &'static str;

    /// Size of the little-endian encoding in bytes.
    const BYTES: usize;

    /// Converts an `f64` literal; every finite `f64` is representable (possibly rounded).
    fn lit(x: f64) -> Self;

    fn to_f64_lossless(self) -> f64;

    /// Bit pattern widened to u64, used for checksums.
    fn bits(self) -> u64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }

    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Euclidean norm with a fixed left-to-right summation order.
pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    let mut acc = T::zero();
    for &x in v {
        acc += x * x;
    }
    acc.sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Element-wise mean of equally sized vectors, summed in slice order then divided once.
///
/// Every path that reduces gradients goes through this so that equal inputs in equal
/// order give bit-identical outputs.
pub fn mean_in_order<T: Scalar>(vectors: &[Vec<T>]) -> Vec<T> {
    assert!(!vectors.is_empty(), "mean of zero vectors");
    let d = vectors[0].len();
    let mut acc = vec![T::zero(); d];
    for v in vectors {
        assert_eq!(v.len(), d, "ragged vectors in mean");
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let count = T::from_usize(vectors.len()).expect("count fits scalar");
    for a in &mut acc {
        *a /= count;
    }
    acc
}

/// Order-sensitive FNV-1a over the bit patterns; equal iff bitwise equal (modulo hash collisions).
pub fn checksum<T: Scalar>(v: &[T]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &x in v {
        for byte in x.bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
