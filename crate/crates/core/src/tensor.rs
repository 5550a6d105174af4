//! Dense row-major tensors and the few kernels the rest of the crate needs.
//!
//! All reductions accumulate in a fixed order (ascending index along the reduced
//! axis), so results are bit-reproducible for identical inputs.

use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        ensure!(
            len == data.len(),
            "shape {:?} needs {} values, got {}",
            shape,
            len,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// n×n identity.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(
            [n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new([rows.len(), cols], data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Extent of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let r = self.row_len();
        &mut self.data[i * r..(i + 1) * r]
    }

    /// Leading-axis entry `i` as its own tensor (shape without the batch axis).
    pub fn item(&self, i: usize) -> Self {
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.row(i).to_vec(),
        }
    }

    /// Copies the given leading-axis entries, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.batch();
        let mut data = Vec::with_capacity(indices.len() * self.row_len());
        for &i in indices {
            ensure!(i < n, "index {} out of range for batch of {}", i, n);
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Contiguous slice `[start, end)` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(
            start <= end && end <= self.batch(),
            "batch slice {}..{} out of range for {}",
            start,
            end,
            self.batch()
        );
        let r = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * r..end * r].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        ensure!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        ensure!(
            items.iter().all(|t| t.shape == inner),
            "stack needs equal shapes"
        );
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        let data = items.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Self { shape, data })
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat of zero tensors");
        let inner = &parts[0].shape[1..];
        ensure!(
            parts
                .iter()
                .all(|t| t.rank() >= 1 && &t.shape[1..] == inner),
            "concat needs equal trailing shapes"
        );
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|t| t.batch()).sum();
        let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Self { shape, data })
    }

    /// Two-dimensional transpose.
    pub fn transpose(&self) -> Result<Self> {
        ensure!(
            self.rank() == 2,
            "transpose needs rank 2, got {:?}",
            self.shape
        );
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }
}

fn dims2<T>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[m, n] => Ok((m, n)),
        s => Err(contract(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// Standard matrix product `a · b`.
///
/// Every output element is accumulated over the inner index in ascending order,
/// so the result equals the naive triple loop bit for bit.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    ensure!(
        k == k2,
        "matmul inner extents differ: {}×{} · {}×{}",
        m,
        k,
        k2,
        n
    );
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new([m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "matmul_tn lhs")?;
    let (k2, n) = dims2(b, "matmul_tn rhs")?;
    ensure!(k == k2, "matmul_tn inner extents differ");
    let mut out = vec![T::zero(); m * n];
    gemm_tn(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new([m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (n, k2) = dims2(b, "matmul_nt rhs")?;
    ensure!(k == k2, "matmul_nt inner extents differ");
    let mut out = vec![T::zero(); m * n];
    gemm_nt(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new([m, n], out)
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Rows are processed four at a time so each row of `b` is streamed once per block;
/// per element the accumulation order is still ascending in k.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
        i += 1;
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`, `c: m×n`.
///
/// Four rows of `b` are folded into each pass over `c`; per element the accumulation
/// order is still ascending in k.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    let mut p = 0;
    while p + 4 <= k {
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for i in 0..m {
            let (a0, a1, a2, a3) = (
                a[p * m + i],
                a[(p + 1) * m + i],
                a[(p + 2) * m + i],
                a[(p + 3) * m + i],
            );
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = (((crow[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
            }
        }
        p += 4;
    }
    while p < k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
        p += 1;
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`, `c: m×n`.
///
/// Four rows of `a` share each pass over a row of `b`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
            for p in 0..k {
                let bv = brow[p];
                s0 += a0[p] * bv;
                s1 += a1[p] * bv;
                s2 += a2[p] * bv;
                s3 += a3[p] * bv;
            }
            c[i * n + j] += s0;
            c[(i + 1) * n + j] += s1;
            c[(i + 2) * n + j] += s2;
            c[(i + 3) * n + j] += s3;
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
        i += 1;
    }
}

/// Arithmetic mean along `axis`; the axis is removed from the result shape.
pub fn reduce_mean<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    ensure!(
        axis < t.rank(),
        "axis {} out of range for rank {}",
        axis,
        t.rank()
    );
    let extent = t.shape[axis];
    ensure!(extent > 0, "mean over empty axis {}", axis);
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for a in 0..extent {
            let base = (o * extent + a) * inner;
            for (d, &x) in dst.iter_mut().zip(&t.data[base..base + inner]) {
                *d += x;
            }
        }
    }
    let denom = T::from_usize(extent).expect("extent fits scalar");
    for v in &mut out {
        *v /= denom;
    }
    let mut shape = t.shape.clone();
    shape.remove(axis);
    Tensor::new(shape, out)
}

/// Uniform values in `[lo, hi)`; advances `stream` by one counter per value.
pub fn rng_uniform<T: Scalar>(
    stream: &mut RngStream,
    shape: impl Into<Vec<usize>>,
    lo: T,
    hi: T,
) -> Result<Tensor<T>> {
    ensure!(lo < hi, "rng_uniform needs lo < hi, got [{}, {})", lo, hi);
    let (lo64, hi64) = (lo.to_f64_lossless(), hi.to_f64_lossless());
    let shape = shape.into();
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        // Rounding into a narrower type can land on `hi`; redraw in that case.
        let v = loop {
            let v = T::lit(lo64 + (hi64 - lo64) * stream.next_f64());
            if v < hi {
                break v;
            }
        };
        data.push(v);
    }
    Tensor::new(shape, data)
}

/// Standard normal values (Box-Muller via `rand_distr`), scaled by `std`.
pub fn rng_normal<T: Scalar>(
    stream: &mut RngStream,
    shape: impl Into<Vec<usize>>,
    std: f64,
) -> Tensor<T> {
    let shape = shape.into();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::lit(std * stream.normal())).collect();
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let i2 = Tensor::<f64>::eye(2);
        let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::new([1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut s = RngStream::new(11);
        for (m, k, n) in [(8, 8, 8), (5, 3, 7), (9, 1, 2), (1, 6, 4)] {
            let a = rng_normal::<f64>(&mut s, [m, k], 1.0);
            let b = rng_normal::<f64>(&mut s, [k, n], 1.0);
            assert_eq!(
                matmul(&a, &b).unwrap().data(),
                naive_matmul(&a, &b).as_slice()
            );
            let at = a.transpose().unwrap();
            let bt = b.transpose().unwrap();
            assert_eq!(
                matmul_tn(&at, &b).unwrap().data(),
                naive_matmul(&a, &b).as_slice()
            );
            assert_eq!(
                matmul_nt(&a, &bt).unwrap().data(),
                naive_matmul(&a, &b).as_slice()
            );
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn mean_basic() {
        let t = Tensor::new([3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(reduce_mean(&t, 0).unwrap().data(), &[2.0]);
        let c = Tensor::full([4, 5], 0.25f32);
        assert!(reduce_mean(&c, 1)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.25));
    }

    #[test]
    fn mean_matches_naive_loop() {
        let mut s = RngStream::new(3);
        let t = rng_normal::<f64>(&mut s, [5, 3], 1.0);
        for axis in 0..2 {
            let got = reduce_mean(&t, axis).unwrap();
            let (rows, cols) = (5, 3);
            let expect: Vec<f64> = if axis == 0 {
                (0..cols)
                    .map(|j| {
                        let mut acc = 0.0;
                        for i in 0..rows {
                            acc += t.get2(i, j);
                        }
                        acc / rows as f64
                    })
                    .collect()
            } else {
                (0..rows)
                    .map(|i| {
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += t.get2(i, j);
                        }
                        acc / cols as f64
                    })
                    .collect()
            };
            assert_eq!(got.data(), expect.as_slice());
        }
    }

    #[test]
    fn mean_errors() {
        let t = Tensor::<f64>::zeros([0, 2]);
        assert!(reduce_mean(&t, 0).is_err());
        assert!(reduce_mean(&t, 2).is_err());
    }

    #[test]
    fn uniform_reproducible_and_bounded() {
        let a = rng_uniform::<f32>(&mut RngStream::new(0), [100], 0.0, 1.0).unwrap();
        let b = rng_uniform::<f32>(&mut RngStream::new(0), [100], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        let mut s = RngStream::new(5);
        let t = rng_uniform::<f32>(&mut s, [100_000], -2.0, 3.0).unwrap();
        assert!(t.data().iter().all(|&v| (-2.0..3.0).contains(&v)));
        assert_eq!(s.counter(), 100_000);
        assert!(rng_uniform::<f64>(&mut s, [1], 1.0, 1.0).is_err());
    }

    #[test]
    fn uniform_mean_law_of_large_numbers() {
        let t = rng_uniform::<f64>(&mut RngStream::new(0), [1_000_000], 0.0, 1.0).unwrap();
        let mean = reduce_mean(&t, 0).unwrap().data()[0];
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new([2, 2], vec![1.0f32; 3]).is_err());
    }
}
