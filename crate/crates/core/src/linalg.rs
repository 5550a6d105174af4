//! Small dense symmetric eigen-solvers.

use crate::error::{ensure, Error, Result};
use crate::rng::RngStream;
use crate::scalar::{dot, l2_norm, Scalar};
use crate::tensor::Tensor;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<T> {
    /// Ascending.
    pub values: Vec<T>,
    /// `vectors[i]` is the unit eigenvector of `values[i]`.
    pub vectors: Vec<Vec<T>>,
}

fn square_dim<T: Scalar>(a: &Tensor<T>) -> Result<usize> {
    ensure!(
        a.rank() == 2 && a.shape()[0] == a.shape()[1],
        "expected a square matrix, got {:?}",
        a.shape()
    );
    Ok(a.shape()[0])
}

/// Cyclic Jacobi rotations until every off-diagonal entry is negligible.
pub fn symmetric_eigen<T: Scalar>(a: &Tensor<T>) -> Result<SymmetricEigen<T>> {
    let n = square_dim(a)?;
    let mut m: Vec<T> = a.data().to_vec();
    // symmetrize so tiny asymmetries from accumulation do not matter
    for i in 0..n {
        for j in 0..i {
            let s = (m[i * n + j] + m[j * n + i]) * T::lit(0.5);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let frob: T = m.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol = T::epsilon() * T::lit(0.5) * frob;
    let max_sweeps = 100;
    let mut converged = n < 2;
    for _ in 0..max_sweeps {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= tol || off == T::zero() {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi eigen-solver did not converge in {max_sweeps} sweeps (n = {n})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[i * n + i]
            .partial_cmp(&m[j * n + j])
            .expect("finite eigenvalues")
    });
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    Ok(SymmetricEigen { values, vectors })
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Stops when successive Rayleigh quotients differ by less than `tol` relative.
/// For PSD input the dominant eigenvalue is also the largest one.
pub fn power_iteration<T: Scalar>(
    a: &Tensor<T>,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(T, Vec<T>)> {
    let n = square_dim(a)?;
    ensure!(n > 0, "power iteration on an empty matrix");
    let mut stream = RngStream::new(seed);
    let mut x: Vec<T> = (0..n).map(|_| T::lit(stream.normal())).collect();
    let nx = l2_norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut y = vec![T::zero(); n];
    let mut last = T::zero();
    for it in 0..max_iter {
        for i in 0..n {
            y[i] = dot(&a.data()[i * n..(i + 1) * n], &x);
        }
        let rq = dot(&x, &y);
        let ny = l2_norm(&y);
        if ny == T::zero() {
            return Ok((T::zero(), x));
        }
        for i in 0..n {
            x[i] = y[i] / ny;
        }
        if it > 0 && (rq - last).abs() <= T::lit(tol) * rq.abs().max(T::min_positive_value()) {
            return Ok((rq, x));
        }
        last = rq;
    }
    Err(Error::Numerical(format!(
        "power iteration did not reach relative tolerance {tol:e} in {max_iter} iterations \
         (last Rayleigh quotient {last})"
    )))
}

/// `Σ_i v_i v_iᵀ` over the selected eigenvectors: the orthogonal projector onto their span.
pub fn outer_sum<T: Scalar>(eig: &SymmetricEigen<T>, pick: impl Fn(usize) -> bool) -> Tensor<T> {
    let n = eig.values.len();
    let mut out = Tensor::zeros([n, n]);
    for (k, v) in eig.vectors.iter().enumerate() {
        if !pick(k) {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                let cur = out.get2(i, j);
                out.set2(i, j, cur + v[i] * v[j]);
            }
        }
    }
    out
}

/// `a · x` for a square matrix.
pub fn mat_vec<T: Scalar>(a: &Tensor<T>, x: &[T]) -> Vec<T> {
    let n = a.shape()[0];
    let m = a.shape()[1];
    (0..n)
        .map(|i| dot(&a.data()[i * m..(i + 1) * m], x))
        .collect()
}

/// `xᵀ a x`.
pub fn quad_form<T: Scalar>(a: &Tensor<T>, x: &[T]) -> T {
    dot(x, &mat_vec(a, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, rng_normal};

    fn random_sym(n: usize, seed: u64) -> Tensor<f64> {
        let g = rng_normal::<f64>(&mut RngStream::new(seed), [n, n], 1.0);
        matmul(&g, &g.transpose().unwrap()).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let a = Tensor::new([2, 2], vec![3.0f64, 0.0, 0.0, 1.0]).unwrap();
        let e = symmetric_eigen(&a).unwrap();
        assert_eq!(e.values, vec![1.0, 3.0]);
    }

    #[test]
    fn reconstructs_input() {
        for seed in 0..5 {
            let a = random_sym(6, seed);
            let e = symmetric_eigen(&a).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let r: f64 = (0..6)
                        .map(|k| e.values[k] * e.vectors[k][i] * e.vectors[k][j])
                        .sum();
                    assert!((r - a.get2(i, j)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn power_iteration_agrees_with_jacobi() {
        for seed in 0..5 {
            let a = random_sym(8, seed);
            let e = symmetric_eigen(&a).unwrap();
            let (lam, _) = power_iteration(&a, 1e-14, 100_000, 1).unwrap();
            let top = *e.values.last().unwrap();
            assert!((lam - top).abs() <= 1e-8 * top);
        }
    }

    #[test]
    fn non_square_rejected() {
        let a = Tensor::<f64>::zeros([2, 3]);
        assert!(symmetric_eigen(&a).is_err());
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        // nearly degenerate top pair: the Rayleigh quotient creeps, three steps are not enough
        let a = Tensor::new([2, 2], vec![1.0f64, 0.0, 0.0, 0.9999]).unwrap();
        assert!(matches!(
            power_iteration(&a, 1e-15, 3, 3),
            Err(Error::Numerical(_))
        ));
    }
}
