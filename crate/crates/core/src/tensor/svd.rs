//! Thin singular value decomposition by one-sided Jacobi rotations.
//!
//! The working matrix always has at least as many rows as columns (wide
//! inputs are transposed first). Column pairs are rotated until every pair
//! is orthogonal to within the precision-dependent threshold; the column
//! norms are then the singular values. Arithmetic is carried out in `f64`
//! for both element types.

use super::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};

/// Maximum number of full sweeps over all column pairs.
pub const MAX_SWEEPS: usize = 100;

fn threshold(precision: Precision) -> f64 {
    match precision {
        Precision::F64 => 1e-12,
        Precision::F32 => 1e-7,
    }
}

/// `A = U * diag(s) * V^T` with `U: m x k`, `V: n x k`, `k = min(m, n)`.
///
/// Singular values are non-negative and descending. The entry of largest
/// magnitude in each column of `U` is positive (`V` is flipped to match).
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum<T> {
    pub u: Tensor<T>,
    pub s: Vec<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> SingularSpectrum<T> {
    /// `U * diag(s) * V^T`.
    pub fn reconstruct(&self) -> Tensor<T> {
        let (m, k) = (self.u.dim(0), self.u.dim(1));
        let n = self.v.dim(0);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += self.u.data()[i * k + p] * self.s[p] * self.v.data()[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(&[m, n], out).expect("reconstruction shape")
    }
}

/// Column-major scratch matrix.
struct Columns {
    rows: usize,
    data: Vec<f64>,
}

impl Columns {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let (head, tail) = self.data.split_at_mut(q * self.rows);
        (&mut head[p * self.rows..(p + 1) * self.rows], &mut tail[..self.rows])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Core routine for `rows >= cols`. Returns (U, s, V) column-major in f64,
/// unsorted.
fn jacobi(a: Columns, cols: usize, tol: f64) -> Result<(Columns, Vec<f64>, Columns)> {
    let rows = a.rows;
    // Columns whose squared norm falls below this are numerically zero and
    // are never rotated (their direction is pure round-off).
    let frob_sq: f64 = a.data.iter().map(|x| x * x).sum();
    let floor = frob_sq * (f64::EPSILON * rows as f64).powi(2);
    let mut b = a;
    let mut v = Columns {
        rows: cols,
        data: vec![0.0; cols * cols],
    };
    for j in 0..cols {
        v.data[j * cols + j] = 1.0;
    }

    let mut converged = cols < 2;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(b.col(p), b.col(p));
                let beta = dot(b.col(q), b.col(q));
                let gamma = dot(b.col(p), b.col(q));
                if alpha <= floor || beta <= floor || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut b, &mut v] {
                    let (cp, cq) = m.pair_mut(p, q);
                    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
                        let (bp, bq) = (*xp, *xq);
                        *xp = c * bp - s * bq;
                        *xq = s * bp + c * bq;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "one-sided Jacobi SVD did not converge within {MAX_SWEEPS} sweeps ({rows}x{cols})"
        )));
    }

    let sigma: Vec<f64> = (0..cols).map(|j| dot(b.col(j), b.col(j)).sqrt()).collect();
    Ok((b, sigma, v))
}

/// Thin SVD of a matrix with finite entries.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<SingularSpectrum<T>> {
    let (m, n) = a.matrix_dims("svd")?;
    if m == 0 || n == 0 {
        return Err(Error::shape("svd", format!("empty matrix {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::Numerical("svd input has non-finite entries".into()));
    }
    let wide = m < n;
    let (rows, cols) = if wide { (n, m) } else { (m, n) };

    // Column j of the working matrix: column j of A, or row j of A if wide.
    let mut work = vec![0.0; rows * cols];
    for i in 0..m {
        for j in 0..n {
            let val = a.data()[i * n + j].to_f64_lossy();
            if wide {
                work[i * rows + j] = val;
            } else {
                work[j * rows + i] = val;
            }
        }
    }
    let (mut b, sigma, v) = jacobi(Columns { rows, data: work }, cols, threshold(T::PRECISION))?;

    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));

    let sigma_max = sigma[order[0]];
    let negligible = sigma_max * f64::EPSILON * rows as f64;

    // Left vectors of the working matrix, completed to an orthonormal set
    // where the singular value is numerically zero.
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut values = Vec::with_capacity(cols);
    for &j in &order {
        let s = sigma[j];
        let u = if s > negligible && s > 0.0 {
            b.col(j).iter().map(|x| x / s).collect()
        } else {
            complete_basis(&left, rows)
        };
        left.push(u);
        right.push(v.col(j).to_vec());
        values.push(s);
    }
    b.data.clear();

    // Undo the transpose: A = (W)^T = V_w S U_w^T.
    let (mut us, mut vs) = if wide { (right, left) } else { (left, right) };

    for (u, v) in us.iter_mut().zip(vs.iter_mut()) {
        let lead = u
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let k = cols;
    let mut u_data = vec![T::zero(); m * k];
    for (p, col) in us.iter().enumerate() {
        for i in 0..m {
            u_data[i * k + p] = T::from_f64_lossy(col[i]);
        }
    }
    let mut v_data = vec![T::zero(); n * k];
    for (p, col) in vs.iter().enumerate() {
        for j in 0..n {
            v_data[j * k + p] = T::from_f64_lossy(col[j]);
        }
    }
    Ok(SingularSpectrum {
        u: Tensor::new(&[m, k], u_data)?,
        s: values.into_iter().map(T::from_f64_lossy).collect(),
        v: Tensor::new(&[n, k], v_data)?,
    })
}

/// A unit vector orthogonal to every vector in `basis`.
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        // Two passes of Gram-Schmidt.
        for _ in 0..2 {
            for q in basis {
                let proj = dot(&cand, q);
                cand.iter_mut().zip(q).for_each(|(c, qi)| *c -= proj * qi);
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 0.5 {
            return cand.into_iter().map(|c| c / norm).collect();
        }
        if best.as_ref().map_or(true, |(bn, _)| norm > *bn) {
            best = Some((norm, cand));
        }
    }
    let (norm, cand) = best.expect("dim > 0");
    cand.into_iter().map(|c| c / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> Tensor<f64> {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.data_mut()[i * n + i] = v;
        }
        t
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let s = svd(&diag(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(s.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_is_sorted() {
        let s = svd(&diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.s, vec![3.0, 2.0, 1.0]);
        assert!(s.reconstruct().max_abs_diff(&diag(&[1.0, 3.0, 2.0])).unwrap() < 1e-14);
    }

    #[test]
    fn rank_one_gets_orthonormal_completion() {
        let a = Tensor::<f64>::from_f64(&[3, 2], &[1., 2., 2., 4., 3., 6.]).unwrap();
        let s = svd(&a).unwrap();
        assert!(s.s[1].abs() < 1e-12);
        let u = &s.u;
        let dot01: f64 = (0..3).map(|i| u.data()[i * 2] * u.data()[i * 2 + 1]).sum();
        let n1: f64 = (0..3).map(|i| u.data()[i * 2 + 1].powi(2)).sum();
        assert!(dot01.abs() < 1e-12);
        assert!((n1 - 1.0).abs() < 1e-12);
        assert!(s.reconstruct().max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn zero_matrix_is_handled() {
        let s = svd(&Tensor::<f64>::zeros(&[2, 3])).unwrap();
        assert_eq!(s.s, vec![0.0, 0.0]);
    }

    #[test]
    fn sign_convention_makes_largest_left_entry_positive() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[-3.0, 0.0, 0.0, -1.0]).unwrap();
        let s = svd(&a).unwrap();
        for p in 0..2 {
            let col: Vec<f64> = (0..2).map(|i| s.u.data()[i * 2 + p]).collect();
            let lead = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(lead > 0.0);
        }
        assert!(s.reconstruct().max_abs_diff(&a).unwrap() < 1e-14);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[f64::NAN, 1.0]).unwrap();
        assert!(matches!(svd(&a), Err(Error::Numerical(_))));
    }
}
