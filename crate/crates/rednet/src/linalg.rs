//! Dense linear-algebra kernels: matrix product, SVD, symmetric
//! eigendecomposition, and least squares.
//!
//! The SVD is a one-sided Jacobi iteration and the eigensolver a cyclic
//! two-sided Jacobi iteration; both are simple and accurate at the matrix
//! sizes this crate works with. Every routine computes in the tensor's
//! scalar type (`f64` throughout the pipeline).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Ridge used by [`lstsq`] when the system is rank-deficient.
pub const LSTSQ_RIDGE: f64 = 1e-10;

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Thin SVD `A = U * diag(S) * Vt` with `k = min(m, n)`.
///
/// `S` is sorted descending; `U` has orthonormal columns and `Vt`
/// orthonormal rows even when `A` is rank-deficient.
#[derive(Debug, Clone)]
pub struct SvdResult<T: Scalar = f64> {
    pub u: Tensor<T>,
    pub s: Vec<T>,
    pub vt: Tensor<T>,
}

/// Eigendecomposition of a symmetric matrix: `values` descending,
/// `vectors` holding the matching eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigResult<T: Scalar = f64> {
    pub values: Vec<T>,
    pub vectors: Tensor<T>,
}

fn require_matrix<'t, T: Scalar>(a: &'t Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if !a.is_matrix() {
        return Err(Error::Shape(format!(
            "{what} expects a matrix, got shape {:?}",
            a.shape()
        )));
    }
    Ok((a.rows(), a.cols()))
}

/// `C = A * B` for row-major matrices.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = require_matrix(a, "matmul")?;
    let (kb, n) = require_matrix(b, "matmul")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: left is {m}x{ka}, right is {kb}x{n}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == T::zero() {
                continue;
            }
            let b_row = b.row(t);
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_it * b_tj;
            }
        }
    }
    Ok(out)
}

/// `A * x` for a matrix and a rank-1 tensor.
pub fn matvec<T: Scalar>(a: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix(a, "matvec")?;
    if x.shape() != [k] {
        return Err(Error::Shape(format!(
            "matvec: matrix is {m}x{k}, vector has shape {:?}",
            x.shape()
        )));
    }
    let mut out = vec![T::zero(); m];
    for (o, i) in out.iter_mut().zip(0..m) {
        *o = a
            .row(i)
            .iter()
            .zip(x.data())
            .map(|(&a_ij, &x_j)| a_ij * x_j)
            .sum();
    }
    Ok(Tensor::from_vec(out))
}

/// Singular value decomposition via one-sided Jacobi.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    let (m, n) = require_matrix(a, "svd")?;
    if m == 0 || n == 0 {
        return Err(Error::Parameter(format!(
            "svd requires at least one row and one column, got {m}x{n}"
        )));
    }
    a.ensure_finite("svd input")?;

    if m < n {
        // Orthogonalize over the smaller dimension: factor the transpose
        // and swap the roles of U and V.
        let t = svd_tall(&a.transpose()?)?;
        let mut u = t.vt.transpose()?;
        let mut vt = t.u.transpose()?;
        apply_svd_sign_convention(&mut u, &mut vt);
        return Ok(SvdResult { u, s: t.s, vt });
    }
    let mut r = svd_tall(a)?;
    apply_svd_sign_convention(&mut r.u, &mut r.vt);
    Ok(r)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn svd_tall<T: Scalar>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    let (m, n) = (a.rows(), a.cols());
    debug_assert!(m >= n);
    let mut g = a.clone();
    let mut v = Tensor::identity(n);
    let tol = T::epsilon() * c(32.0);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut alpha = T::zero();
                let mut beta = T::zero();
                let mut gamma = T::zero();
                for i in 0..m {
                    let gp = g.at(i, p);
                    let gq = g.at(i, q);
                    alpha = alpha + gp * gp;
                    beta = beta + gq * gq;
                    gamma = gamma + gp * gq;
                }
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (beta - alpha) / (gamma + gamma);
                let t = tau.signum() / (tau.abs() + (T::one() + tau * tau).sqrt());
                let cos = T::one() / (T::one() + t * t).sqrt();
                let sin = cos * t;
                rotate_columns(&mut g, p, q, cos, sin);
                rotate_columns(&mut v, p, q, cos, sin);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd did not converge within {MAX_SWEEPS} sweeps on a {m}x{n} matrix"
        )));
    }

    // Column norms are the singular values; sort them descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = (0..n)
        .map(|j| (0..m).map(|i| g.at(i, j) * g.at(i, j)).sum::<T>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let sigma_max = norms[order[0]];
    let zero_tol = sigma_max * T::epsilon() * c((m.max(n)) as f64);

    let mut s = vec![T::zero(); n];
    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    let mut null_cols = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        for j in 0..n {
            vt.set(dst, j, v.at(j, src));
        }
        if norms[src] <= zero_tol {
            // Numerically zero column: direction is noise, rebuild it below.
            null_cols.push(dst);
            continue;
        }
        s[dst] = norms[src];
        for i in 0..m {
            u.set(i, dst, g.at(i, src) / norms[src]);
        }
    }
    complete_orthonormal_columns(&mut u, &null_cols);
    Ok(SvdResult { u, s, vt })
}

fn rotate_columns<T: Scalar>(mat: &mut Tensor<T>, p: usize, q: usize, cos: T, sin: T) {
    let rows = mat.rows();
    for i in 0..rows {
        let vp = mat.at(i, p);
        let vq = mat.at(i, q);
        mat.set(i, p, cos * vp - sin * vq);
        mat.set(i, q, sin * vp + cos * vq);
    }
}

/// Fill the listed columns with unit vectors orthogonal to every other
/// column (Gram-Schmidt against standard basis candidates).
fn complete_orthonormal_columns<T: Scalar>(u: &mut Tensor<T>, null_cols: &[usize]) {
    if null_cols.is_empty() {
        return;
    }
    let (m, k) = (u.rows(), u.cols());
    let mut filled = vec![true; k];
    for &col in null_cols {
        filled[col] = false;
    }
    let mut next_candidate = 0;
    for &col in null_cols {
        while next_candidate < m {
            let mut v = vec![T::zero(); m];
            v[next_candidate] = T::one();
            next_candidate += 1;
            // Two rounds of projection for numerical safety.
            for _ in 0..2 {
                for j in (0..k).filter(|&j| filled[j]) {
                    let dot: T = (0..m).map(|i| u.at(i, j) * v[i]).sum();
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi = *vi - dot * u.at(i, j);
                    }
                }
            }
            let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > c(0.5) {
                for (i, vi) in v.iter().enumerate() {
                    u.set(i, col, *vi / norm);
                }
                filled[col] = true;
                break;
            }
        }
    }
}

/// Make the largest-magnitude entry of every left singular vector
/// nonnegative, flipping the paired right singular vector with it.
fn apply_svd_sign_convention<T: Scalar>(u: &mut Tensor<T>, vt: &mut Tensor<T>) {
    let (m, k) = (u.rows(), u.cols());
    let n = vt.cols();
    for j in 0..k {
        let mut imax = 0;
        let mut best = T::zero();
        for i in 0..m {
            let mag = u.at(i, j).abs();
            if mag > best {
                best = mag;
                imax = i;
            }
        }
        if u.at(imax, j) < T::zero() {
            for i in 0..m {
                u.set(i, j, -u.at(i, j));
            }
            for i in 0..n {
                vt.set(j, i, -vt.at(j, i));
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// The input must be symmetric within `1e-8 * max |a_ij|`; it is
/// symmetrized exactly before iterating.
pub fn sym_eig<T: Scalar>(a: &Tensor<T>) -> Result<EigResult<T>> {
    let (n, n2) = require_matrix(a, "sym_eig")?;
    if n != n2 {
        return Err(Error::Shape(format!(
            "sym_eig expects a square matrix, got {n}x{n2}"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("sym_eig requires n >= 1".into()));
    }
    a.ensure_finite("sym_eig input")?;
    let max_abs = a.max_abs();
    let mut asym = T::zero();
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    if asym > c::<T>(1e-8) * max_abs {
        return Err(Error::Contract(format!(
            "sym_eig input is asymmetric: max |a_ij - a_ji| = {asym} exceeds 1e-8 * {max_abs}"
        )));
    }

    let mut b = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            b.set(i, j, (a.at(i, j) + a.at(j, i)) * c(0.5));
        }
    }
    let mut v = Tensor::identity(n);
    let threshold = T::epsilon() * b.frobenius_norm().max(T::min_positive_value());

    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let bpq = b.at(p, q);
                if bpq.abs() <= threshold {
                    continue;
                }
                rotated = true;
                let tau = (b.at(q, q) - b.at(p, p)) / (bpq + bpq);
                let t = tau.signum() / (tau.abs() + (T::one() + tau * tau).sqrt());
                let cos = T::one() / (T::one() + t * t).sqrt();
                let sin = cos * t;
                rotate_columns(&mut b, p, q, cos, sin);
                rotate_rows(&mut b, p, q, cos, sin);
                rotate_columns(&mut v, p, q, cos, sin);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "sym_eig did not converge within {MAX_SWEEPS} sweeps on a {n}x{n} matrix"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<T> = (0..n).map(|i| b.at(i, i)).collect();
    order.sort_by(|&x, &y| diag[y].partial_cmp(&diag[x]).unwrap());

    let mut values = Vec::with_capacity(n);
    let mut vectors = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        values.push(diag[src]);
        let mut imax = 0;
        let mut best = T::zero();
        for i in 0..n {
            let mag = v.at(i, src).abs();
            if mag > best {
                best = mag;
                imax = i;
            }
        }
        let flip = v.at(imax, src) < T::zero();
        for i in 0..n {
            let val = v.at(i, src);
            vectors.set(i, dst, if flip { -val } else { val });
        }
    }
    Ok(EigResult { values, vectors })
}

fn rotate_rows<T: Scalar>(mat: &mut Tensor<T>, p: usize, q: usize, cos: T, sin: T) {
    let cols = mat.cols();
    for j in 0..cols {
        let vp = mat.at(p, j);
        let vq = mat.at(q, j);
        mat.set(p, j, cos * vp - sin * vq);
        mat.set(q, j, sin * vp + cos * vq);
    }
}

/// Least-squares solve: returns `X` minimizing `|A X - B|_F`.
///
/// For rank-deficient (or underdetermined) `A` this returns the
/// ridge-regularized solution with ridge [`LSTSQ_RIDGE`].
pub fn lstsq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = require_matrix(a, "lstsq")?;
    let (mb, q) = require_matrix(b, "lstsq")?;
    if m != mb {
        return Err(Error::Shape(format!(
            "lstsq row counts disagree: A is {m}x{n}, B is {mb}x{q}"
        )));
    }
    if m == 0 || n == 0 {
        return Err(Error::Parameter("lstsq requires m >= 1 and n >= 1".into()));
    }
    b.ensure_finite("lstsq right-hand side")?;

    let f = svd(a)?;
    let k = f.s.len();
    let sigma_max = f.s[0];
    let rank_tol = sigma_max * T::epsilon() * c((m.max(n)) as f64);
    let rank = f.s.iter().filter(|&&sv| sv > rank_tol).count();
    let deficient = rank < n;

    // Rows of C = U^T B, scaled per singular value.
    let mut coeff = matmul(&f.u.transpose()?, b)?;
    let ridge = c::<T>(LSTSQ_RIDGE);
    for i in 0..k {
        let sv = f.s[i];
        let w = if deficient {
            sv / (sv * sv + ridge)
        } else {
            T::one() / sv
        };
        for j in 0..q {
            coeff.set(i, j, coeff.at(i, j) * w);
        }
    }
    matmul(&f.vt.transpose()?, &coeff)
}
