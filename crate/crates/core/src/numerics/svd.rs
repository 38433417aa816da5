//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.

use crate::error::{Error, Result};
use crate::numerics::ops::dot;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Top-`r` singular triplets: `A ≈ U · diag(sigma) · Vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdResult<T> {
    /// `m x r`, orthonormal columns.
    pub u: Tensor<T>,
    /// Length `r`, non-negative and non-increasing.
    pub sigma: Tensor<T>,
    /// `n x r`, orthonormal columns.
    pub v: Tensor<T>,
}

impl<T: Scalar> SvdResult<T> {
    /// `diag(sigma) · Vᵀ` (`r x n`), the down-projection factor.
    pub fn sigma_vt(&self) -> Tensor<T> {
        let r = self.sigma.len();
        let n = self.v.rows();
        let mut out = Tensor::zeros([r, n]);
        for i in 0..r {
            let s = self.sigma.data()[i];
            for j in 0..n {
                out.set(i, j, s * self.v.at(j, i));
            }
        }
        out
    }

    /// `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> Tensor<T> {
        super::ops::matmul(&self.u, &self.sigma_vt()).expect("consistent factors")
    }
}

const MAX_SWEEPS: usize = 80;

/// Computes the `r` largest singular values of `a` (`m x n`) and their
/// vectors. Output is deterministic: each column of `U` is signed so its
/// largest-magnitude entry is positive.
pub fn svd<T: Scalar>(a: &Tensor<T>, r: usize) -> Result<SvdResult<T>> {
    if a.shape().len() != 2 {
        return Err(Error::Shape(format!("svd needs a matrix, got {:?}", a.shape())));
    }
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 || r == 0 || r > m.min(n) {
        return Err(Error::Rank { rank: r, rows: m, cols: n });
    }
    a.ensure_finite("svd input")?;

    if m < n {
        let t = svd(&a.transpose(), r)?;
        let mut out = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut out);
        return Ok(out);
    }

    // columns of A stored as rows for contiguous access
    let mut cols = a.transpose();
    let mut vt = Tensor::<T>::eye(n);
    let tol = T::epsilon() * T::of(m as f64).sqrt();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = cols.row(p);
                    let cq = cols.row(q);
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<T> = (0..n).map(|j| dot(cols.row(j), cols.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));

    let smax = norms[order[0]];
    let negligible = smax * T::epsilon() * T::of((m.max(n)) as f64);

    // U columns as rows, completed to an orthonormal set where sigma ~ 0
    let mut u_rows: Vec<Vec<T>> = Vec::with_capacity(r);
    let mut sigma = Vec::with_capacity(r);
    let mut v_rows: Vec<Vec<T>> = Vec::with_capacity(r);
    for &j in order.iter().take(r) {
        let s = norms[j];
        if s > negligible && s > T::zero() {
            u_rows.push(cols.row(j).iter().map(|&x| x / s).collect());
            sigma.push(s);
        } else {
            u_rows.push(complete_basis(&u_rows, m));
            sigma.push(T::zero());
        }
        v_rows.push(vt.row(j).to_vec());
    }

    let u = Tensor::from_rows(&u_rows)?.transpose();
    let v = Tensor::from_rows(&v_rows)?.transpose();
    let mut out = SvdResult {
        u,
        sigma: Tensor::vector(sigma),
        v,
    };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate_rows<T: Scalar>(t: &mut Tensor<T>, p: usize, q: usize, c: T, s: T) {
    let w = t.cols();
    let data = t.data_mut();
    for k in 0..w {
        let a = data[p * w + k];
        let b = data[q * w + k];
        data[p * w + k] = c * a - s * b;
        data[q * w + k] = s * a + c * b;
    }
}

/// Unit vector orthogonal to every row in `basis` (Gram-Schmidt over e_i).
fn complete_basis<T: Scalar>(basis: &[Vec<T>], m: usize) -> Vec<T> {
    let mut best: Option<(T, Vec<T>)> = None;
    for i in 0..m {
        let mut v = vec![T::zero(); m];
        v[i] = T::one();
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            best = Some((n, v));
        }
        if n > T::of(0.5) {
            break;
        }
    }
    let (n, v) = best.expect("m >= 1");
    v.into_iter().map(|x| x / n).collect()
}

fn fix_signs<T: Scalar>(out: &mut SvdResult<T>) {
    let (m, r) = (out.u.rows(), out.u.cols());
    let n = out.v.rows();
    for j in 0..r {
        let mut idx = 0;
        let mut best = T::neg_infinity();
        for i in 0..m {
            let a = out.u.at(i, j).abs();
            if a > best {
                best = a;
                idx = i;
            }
        }
        if out.u.at(idx, j) < T::zero() {
            for i in 0..m {
                let x = out.u.at(i, j);
                out.u.set(i, j, -x);
            }
            for i in 0..n {
                let x = out.v.at(i, j);
                out.v.set(i, j, -x);
            }
        }
    }
}
