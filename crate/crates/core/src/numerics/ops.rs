//! Dense kernels: products, normalizations, activations and the causal
//! depthwise convolution, each with the backward pass the trainer needs.
//!
//! Weight matrices are stored `out x in`, so a linear layer is `x · Wᵀ`.

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a (m x k) · b (k x n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return shape_err(format!("matmul {m}x{k} · {k2}x{n}"));
    }
    let mut out = Tensor::zeros([m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            if s != T::zero() {
                axpy(s, &bd[p * n..(p + 1) * n], orow);
            }
        }
    }
    Ok(out)
}

/// `a (m x k) · bᵀ` where `b` is `n x k`. This is the linear-layer product.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return shape_err(format!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ"));
    }
    let mut out = Tensor::zeros([m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            od[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    }
    Ok(out)
}

/// `aᵀ · b` where `a` is `k x m` and `b` is `k x n`. Weight gradients are
/// `matmul_tn(dy, x)`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return shape_err(format!("matmul_tn ({k}x{m})ᵀ · {k2}x{n}"));
    }
    let mut out = Tensor::zeros([m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let s = ad[p * m + i];
            if s != T::zero() {
                axpy(s, brow, &mut od[i * n..(i + 1) * n]);
            }
        }
    }
    Ok(out)
}

/// `x · Wᵀ` for `x: T x in`, `w: out x in`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_nt(x, w)
}

/// Backward of [`linear`]: accumulates `dW += dyᵀ x` and returns `dx = dy · W`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    dw.add_assign(&matmul_tn(dy, x)?)?;
    matmul(dy, w)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid_scalar(x)
}

/// d silu / dx.
#[inline]
pub fn silu_grad_scalar<T: Scalar>(x: T) -> T {
    let s = sigmoid_scalar(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for `y > 0`.
#[inline]
pub fn inv_softplus_scalar<T: Scalar>(y: T) -> T {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !m.is_finite() {
        return m;
    }
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

/// Softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn log_softmax_in_place<T: Scalar>(x: &mut [T]) {
    let lse = logsumexp(x);
    for v in x.iter_mut() {
        *v -= lse;
    }
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        log_softmax_in_place(out.row_mut(r));
    }
    out
}

/// RMSNorm over the last axis: `x / sqrt(mean(x²) + eps) ⊙ gamma`.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.len() != d {
        return shape_err(format!("rmsnorm gamma has {} entries, input width {d}", gamma.len()));
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("rmsnorm eps must be positive".into()));
    }
    let mut out = x.clone();
    let g = gamma.data();
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let inv = T::one() / (ms + eps).sqrt();
        for (v, &gi) in row.iter_mut().zip(g) {
            *v = *v * inv * gi;
        }
    }
    Ok(out)
}

/// Backward of [`rmsnorm`]; accumulates into `dgamma`, returns `dx`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
    dgamma: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if dy.shape() != x.shape() || gamma.len() != d || dgamma.len() != d {
        return shape_err("rmsnorm_backward shapes");
    }
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let g = gamma.data();
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let inv = T::one() / (ms + eps).sqrt();
        let mut proj = T::zero();
        {
            let dg = dgamma.data_mut();
            for j in 0..d {
                dg[j] += dyr[j] * xr[j] * inv;
                proj += dyr[j] * g[j] * xr[j];
            }
        }
        let coef = inv * inv * inv * proj * inv_d;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = inv * dyr[j] * g[j] - coef * xr[j];
        }
    }
    Ok(dx)
}

/// Per-head RMSNorm: the last axis is split into `width / head_dim` heads
/// sharing one `gamma` of length `head_dim`.
pub fn rmsnorm_heads<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let hd = gamma.len();
    if hd == 0 || x.cols() % hd != 0 {
        return shape_err("rmsnorm_heads width not divisible by head dim");
    }
    let flat = x.clone().reshape([x.len() / hd, hd])?;
    rmsnorm(&flat, gamma, eps)?.reshape(x.shape().to_vec())
}

pub fn rmsnorm_heads_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
    dgamma: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let hd = gamma.len();
    let flat_x = x.clone().reshape([x.len() / hd, hd])?;
    let flat_dy = dy.clone().reshape([dy.len() / hd, hd])?;
    rmsnorm_backward(&flat_x, gamma, eps, &flat_dy, dgamma)?.reshape(x.shape().to_vec())
}

/// Per-head L2 normalization `x / sqrt(|x|² + eps)`.
pub fn l2norm_heads<T: Scalar>(x: &Tensor<T>, head_dim: usize, eps: T) -> Tensor<T> {
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(head_dim) {
        let inv = T::one() / (chunk.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn l2norm_heads_backward<T: Scalar>(
    x: &Tensor<T>,
    head_dim: usize,
    eps: T,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for ((xc, dyc), dxc) in x
        .data()
        .chunks(head_dim)
        .zip(dy.data().chunks(head_dim))
        .zip(dx.data_mut().chunks_mut(head_dim))
    {
        let inv = T::one() / (xc.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
        let proj = dot(xc, dyc);
        let inv3 = inv * inv * inv;
        for j in 0..head_dim {
            dxc[j] = inv * dyc[j] - inv3 * proj * xc[j];
        }
    }
    dx
}

/// Causal depthwise convolution. `kernel` is `channels x width`; row `t` of
/// the output is `Σ_k kernel[c,k] · x[t - (width-1) + k, c]` with zeros (or
/// `history` rows, oldest first) before the sequence start.
pub fn causal_conv1d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    causal_conv1d_with_history(x, kernel, None)
}

pub fn causal_conv1d_with_history<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    history: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (steps, c) = (x.rows(), x.cols());
    if kernel.shape().len() != 2 || kernel.rows() != c {
        return shape_err(format!(
            "conv kernel {:?} does not match {c} channels",
            kernel.shape()
        ));
    }
    let w = kernel.cols();
    let hist_rows = history.map_or(0, |h| h.rows());
    if let Some(h) = history {
        if h.cols() != c || hist_rows != w - 1 {
            return shape_err("conv history must be (width-1) x channels");
        }
    }
    let mut out = Tensor::zeros([steps, c]);
    let kd = kernel.data();
    for t in 0..steps {
        for k in 0..w {
            // source index relative to the sequence start
            let src = t as isize - (w as isize - 1) + k as isize;
            let row: &[T] = if src >= 0 {
                x.row(src as usize)
            } else {
                let hi = hist_rows as isize + src;
                match history {
                    Some(h) if hi >= 0 => h.row(hi as usize),
                    _ => continue,
                }
            };
            let orow = out.row_mut(t);
            for ch in 0..c {
                orow[ch] += kd[ch * w + k] * row[ch];
            }
        }
    }
    Ok(out)
}

/// Backward of the causal convolution over a fresh (zero-history) sequence
/// or one that carried `history`. Returns `dx`; accumulates `dkernel`.
pub fn causal_conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    history: Option<&Tensor<T>>,
    dy: &Tensor<T>,
    dkernel: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (steps, c) = (x.rows(), x.cols());
    let w = kernel.cols();
    let hist_rows = history.map_or(0, |h| h.rows());
    let mut dx = Tensor::zeros([steps, c]);
    let kd = kernel.data();
    let (xd, dyd) = (x.data(), dy.data());
    let dxd = dx.data_mut();
    let dk = dkernel.data_mut();
    for t in 0..steps {
        let dyr = &dyd[t * c..(t + 1) * c];
        for k in 0..w {
            let src = t as isize - (w as isize - 1) + k as isize;
            if src >= 0 {
                let s = src as usize;
                for ch in 0..c {
                    dxd[s * c + ch] += kd[ch * w + k] * dyr[ch];
                    dk[ch * w + k] += dyr[ch] * xd[s * c + ch];
                }
            } else if let Some(h) = history {
                let hi = hist_rows as isize + src;
                if hi >= 0 {
                    let hr = h.row(hi as usize);
                    for ch in 0..c {
                        dk[ch * w + k] += dyr[ch] * hr[ch];
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Replicates each head block of `w` (rows grouped by `head_dim`) `group`
/// consecutive times: GQA key/value projections expanded to one per query head.
pub fn repeat_kv<T: Scalar>(w: &Tensor<T>, head_dim: usize, group: usize) -> Result<Tensor<T>> {
    if group < 1 {
        return Err(Error::InvalidArgument("repeat_kv group must be >= 1".into()));
    }
    if head_dim == 0 || w.rows() % head_dim != 0 {
        return shape_err(format!(
            "repeat_kv: {} rows not divisible by head dim {head_dim}",
            w.rows()
        ));
    }
    let heads = w.rows() / head_dim;
    let cols = w.cols();
    let block = head_dim * cols;
    let mut data = Vec::with_capacity(w.len() * group);
    for h in 0..heads {
        let src = &w.data()[h * block..(h + 1) * block];
        for _ in 0..group {
            data.extend_from_slice(src);
        }
    }
    Tensor::new([heads * group * head_dim, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        SeededRng::new(seed).uniform_tensor(shape, 1.0)
    }

    #[test]
    fn matmul_variants_agree() {
        let a = rand_t(&[5, 7], 1);
        let b = rand_t(&[7, 3], 2);
        let direct = matmul(&a, &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(direct.max_abs_diff(&nt).unwrap() < 1e-12);
        assert!(direct.max_abs_diff(&tn).unwrap() < 1e-12);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn softmax_of_zero_is_uniform_and_sigmoid_half() {
        let s = softmax(&Tensor::<f64>::zeros([2, 4]));
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    }

    #[test]
    fn activations_match_scalar_loops() {
        let x = rand_t(&[3, 11], 3).scale(4.0);
        let sm = softmax(&x);
        let lsm = log_softmax(&x);
        for r in 0..3 {
            let row = x.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..11 {
                assert!((sm.at(r, j) - row[j].exp() / z).abs() < 1e-12);
                assert!((lsm.at(r, j) - (row[j] - z.ln())).abs() < 1e-12);
            }
        }
        for &v in x.data() {
            assert!((silu_scalar(v) - v / (1.0 + (-v).exp())).abs() < 1e-12);
            assert!((softplus_scalar(v) - (1.0 + v.exp()).ln()).abs() < 1e-12);
            assert!((inv_softplus_scalar(softplus_scalar(v)) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn rmsnorm_examples() {
        let g = Tensor::full([4], 1.0f64);
        let z = rmsnorm(&Tensor::zeros([1, 4]), &g, 1e-6).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let ones = rmsnorm(&Tensor::full([1, 4], 1.0), &g, 1e-12).unwrap();
        assert!(ones.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(rmsnorm(&Tensor::full([1, 4], 1.0), &Tensor::full([3], 1.0), 1e-6).is_err());

        let x = rand_t(&[2, 16], 4);
        let gamma = rand_t(&[16], 5);
        let y = rmsnorm(&x, &gamma, 1e-6).unwrap();
        for r in 0..2 {
            let row = x.row(r);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0 + 1e-6).sqrt();
            for j in 0..16 {
                assert!((y.at(r, j) - row[j] / rms * gamma.data()[j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rmsnorm_backward_matches_finite_differences() {
        let x = rand_t(&[3, 6], 6);
        let g = rand_t(&[6], 7);
        let w = rand_t(&[3, 6], 8);
        let loss = |x: &Tensor<f64>, g: &Tensor<f64>| {
            rmsnorm(x, g, 1e-5).unwrap().mul(&w).unwrap().sum()
        };
        let mut dg = Tensor::zeros([6]);
        let dx = rmsnorm_backward(&x, &g, 1e-5, &w, &mut dg).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &g) - loss(&xm, &g)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "{fd} vs {}", dx.data()[i]);
        }
        for i in 0..g.len() {
            let mut gp = g.clone();
            gp.data_mut()[i] += h;
            let mut gm = g.clone();
            gm.data_mut()[i] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            assert!((fd - dg.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn l2norm_backward_matches_finite_differences() {
        let x = rand_t(&[2, 6], 9);
        let w = rand_t(&[2, 6], 10);
        let f = |x: &Tensor<f64>| l2norm_heads(x, 3, 1e-6).mul(&w).unwrap().sum();
        let dx = l2norm_heads_backward(&x, 3, 1e-6, &w);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            assert!(((f(&xp) - f(&xm)) / (2.0 * h) - dx.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_examples_and_oracle() {
        let k = rand_t(&[3, 4], 11);
        let zeros = causal_conv1d(&Tensor::<f64>::zeros([5, 3]), &k).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));

        let delta = Tensor::from_fn([3, 4], |i| if i % 4 == 3 { 1.0 } else { 0.0 });
        let x1 = rand_t(&[1, 3], 12);
        assert_eq!(causal_conv1d(&x1, &delta).unwrap(), x1);

        let x = rand_t(&[8, 3], 13);
        let y = causal_conv1d(&x, &k).unwrap();
        for t in 0..8 {
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..4 {
                    let s = t as i64 - 3 + j as i64;
                    if s >= 0 {
                        acc += k.at(c, j) * x.at(s as usize, c);
                    }
                }
                assert!((y.at(t, c) - acc).abs() < 1e-7);
            }
        }
        assert!(causal_conv1d(&x, &rand_t(&[2, 4], 1)).is_err());
    }

    #[test]
    fn conv_with_history_continues_sequence() {
        let k = rand_t(&[2, 4], 14);
        let x = rand_t(&[10, 2], 15);
        let full = causal_conv1d(&x, &k).unwrap();
        let tail = causal_conv1d_with_history(&x.slice_rows(6, 10), &k, Some(&x.slice_rows(3, 6)))
            .unwrap();
        assert!(full.slice_rows(6, 10).max_abs_diff(&tail).unwrap() < 1e-14);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let k = rand_t(&[2, 4], 16);
        let x = rand_t(&[5, 2], 17);
        let hist = rand_t(&[3, 2], 18);
        let w = rand_t(&[5, 2], 19);
        let f = |x: &Tensor<f64>, k: &Tensor<f64>| {
            causal_conv1d_with_history(x, k, Some(&hist)).unwrap().mul(&w).unwrap().sum()
        };
        let mut dk = Tensor::zeros([2, 4]);
        let dx = causal_conv1d_backward(&x, &k, Some(&hist), &w, &mut dk).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            assert!(((f(&p, &k) - f(&m, &k)) / (2.0 * h) - dx.data()[i]).abs() < 1e-6);
        }
        for i in 0..k.len() {
            let mut p = k.clone();
            p.data_mut()[i] += h;
            let mut m = k.clone();
            m.data_mut()[i] -= h;
            assert!(((f(&x, &p) - f(&x, &m)) / (2.0 * h) - dk.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn repeat_kv_examples() {
        let w = rand_t(&[4, 3], 20);
        assert_eq!(repeat_kv(&w, 2, 1).unwrap(), w);
        let ab = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let r = repeat_kv(&ab, 1, 2).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        assert!(repeat_kv(&w, 2, 0).is_err());
        assert!(repeat_kv(&w, 3, 2).is_err());
    }
}
