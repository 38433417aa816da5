//! Causal scaled dot-product attention shared by the teacher's GQA mixer and
//! the MLA mixer, with its backward pass.

use crate::error::{shape_err, Result};
use crate::numerics::{dot, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub n_heads: usize,
    /// Key/value heads; each serves `n_heads / n_kv_heads` query heads.
    pub n_kv_heads: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
}

/// Softmax probabilities kept for the backward pass, `heads x Tq x Tk`.
#[derive(Clone, Debug)]
pub struct AttnProbs<T> {
    probs: Vec<T>,
    tq: usize,
    tk: usize,
}

impl<T: Scalar> AttnProbs<T> {
    /// Probability row of query `i` in head `h` (masked entries are zero).
    pub fn row(&self, h: usize, i: usize) -> &[T] {
        let base = (h * self.tq + i) * self.tk;
        &self.probs[base..base + self.tk]
    }
}

fn check<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dims: AttnDims,
    q_offset: usize,
) -> Result<()> {
    if dims.n_kv_heads == 0 || dims.n_heads % dims.n_kv_heads != 0 {
        return shape_err("attention heads not divisible by kv heads");
    }
    if q.cols() != dims.n_heads * dims.qk_dim
        || k.cols() != dims.n_kv_heads * dims.qk_dim
        || v.cols() != dims.n_kv_heads * dims.v_dim
        || k.rows() != v.rows()
    {
        return shape_err(format!(
            "attention q {:?} k {:?} v {:?} for {dims:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if q_offset + q.rows() > k.rows() {
        return shape_err("queries extend past the available keys");
    }
    Ok(())
}

/// Query row `i` sits at absolute position `q_offset + i` and sees keys
/// `0..=q_offset + i`.
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dims: AttnDims,
    scale: T,
    q_offset: usize,
) -> Result<(Tensor<T>, AttnProbs<T>)> {
    check(q, k, v, dims, q_offset)?;
    let (tq, tk) = (q.rows(), k.rows());
    let group = dims.n_heads / dims.n_kv_heads;
    let (dq, dv) = (dims.qk_dim, dims.v_dim);
    let mut out = Tensor::zeros([tq, dims.n_heads * dv]);
    let mut probs = vec![T::zero(); dims.n_heads * tq * tk];
    let (kd, vd) = (k.data(), v.data());
    let (kw, vw) = (k.cols(), v.cols());
    for h in 0..dims.n_heads {
        let kvh = h / group;
        for i in 0..tq {
            let visible = q_offset + i + 1;
            let qrow = &q.row(i)[h * dq..(h + 1) * dq];
            let prow = &mut probs[(h * tq + i) * tk..(h * tq + i) * tk + tk];
            let mut m = T::neg_infinity();
            for j in 0..visible {
                let s = dot(qrow, &kd[j * kw + kvh * dq..j * kw + (kvh + 1) * dq]) * scale;
                prow[j] = s;
                m = m.max(s);
            }
            let mut z = T::zero();
            for p in prow.iter_mut().take(visible) {
                *p = (*p - m).exp();
                z += *p;
            }
            let orow = &mut out.row_mut(i)[h * dv..(h + 1) * dv];
            for j in 0..visible {
                prow[j] /= z;
                let p = prow[j];
                let vrow = &vd[j * vw + kvh * dv..j * vw + (kvh + 1) * dv];
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o += p * x;
                }
            }
        }
    }
    Ok((out, AttnProbs { probs, tq, tk }))
}

/// Gradients `(dq, dk, dv)` of [`causal_attention`].
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dims: AttnDims,
    scale: T,
    q_offset: usize,
    probs: &AttnProbs<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check(q, k, v, dims, q_offset)?;
    let (tq, tk) = (q.rows(), k.rows());
    let group = dims.n_heads / dims.n_kv_heads;
    let (dqk, dvd) = (dims.qk_dim, dims.v_dim);
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let (kw, vw) = (k.cols(), v.cols());
    let mut dp = vec![T::zero(); tk];
    for h in 0..dims.n_heads {
        let kvh = h / group;
        for i in 0..tq {
            let visible = q_offset + i + 1;
            let prow = probs.row(h, i);
            let drow = &dout.row(i)[h * dvd..(h + 1) * dvd];
            let mut weighted = T::zero();
            for j in 0..visible {
                let vrow = &v.data()[j * vw + kvh * dvd..j * vw + (kvh + 1) * dvd];
                dp[j] = dot(drow, vrow);
                weighted += dp[j] * prow[j];
                let dvrow = &mut dv.data_mut()[j * vw + kvh * dvd..j * vw + (kvh + 1) * dvd];
                for (g, &d) in dvrow.iter_mut().zip(drow) {
                    *g += prow[j] * d;
                }
            }
            let qrow = &q.row(i)[h * dqk..(h + 1) * dqk];
            for j in 0..visible {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let krow = &k.data()[j * kw + kvh * dqk..j * kw + (kvh + 1) * dqk];
                let dqrow = &mut dq.row_mut(i)[h * dqk..(h + 1) * dqk];
                for (g, &x) in dqrow.iter_mut().zip(krow) {
                    *g += ds * x;
                }
                let dkrow = &mut dk.data_mut()[j * kw + kvh * dqk..j * kw + (kvh + 1) * dqk];
                for (g, &x) in dkrow.iter_mut().zip(qrow) {
                    *g += ds * x;
                }
            }
        }
    }
    Ok((dq, dk, dv))
}
