//! Gated DeltaNet mixer.
//!
//! Each head keeps a `d_k/H x d_v/H` state updated per token by
//! `S_t = e^{g_t} (I - β_t k_t k_tᵀ) S_{t-1} + β_t k_t v_tᵀ` and read as
//! `S_tᵀ q_t / sqrt(d_k/H)`. The read is RMS-normalized per head, gated by
//! `SiLU(W_G x)` and projected back to the model width.

use serde::{Deserialize, Serialize};

use crate::checkpoint::TransformerConfig;
use crate::error::{Error, Result};
use crate::numerics::{
    causal_conv1d_backward, causal_conv1d_with_history, dot, inv_softplus_scalar,
    l2norm_heads, l2norm_heads_backward, linear, linear_backward, repeat_kv, rmsnorm_heads,
    rmsnorm_heads_backward, sigmoid_scalar, silu_grad_scalar, silu_scalar, softplus_scalar,
    Tensor,
};
use crate::params::impl_params;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::teacher::GqaWeights;

/// Epsilon of the query/key L2 normalization.
const L2_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub conv_width: usize,
    pub chunk: usize,
    pub eps: f64,
}

impl GdnConfig {
    /// `d_k = floor(0.75 d)`, `d_v = 2 d_k`, width-4 convolutions, chunks of 64.
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        let d_k = d_model * 3 / 4;
        let cfg = Self {
            d_model,
            n_heads,
            d_k,
            d_v: 2 * d_k,
            conv_width: 4,
            chunk: 64,
            eps: 1e-6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_k == 0 || self.conv_width == 0 || self.chunk == 0 {
            return Err(Error::Config("gdn dimensions must be positive".into()));
        }
        if self.d_k % self.n_heads != 0 || self.d_v % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "gdn d_k {} and d_v {} must be divisible by {} heads",
                self.d_k, self.d_v, self.n_heads
            )));
        }
        if self.d_v != 2 * self.d_k {
            return Err(Error::Config("gdn d_v must equal 2·d_k".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("gdn eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_k(&self) -> usize {
        self.d_k / self.n_heads
    }

    pub fn head_v(&self) -> usize {
        self.d_v / self.n_heads
    }

    /// State elements per sequence, independent of its length.
    pub fn state_elements(&self) -> usize {
        self.n_heads * self.head_k() * self.head_v()
    }
}

/// Exact mixer parameter count: five projections, two gate projections,
/// per-head decay parameters, depthwise conv kernels and the output norm.
pub fn gdn_param_count(cfg: &GdnConfig) -> usize {
    let (d, h, dk, dv) = (cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v);
    let projections = 2 * dk * d + 3 * dv * d;
    let gates = 2 * h * d;
    let decay = 2 * h;
    let conv = (2 * dk + dv) * cfg.conv_width;
    let norm = cfg.head_v();
    projections + gates + decay + conv + norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdnBlockWeights<T> {
    /// `d_k x d`
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    /// `d_v x d`
    pub wv: Tensor<T>,
    pub wg: Tensor<T>,
    /// `d x d_v`
    pub wo: Tensor<T>,
    /// `H x d`
    pub w_alpha: Tensor<T>,
    pub w_beta: Tensor<T>,
    pub a_log: Tensor<T>,
    pub dt_bias: Tensor<T>,
    /// `channels x conv_width`
    pub conv_q: Tensor<T>,
    pub conv_k: Tensor<T>,
    pub conv_v: Tensor<T>,
    /// Shared per-head output norm gain, length `d_v/H`.
    pub out_norm: Tensor<T>,
}

impl_params!(GdnBlockWeights {
    wq, wk, wv, wg, wo, w_alpha, w_beta, a_log, dt_bias, conv_q, conv_k, conv_v, out_norm
});

impl<T: Scalar> GdnBlockWeights<T> {
    pub fn zeros(cfg: &GdnConfig) -> Self {
        let (d, h, dk, dv, w) = (cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, cfg.conv_width);
        Self {
            wq: Tensor::zeros([dk, d]),
            wk: Tensor::zeros([dk, d]),
            wv: Tensor::zeros([dv, d]),
            wg: Tensor::zeros([dv, d]),
            wo: Tensor::zeros([d, dv]),
            w_alpha: Tensor::zeros([h, d]),
            w_beta: Tensor::zeros([h, d]),
            a_log: Tensor::zeros([h]),
            dt_bias: Tensor::zeros([h]),
            conv_q: Tensor::zeros([dk, w]),
            conv_k: Tensor::zeros([dk, w]),
            conv_v: Tensor::zeros([dv, w]),
            out_norm: Tensor::full([cfg.head_v()], T::one()),
        }
    }

    /// Default random initialization: projections `U(±1/sqrt(fan_in))`,
    /// `A_log = ln U[1,16]`, `Δ_bias = softplus⁻¹(U[1e-3, 1e-1])`, conv kernels
    /// `U(±1/sqrt(width))`, output norm gain 1.
    pub fn random(cfg: &GdnConfig, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, 0x6d6e);
        let (d, h, dk, dv, w) = (cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, cfg.conv_width);
        let sd = 1.0 / (d as f64).sqrt();
        let sw = 1.0 / (w as f64).sqrt();
        Self {
            wq: rng.uniform_tensor(&[dk, d], sd),
            wk: rng.uniform_tensor(&[dk, d], sd),
            wv: rng.uniform_tensor(&[dv, d], sd),
            wg: rng.uniform_tensor(&[dv, d], sd),
            wo: rng.uniform_tensor(&[d, dv], 1.0 / (dv as f64).sqrt()),
            w_alpha: rng.uniform_tensor(&[h, d], sd),
            w_beta: rng.uniform_tensor(&[h, d], sd),
            a_log: Tensor::from_fn([h], |_| T::of(rng.uniform(1.0, 16.0).ln())),
            dt_bias: Tensor::from_fn([h], |_| T::of(inv_softplus_scalar(rng.uniform(1e-3, 1e-1)))),
            conv_q: rng.uniform_tensor(&[dk, w], sw),
            conv_k: rng.uniform_tensor(&[dk, w], sw),
            conv_v: rng.uniform_tensor(&[dv, w], sw),
            out_norm: Tensor::full([cfg.head_v()], T::one()),
        }
    }
}

/// Recurrent state carried between calls: the per-head associative memory
/// and the last `conv_width - 1` pre-convolution rows of q, k and v.
#[derive(Clone, Debug, PartialEq)]
pub struct GdnState<T> {
    /// `H x d_k/H x d_v/H`
    pub s: Tensor<T>,
    pub q_tail: Tensor<T>,
    pub k_tail: Tensor<T>,
    pub v_tail: Tensor<T>,
}

impl<T: Scalar> GdnState<T> {
    pub fn new(cfg: &GdnConfig) -> Self {
        let tail = cfg.conv_width - 1;
        Self {
            s: Tensor::zeros([cfg.n_heads, cfg.head_k(), cfg.head_v()]),
            q_tail: Tensor::zeros([tail, cfg.d_k]),
            k_tail: Tensor::zeros([tail, cfg.d_k]),
            v_tail: Tensor::zeros([tail, cfg.d_v]),
        }
    }

    /// Elements held per sequence (state plus convolution tails).
    pub fn elements(&self) -> usize {
        self.s.len() + self.q_tail.len() + self.k_tail.len() + self.v_tail.len()
    }
}

/// Last `rows` rows of `history` followed by `x`.
fn tail<T: Scalar>(history: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = history.rows();
    let joined = Tensor::vstack(&[history, x])?;
    Ok(joined.slice_rows(joined.rows() - rows, joined.rows()))
}

/// Per-token recurrence inputs.
struct Mixed<T> {
    q_pre: Tensor<T>,
    k_pre: Tensor<T>,
    v_pre: Tensor<T>,
    q_conv: Tensor<T>,
    k_conv: Tensor<T>,
    v_conv: Tensor<T>,
    q_act: Tensor<T>,
    k_act: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    alpha_pre: Tensor<T>,
    /// Log decay `g`, `T x H`, strictly negative.
    g: Tensor<T>,
    beta: Tensor<T>,
}

fn prepare<T: Scalar>(
    w: &GdnBlockWeights<T>,
    cfg: &GdnConfig,
    x: &Tensor<T>,
    state: Option<&GdnState<T>>,
) -> Result<Mixed<T>> {
    if x.cols() != cfg.d_model {
        return Err(Error::Shape(format!("gdn input width {} != {}", x.cols(), cfg.d_model)));
    }
    let eps = T::of(L2_EPS);
    let q_pre = linear(x, &w.wq)?;
    let k_pre = linear(x, &w.wk)?;
    let v_pre = linear(x, &w.wv)?;
    let q_conv = causal_conv1d_with_history(&q_pre, &w.conv_q, state.map(|s| &s.q_tail))?;
    let k_conv = causal_conv1d_with_history(&k_pre, &w.conv_k, state.map(|s| &s.k_tail))?;
    let v_conv = causal_conv1d_with_history(&v_pre, &w.conv_v, state.map(|s| &s.v_tail))?;
    let q_act = q_conv.map(silu_scalar);
    let k_act = k_conv.map(silu_scalar);
    let v = v_conv.map(silu_scalar);
    let q = l2norm_heads(&q_act, cfg.head_k(), eps);
    let k = l2norm_heads(&k_act, cfg.head_k(), eps);

    let mut alpha_pre = linear(x, &w.w_alpha)?;
    let h = cfg.n_heads;
    for r in 0..alpha_pre.rows() {
        for (a, &b) in alpha_pre.row_mut(r).iter_mut().zip(w.dt_bias.data()) {
            *a += b;
        }
    }
    let g = Tensor::from_fn(alpha_pre.shape().to_vec(), |i| {
        -w.a_log.data()[i % h].exp() * softplus_scalar(alpha_pre.data()[i])
    });
    let beta = linear(x, &w.w_beta)?.map(sigmoid_scalar);
    Ok(Mixed {
        q_pre,
        k_pre,
        v_pre,
        q_conv,
        k_conv,
        v_conv,
        q_act,
        k_act,
        q,
        k,
        v,
        alpha_pre,
        g,
        beta,
    })
}

fn next_state<T: Scalar>(m: &Mixed<T>, s: Tensor<T>, state: Option<&GdnState<T>>, cfg: &GdnConfig) -> Result<GdnState<T>> {
    let fresh;
    let prev = match state {
        Some(p) => p,
        None => {
            fresh = GdnState::new(cfg);
            &fresh
        }
    };
    Ok(GdnState {
        s,
        q_tail: tail(&prev.q_tail, &m.q_pre)?,
        k_tail: tail(&prev.k_tail, &m.k_pre)?,
        v_tail: tail(&prev.v_tail, &m.v_pre)?,
    })
}

/// Token-by-token recurrence. Returns the raw reads (`T x d_v`), the final
/// state and, if requested, every intermediate state `S_0..S_T`.
fn recurrence_sequential<T: Scalar>(
    cfg: &GdnConfig,
    m: &Mixed<T>,
    s0: &Tensor<T>,
    keep: bool,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (h, dk, dv) = (cfg.n_heads, cfg.head_k(), cfg.head_v());
    let steps = m.q.rows();
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut s = s0.clone();
    let mut out = Tensor::zeros([steps, cfg.d_v]);
    let block = dk * dv;
    let mut history = Vec::new();
    if keep {
        history.reserve((steps + 1) * s.len());
        history.extend_from_slice(s.data());
    }
    let mut u = vec![T::zero(); dv];
    for t in 0..steps {
        for head in 0..h {
            let q = &m.q.row(t)[head * dk..(head + 1) * dk];
            let k = &m.k.row(t)[head * dk..(head + 1) * dk];
            let v = &m.v.row(t)[head * dv..(head + 1) * dv];
            let a = m.g.at(t, head).exp();
            let beta = m.beta.at(t, head);
            let sh = &mut s.data_mut()[head * block..(head + 1) * block];
            u.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..dk {
                for j in 0..dv {
                    u[j] += k[i] * sh[i * dv + j];
                }
            }
            for j in 0..dv {
                u[j] = beta * (v[j] - a * u[j]);
            }
            for i in 0..dk {
                for j in 0..dv {
                    sh[i * dv + j] = a * sh[i * dv + j] + k[i] * u[j];
                }
            }
            let o = &mut out.row_mut(t)[head * dv..(head + 1) * dv];
            for i in 0..dk {
                let qi = q[i] * scale;
                for j in 0..dv {
                    o[j] += qi * sh[i * dv + j];
                }
            }
        }
        if keep {
            history.extend_from_slice(s.data());
        }
    }
    (out, s, history)
}

/// Chunk-parallel form of [`recurrence_sequential`]. Within a chunk the
/// delta-rule corrections are solved with a unit lower-triangular system
/// (WY form); only the state crosses chunk boundaries.
fn recurrence_chunked<T: Scalar>(cfg: &GdnConfig, m: &Mixed<T>, s0: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (h, dk, dv) = (cfg.n_heads, cfg.head_k(), cfg.head_v());
    let steps = m.q.rows();
    let scale = T::one() / T::of(dk as f64).sqrt();
    let block = dk * dv;
    let mut s = s0.clone();
    let mut out = Tensor::zeros([steps, cfg.d_v]);
    let c = cfg.chunk;
    let mut start = 0;
    while start < steps {
        let len = c.min(steps - start);
        for head in 0..h {
            let krow = |i: usize| &m.k.row(start + i)[head * dk..(head + 1) * dk];
            let qrow = |i: usize| &m.q.row(start + i)[head * dk..(head + 1) * dk];
            let vrow = |i: usize| &m.v.row(start + i)[head * dv..(head + 1) * dv];
            let beta: Vec<T> = (0..len).map(|i| m.beta.at(start + i, head)).collect();
            let mut gamma = Vec::with_capacity(len);
            let mut acc = T::zero();
            for i in 0..len {
                acc += m.g.at(start + i, head);
                gamma.push(acc);
            }
            // A_ij = β_i e^{γ_i - γ_j} k_i·k_j for j < i
            let mut a = vec![T::zero(); len * len];
            for i in 0..len {
                for j in 0..i {
                    a[i * len + j] = beta[i] * (gamma[i] - gamma[j]).exp() * dot(krow(i), krow(j));
                }
            }
            let sh = &s.data()[head * block..(head + 1) * block];
            // rhs_i = β_i v_i - β_i e^{γ_i} S0ᵀ k_i, then forward substitution
            let mut u = vec![T::zero(); len * dv];
            for i in 0..len {
                let k = krow(i);
                let v = vrow(i);
                let decay = beta[i] * gamma[i].exp();
                let ui = &mut u[i * dv..(i + 1) * dv];
                for j in 0..dv {
                    ui[j] = beta[i] * v[j];
                }
                for p in 0..dk {
                    let kp = decay * k[p];
                    for j in 0..dv {
                        ui[j] -= kp * sh[p * dv + j];
                    }
                }
            }
            for i in 0..len {
                for j in 0..i {
                    let aij = a[i * len + j];
                    if aij == T::zero() {
                        continue;
                    }
                    let (done, rest) = u.split_at_mut(i * dv);
                    let uj = &done[j * dv..(j + 1) * dv];
                    for (x, &y) in rest[..dv].iter_mut().zip(uj) {
                        *x -= aij * y;
                    }
                }
            }
            // outputs
            for i in 0..len {
                let q = qrow(i);
                let o = &mut out.row_mut(start + i)[head * dv..(head + 1) * dv];
                let decay = gamma[i].exp() * scale;
                for p in 0..dk {
                    let qp = decay * q[p];
                    for j in 0..dv {
                        o[j] += qp * sh[p * dv + j];
                    }
                }
                for jt in 0..=i {
                    let wgt = scale * (gamma[i] - gamma[jt]).exp() * dot(q, krow(jt));
                    for (x, &y) in o.iter_mut().zip(&u[jt * dv..(jt + 1) * dv]) {
                        *x += wgt * y;
                    }
                }
            }
            // state update
            let last = gamma[len - 1];
            let mut next = vec![T::zero(); block];
            let total = last.exp();
            for (n, &x) in next.iter_mut().zip(sh) {
                *n = total * x;
            }
            for jt in 0..len {
                let k = krow(jt);
                let decay = (last - gamma[jt]).exp();
                let uj = &u[jt * dv..(jt + 1) * dv];
                for p in 0..dk {
                    let kp = decay * k[p];
                    for j in 0..dv {
                        next[p * dv + j] += kp * uj[j];
                    }
                }
            }
            s.data_mut()[head * block..(head + 1) * block].copy_from_slice(&next);
        }
        start += len;
    }
    (out, s)
}

struct Finished<T> {
    y: Tensor<T>,
    normed: Tensor<T>,
    gate_pre: Tensor<T>,
    gated: Tensor<T>,
}

fn finish<T: Scalar>(w: &GdnBlockWeights<T>, cfg: &GdnConfig, x: &Tensor<T>, o: &Tensor<T>) -> Result<Finished<T>> {
    let normed = rmsnorm_heads(o, &w.out_norm, T::of(cfg.eps))?;
    let gate_pre = linear(x, &w.wg)?;
    let gated = normed.zip_map(&gate_pre, |n, g| n * silu_scalar(g))?;
    let y = linear(&gated, &w.wo)?;
    Ok(Finished {
        y,
        normed,
        gate_pre,
        gated,
    })
}

/// Recurrent forward. With `state` the sequence continues a previous call;
/// the returned state continues this one.
pub fn gdn_forward_sequential<T: Scalar>(
    w: &GdnBlockWeights<T>,
    cfg: &GdnConfig,
    x: &Tensor<T>,
    state: Option<&GdnState<T>>,
) -> Result<(Tensor<T>, GdnState<T>)> {
    let m = prepare(w, cfg, x, state)?;
    let s0 = state.map_or_else(|| GdnState::new(cfg).s, |s| s.s.clone());
    let (o, s, _) = recurrence_sequential(cfg, &m, &s0, false);
    let y = finish(w, cfg, x, &o)?.y;
    Ok((y, next_state(&m, s, state, cfg)?))
}

/// Chunk-parallel forward; numerically equivalent to the sequential form.
pub fn gdn_forward_chunked<T: Scalar>(
    w: &GdnBlockWeights<T>,
    cfg: &GdnConfig,
    x: &Tensor<T>,
    state: Option<&GdnState<T>>,
) -> Result<(Tensor<T>, GdnState<T>)> {
    let m = prepare(w, cfg, x, state)?;
    let s0 = state.map_or_else(|| GdnState::new(cfg).s, |s| s.s.clone());
    let (o, s) = recurrence_chunked(cfg, &m, &s0);
    let y = finish(w, cfg, x, &o)?.y;
    Ok((y, next_state(&m, s, state, cfg)?))
}

pub struct GdnTape<T> {
    x: Tensor<T>,
    m: Mixed<T>,
    states: Vec<T>,
    o: Tensor<T>,
    fin: Finished<T>,
}

impl<T: Scalar> GdnTape<T> {
    /// Per-token log decays `g` (`T x H`).
    pub fn log_decay(&self) -> &Tensor<T> {
        &self.m.g
    }

    pub fn beta(&self) -> &Tensor<T> {
        &self.m.beta
    }
}

/// Fresh-state forward that records what [`gdn_backward`] needs.
pub fn gdn_forward_tape<T: Scalar>(
    w: &GdnBlockWeights<T>,
    cfg: &GdnConfig,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, GdnTape<T>)> {
    let m = prepare(w, cfg, x, None)?;
    let (o, _, states) = recurrence_sequential(cfg, &m, &GdnState::new(cfg).s, true);
    let fin = finish(w, cfg, x, &o)?;
    Ok((
        fin.y.clone(),
        GdnTape {
            x: x.clone(),
            m,
            states,
            o,
            fin,
        },
    ))
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub fn gdn_backward<T: Scalar>(
    w: &GdnBlockWeights<T>,
    cfg: &GdnConfig,
    tape: &GdnTape<T>,
    dy: &Tensor<T>,
    grad: &mut GdnBlockWeights<T>,
) -> Result<Tensor<T>> {
    let (h, dk, dv) = (cfg.n_heads, cfg.head_k(), cfg.head_v());
    let x = &tape.x;
    let m = &tape.m;
    let steps = x.rows();
    let block = dk * dv;
    let scale = T::one() / T::of(dk as f64).sqrt();

    // output projection, gate and norm
    let dgated = linear_backward(&tape.fin.gated, &w.wo, dy, &mut grad.wo)?;
    let dnormed = dgated.zip_map(&tape.fin.gate_pre, |d, g| d * silu_scalar(g))?;
    let dgate_pre = Tensor::from_fn(dgated.shape().to_vec(), |i| {
        dgated.data()[i] * tape.fin.normed.data()[i] * silu_grad_scalar(tape.fin.gate_pre.data()[i])
    });
    let mut dx = linear_backward(x, &w.wg, &dgate_pre, &mut grad.wg)?;
    let d_o = rmsnorm_heads_backward(&tape.o, &w.out_norm, T::of(cfg.eps), &dnormed, &mut grad.out_norm)?;

    // recurrence, newest token first
    let mut dq = Tensor::zeros([steps, cfg.d_k]);
    let mut dk_t = Tensor::zeros([steps, cfg.d_k]);
    let mut dv_t = Tensor::zeros([steps, cfg.d_v]);
    let mut dg = Tensor::zeros([steps, h]);
    let mut dbeta = Tensor::zeros([steps, h]);
    let state_len = h * block;
    let mut ds = vec![T::zero(); state_len];
    let (mut u, mut wv, mut dsk) = (vec![T::zero(); dv], vec![T::zero(); dv], vec![T::zero(); dv]);
    for t in (0..steps).rev() {
        let s_now = &tape.states[(t + 1) * state_len..(t + 2) * state_len];
        let s_prev = &tape.states[t * state_len..(t + 1) * state_len];
        for head in 0..h {
            let q = &m.q.row(t)[head * dk..(head + 1) * dk];
            let k = &m.k.row(t)[head * dk..(head + 1) * dk];
            let v = &m.v.row(t)[head * dv..(head + 1) * dv];
            let doh = &d_o.row(t)[head * dv..(head + 1) * dv];
            let a = m.g.at(t, head).exp();
            let beta = m.beta.at(t, head);
            let sn = &s_now[head * block..(head + 1) * block];
            let p = &s_prev[head * block..(head + 1) * block];
            let dsh = &mut ds[head * block..(head + 1) * block];

            // read: o = scale · Sᵀ q
            let dqh = &mut dq.row_mut(t)[head * dk..(head + 1) * dk];
            for i in 0..dk {
                let mut acc = T::zero();
                for j in 0..dv {
                    acc += sn[i * dv + j] * doh[j];
                    dsh[i * dv + j] += scale * q[i] * doh[j];
                }
                dqh[i] = scale * acc;
            }

            // write: S = a P + k (β (v - a Pᵀk))ᵀ
            u.iter_mut().for_each(|x| *x = T::zero());
            dsk.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..dk {
                for j in 0..dv {
                    u[j] += p[i * dv + j] * k[i];
                    dsk[j] += dsh[i * dv + j] * k[i];
                }
            }
            for j in 0..dv {
                wv[j] = v[j] - a * u[j];
            }
            let dvh = &mut dv_t.row_mut(t)[head * dv..(head + 1) * dv];
            for j in 0..dv {
                dvh[j] = beta * dsk[j];
            }
            let mut db = T::zero();
            let mut da = T::zero();
            let dkh = &mut dk_t.row_mut(t)[head * dk..(head + 1) * dk];
            for i in 0..dk {
                let mut dsw = T::zero();
                let mut pdsk = T::zero();
                for j in 0..dv {
                    let dsij = dsh[i * dv + j];
                    dsw += dsij * wv[j];
                    pdsk += p[i * dv + j] * dsk[j];
                    da += dsij * (p[i * dv + j] - beta * k[i] * u[j]);
                }
                db += k[i] * dsw;
                dkh[i] = beta * (dsw - a * pdsk);
            }
            dbeta.set(t, head, db);
            dg.set(t, head, a * da);
            for i in 0..dk {
                for j in 0..dv {
                    dsh[i * dv + j] = a * (dsh[i * dv + j] - beta * k[i] * dsk[j]);
                }
            }
        }
    }

    // gates
    let mut dalpha = Tensor::zeros([steps, h]);
    let mut dbeta_pre = Tensor::zeros([steps, h]);
    for t in 0..steps {
        for head in 0..h {
            let gval = m.g.at(t, head);
            let dgv = dg.at(t, head);
            grad.a_log.data_mut()[head] += dgv * gval;
            let dz = -dgv * w.a_log.data()[head].exp() * sigmoid_scalar(m.alpha_pre.at(t, head));
            dalpha.set(t, head, dz);
            grad.dt_bias.data_mut()[head] += dz;
            let b = m.beta.at(t, head);
            dbeta_pre.set(t, head, dbeta.at(t, head) * b * (T::one() - b));
        }
    }
    dx.add_assign(&linear_backward(x, &w.w_alpha, &dalpha, &mut grad.w_alpha)?)?;
    dx.add_assign(&linear_backward(x, &w.w_beta, &dbeta_pre, &mut grad.w_beta)?)?;

    // normalization, activation, convolution, projection
    let eps = T::of(L2_EPS);
    let dq_act = l2norm_heads_backward(&m.q_act, dk, eps, &dq);
    let dk_act = l2norm_heads_backward(&m.k_act, dk, eps, &dk_t);
    let paths = [
        (&m.q_pre, &m.q_conv, dq_act, &w.conv_q, &w.wq, 0usize),
        (&m.k_pre, &m.k_conv, dk_act, &w.conv_k, &w.wk, 1),
        (&m.v_pre, &m.v_conv, dv_t, &w.conv_v, &w.wv, 2),
    ];
    for (pre, conv_out, dact, kernel, proj, which) in paths {
        let dconv = Tensor::from_fn(dact.shape().to_vec(), |i| {
            dact.data()[i] * silu_grad_scalar(conv_out.data()[i])
        });
        let (dkernel, dproj) = match which {
            0 => (&mut grad.conv_q, &mut grad.wq),
            1 => (&mut grad.conv_k, &mut grad.wk),
            _ => (&mut grad.conv_v, &mut grad.wv),
        };
        let dpre = causal_conv1d_backward(pre, kernel, None, &dconv, dkernel)?;
        dx.add_assign(&linear_backward(x, proj, &dpre, dproj)?)?;
    }
    Ok(dx)
}

/// Builds GDN weights from a teacher attention layer: keys and values are
/// expanded to one head per query head, then the overlapping leading rows
/// of Q, K, V and leading columns of the output projection are copied. All
/// remaining parameters keep the seeded random initialization.
pub fn init_gdn_from_teacher<T: Scalar>(
    attn: &GqaWeights<T>,
    teacher: &TransformerConfig,
    cfg: &GdnConfig,
    seed: u64,
) -> Result<GdnBlockWeights<T>> {
    cfg.validate()?;
    if cfg.d_model != teacher.d_model {
        return Err(Error::Config("gdn d_model must match the teacher".into()));
    }
    let mut w = GdnBlockWeights::random(cfg, seed);
    let k_full = repeat_kv(&attn.wk, teacher.head_dim, teacher.group())?;
    let v_full = repeat_kv(&attn.wv, teacher.head_dim, teacher.group())?;
    let d = teacher.d_model;
    let nv = d.min(cfg.d_v);
    if cfg.d_k > attn.wq.rows() || cfg.d_k > k_full.rows() {
        return Err(Error::Config(format!(
            "gdn d_k {} exceeds teacher projection rows {}",
            cfg.d_k,
            attn.wq.rows()
        )));
    }
    if nv > v_full.rows() || nv > attn.wo.cols() {
        return Err(Error::Config(format!(
            "teacher value projection has {} rows, {nv} needed",
            v_full.rows()
        )));
    }
    let copy_rows = |dst: &mut Tensor<T>, src: &Tensor<T>, n: usize| {
        dst.data_mut()[..n * d].copy_from_slice(&src.data()[..n * d]);
    };
    copy_rows(&mut w.wq, &attn.wq, cfg.d_k);
    copy_rows(&mut w.wk, &k_full, cfg.d_k);
    copy_rows(&mut w.wv, &v_full, nv);
    for r in 0..d {
        w.wo.row_mut(r)[..nv].copy_from_slice(&attn.wo.row(r)[..nv]);
    }
    Ok(w)
}
