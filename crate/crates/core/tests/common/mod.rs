//! Independent reference implementations used as test oracles. None of
//! these call into the library's kernels; they work on plain `Vec`s.

#![allow(dead_code)]

use hylo_core::checkpoint::TransformerConfig;
use hylo_core::teacher::TeacherCheckpoint;
use hylo_core::Tensor;

pub fn toy_config() -> TransformerConfig {
    TransformerConfig::toy()
}

pub fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mat_vec(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rms(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gamma).map(|(v, g)| v * inv * g).collect()
}

/// Half-split rotary embedding of one head vector at `pos`.
fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let dim = v.len();
    let half = dim / 2;
    for i in 0..half {
        let f = 1.0 / theta.powf(2.0 * i as f64 / dim as f64);
        let (s, c) = (pos as f64 * f).sin_cos();
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * c - b * s;
        v[i + half] = b * c + a * s;
    }
}

/// Teacher logits computed as plain multi-head attention, with every query
/// head given its own copy of the key/value head it shares under GQA.
pub fn mha_oracle_logits(ckpt: &TeacherCheckpoint<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &ckpt.config;
    assert!(!cfg.qk_norm, "oracle covers the plain attention variant");
    let (hq, dh) = (cfg.n_q_heads, cfg.head_dim);
    let group = cfg.n_q_heads / cfg.n_kv_heads;
    let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| ckpt.embed.row(t as usize).to_vec()).collect();
    for layer in &ckpt.layers {
        let a = &layer.attn;
        let normed: Vec<Vec<f64>> = h.iter().map(|x| rms(x, layer.attn_norm.data(), cfg.eps)).collect();
        // expand K/V rows: query head j reads kv head j / group
        let expand = |w: &Tensor<f64>| {
            let mut rows = Vec::new();
            for j in 0..hq {
                let kv = j / group;
                for r in 0..dh {
                    rows.push(w.row(kv * dh + r).to_vec());
                }
            }
            Tensor::from_rows(&rows).unwrap()
        };
        let (wk, wv) = (expand(&a.wk), expand(&a.wv));
        let heads = |w: &Tensor<f64>, rot: bool| -> Vec<Vec<Vec<f64>>> {
            normed
                .iter()
                .enumerate()
                .map(|(pos, x)| {
                    let full = mat_vec(w, x);
                    (0..hq)
                        .map(|j| {
                            let mut v = full[j * dh..(j + 1) * dh].to_vec();
                            if rot {
                                rotate(&mut v, pos, cfg.rope_theta);
                            }
                            v
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (heads(&a.wq, true), heads(&wk, true), heads(&wv, false));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = Vec::with_capacity(h.len());
        for i in 0..h.len() {
            let mut concat = vec![0.0; hq * dh];
            for j in 0..hq {
                let scores: Vec<f64> =
                    (0..=i).map(|t| q[i][j].iter().zip(&k[t][j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (t, w) in e.iter().enumerate() {
                    for c in 0..dh {
                        concat[j * dh + c] += w / z * v[t][j][c];
                    }
                }
            }
            mixed.push(mat_vec(&a.wo, &concat));
        }
        for (x, m) in h.iter_mut().zip(&mixed) {
            x.iter_mut().zip(m).for_each(|(a, b)| *a += b);
        }
        for x in h.iter_mut() {
            let n = rms(x, layer.mlp_norm.data(), cfg.eps);
            let g = mat_vec(&layer.mlp.gate, &n);
            let u = mat_vec(&layer.mlp.up, &n);
            let act: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let d = mat_vec(&layer.mlp.down, &act);
            x.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
    }
    h.iter().map(|x| mat_vec(&ckpt.lm_head, &rms(x, ckpt.final_norm.data(), cfg.eps))).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Token-mean `KL(softmax(zs) ‖ softmax(zt))` and its gradient in `zs`.
pub fn kl_oracle(zs: &[Vec<f64>], zt: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = zs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(zs.len());
    for (s, t) in zs.iter().zip(zt) {
        let (ls, lt) = (log_softmax(s), log_softmax(t));
        let p: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let d: Vec<f64> = ls.iter().zip(&lt).map(|(a, b)| a - b).collect();
        let kl: f64 = p.iter().zip(&d).map(|(p, d)| p * d).sum();
        total += kl;
        grad.push(p.iter().zip(&d).map(|(p, d)| p * (d - kl) / n).collect());
    }
    (total / n, grad)
}

/// Singular values by nalgebra's SVD, descending.
pub fn singular_values(t: &Tensor<f64>) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let mut s: Vec<f64> = m.singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Frobenius error of the best rank-`r` approximation (Eckart–Young).
pub fn best_rank_error(t: &Tensor<f64>, r: usize) -> f64 {
    singular_values(t).iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
