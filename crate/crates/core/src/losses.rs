//! Distillation losses: intermediate-layer alignment, token-level KL in four
//! numerically equivalent forms of decreasing memory footprint, and a
//! chunked projection plus cross-entropy.
//!
//! Each KL variant returns the token-mean divergence and its gradient with
//! respect to the student input. `peak_elements` counts the largest
//! token-by-vocabulary working buffer the path needed besides its returned
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{log_softmax_in_place, matmul_nt, Tensor};
use crate::scalar::Scalar;

/// Which distribution is the first KL argument.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_student ‖ p_teacher)`.
    #[default]
    StudentFirst,
    /// `KL(p_teacher ‖ p_student)`.
    TeacherFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Rows per sequence chunk.
    pub kl_chunk: usize,
    /// Vocabulary tile width of the online passes.
    pub vocab_tile: usize,
    /// Probability floor applied before logs in the reference paths only.
    pub eps: f64,
    #[serde(default)]
    pub direction: KlDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kl_chunk: 4096,
            vocab_tile: 64,
            eps: 1e-12,
            direction: KlDirection::StudentFirst,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kl_chunk == 0 || self.vocab_tile == 0 {
            return Err(Error::Config("kl_chunk and vocab_tile must be at least 1".into()));
        }
        Ok(())
    }

    /// Tile width actually used for a vocabulary of `v`: at most half the
    /// vocabulary, so a student and a teacher tile together never exceed a
    /// single full row.
    pub fn tile_for(&self, v: usize) -> usize {
        self.vocab_tile.min((v / 2).max(1))
    }
}

#[derive(Clone, Debug)]
pub struct LossValueAndGrad<T> {
    pub value: T,
    /// Gradient with respect to the differentiated input.
    pub grad: Option<Tensor<T>>,
    /// Gradient with respect to the projection matrix, for the paths that
    /// apply one.
    pub grad_weight: Option<Tensor<T>>,
    pub peak_elements: usize,
}

/// Sum over layers of the Frobenius distance between student and teacher
/// hidden states plus that between token-mixer outputs.
pub struct IldLoss<T> {
    pub value: T,
    pub grad_hidden: Vec<Tensor<T>>,
    pub grad_mixer: Vec<Tensor<T>>,
}

fn frobenius_term<T: Scalar>(s: &Tensor<T>, t: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let diff = s.sub(t)?;
    let n = diff.frobenius_norm();
    let grad = if n > T::zero() {
        diff.scale(T::one() / n)
    } else {
        Tensor::zeros(diff.shape().to_vec())
    };
    Ok((n, grad))
}

/// Intermediate-layer distillation loss with its gradients with respect to
/// the student activations. The gradient of a zero residual is taken as 0.
pub fn ild_loss<T: Scalar>(
    student_hidden: &[Tensor<T>],
    student_mixer: &[Tensor<T>],
    teacher_hidden: &[Tensor<T>],
    teacher_mixer: &[Tensor<T>],
) -> Result<IldLoss<T>> {
    if student_hidden.len() != teacher_hidden.len() || student_mixer.len() != teacher_mixer.len() {
        return shape_err(format!(
            "ild layer counts differ: student {}/{}, teacher {}/{}",
            student_hidden.len(),
            student_mixer.len(),
            teacher_hidden.len(),
            teacher_mixer.len()
        ));
    }
    let mut value = T::zero();
    let mut grad_hidden = Vec::with_capacity(student_hidden.len());
    let mut grad_mixer = Vec::with_capacity(student_mixer.len());
    for (s, t) in student_hidden.iter().zip(teacher_hidden) {
        let (n, g) = frobenius_term(s, t)?;
        value += n;
        grad_hidden.push(g);
    }
    for (s, t) in student_mixer.iter().zip(teacher_mixer) {
        let (n, g) = frobenius_term(s, t)?;
        value += n;
        grad_mixer.push(g);
    }
    Ok(IldLoss {
        value,
        grad_hidden,
        grad_mixer,
    })
}

fn check_pair<T: Scalar>(zs: &Tensor<T>, zt: &Tensor<T>) -> Result<()> {
    if zs.shape() != zt.shape() || zs.shape().len() != 2 {
        return shape_err(format!("kl inputs {:?} vs {:?}", zs.shape(), zt.shape()));
    }
    Ok(())
}

/// Per-row KL from two log-softmax rows, writing `dL/dz_s · rows` into
/// `grad` (which may alias nothing). Returns the row divergence.
fn kl_row<T: Scalar>(ls: &[T], lt: &[T], direction: KlDirection, inv_rows: T, grad: &mut [T]) -> T {
    match direction {
        KlDirection::StudentFirst => {
            let d: T = ls.iter().zip(lt).map(|(&a, &b)| a.exp() * (a - b)).sum();
            for ((g, &a), &b) in grad.iter_mut().zip(ls).zip(lt) {
                *g = a.exp() * (a - b - d) * inv_rows;
            }
            d
        }
        KlDirection::TeacherFirst => {
            let d: T = ls.iter().zip(lt).map(|(&a, &b)| b.exp() * (b - a)).sum();
            for ((g, &a), &b) in grad.iter_mut().zip(ls).zip(lt) {
                *g = (a.exp() - b.exp()) * inv_rows;
            }
            d
        }
    }
}

/// Reference KL: both distributions fully materialized.
pub fn kl_naive<T: Scalar>(zs: &Tensor<T>, zt: &Tensor<T>, direction: KlDirection) -> Result<LossValueAndGrad<T>> {
    check_pair(zs, zt)?;
    let (rows, v) = (zs.rows(), zs.cols());
    let inv = T::one() / T::of(rows as f64);
    let mut ls = zs.clone();
    let mut lt = zt.clone();
    let mut grad = Tensor::zeros([rows, v]);
    let mut total = T::zero();
    for r in 0..rows {
        log_softmax_in_place(ls.row_mut(r));
        log_softmax_in_place(lt.row_mut(r));
        total += kl_row(ls.row(r), lt.row(r), direction, inv, grad.row_mut(r));
    }
    Ok(LossValueAndGrad {
        value: total * inv,
        grad: Some(grad),
        grad_weight: None,
        peak_elements: 2 * rows * v,
    })
}

/// KL over row chunks of at most `kl_chunk` tokens. The student
/// log-probabilities of a chunk are formed directly in the gradient buffer,
/// so the only working buffer is the teacher chunk.
pub fn kl_chunked<T: Scalar>(zs: &Tensor<T>, zt: &Tensor<T>, cfg: &LossConfig) -> Result<LossValueAndGrad<T>> {
    check_pair(zs, zt)?;
    cfg.validate()?;
    let (rows, v) = (zs.rows(), zs.cols());
    let inv = T::one() / T::of(rows as f64);
    let mut grad = zs.clone();
    let mut total = T::zero();
    let mut peak = 0;
    let mut row_ls = vec![T::zero(); v];
    let mut start = 0;
    while start < rows {
        let end = (start + cfg.kl_chunk).min(rows);
        let mut lt = zt.slice_rows(start, end);
        peak = peak.max(lt.len());
        for r in start..end {
            let lt_row = lt.row_mut(r - start);
            log_softmax_in_place(lt_row);
            let g = grad.row_mut(r);
            log_softmax_in_place(g);
            row_ls.copy_from_slice(g);
            total += kl_row(&row_ls, lt_row, cfg.direction, inv, g);
        }
        start = end;
    }
    Ok(LossValueAndGrad {
        value: total * inv,
        grad: Some(grad),
        grad_weight: None,
        peak_elements: peak,
    })
}

/// Streaming statistics of one token over vocabulary tiles.
#[derive(Clone, Copy)]
struct Online<T> {
    ms: T,
    zs: T,
    mt: T,
    zt: T,
    /// `Σ e^{x_i - m_x} (x_i - y_i)` where `x` is the first KL argument.
    acc: T,
}

impl<T: Scalar> Online<T> {
    fn new() -> Self {
        Self {
            ms: T::neg_infinity(),
            zs: T::zero(),
            mt: T::neg_infinity(),
            zt: T::zero(),
            acc: T::zero(),
        }
    }

    fn update(&mut self, s: &[T], t: &[T], direction: KlDirection) {
        let tile_ms = s.iter().copied().fold(T::neg_infinity(), T::max);
        let tile_mt = t.iter().copied().fold(T::neg_infinity(), T::max);
        let new_ms = self.ms.max(tile_ms);
        let new_mt = self.mt.max(tile_mt);
        let rs = if self.zs == T::zero() { T::zero() } else { (self.ms - new_ms).exp() };
        let rt = if self.zt == T::zero() { T::zero() } else { (self.mt - new_mt).exp() };
        self.zs *= rs;
        self.zt *= rt;
        match direction {
            KlDirection::StudentFirst => self.acc *= rs,
            KlDirection::TeacherFirst => self.acc *= rt,
        }
        self.ms = new_ms;
        self.mt = new_mt;
        for (&a, &b) in s.iter().zip(t) {
            let es = (a - new_ms).exp();
            let et = (b - new_mt).exp();
            self.zs += es;
            self.zt += et;
            self.acc += match direction {
                KlDirection::StudentFirst => es * (a - b),
                KlDirection::TeacherFirst => et * (b - a),
            };
        }
    }

    fn lse_s(&self) -> T {
        self.ms + self.zs.ln()
    }

    fn lse_t(&self) -> T {
        self.mt + self.zt.ln()
    }

    fn divergence(&self, direction: KlDirection) -> T {
        let d = match direction {
            KlDirection::StudentFirst => self.acc / self.zs - self.lse_s() + self.lse_t(),
            KlDirection::TeacherFirst => self.acc / self.zt - self.lse_t() + self.lse_s(),
        };
        d.max(T::zero())
    }

    /// Gradient entries for a tile of student/teacher logits.
    fn grad_tile(&self, s: &[T], t: &[T], d: T, direction: KlDirection, inv_rows: T, out: &mut [T]) {
        let (lse_s, lse_t) = (self.lse_s(), self.lse_t());
        for ((g, &a), &b) in out.iter_mut().zip(s).zip(t) {
            let ls = a - lse_s;
            let lt = b - lse_t;
            *g = match direction {
                KlDirection::StudentFirst => ls.exp() * (ls - lt - d),
                KlDirection::TeacherFirst => ls.exp() - lt.exp(),
            } * inv_rows;
        }
    }
}

/// Single streaming pass over vocabulary tiles per token with running-max
/// rescaled accumulators, then a second tiled pass for the gradient.
pub fn kl_online<T: Scalar>(zs: &Tensor<T>, zt: &Tensor<T>, cfg: &LossConfig) -> Result<LossValueAndGrad<T>> {
    check_pair(zs, zt)?;
    cfg.validate()?;
    let (rows, v) = (zs.rows(), zs.cols());
    let tile = cfg.tile_for(v);
    let inv = T::one() / T::of(rows as f64);
    let mut grad = Tensor::zeros([rows, v]);
    let mut total = T::zero();
    for r in 0..rows {
        let (s, t) = (zs.row(r), zt.row(r));
        let mut st = Online::new();
        for c in (0..v).step_by(tile) {
            let e = (c + tile).min(v);
            st.update(&s[c..e], &t[c..e], cfg.direction);
        }
        let d = st.divergence(cfg.direction);
        total += d;
        let g = grad.row_mut(r);
        for c in (0..v).step_by(tile) {
            let e = (c + tile).min(v);
            st.grad_tile(&s[c..e], &t[c..e], d, cfg.direction, inv, &mut g[c..e]);
        }
    }
    Ok(LossValueAndGrad {
        value: total * inv,
        grad: Some(grad),
        grad_weight: None,
        peak_elements: tile,
    })
}

/// KL between `h_s·W_sᵀ` and `h_t·W_tᵀ` computed from hidden states: logits
/// exist only as `chunk x tile` blocks. Returns the gradient with respect to
/// `h_s` and to `W_s`.
pub fn kl_hidden<T: Scalar>(
    hs: &Tensor<T>,
    ws: &Tensor<T>,
    ht: &Tensor<T>,
    wt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossValueAndGrad<T>> {
    cfg.validate()?;
    let v = ws.rows();
    if wt.rows() != v {
        return shape_err(format!("vocab mismatch: student head {v}, teacher head {}", wt.rows()));
    }
    if hs.cols() != ws.cols() || ht.cols() != wt.cols() || hs.rows() != ht.rows() {
        return shape_err(format!(
            "kl_hidden shapes h_s {:?} W_s {:?} h_t {:?} W_t {:?}",
            hs.shape(),
            ws.shape(),
            ht.shape(),
            wt.shape()
        ));
    }
    let rows = hs.rows();
    let tile = cfg.tile_for(v);
    let inv = T::one() / T::of(rows as f64);
    let mut dh = Tensor::zeros(hs.shape().to_vec());
    let mut dw = Tensor::zeros(ws.shape().to_vec());
    let mut total = T::zero();
    let mut peak = 0;
    let tiles: Vec<(usize, usize)> = (0..v).step_by(tile).map(|c| (c, (c + tile).min(v))).collect();
    let ws_tiles: Vec<Tensor<T>> = tiles.iter().map(|&(c, e)| ws.slice_rows(c, e)).collect();
    let wt_tiles: Vec<Tensor<T>> = tiles.iter().map(|&(c, e)| wt.slice_rows(c, e)).collect();

    let mut start = 0;
    while start < rows {
        let end = (start + cfg.kl_chunk).min(rows);
        let hs_c = hs.slice_rows(start, end);
        let ht_c = ht.slice_rows(start, end);
        let n = end - start;
        let mut stats = vec![Online::<T>::new(); n];
        for (wsi, wti) in ws_tiles.iter().zip(&wt_tiles) {
            let ls = matmul_nt(&hs_c, wsi)?;
            let lt = matmul_nt(&ht_c, wti)?;
            peak = peak.max(ls.len() + lt.len());
            for (r, st) in stats.iter_mut().enumerate() {
                st.update(ls.row(r), lt.row(r), cfg.direction);
            }
        }
        let divs: Vec<T> = stats.iter().map(|s| s.divergence(cfg.direction)).collect();
        total += divs.iter().copied().sum::<T>();

        let mut dh_c = Tensor::zeros(hs_c.shape().to_vec());
        for (ti, (wsi, wti)) in ws_tiles.iter().zip(&wt_tiles).enumerate() {
            let ls = matmul_nt(&hs_c, wsi)?;
            let lt = matmul_nt(&ht_c, wti)?;
            let mut dz = Tensor::zeros(ls.shape().to_vec());
            for r in 0..n {
                stats[r].grad_tile(ls.row(r), lt.row(r), divs[r], cfg.direction, inv, dz.row_mut(r));
            }
            // dh += dz · W_tile ; dW_tile += dzᵀ · h
            let width = wsi.rows();
            let d = hs.cols();
            for r in 0..n {
                let dzr = dz.row(r);
                let dhr = dh_c.row_mut(r);
                for (j, &g) in dzr.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    for (a, &b) in dhr.iter_mut().zip(wsi.row(j)) {
                        *a += g * b;
                    }
                }
            }
            let c0 = tiles[ti].0;
            let dwd = dw.data_mut();
            for j in 0..width {
                let row = &mut dwd[(c0 + j) * d..(c0 + j + 1) * d];
                for r in 0..n {
                    let g = dz.at(r, j);
                    if g == T::zero() {
                        continue;
                    }
                    for (a, &b) in row.iter_mut().zip(hs_c.row(r)) {
                        *a += g * b;
                    }
                }
            }
        }
        for r in 0..n {
            dh.row_mut(start + r).copy_from_slice(dh_c.row(r));
        }
        start = end;
    }
    Ok(LossValueAndGrad {
        value: total * inv,
        grad: Some(dh),
        grad_weight: Some(dw),
        peak_elements: peak,
    })
}

/// Mean cross-entropy of `h·Wᵀ` against `targets`, projecting at most
/// `kl_chunk` rows at a time. Returns gradients for `h` and `W`.
pub fn fused_linear_ce<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    targets: &[u32],
    cfg: &LossConfig,
) -> Result<LossValueAndGrad<T>> {
    cfg.validate()?;
    let (rows, v) = (h.rows(), w.rows());
    if h.cols() != w.cols() || targets.len() != rows {
        return shape_err(format!(
            "fused_linear_ce h {:?} W {:?} with {} targets",
            h.shape(),
            w.shape(),
            targets.len()
        ));
    }
    if let Some(&id) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::TokenOutOfRange { id, vocab: v });
    }
    let inv = T::one() / T::of(rows as f64);
    let mut dh = Tensor::zeros(h.shape().to_vec());
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut total = T::zero();
    let mut peak = 0;
    let d = h.cols();
    let mut start = 0;
    while start < rows {
        let end = (start + cfg.kl_chunk).min(rows);
        let hc = h.slice_rows(start, end);
        let mut z = matmul_nt(&hc, w)?;
        peak = peak.max(z.len());
        for r in 0..(end - start) {
            let row = z.row_mut(r);
            log_softmax_in_place(row);
            let tgt = targets[start + r] as usize;
            total -= row[tgt];
            for x in row.iter_mut() {
                *x = x.exp() * inv;
            }
            row[tgt] -= inv;
        }
        // dz is now in z
        for r in 0..(end - start) {
            let dzr = z.row(r);
            let dhr = dh.row_mut(start + r);
            for (j, &g) in dzr.iter().enumerate() {
                for (a, &b) in dhr.iter_mut().zip(w.row(j)) {
                    *a += g * b;
                }
            }
        }
        let dwd = dw.data_mut();
        for j in 0..v {
            let row = &mut dwd[j * d..(j + 1) * d];
            for r in 0..(end - start) {
                let g = z.at(r, j);
                for (a, &b) in row.iter_mut().zip(hc.row(r)) {
                    *a += g * b;
                }
            }
        }
        start = end;
    }
    Ok(LossValueAndGrad {
        value: total * inv,
        grad: Some(dh),
        grad_weight: Some(dw),
        peak_elements: peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        SeededRng::new(seed).uniform_tensor(shape, scale)
    }

    #[test]
    fn hand_evaluated_two_class_kl() {
        let zs = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        let zt = Tensor::new([1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let r = kl_naive(&zs, &zt, KlDirection::StudentFirst).unwrap();
        // p_s = (1/2, 1/2), p_t = (1/4, 3/4)
        let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((r.value - expect).abs() < 1e-15);
        assert!((r.value - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((r.value - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn equal_inputs_give_zero() {
        let z = rand(&[5, 9], 1, 3.0);
        let cfg = LossConfig::default();
        for r in [
            kl_naive(&z, &z, KlDirection::StudentFirst).unwrap(),
            kl_chunked(&z, &z, &cfg).unwrap(),
            kl_online(&z, &z, &cfg).unwrap(),
        ] {
            assert!(r.value.abs() < 1e-14);
            assert!(r.grad.unwrap().max_abs() < 1e-14);
        }
    }

    #[test]
    fn online_survives_large_shifts() {
        let zs = rand(&[4, 100], 2, 3.0);
        let zt = rand(&[4, 100], 3, 3.0);
        let cfg = LossConfig {
            vocab_tile: 16,
            ..LossConfig::default()
        };
        let base = kl_online(&zs, &zt, &cfg).unwrap().value;
        let shifted = kl_online(&zs.map(|x| x + 1000.0), &zt.map(|x| x - 1000.0), &cfg).unwrap().value;
        assert!(shifted.is_finite());
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn teacher_first_direction_matches_swapped_arguments() {
        let zs = rand(&[3, 11], 4, 2.0);
        let zt = rand(&[3, 11], 5, 2.0);
        let a = kl_naive(&zs, &zt, KlDirection::TeacherFirst).unwrap();
        let b = kl_naive(&zt, &zs, KlDirection::StudentFirst).unwrap();
        assert!((a.value - b.value).abs() < 1e-14);
        let cfg = LossConfig {
            vocab_tile: 4,
            kl_chunk: 2,
            direction: KlDirection::TeacherFirst,
            ..LossConfig::default()
        };
        for r in [kl_chunked(&zs, &zt, &cfg).unwrap(), kl_online(&zs, &zt, &cfg).unwrap()] {
            assert!((r.value - a.value).abs() < 1e-12);
            assert!(r.grad.unwrap().max_abs_diff(a.grad.as_ref().unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn ild_unit_residual() {
        let mut hs = Tensor::<f64>::zeros([3, 4]);
        let ht = Tensor::zeros([3, 4]);
        let a = rand(&[3, 4], 6, 1.0);
        hs.set(1, 2, 1.0);
        let r = ild_loss(&[hs.clone()], &[a.clone()], &[ht.clone()], &[a.clone()]).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.grad_mixer[0].max_abs(), 0.0);
        assert_eq!(r.grad_hidden[0].at(1, 2), 1.0);
        let same = ild_loss(&[ht.clone()], &[a.clone()], &[ht], &[a]).unwrap();
        assert_eq!(same.value, 0.0);
    }

    #[test]
    fn ce_saturates_and_rejects_bad_targets() {
        let w = Tensor::<f64>::eye(4).scale(50.0);
        let h = Tensor::eye(4);
        let cfg = LossConfig::default();
        let r = fused_linear_ce(&h, &w, &[0, 1, 2, 3], &cfg).unwrap();
        assert!(r.value < 1e-20);
        assert!(matches!(
            fused_linear_ce(&h, &w, &[0, 1, 2, 9], &cfg),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn hidden_rejects_vocab_mismatch_and_accepts_width_mismatch() {
        let cfg = LossConfig::default();
        let hs = rand(&[5, 8], 7, 1.0);
        let ht = rand(&[5, 12], 8, 1.0);
        let ws = rand(&[20, 8], 9, 1.0);
        let wt = rand(&[20, 12], 10, 1.0);
        assert!(kl_hidden(&hs, &ws, &ht, &wt, &cfg).is_ok());
        let wt_bad = rand(&[21, 12], 10, 1.0);
        assert!(kl_hidden(&hs, &ws, &ht, &wt_bad, &cfg).is_err());
        let zero = kl_hidden(&Tensor::zeros([5, 8]), &ws, &Tensor::zeros([5, 12]), &wt, &cfg).unwrap();
        assert!(zero.value.abs() < 1e-15);
    }
}
