mod common;

use common::{kl_oracle, max_abs_diff, to_rows};
use hylo_core::losses::{fused_linear_ce, kl_chunked, kl_hidden, kl_naive, kl_online, KlDirection, LossConfig};
use hylo_core::numerics::linear;
use hylo_core::rng::SeededRng;
use hylo_core::Tensor;
use proptest::prelude::*;

fn cfg(chunk: usize, tile: usize) -> LossConfig {
    LossConfig { kl_chunk: chunk, vocab_tile: tile, ..LossConfig::default() }
}

fn logits(t: usize, v: usize, seed: u64, scale: f64) -> Tensor<f64> {
    SeededRng::new(seed).normal_tensor(&[t, v], scale)
}

#[test]
fn naive_kl_matches_the_oracle() {
    let zs = logits(9, 30, 1, 2.0);
    let zt = logits(9, 30, 2, 2.0);
    let r = kl_naive(&zs, &zt, KlDirection::StudentFirst).unwrap();
    let (value, grad) = kl_oracle(&to_rows(&zs), &to_rows(&zt));
    assert!((r.value - value).abs() < 1e-12);
    assert!(max_abs_diff(&to_rows(r.grad.as_ref().unwrap()), &grad) < 1e-12);
}

#[test]
fn every_differentiable_loss_passes_finite_differences() {
    let zs = logits(5, 12, 3, 1.0);
    let zt = logits(5, 12, 4, 1.0);
    let h = logits(5, 6, 5, 1.0);
    let w = logits(12, 6, 6, 0.5);
    let ht = logits(5, 6, 7, 1.0);
    let wt = logits(12, 6, 8, 0.5);
    let c = cfg(2, 4);
    let targets = [0u32, 11, 3, 3, 7];
    let step = 1e-4;
    let check = |f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, g: &Tensor<f64>, what: &str| {
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += step;
            let mut m = x.clone();
            m.data_mut()[i] -= step;
            let numeric = (f(&p) - f(&m)) / (2.0 * step);
            let analytic = g.data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-3, "{what}[{i}]: {analytic} vs {numeric}");
        }
    };
    for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
        let g = kl_naive(&zs, &zt, dir).unwrap().grad.unwrap();
        check(&|z| kl_naive(z, &zt, dir).unwrap().value, &zs, &g, "kl_naive");
    }
    let g = kl_chunked(&zs, &zt, &c).unwrap().grad.unwrap();
    check(&|z| kl_chunked(z, &zt, &c).unwrap().value, &zs, &g, "kl_chunked");
    let g = kl_online(&zs, &zt, &c).unwrap().grad.unwrap();
    check(&|z| kl_online(z, &zt, &c).unwrap().value, &zs, &g, "kl_online");
    let r = kl_hidden(&h, &w, &ht, &wt, &c).unwrap();
    check(&|x| kl_hidden(x, &w, &ht, &wt, &c).unwrap().value, &h, r.grad.as_ref().unwrap(), "kl_hidden h");
    check(&|x| kl_hidden(&h, x, &ht, &wt, &c).unwrap().value, &w, r.grad_weight.as_ref().unwrap(), "kl_hidden w");
    let r = fused_linear_ce(&h, &w, &targets, &c).unwrap();
    check(&|x| fused_linear_ce(x, &w, &targets, &c).unwrap().value, &h, r.grad.as_ref().unwrap(), "ce h");
    check(&|x| fused_linear_ce(&h, x, &targets, &c).unwrap().value, &w, r.grad_weight.as_ref().unwrap(), "ce w");
}

#[test]
fn cross_entropy_matches_a_direct_computation() {
    let h = logits(4, 5, 1, 1.0);
    let w = logits(9, 5, 2, 1.0);
    let targets = [1u32, 8, 0, 4];
    let z = to_rows(&linear(&h, &w).unwrap());
    let expect: f64 = z
        .iter()
        .zip(&targets)
        .map(|(row, &t)| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[t as usize]
        })
        .sum::<f64>()
        / 4.0;
    let got = fused_linear_ce(&h, &w, &targets, &cfg(3, 4)).unwrap().value;
    assert!((got - expect).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_paths_agree(t in 1usize..200, v in 2usize..160, chunk in 1usize..64, tile in 1usize..48, seed in 0u64..10_000) {
        let zs = logits(t, v, seed, 3.0);
        let zt = logits(t, v, seed + 1, 3.0);
        let c = cfg(chunk, tile);
        let naive = kl_naive(&zs, &zt, c.direction).unwrap();
        let g = naive.grad.as_ref().unwrap();
        for r in [kl_chunked(&zs, &zt, &c).unwrap(), kl_online(&zs, &zt, &c).unwrap()] {
            prop_assert!((r.value - naive.value).abs() < 1e-5);
            prop_assert!(r.grad.as_ref().unwrap().max_abs_diff(g).unwrap() < 1e-4);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_for_equal_softmaxes(t in 1usize..20, v in 2usize..40, seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let zs = logits(t, v, seed, 2.0);
        let zt = logits(t, v, seed + 7, 2.0);
        let c = cfg(4, 8);
        prop_assert!(kl_naive(&zs, &zt, c.direction).unwrap().value >= 0.0);
        prop_assert!(kl_online(&zs, &zt, &c).unwrap().value >= -1e-12);
        let same = kl_online(&zs, &zs.map(|x| x + shift), &c).unwrap().value;
        prop_assert!(same.abs() < 1e-9);
        let mut bumped = zs.clone();
        bumped.data_mut()[0] += 0.5;
        prop_assert!(kl_naive(&zs, &bumped, c.direction).unwrap().value > 0.0);
    }

    #[test]
    fn per_token_shifts_leave_every_path_unchanged(t in 1usize..16, v in 2usize..40, seed in 0u64..10_000) {
        let zs = logits(t, v, seed, 2.0);
        let zt = logits(t, v, seed + 3, 2.0);
        let mut shifts = SeededRng::new(seed + 9);
        let offsets: Vec<f64> = (0..t).map(|_| shifts.uniform(-40.0, 40.0)).collect();
        let shift = |z: &Tensor<f64>| {
            let mut out = z.clone();
            for (r, o) in offsets.iter().enumerate() {
                out.row_mut(r).iter_mut().for_each(|x| *x += o);
            }
            out
        };
        let c = cfg(3, 8);
        let base = kl_naive(&zs, &zt, c.direction).unwrap().value;
        prop_assert!((kl_naive(&shift(&zs), &zt, c.direction).unwrap().value - base).abs() < 1e-6);
        prop_assert!((kl_chunked(&zs, &shift(&zt), &c).unwrap().value - base).abs() < 1e-6);
        prop_assert!((kl_online(&shift(&zs), &shift(&zt), &c).unwrap().value - base).abs() < 1e-6);
    }

    #[test]
    fn streaming_paths_stay_below_a_full_logit_tensor(t in 9usize..120, v in 4usize..200, seed in 0u64..1000) {
        let c = cfg(8, 16);
        let zs = logits(t, v, seed, 1.0);
        let zt = logits(t, v, seed + 1, 1.0);
        prop_assert!(kl_chunked(&zs, &zt, &c).unwrap().peak_elements < t * v);
        prop_assert!(kl_online(&zs, &zt, &c).unwrap().peak_elements < t * v);
        let h = logits(t, 6, seed + 2, 1.0);
        let w = logits(v, 6, seed + 3, 1.0);
        let ht = logits(t, 6, seed + 4, 1.0);
        prop_assert!(kl_hidden(&h, &w, &ht, &w, &c).unwrap().peak_elements < t * v);
    }
}
