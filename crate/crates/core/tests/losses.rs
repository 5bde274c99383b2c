use mde_core::losses::{bce, ccl, oal, oal_object, total_loss};
use mde_core::types::{CclReduction, GuidanceConfig, Mask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 8;

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Mask) {
    let seg: Vec<f64> = (0..N * N).map(|_| rng.gen_range(0.0..1.0)).collect();
    let bits: Vec<bool> = (0..N * N).map(|_| rng.gen_bool(0.4)).collect();
    let mut mask = Mask::new(N, N, bits).unwrap();
    if mask.is_empty() {
        mask.set(0, 0, true);
    }
    (seg, mask)
}

// scalar double-loop reference for one object's alignment loss
fn oal_oracle(seg: &[f64], mask: &Mask) -> f64 {
    let eps = 1e-6;
    let mut peak = 0.0f64;
    for y in 0..N {
        for x in 0..N {
            peak = peak.max(seg[y * N + x].abs());
        }
    }
    let (mut a, mut b) = (0.0, 0.0);
    for y in 0..N {
        for x in 0..N {
            let s = if mask.get(y, x) { 1.0 } else { 0.0 };
            let p = seg[y * N + x].clamp(eps, 1.0 - eps);
            let q = (seg[y * N + x] / peak).clamp(eps, 1.0 - eps);
            a += -(s * p.ln() + (1.0 - s) * (1.0 - p).ln());
            b += -(s * q.ln() + (1.0 - s) * (1.0 - q).ln());
        }
    }
    (a + b) / (N * N) as f64
}

fn ccl_oracle(edit: &[Vec<f64>], common: &[Vec<f64>], mask: &Mask) -> f64 {
    let (mut sum, mut count) = (0.0, 0.0);
    for y in 0..N {
        for x in 0..N {
            if !mask.get(y, x) {
                continue;
            }
            let k = y * N + x;
            let a: f64 = edit.iter().map(|m| m[k]).sum();
            let c: f64 = common.iter().map(|m| m[k]).sum();
            let r = a / (a + c + 1e-12);
            sum += (1.0 - r) * (1.0 - r);
            count += 1.0;
        }
    }
    sum / count
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn oal_and_ccl_match_double_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (seg, mask) = random_instance(&mut rng);
        let (v, _) = oal(&[&seg], &[&mask]).unwrap();
        assert!(rel(v, oal_oracle(&seg, &mask)) < 1e-10);

        let edit: Vec<Vec<f64>> = (0..2).map(|_| (0..N * N).map(|_| rng.gen_range(0.0..0.5)).collect()).collect();
        let common: Vec<Vec<f64>> = (0..3).map(|_| (0..N * N).map(|_| rng.gen_range(0.0..0.5)).collect()).collect();
        let er: Vec<&[f64]> = edit.iter().map(Vec::as_slice).collect();
        let cr: Vec<&[f64]> = common.iter().map(Vec::as_slice).collect();
        let (c, _) = ccl(&er, &cr, &mask, CclReduction::MaskedMean).unwrap();
        assert!(rel(c, ccl_oracle(&edit, &common, &mask)) < 1e-10);
    }
}

#[test]
fn worked_examples() {
    let m = Mask::new(1, 2, vec![true, false]).unwrap();
    assert!((bce::<f64>(&[0.8, 0.2], m.data(), 1e-6).unwrap() - 0.2231).abs() < 1e-4);
    let (v, _) = oal(&[&[0.8f64, 0.2][..]], &[&m]).unwrap();
    assert!((v - 0.3669).abs() < 1e-3);
    let b = total_loss(0.4, 0.1, &GuidanceConfig::default());
    assert!((b.total - 0.525).abs() < 1e-12);
}

#[test]
fn oal_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for _ in 0..5 {
        // keep values away from the clamp and from a tie at the peak
        let mut seg: Vec<f64> = (0..N * N).map(|_| rng.gen_range(0.05..0.9)).collect();
        seg[17] = 0.95;
        let (_, mask) = random_instance(&mut rng);
        let (_, grad) = oal_object(&seg, &mask, 0).unwrap();
        for _ in 0..10 {
            let k = rng.gen_range(0..N * N);
            let mut up = seg.clone();
            up[k] += h;
            let mut dn = seg.clone();
            dn[k] -= h;
            let fd = (oal_object(&up, &mask, 0).unwrap().0 - oal_object(&dn, &mask, 0).unwrap().0) / (2.0 * h);
            assert!(rel(grad[k], fd) < 1e-6 || (grad[k] - fd).abs() < 1e-9, "k={k} {} vs {fd}", grad[k]);
        }
    }
}

#[test]
fn ccl_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    for _ in 0..5 {
        let (_, mask) = random_instance(&mut rng);
        let a: Vec<f64> = (0..N * N).map(|_| rng.gen_range(0.05..0.6)).collect();
        let c: Vec<f64> = (0..N * N).map(|_| rng.gen_range(0.05..0.6)).collect();
        let f = |a: &[f64], c: &[f64]| ccl(&[a], &[c], &mask, CclReduction::MaskedMean).unwrap().0;
        let (_, g) = ccl(&[&a], &[&c], &mask, CclReduction::MaskedMean).unwrap();
        for _ in 0..10 {
            let k = rng.gen_range(0..N * N);
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap[k] += h;
            am[k] -= h;
            let fd = (f(&ap, &c) - f(&am, &c)) / (2.0 * h);
            assert!(rel(g.edit[k], fd) < 1e-6 || (g.edit[k] - fd).abs() < 1e-12);
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp[k] += h;
            cm[k] -= h;
            let fd = (f(&a, &cp) - f(&a, &cm)) / (2.0 * h);
            assert!(rel(g.common[k], fd) < 1e-6 || (g.common[k] - fd).abs() < 1e-12);
        }
    }
}

#[test]
fn oal_is_additive_over_objects() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s1, m1) = random_instance(&mut rng);
    let (s2, m2) = random_instance(&mut rng);
    let (both, per) = oal(&[&s1, &s2], &[&m1, &m2]).unwrap();
    let a = oal(&[&s1], &[&m1]).unwrap().0;
    let b = oal(&[&s2], &[&m2]).unwrap().0;
    assert_eq!(per, vec![a, b]);
    assert!(rel(both, a + b) < 1e-15);
}

fn maps_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(0.0f64..1.0, 16),
        prop::collection::vec(0.0f64..1.0, 16),
        prop::collection::vec(any::<bool>(), 16),
    )
        .prop_filter("mask needs a set pixel", |(_, _, m)| m.iter().any(|&b| b))
}

proptest! {
    #[test]
    fn ccl_is_bounded((a, c, m) in maps_and_mask()) {
        let mask = Mask::new(4, 4, m).unwrap();
        let (v, _) = ccl(&[&a], &[&c], &mask, CclReduction::MaskedMean).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn ccl_never_increases_with_edit_attention((a, c, m) in maps_and_mask(), k in 0usize..16, bump in 0.0f64..1.0) {
        let mask = Mask::new(4, 4, m).unwrap();
        let before = ccl(&[&a], &[&c], &mask, CclReduction::MaskedMean).unwrap().0;
        let mut a2 = a.clone();
        a2[k] += bump;
        let after = ccl(&[&a2], &[&c], &mask, CclReduction::MaskedMean).unwrap().0;
        prop_assert!(after <= before + 1e-15);
    }

    #[test]
    fn oal_is_non_negative(seg in prop::collection::vec(0.01f64..1.0, 16), m in prop::collection::vec(any::<bool>(), 16)) {
        let mask = Mask::new(4, 4, m).unwrap();
        prop_assert!(oal(&[&seg], &[&mask]).unwrap().0 >= 0.0);
    }

    #[test]
    fn total_is_the_weighted_sum(o in 0.0f64..10.0, c in 0.0f64..10.0, l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
        let cfg = GuidanceConfig { lambda1: l1, lambda2: l2, ..GuidanceConfig::default() };
        let b = total_loss(o, c, &cfg);
        prop_assert!((b.total - (l1 * o + l2 * c)).abs() <= 1e-12 * b.total.abs().max(1.0));
    }
}
