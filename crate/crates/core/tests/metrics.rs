use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skinseg_core::metrics::{aggregate, compute_metrics, confusion_counts, report_csv};
use skinseg_core::BinaryMask;

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p) as u8).collect()).unwrap()
}

/// Set-based definitions evaluated pixel by pixel.
fn brute(pred: &BinaryMask, gt: &BinaryMask) -> [f64; 5] {
    let (h, w) = gt.dims();
    let (mut inter, mut union, mut gt_on, mut gt_off, mut agree, mut pred_off_gt_off, mut sizes) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let (p, g) = (pred.get(y, x), gt.get(y, x));
            inter += (p && g) as u64;
            union += (p || g) as u64;
            gt_on += g as u64;
            gt_off += !g as u64;
            agree += (p == g) as u64;
            pred_off_gt_off += (!p && !g) as u64;
            sizes += p as u64 + g as u64;
        }
    }
    let r = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    [
        r(inter, gt_on),
        r(pred_off_gt_off, gt_off),
        r(agree, (h * w) as u64),
        r(inter, union),
        r(2 * inter, sizes),
    ]
}

#[test]
fn matches_brute_force_on_100_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2017);
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let p = [0.0, 0.1, 0.5, 0.9, 1.0][i % 5];
        let gt = random_mask(&mut rng, h, w, p);
        let q = rng.random_range(0.0..1.0);
        let pred = random_mask(&mut rng, h, w, q);
        let m = compute_metrics(format!("{i}"), &confusion_counts(&pred, &gt).unwrap());
        assert_eq!([m.se, m.sp, m.ac, m.ja, m.di], brute(&pred, &gt), "pair {i}");
        assert!((m.di - 2.0 * m.ja / (1.0 + m.ja)).abs() < 1e-9, "pair {i}");
    }
}

#[test]
fn hand_fixture() {
    let gt = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let pred = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
    let c = confusion_counts(&pred, &gt).unwrap();
    assert_eq!((c.tp, c.fn_, c.fp, c.tn), (1, 1, 0, 2));
    let m = compute_metrics("fixture", &c);
    assert_eq!(m.se, 0.5);
    assert_eq!(m.sp, 1.0);
    assert_eq!(m.ac, 0.75);
    assert_eq!(m.ja, 0.5);
    assert!((m.di - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn empty_prediction_and_truth_score_one() {
    let e = BinaryMask::zeros(7, 5);
    let m = compute_metrics("e", &confusion_counts(&e, &e).unwrap());
    assert_eq!([m.se, m.sp, m.ac, m.ja, m.di], [1.0; 5]);
}

#[test]
fn mean_is_over_images_not_pixels() {
    // A tiny perfect image and a large failed one average to 0.5 regardless of size.
    let small = BinaryMask::new(1, 1, vec![1]).unwrap();
    let big_gt = BinaryMask::new(10, 10, vec![1; 100]).unwrap();
    let big_pred = BinaryMask::zeros(10, 10);
    let a = compute_metrics("a", &confusion_counts(&small, &small).unwrap());
    let b = compute_metrics("b", &confusion_counts(&big_pred, &big_gt).unwrap());
    let r = aggregate(vec![a, b]).unwrap();
    assert_eq!(r.mean.ja, 0.5);
    assert_eq!(report_csv(&r).lines().count(), 4);
}

proptest! {
    #[test]
    fn accuracy_identity_and_bounds(seed in any::<u64>(), h in 1usize..16, w in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_mask(&mut rng, h, w, 0.4);
        let pred = random_mask(&mut rng, h, w, 0.4);
        let c = confusion_counts(&pred, &gt).unwrap();
        prop_assert_eq!(c.total() as usize, h * w);
        let m = compute_metrics("p", &c);
        let expected_ac = (c.tp + c.tn) as f64 / (h * w) as f64;
        prop_assert_eq!(m.ac, expected_ac);
        for v in [m.se, m.sp, m.ac, m.ja, m.di] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.ja <= m.di + 1e-15);
        prop_assert!((m.di - 2.0 * m.ja / (1.0 + m.ja)).abs() < 1e-9);
    }

    #[test]
    fn mean_is_order_independent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<_> = (0..5)
            .map(|i| {
                let gt = random_mask(&mut rng, 4, 4, 0.5);
                let pred = random_mask(&mut rng, 4, 4, 0.5);
                compute_metrics(format!("{i}"), &confusion_counts(&pred, &gt).unwrap())
            })
            .collect();
        let fwd = aggregate(items.clone()).unwrap();
        let mut rev = items;
        rev.reverse();
        let rev = aggregate(rev).unwrap();
        prop_assert!((fwd.mean.ja - rev.mean.ja).abs() < 1e-12);
        prop_assert!((fwd.mean.di - rev.mean.di).abs() < 1e-12);
    }
}
