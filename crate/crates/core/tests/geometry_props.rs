mod common;

use proptest::prelude::*;

use common::{mc_iou, random_box, rng};
use cooptrack::geometry::{iou3d, transform_box, Box7, PoseYawT};

fn near_pair(seed: u64) -> (Box7, Box7) {
    let mut r = rng(seed);
    let a = random_box(&mut r, 2.0);
    let b = random_box(&mut r, 2.0);
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn iou_is_symmetric_and_bounded(seed in any::<u64>()) {
        let (a, b) = near_pair(seed);
        let ab = iou3d(&a, &b);
        prop_assert_eq!(ab, iou3d(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn self_iou_is_one(seed in any::<u64>()) {
        let (a, _) = near_pair(seed);
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_invariant_under_rigid_motion(
        seed in any::<u64>(),
        tx in -50.0..50.0f64,
        ty in -50.0..50.0f64,
        tz in -2.0..2.0f64,
        yaw in -3.1..3.1f64,
    ) {
        let (a, b) = near_pair(seed);
        let pose = PoseYawT::new(tx, ty, tz, yaw);
        let moved = iou3d(&transform_box(&a, &pose), &transform_box(&b, &pose));
        prop_assert!((moved - iou3d(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_shrinks_with_vertical_separation(seed in any::<u64>(), dz in 0.0..3.0f64) {
        let (a, _) = near_pair(seed);
        let mut b = a;
        b.z += dz;
        let expected = if dz >= a.h { 0.0 } else { (a.h - dz) / (a.h + dz) };
        prop_assert!((iou3d(&a, &b) - expected).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn iou_agrees_with_monte_carlo(seed in any::<u64>()) {
        let (a, b) = near_pair(seed);
        let est = mc_iou(&a, &b, 100_000, &mut rng(seed ^ 1));
        prop_assert!((est - iou3d(&a, &b)).abs() < 0.02, "mc {est} vs {}", iou3d(&a, &b));
    }
}
