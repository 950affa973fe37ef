mod common;

use proptest::prelude::*;

use common::{fusion_case, fusion_error, rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sequential_fusion_matches_joint_update(seed in any::<u64>()) {
        let case = fusion_case(&mut rng(seed));
        let err = fusion_error(&case);
        prop_assert!(err <= 1e-8, "relative error {err:e}");
    }

    #[test]
    fn fusion_order_does_not_matter(seed in any::<u64>()) {
        let mut case = fusion_case(&mut rng(seed));
        case.obs.reverse();
        case.noises.reverse();
        prop_assert!(fusion_error(&case) <= 1e-8);
    }
}
