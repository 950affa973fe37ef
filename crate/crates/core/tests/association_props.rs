mod common;

use proptest::prelude::*;

use common::{brute_force_min, random_box, rng};
use cooptrack::association::{associate, hungarian_solve};
use cooptrack::linalg::Mat;

fn matrix() -> impl Strategy<Value = Mat> {
    (0usize..=6, 0usize..=6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0..10.0f64, r * c).prop_map(move |v| Mat::from_vec(r, c, v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hungarian_matches_brute_force(cost in matrix()) {
        let pairs = hungarian_solve(&cost).unwrap();
        let (rows, cols) = cost.shape();
        prop_assert_eq!(pairs.len(), rows.min(cols));
        let mut seen_r = vec![false; rows];
        let mut seen_c = vec![false; cols];
        for &(i, j) in &pairs {
            prop_assert!(!seen_r[i] && !seen_c[j]);
            seen_r[i] = true;
            seen_c[j] = true;
        }
        let total: f64 = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
        prop_assert!((total - brute_force_min(&cost)).abs() < 1e-9);
    }

    #[test]
    fn association_partitions_indices(seed in any::<u64>(), nt in 0usize..6, nd in 0usize..6) {
        let mut r = rng(seed);
        let tracks: Vec<_> = (0..nt).map(|_| random_box(&mut r, 4.0)).collect();
        let dets: Vec<_> = (0..nd).map(|_| random_box(&mut r, 4.0)).collect();
        let a = associate(&tracks, &dets, 0.1).unwrap();
        for &(_, _, iou) in &a.matches {
            prop_assert!(iou >= 0.1);
        }
        let mut t: Vec<usize> = a.matches.iter().map(|m| m.0).chain(a.unmatched_tracks.iter().copied()).collect();
        let mut d: Vec<usize> = a.matches.iter().map(|m| m.1).chain(a.unmatched_detections.iter().copied()).collect();
        t.sort_unstable();
        d.sort_unstable();
        prop_assert_eq!(t, (0..nt).collect::<Vec<_>>());
        prop_assert_eq!(d, (0..nd).collect::<Vec<_>>());
    }
}
