mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::Rng;

use common::rng;
use cooptrack::config::RunConfig;
use cooptrack::experiment::{simulate, track_constant};
use cooptrack::metrics::{evaluate, GtFrame, TrackFrame};

fn fixture() -> &'static (Vec<TrackFrame>, Vec<GtFrame>) {
    static CELL: OnceLock<(Vec<TrackFrame>, Vec<GtFrame>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.scenario.duration = 60;
        let seq = simulate(&cfg, 21).unwrap();
        (track_constant(&cfg, &seq.frames).unwrap(), seq.gt)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_invariant_under_id_relabeling(key in any::<u64>()) {
        let (tracks, gt) = fixture();
        let relabeled: Vec<TrackFrame> = tracks
            .iter()
            .map(|f| {
                let mut f = f.clone();
                for t in &mut f.tracks {
                    t.id ^= key;
                }
                f
            })
            .collect();
        prop_assert_eq!(evaluate(&relabeled, gt).unwrap(), evaluate(tracks, gt).unwrap());
    }

    #[test]
    fn amota_never_exceeds_samota(seed in any::<u64>(), drop in 0.0..0.9f64) {
        let (tracks, gt) = fixture();
        let mut r = rng(seed);
        let perturbed: Vec<TrackFrame> = tracks
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.tracks.retain(|_| r.random::<f64>() >= drop);
                for t in &mut f.tracks {
                    t.score = r.random_range(0.01..1.0);
                    t.bbox.x += r.random_range(-1.0..1.0);
                }
                f
            })
            .collect();
        let rep = evaluate(&perturbed, gt).unwrap();
        prop_assert!(rep.amota <= rep.samota + 1e-12);
        prop_assert!(rep.mota <= 100.0);
        prop_assert!(rep.mt + rep.ml <= 100.0 + 1e-9);
        for row in &rep.per_recall {
            prop_assert!(row.mota <= row.smota + 1e-12);
        }
    }
}

#[test]
fn noiseless_run_is_perfect_and_empty_run_scores_zero() {
    let mut cfg = RunConfig::default();
    cfg.scenario.noiseless = true;
    cfg.scenario.duration = 60;
    let seq = simulate(&cfg, 2).unwrap();
    let tracks = track_constant(&cfg, &seq.frames).unwrap();
    let rep = evaluate(&tracks, &seq.gt).unwrap();
    assert_eq!(
        (rep.amota, rep.samota, rep.mota, rep.ml),
        (100.0, 100.0, 100.0, 0.0)
    );
    assert_eq!(rep.id_switches, 0);

    let empty: Vec<TrackFrame> = tracks
        .iter()
        .map(|f| TrackFrame {
            timestep: f.timestep,
            tracks: vec![],
        })
        .collect();
    assert_eq!(evaluate(&empty, &seq.gt).unwrap().amota, 0.0);
}
