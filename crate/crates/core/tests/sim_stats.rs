use cooptrack::features::AppearanceShape;
use cooptrack::geometry::{transform_box, Box7, PoseYawT};
use cooptrack::sim::{
    coverage, generate, preset_v2v_mini, CavTrack, ObjectTrack, Scenario, SensorModel,
};

const FRAMES: usize = 10_000;
const RANGE: f64 = 20.0;

fn static_scene(sensor: SensorModel) -> Scenario {
    let b = Box7::new(RANGE, 0.0, 0.0, 0.3, 4.0, 1.8, 1.5).unwrap();
    Scenario {
        duration: FRAMES,
        objects: vec![ObjectTrack {
            id: 1,
            boxes: vec![b; FRAMES],
        }],
        cavs: vec![CavTrack {
            cav_id: 0,
            poses: vec![PoseYawT::identity(); FRAMES],
            sensor,
        }],
        appearance: AppearanceShape {
            channels: 1,
            height: 1,
            width: 1,
        },
        seed: 17,
    }
}

fn clean_sensor() -> SensorModel {
    SensorModel {
        base_miss: 0.0,
        blockage_miss: 0.0,
        fp_rate: 0.0,
        ..SensorModel::default()
    }
}

/// Errors of `(x, y, z, yaw)` for every frame.
fn errors(sensor: SensorModel) -> Vec<[f64; 4]> {
    let scene = static_scene(sensor);
    let truth = scene.objects[0].boxes[0];
    let seq = generate(&scene).unwrap();
    seq.frames
        .iter()
        .map(|f| {
            let d = &f.packets[0].detections;
            assert_eq!(d.len(), 1);
            let b = d[0].bbox;
            [b.x - truth.x, b.y - truth.y, b.z - truth.z, b.a - truth.a]
        })
        .collect()
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn empirical_std_matches_configured_std_at_range() {
    let sensor = clean_sensor();
    let want = sensor.std_at(RANGE, 0.0);
    let errs = errors(sensor);
    for k in 0..4 {
        let (_, s) = mean_std(errs.iter().map(|e| e[k]));
        assert!(
            (s / want[k] - 1.0).abs() < 0.05,
            "variable {k}: std {s} vs {}",
            want[k]
        );
    }
}

#[test]
fn noise_is_unbiased() {
    let errs = errors(clean_sensor());
    for k in 0..4 {
        let (m, s) = mean_std(errs.iter().map(|e| e[k]));
        let se = s / (FRAMES as f64).sqrt();
        assert!(
            m.abs() <= 3.0 * se,
            "variable {k}: mean {m} exceeds 3 SE ({se})"
        );
    }
}

#[test]
fn far_cav_is_noisier_beyond_thirty_meters() {
    // (sum of BEV errors, count) per CAV, for GT objects beyond 30 m of that CAV
    let mut acc = [(0.0, 0usize); 2];
    for seed in 0..3 {
        let seq = generate(&preset_v2v_mini(seed).unwrap()).unwrap();
        for (frame, gt) in seq.frames.iter().zip(&seq.gt) {
            for p in &frame.packets {
                for d in &p.detections {
                    let global = transform_box(&d.bbox, &p.pose);
                    let Some(obj) = gt.objects.iter().min_by(|a, b| {
                        a.bbox
                            .bev_distance(&global)
                            .total_cmp(&b.bbox.bev_distance(&global))
                    }) else {
                        continue;
                    };
                    let err = obj.bbox.bev_distance(&global);
                    let range = (obj.bbox.x - p.pose.tx).hypot(obj.bbox.y - p.pose.ty);
                    if err < 3.0 && range > 30.0 {
                        let a = &mut acc[p.cav_id as usize];
                        a.0 += err;
                        a.1 += 1;
                    }
                }
            }
        }
    }
    let mean = |(s, n): (f64, usize)| s / n as f64;
    assert!(acc[0].1 > 100 && acc[1].1 > 100);
    assert!(
        mean(acc[1]) > mean(acc[0]),
        "CAV 1 {} vs CAV 2 {}",
        mean(acc[0]),
        mean(acc[1])
    );
}

#[test]
fn preset_coverage_at_least_95_percent() {
    for seed in 0..3 {
        let c = coverage(&preset_v2v_mini(seed).unwrap()).unwrap();
        assert!(c >= 0.95, "seed {seed}: coverage {c}");
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&preset_v2v_mini(5).unwrap()).unwrap();
    let b = generate(&preset_v2v_mini(5).unwrap()).unwrap();
    assert_eq!(a, b);
}
