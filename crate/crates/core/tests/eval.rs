use kinefuse::body_model::KinematicTree;
use kinefuse::eval::{self, mae, mae_ma, pearson};
use kinefuse::objective::{initial_params, FitConfig, FitMode, Trajectory};
use kinefuse::synth::{self, GroundTruthFile, NoiseConfig, ScenarioConfig};
use proptest::prelude::*;

fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-90.0f64..90.0, n),
            prop::collection::vec(-90.0f64..90.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mae_ma_ignores_constant_offsets((a, b) in series(), c1 in -100.0f64..100.0, c2 in -100.0f64..100.0) {
        let a2: Vec<f64> = a.iter().map(|x| x + c1).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + c2).collect();
        let base = mae_ma(&a, &b).unwrap();
        prop_assert!((mae_ma(&a2, &b2).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn mae_ma_never_exceeds_mae_under_pure_bias((a, _) in series(), c in -30.0f64..30.0) {
        let b: Vec<f64> = a.iter().map(|x| x + c).collect();
        prop_assert!(mae_ma(&a, &b).unwrap() <= mae(&a, &b).unwrap() + 1e-12);
        prop_assert!((mae(&a, &b).unwrap() - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(
        (a, b) in series(),
        s1 in 0.01f64..50.0, s2 in 0.01f64..50.0,
        o1 in -100.0f64..100.0, o2 in -100.0f64..100.0,
    ) {
        if let Some(r) = pearson(&a, &b).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let a2: Vec<f64> = a.iter().map(|x| s1 * x + o1).collect();
            let b2: Vec<f64> = b.iter().map(|x| s2 * x + o2).collect();
            let r2 = pearson(&a2, &b2).unwrap().unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
            // A negative scale flips the sign.
            let b3: Vec<f64> = b.iter().map(|x| -s2 * x).collect();
            prop_assert!((pearson(&a, &b3).unwrap().unwrap() + r).abs() < 1e-9);
        }
    }
}

#[test]
fn metric_examples() {
    assert!((mae(&[1.0, 2.0, 3.0], &[2.0, 3.0, 5.0]).unwrap() - 4.0 / 3.0).abs() < 1e-12);
    assert!((mae_ma(&[0.0, 10.0], &[10.0, 0.0]).unwrap() - 10.0).abs() < 1e-12);
    assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    assert!(mae(&[], &[]).is_err());
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
}

fn residual_at_truth(keypoint_mm: f64) -> f64 {
    let tree = KinematicTree::default_lower_body();
    let cfg = ScenarioConfig {
        duration: 2.0,
        noise: NoiseConfig {
            keypoint_mm,
            ..Default::default()
        },
        ..Default::default()
    };
    let (rec, truth) = synth::simulate(&cfg, &tree).unwrap();
    eval::residuals_of(
        Trajectory::Truth(&truth),
        &truth.beta,
        &truth.calibration,
        &rec,
        &tree,
        &FitConfig::default(),
        FitMode::Video,
    )
    .unwrap()
    .keypoint_cm
    .unwrap()
}

#[test]
fn keypoint_residual_scales_with_noise() {
    let one = residual_at_truth(10.0);
    let two = residual_at_truth(20.0);
    assert!(one > 0.5 && one < 2.5, "{one}");
    assert!((two / one - 2.0).abs() < 0.1, "{one} -> {two}");
}

#[test]
fn calibration_error_vanishes_at_truth() {
    let tree = KinematicTree::default_lower_body();
    let cfg = ScenarioConfig {
        duration: 3.0,
        ..Default::default()
    };
    let (rec, truth) = synth::simulate(&cfg, &tree).unwrap();
    let r = eval::calibration_error(&truth.calibration, &rec, &truth).unwrap();
    assert!(r.attitude_map_error_deg < 1e-6, "{}", r.attitude_map_error_deg);
    assert!(r.time_offset_error_s.iter().all(|&e| e == 0.0));

    // A wrong mounting rotation shows up as a map error of about its angle.
    let mut bad = truth.calibration.clone();
    let rot = kinefuse::so3::axis_angle(&nalgebra::Vector3::new(0.0, 0.0, 1.0), 5f64.to_radians());
    let m = rot * bad.sensors[0].r_sb_matrix();
    bad.sensors[0].r_sb = kinefuse::so3::matrix_to_quat(&m).to_array();
    let r = eval::calibration_error(&bad, &rec, &truth).unwrap();
    assert!(r.attitude_map_error_deg > 1.0 && r.attitude_map_error_deg < 5.0, "{}", r.attitude_map_error_deg);
}

#[test]
fn comparison_reports_cover_every_joint() {
    let tree = KinematicTree::default_lower_body();
    let cfg = ScenarioConfig {
        duration: 2.0,
        ..Default::default()
    };
    let (rec, truth) = synth::simulate(&cfg, &tree).unwrap();
    let file = GroundTruthFile::from_truth(&truth);
    let params = initial_params(&rec, &tree, &FitConfig::default()).unwrap();
    let video = eval::compare_joints(&params.net, &tree, &file, FitMode::Video, None).unwrap();
    let window = eval::compare_joints(&params.net, &tree, &file, FitMode::Fusion, Some((0.5, 1.5))).unwrap();
    assert_eq!(video.joints.len(), eval::joint_dof_names(&tree).len());
    assert_eq!(window.times.len(), 30);
    assert!(window.times.iter().all(|&t| (0.5..1.5).contains(&t)));
    let csv = eval::comparison_csv(&[video.clone(), window.clone()]);
    assert_eq!(csv.lines().count(), 1 + 2 * video.joints.len());
    assert!(csv.lines().any(|l| l.contains(",video,knee_angle_r,")));
    assert!(csv.lines().any(|l| l.contains(",fusion,hip_flexion_r,")));
    let deltas = eval::paired_deltas(&video, &window);
    let knee = deltas.iter().find(|d| d.joint == "knee_angle_r").unwrap();
    let want = window.joint("knee_angle_r").unwrap().mae_ma_deg - video.joint("knee_angle_r").unwrap().mae_ma_deg;
    assert!((knee.mae_ma_deg - want).abs() < 1e-12);
    assert!(eval::paired_delta_csv(&video, &window).contains("fusion-video"));
}
