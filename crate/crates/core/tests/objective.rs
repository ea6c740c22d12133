mod common;

use common::{gradient_mismatches, tiny_setup, TINY_MODEL};
use kinefuse::body_model::{KinematicTree, ScaleParams};
use kinefuse::camera::{CenteringMode, KeypointFrame};
use kinefuse::eval;
use kinefuse::objective::{
    optimize, Batch, FitConfig, FitMode, LossWeights, Problem, TermScales, Trajectory,
};
use kinefuse::recording::Recording;
use kinefuse::sensor_model::SensorCalibration;
use kinefuse::synth::{self, ScenarioConfig};
use nalgebra::{Vector2, Vector3};

#[test]
fn every_term_gradient_matches_central_differences() {
    let (tree, rec, net, beta, cal) = tiny_setup();
    let (bad, checked) = gradient_mismatches(&tree, &rec, &net, &beta, &cal);
    assert!(checked > 300);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn loss_examples() {
    // Single keypoint frame with one detection off by 10 cm in depth.
    let tree = KinematicTree::from_descriptor_str(TINY_MODEL).unwrap();
    let (_, rec0, net, _, _) = tiny_setup();
    let out = net.forward_batch(&[0.05], rec0.duration, 0).out;
    let theta: Vec<f64> = out[0].row(0).iter().take(tree.dof_count()).copied().collect();
    let h: Vec<f64> = out[0].row(0).iter().skip(tree.dof_count()).copied().collect();
    let r = kinefuse::trajectory_net::camera_rotation(&[h[0], h[1], h[2], h[3], h[4], h[5]]);
    let beta = ScaleParams::neutral(&tree);
    let fk = kinefuse::body_model::FkCache::compute(&tree, &beta, &theta);
    let p_c: Vec<Vector3<f64>> = fk.markers.iter().map(|m| r.transpose() * m).collect();
    let x2d: Vec<Vector2<f64>> = p_c.iter().map(|p| rec0.intrinsics.project(p).unwrap()).collect();
    let mut conf_sigma = vec![None, None, None];
    conf_sigma[2] = Some(0.0);
    let mut shifted = p_c.clone();
    shifted[2] += r.transpose() * Vector3::new(0.0, 0.0, 0.1);
    let mut x_shift = x2d.clone();
    x_shift[2].x += 10.0;
    let frame = KeypointFrame::new(0.05, shifted, x_shift, conf_sigma);
    let c = frame.confidence[2];
    let rec = Recording {
        keypoints: vec![frame],
        sensors: Vec::new(),
        phone: None,
        ..rec0
    };
    let problem = Problem::new(&rec, &tree, LossWeights::default(), CenteringMode::Weighted, false).unwrap();
    let batch = Batch::full(&rec, false);
    let ev = problem.evaluate(Trajectory::Net(&net), &beta, &SensorCalibration::identity(0), &batch, &TermScales::ALL, false, false);
    // A single weighted keypoint is its own centroid, so the 3D term vanishes.
    assert!(ev.terms.keypoint.unwrap() < 1e-20);
    let rp = ev.terms.reprojection.unwrap();
    assert!((rp - c * 50.0 / 3.0).abs() < 1e-9, "{rp}");
}

#[test]
fn closed_loop_losses_vanish_at_true_parameters() {
    let tree = KinematicTree::default_lower_body();
    let cfg = ScenarioConfig {
        duration: 4.0,
        ..Default::default()
    };
    let (rec, truth) = synth::simulate(&cfg, &tree).unwrap();
    let problem = Problem::new(&rec, &tree, LossWeights::default(), CenteringMode::Weighted, true).unwrap();
    let batch = Batch::full(&rec, true);
    let ev = problem.evaluate(
        Trajectory::Truth(&truth),
        &truth.beta,
        &truth.calibration,
        &batch,
        &TermScales::ALL,
        false,
        false,
    );
    let t = ev.terms;
    for (name, v) in [
        ("keypoint", t.keypoint),
        ("reprojection", t.reprojection),
        ("attitude", t.attitude),
        ("gyro_sensor", t.gyro_sensor),
        ("gyro_phone", t.gyro_phone),
    ] {
        let v = v.unwrap();
        assert!(v < 1e-10, "{name} = {v}");
    }
    let res = eval::residuals_of(
        Trajectory::Truth(&truth),
        &truth.beta,
        &truth.calibration,
        &rec,
        &tree,
        &FitConfig::default(),
        FitMode::Fusion,
    )
    .unwrap();
    for v in [res.keypoint_cm, res.reprojection_px, res.phone_gyro_dps, res.sensor_gyro_dps, res.attitude_deg] {
        assert!(v.unwrap() < 1e-3);
    }
}

fn short_config(steps: u64) -> FitConfig {
    let mut c = FitConfig::default();
    c.net.hidden = vec![16, 16];
    c.net.bands = 3;
    c.optimizer.steps = steps;
    c.optimizer.batch_size = 16;
    c.optimizer.group_a.lr_start = 3e-3;
    c.optimizer.group_a.lr_end = 1e-3;
    c.optimizer.group_b.start_step = steps / 2;
    c.optimizer.group_c.start_step = steps / 2;
    c.weights.anneal.start = steps / 2;
    c.weights.anneal.end = steps / 2 + steps / 4;
    c.optimizer.log_every = 0;
    c
}

#[test]
fn optimizer_is_deterministic() {
    let (tree, rec, _, _, _) = tiny_setup();
    let cfg = short_config(40);
    let a = optimize(&rec, &tree, &cfg, FitMode::Fusion).unwrap();
    let b = optimize(&rec, &tree, &cfg, FitMode::Fusion).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    let mut other = cfg.clone();
    other.optimizer.seed += 1;
    let c = optimize(&rec, &tree, &other, FitMode::Fusion).unwrap();
    assert_ne!(a.params.net, c.params.net);
}

#[test]
fn video_fit_reduces_full_loss() {
    let (tree, rec, _, _, _) = tiny_setup();
    let mut cfg = short_config(300);
    cfg.optimizer.batch_size = 5;
    let problem = Problem::new(&rec, &tree, cfg.weights.clone(), cfg.centering, false).unwrap();
    let batch = Batch::full(&rec, false);
    let init = kinefuse::objective::initial_params(&rec, &tree, &cfg).unwrap();
    let loss = |p: &kinefuse::objective::FitParams| {
        problem
            .evaluate(Trajectory::Net(&p.net), &p.beta, &p.calibration, &batch, &TermScales::ALL, false, false)
            .total
    };
    let fit = optimize(&rec, &tree, &cfg, FitMode::Video).unwrap();
    let (l0, l1) = (loss(&init), loss(&fit.params));
    assert!(l1 < 0.5 * l0, "{l0} -> {l1}");
}

#[test]
fn calibration_frozen_before_activation() {
    let (tree, rec, _, _, _) = tiny_setup();
    let mut cfg = short_config(30);
    cfg.optimizer.group_b.start_step = 29;
    cfg.optimizer.group_c.start_step = 29;
    cfg.weights.anneal.start = 0;
    cfg.weights.anneal.end = 0;
    let mut first = cfg.clone();
    first.optimizer.steps = 30;
    let fit = optimize(&rec, &tree, &first, FitMode::Fusion).unwrap();
    // Only the final step may touch the calibration: one Adam step of size lr.
    for c in &fit.params.calibration.sensors {
        for (a, b) in c.r_sb.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 2.0 * cfg.optimizer.group_b.lr);
        }
    }
}

#[test]
fn video_mode_ignores_sensor_streams() {
    let (tree, rec, _, _, _) = tiny_setup();
    let cfg = short_config(20);
    let with = optimize(&rec, &tree, &cfg, FitMode::Video).unwrap();
    let stripped = Recording {
        sensors: Vec::new(),
        ..rec.clone()
    };
    let without = optimize(&stripped, &tree, &cfg, FitMode::Video).unwrap();
    assert_eq!(with.params.net, without.params.net);
    assert!(with.history.iter().all(|h| h.terms.attitude.is_none() && h.terms.gyro_sensor.is_none()));
    assert!(with.residuals.attitude_deg.is_none());
}

#[test]
fn fusion_without_sensors_is_rejected() {
    let (tree, rec, _, _, _) = tiny_setup();
    let stripped = Recording {
        sensors: Vec::new(),
        ..rec
    };
    assert!(optimize(&stripped, &tree, &short_config(10), FitMode::Fusion).is_err());
}

#[test]
fn residuals_match_raw_loss_terms() {
    let (tree, rec, net, beta, cal) = tiny_setup();
    let cfg = FitConfig::default();
    let problem = Problem::new(&rec, &tree, cfg.weights.clone(), cfg.centering, true).unwrap();
    let res = eval::residuals_of(Trajectory::Net(&net), &beta, &cal, &rec, &tree, &cfg, FitMode::Fusion).unwrap();
    // Gyro residuals are the mean norm, the gyro losses the mean squared norm;
    // evaluate each sample alone to relate the two.
    let mut sum = 0.0;
    for k in 0..rec.phone.as_ref().unwrap().samples.len() {
        let b = Batch {
            phone: vec![k],
            ..Default::default()
        };
        let mut s = TermScales::NONE;
        s.gyro_phone = 1.0;
        let ev = problem.evaluate(Trajectory::Net(&net), &beta, &cal, &b, &s, false, false);
        sum += ev.terms.gyro_phone.unwrap().sqrt();
    }
    let n = rec.phone.as_ref().unwrap().samples.len() as f64;
    assert!((res.phone_gyro_dps.unwrap() - (sum / n).to_degrees()).abs() < 1e-9);
    let mut att = 0.0;
    let mut count = 0.0;
    for s in 0..2 {
        for k in 0..rec.sensors[s].attitude.len() {
            let mut b = Batch {
                attitude: vec![Vec::new(), Vec::new()],
                gyro: vec![Vec::new(), Vec::new()],
                ..Default::default()
            };
            b.attitude[s] = vec![k];
            let mut sc = TermScales::NONE;
            sc.attitude = 1.0;
            let ev = problem.evaluate(Trajectory::Net(&net), &beta, &cal, &b, &sc, false, false);
            // One sample of two sensors: the term is half its squared angle.
            att += (2.0 * ev.terms.attitude.unwrap()).sqrt();
            count += 1.0;
        }
    }
    assert!((res.attitude_deg.unwrap() - (att / count).to_degrees()).abs() < 1e-9);
}
