//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use kinefuse::body_model::{KinematicTree, ScaleParams};
use kinefuse::camera::{CameraIntrinsics, CenteringMode, KeypointFrame};
use kinefuse::objective::{Batch, LossWeights, Problem, TermScales, Trajectory};
use kinefuse::recording::Recording;
use kinefuse::sensor_model::{
    AttitudeSample, GyroSample, PhoneGyroStream, SensorCal, SensorCalibration, SensorStream,
};
use kinefuse::so3;
use kinefuse::trajectory_net::{init_trajectory, NetConfig, TrajectoryParams};
use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Homogeneous-transform forward kinematics written independently of the
/// library: each segment composes T_parent · Trans(s_p·offset) · Rot(joint).
pub fn oracle_markers(tree: &KinematicTree, beta: &ScaleParams, theta: &[f64]) -> Vec<Vector3<f64>> {
    let scales: Vec<f64> = tree
        .scale_map
        .iter()
        .map(|row| row.iter().map(|&(k, w)| w * beta.scale[k]).sum::<f64>().exp())
        .collect();
    let homog = |r: Matrix3<f64>, t: Vector3<f64>| {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    };
    let mut frames: Vec<Matrix4<f64>> = Vec::new();
    for (i, seg) in tree.segments.iter().enumerate() {
        let base = match seg.parent {
            None => {
                let r = nalgebra::Rotation3::new(Vector3::new(theta[3], theta[4], theta[5]));
                homog(*r.matrix(), Vector3::new(theta[0], theta[1], theta[2]))
                    * homog(Matrix3::identity(), scales[0] * seg.offset)
            }
            Some(p) => frames[p] * homog(Matrix3::identity(), scales[p] * seg.offset),
        };
        let mut t = base;
        for (k, d) in seg.dofs.iter().enumerate() {
            let r = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(d.axis),
                theta[seg.dof_start + k],
            );
            t *= homog(*r.matrix(), Vector3::zeros());
        }
        assert_eq!(frames.len(), i);
        frames.push(t);
    }
    tree.markers
        .iter()
        .zip(&beta.offsets)
        .map(|(m, o)| {
            let s = scales[m.segment];
            let p = frames[m.segment] * Vector4::new(s * m.local.x + 0.0, s * m.local.y, s * m.local.z, 1.0);
            let off = frames[m.segment].fixed_view::<3, 3>(0, 0) * o;
            Vector3::new(p.x, p.y, p.z) + off
        })
        .collect()
}

pub fn random_state(tree: &KinematicTree, rng: &mut ChaCha8Rng) -> (ScaleParams, Vec<f64>) {
    let mut beta = ScaleParams::neutral(tree);
    for s in &mut beta.scale {
        *s = rng.random_range(-0.2..0.2);
    }
    for o in &mut beta.offsets {
        *o = Vector3::new(
            rng.random_range(-0.03..0.03),
            rng.random_range(-0.03..0.03),
            rng.random_range(-0.03..0.03),
        );
    }
    let theta = (0..tree.dof_count()).map(|_| rng.random_range(-1.2..1.2)).collect();
    (beta, theta)
}

/// Descriptor text of a random tree: a free root plus up to seven jointed
/// segments with random parents, offsets, axes and markers.
pub fn random_descriptor(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=8);
    let mut s = String::from("schema = \"kinefuse.body-model/1\"\nname = \"random\"\nscale_params = [\"a\", \"b\"]\n");
    s += "\n[[segments]]\nname = \"s0\"\njoint = \"root\"\nfree = true\nscale = [\"a\"]\n";
    let v = |rng: &mut ChaCha8Rng, r: f64| {
        format!(
            "[{:.4}, {:.4}, {:.4}]",
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-r..r)
        )
    };
    for i in 1..n {
        let parent = rng.random_range(0..i);
        s += &format!(
            "\n[[segments]]\nname = \"s{i}\"\nparent = \"s{parent}\"\noffset = {}\njoint = \"j{i}\"\nscale = [\"a\", \"b\"]\n",
            v(rng, 0.4)
        );
        let dofs: Vec<String> = (0..rng.random_range(0..=3))
            .map(|k| format!("{{ name = \"d{i}_{k}\", axis = {}, limits = [-180.0, 180.0] }}", v(rng, 1.0)))
            .collect();
        s += &format!("dofs = [{}]\n", dofs.join(", "));
    }
    for m in 0..n + 2 {
        let seg = if m < n { m } else { rng.random_range(0..n) };
        s += &format!("\n[[markers]]\nname = \"m{m}\"\nsegment = \"s{seg}\"\nposition = {}\n", v(rng, 0.3));
    }
    s
}

pub const TINY_MODEL: &str = r#"
schema = "kinefuse.body-model/1"
name = "tiny"
scale_params = ["overall", "leg"]

[[segments]]
name = "pelvis"
joint = "root"
free = true
scale = ["overall"]

[[segments]]
name = "thigh"
parent = "pelvis"
offset = [0.1, 0.05, 0.0]
joint = "hip"
scale = ["overall", "leg"]
dofs = [
    { name = "hip_flexion", axis = [1.0, 0.0, 0.0], limits = [-40.0, 120.0] },
    { name = "hip_adduction", axis = [0.0, 0.0, 1.0], limits = [-45.0, 30.0] },
]

[[segments]]
name = "shank"
parent = "thigh"
offset = [0.0, 0.42, 0.0]
joint = "knee"
scale = ["overall", "leg"]
dofs = [{ name = "knee_angle", axis = [-1.0, 0.0, 0.0], limits = [-10.0, 140.0] }]

[[markers]]
name = "hip"
segment = "pelvis"
position = [0.1, 0.0, 0.05]

[[markers]]
name = "knee"
segment = "thigh"
position = [0.05, 0.42, 0.0]

[[markers]]
name = "ankle"
segment = "shank"
position = [0.04, 0.4, 0.02]
"#;

fn random_rotation(rng: &mut ChaCha8Rng, max: f64) -> nalgebra::Matrix3<f64> {
    so3::exp_map(&Vector3::new(
        rng.random_range(-max..max),
        rng.random_range(-max..max),
        rng.random_range(-max..max),
    ))
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q = so3::matrix_to_quat(&random_rotation(rng, 1.0)).to_array();
    // Off-unit raw parameters exercise the normalization path.
    q.map(|v| v * 1.3)
}

/// Two sensed segments, three markers, five frames.
pub fn tiny_setup() -> (KinematicTree, Recording, TrajectoryParams, ScaleParams, SensorCalibration) {
    let tree = KinematicTree::from_descriptor_str(TINY_MODEL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let duration = 1.0;
    let intr = CameraIntrinsics::default();
    let keypoints = (0..5)
        .map(|k| {
            let t = 0.2 * k as f64 + 0.05;
            let p: Vec<Vector3<f64>> = (0..3)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(0.0..0.9),
                        rng.random_range(2.8..3.2),
                    )
                })
                .collect();
            let x: Vec<Vector2<f64>> = p
                .iter()
                .map(|q| intr.project(q).unwrap() + Vector2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)))
                .collect();
            let sigma = (0..3).map(|_| Some(rng.random_range(15.0..40.0))).collect();
            KeypointFrame::new(t, p, x, sigma)
        })
        .collect();
    let sensors = ["thigh", "shank"]
        .iter()
        .map(|seg| SensorStream {
            id: seg.to_string(),
            segment: seg.to_string(),
            attitude_rate: 5.0,
            gyro_rate: 5.0,
            attitude: (0..5)
                .map(|k| AttitudeSample {
                    t: 0.2 * k as f64 + 0.07,
                    r: random_rotation(&mut rng, 2.0),
                })
                .collect(),
            gyro: (0..5)
                .map(|k| GyroSample {
                    t: 0.2 * k as f64 + 0.03,
                    omega: Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ),
                })
                .collect(),
        })
        .collect();
    let phone = PhoneGyroStream {
        rate: 5.0,
        samples: (0..5)
            .map(|k| GyroSample {
                t: 0.2 * k as f64 + 0.11,
                omega: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3),
            })
            .collect(),
    };
    let rec = Recording {
        duration,
        intrinsics: intr,
        keypoints,
        sensors,
        phone: Some(phone),
        scenario_hash: None,
    };
    let cfg = NetConfig {
        hidden: vec![8, 8],
        bands: 2,
        output_init_std: 0.3,
        ..NetConfig::default()
    };
    let mut net = init_trajectory(3, &cfg, tree.dof_count(), tree.descriptor_hash()).unwrap();
    let z = net.output_bias_index(2);
    net.flat[z] = 3.0;
    let mut beta = ScaleParams::neutral(&tree);
    for s in &mut beta.scale {
        *s = rng.random_range(-0.1..0.1);
    }
    for o in &mut beta.offsets {
        *o = Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.01);
    }
    let cal = SensorCalibration {
        sensors: (0..2)
            .map(|_| SensorCal {
                r_sb: random_quat(&mut rng),
                drift: [random_quat(&mut rng), random_quat(&mut rng), random_quat(&mut rng)],
                time_offset: rng.random_range(-0.05..0.05),
            })
            .collect(),
        phone_time_offset: 0.02,
    };
    (tree, rec, net, beta, cal)
}

fn close(a: f64, f: f64) -> bool {
    (a - f).abs() <= 1e-4 * a.abs().max(f.abs()) + 1e-9
}

fn single(term: usize) -> TermScales {
    let mut s = TermScales::NONE;
    match term {
        0 => s.keypoint = 1.0,
        1 => s.reprojection = 1.0,
        2 => s.attitude = 1.0,
        3 => s.gyro_sensor = 1.0,
        _ => s.gyro_phone = 1.0,
    }
    s
}

pub const TERM_NAMES: [&str; 5] = ["keypoint", "reprojection", "attitude", "gyro_sensor", "gyro_phone"];

/// Compares the analytic gradient of every loss term, taken alone, with
/// central differences over sampled network weights, all of `β`, every
/// calibration quaternion component and every time offset. Returns one
/// message per mismatch and the number of checked entries.
pub fn gradient_mismatches(
    tree: &KinematicTree,
    rec: &Recording,
    net: &TrajectoryParams,
    beta: &ScaleParams,
    cal: &SensorCalibration,
) -> (Vec<String>, usize) {
    let problem = Problem::new(rec, tree, LossWeights::default(), CenteringMode::Weighted, true).unwrap();
    let batch = Batch::full(rec, true);
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net_idx: Vec<usize> = (0..40).map(|_| rng.random_range(0..net.len())).collect();
    let mut bad = Vec::new();
    let mut checked = 0;
    for (term, name) in TERM_NAMES.iter().enumerate() {
        let scales = single(term);
        let loss = |n: &TrajectoryParams, b: &ScaleParams, c: &SensorCalibration| {
            problem.evaluate(Trajectory::Net(n), b, c, &batch, &scales, false, false).total
        };
        let ev = problem.evaluate(Trajectory::Net(net), beta, cal, &batch, &scales, true, true);
        if ev.total.is_nan() || ev.total <= 0.0 {
            bad.push(format!("{name}: term is zero at the test point"));
            continue;
        }
        let g = ev.grad.unwrap();
        let mut check = |what: String, an: f64, fd: f64| {
            checked += 1;
            if !close(an, fd) {
                bad.push(format!("{name} {what}: analytic {an} vs numeric {fd}"));
            }
        };
        for &i in &net_idx {
            let (mut a, mut b) = (net.clone(), net.clone());
            a.flat[i] += h;
            b.flat[i] -= h;
            let fd = (loss(&a, beta, cal) - loss(&b, beta, cal)) / (2.0 * h);
            check(format!("phi[{i}]"), g.net[i], fd);
        }
        let flat = beta.to_flat();
        for i in 0..flat.len() {
            let (mut a, mut b) = (flat.clone(), flat.clone());
            a[i] += h;
            b[i] -= h;
            let fa = loss(net, &ScaleParams::from_flat(tree, &a).unwrap(), cal);
            let fb = loss(net, &ScaleParams::from_flat(tree, &b).unwrap(), cal);
            check(format!("beta[{i}]"), g.beta[i], (fa - fb) / (2.0 * h));
        }
        for s in 0..cal.sensors.len() {
            for q in 0..4 {
                let (mut a, mut b) = (cal.clone(), cal.clone());
                a.sensors[s].r_sb[q] += h;
                b.sensors[s].r_sb[q] -= h;
                let fd = (loss(net, beta, &a) - loss(net, beta, &b)) / (2.0 * h);
                check(format!("r_sb[{s}][{q}]"), g.sensors[s].r_sb[q], fd);
                for k in 0..3 {
                    let (mut a, mut b) = (cal.clone(), cal.clone());
                    a.sensors[s].drift[k][q] += h;
                    b.sensors[s].drift[k][q] -= h;
                    let fd = (loss(net, beta, &a) - loss(net, beta, &b)) / (2.0 * h);
                    check(format!("drift[{s}][{k}][{q}]"), g.sensors[s].drift[k][q], fd);
                }
            }
            let (mut a, mut b) = (cal.clone(), cal.clone());
            a.sensors[s].time_offset += h;
            b.sensors[s].time_offset -= h;
            let fd = (loss(net, beta, &a) - loss(net, beta, &b)) / (2.0 * h);
            check(format!("delta[{s}]"), g.sensors[s].time_offset, fd);
        }
        let (mut a, mut b) = (cal.clone(), cal.clone());
        a.phone_time_offset += h;
        b.phone_time_offset -= h;
        let fd = (loss(net, beta, &a) - loss(net, beta, &b)) / (2.0 * h);
        check("phone delta".into(), g.phone_time_offset, fd);
    }
    (bad, checked)
}
