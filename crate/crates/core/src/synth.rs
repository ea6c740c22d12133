//! Ground-truth recording simulator.
//!
//! Every pose coordinate is a sum of sinusoids, so poses, rates and
//! accelerations are analytic. The camera sits at the world origin, starts
//! aligned with the world frame and pans about the vertical axis to follow
//! the pelvis, with a small tilt oscillation.

use crate::body_model::{FkCache, KinematicTree, ScaleParams, ROOT_DOF};
use crate::camera::{CameraIntrinsics, KeypointFrame, MIN_DEPTH};
use crate::exec;
use crate::random::keyed_rng;
use crate::recording::Recording;
use crate::sensor_model::{
    AttitudeSample, GyroSample, PhoneGyroStream, SensorCal, SensorCalibration, SensorStream,
};
use crate::so3::{self, RotationMatrix, UnitQuaternion};
use crate::trajectory_net::CAMERA_HEAD;
use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

pub const TRUTH_SCHEMA: &str = "kinefuse.ground-truth/1";
/// Names addressing the free-joint coordinates in a scenario.
pub const ROOT_DOF_NAMES: [&str; ROOT_DOF] = ["root_tx", "root_ty", "root_tz", "root_rx", "root_ry", "root_rz"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario parse error: {0}")]
    Parse(String),
}

/// One sinusoid `amplitude · sin(2π · harmonic · f_gait · t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub amplitude: f64,
    pub harmonic: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Motion of one pose coordinate. Angles in degrees, translations in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DofProfile {
    pub name: String,
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraProfile {
    pub intrinsics: CameraIntrinsics,
    /// Pan about the vertical axis to keep the pelvis centered.
    pub follow: bool,
    pub tilt_amplitude_deg: f64,
    pub tilt_frequency_hz: f64,
}

impl Default for CameraProfile {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            follow: true,
            tilt_amplitude_deg: 3.0,
            tilt_frequency_hz: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Isotropic 3D keypoint noise per axis, mm.
    pub keypoint_mm: f64,
    /// 2D keypoint noise per axis, pixels.
    pub pixel: f64,
    /// RMS angle of the attitude perturbation, degrees.
    pub attitude_deg: f64,
    /// White gyro noise per axis, deg/s.
    pub gyro_dps: f64,
    pub phone_gyro_dps: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            keypoint_mm: 0.0,
            pixel: 0.0,
            attitude_deg: 0.0,
            gyro_dps: 0.0,
            phone_gyro_dps: 0.0,
        }
    }
}

impl NoiseConfig {
    /// IMU-grade defaults: 1° attitude, 0.5 deg/s gyro.
    pub fn imu_default() -> Self {
        Self {
            attitude_deg: 1.0,
            gyro_dps: 0.5,
            ..Self::default()
        }
    }
}

/// Keypoints on `segments` lose their detections between the two fractions
/// of the recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub start: f64,
    pub end: f64,
    pub segments: Vec<String>,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            start: 0.0,
            end: 0.0,
            segments: ["thigh_r", "shank_r", "foot_r", "toes_r"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    pub segment: String,
    /// True sensor-to-segment rotation as an axis-angle vector, degrees.
    pub r_sb_deg: [f64; 3],
    /// Heading drift at `0`, `T/2`, `T` as rotations about the vertical axis, degrees.
    #[serde(default = "default_drift")]
    pub drift_yaw_deg: [f64; 3],
    /// True clock offset: stream time = recording time − offset.
    #[serde(default)]
    pub time_offset: f64,
}

fn default_drift() -> [f64; 3] {
    [0.0, 3.0, 5.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub duration: f64,
    pub gait_frequency: f64,
    pub seed: u64,
    pub keypoint_rate: f64,
    pub attitude_rate: f64,
    pub gyro_rate: f64,
    pub phone_rate: f64,
    pub phone_time_offset: f64,
    pub dofs: Vec<DofProfile>,
    pub camera: CameraProfile,
    pub noise: NoiseConfig,
    pub occlusion: OcclusionConfig,
    pub sensors: Vec<SensorSpec>,
}

fn profile(name: &str, mean: f64, terms: &[(f64, f64, f64)]) -> DofProfile {
    DofProfile {
        name: name.to_string(),
        mean,
        terms: terms
            .iter()
            .map(|&(amplitude, harmonic, phase)| Term {
                amplitude,
                harmonic,
                phase,
            })
            .collect(),
    }
}

impl Default for ScenarioConfig {
    /// Ten seconds of walking along a loop in front of the camera with
    /// thigh and shank IMUs on the right leg.
    fn default() -> Self {
        let mut dofs = vec![
            profile("root_tx", 0.0, &[(1.0, 0.1, 0.0)]),
            profile("root_ty", 0.45, &[(0.02, 2.0, 0.0)]),
            profile("root_tz", 3.5, &[(0.6, 0.2, 0.0)]),
            profile("root_rx", 0.0, &[(4.0, 2.0, 0.3)]),
            profile("root_ry", 0.0, &[(40.0, 0.1, FRAC_PI_2), (6.0, 1.0, 0.0)]),
            profile("root_rz", 0.0, &[(5.0, 1.0, 0.5)]),
            profile("lumbar_flexion", 5.0, &[(3.0, 2.0, 0.0)]),
            profile("lumbar_bending", 0.0, &[(4.0, 1.0, 0.2)]),
            profile("lumbar_rotation", 0.0, &[(5.0, 1.0, PI)]),
            profile("neck_flexion", 0.0, &[(3.0, 1.0, 1.0)]),
        ];
        for (side, shift) in [("r", 0.0), ("l", PI)] {
            let leg = [
                (format!("hip_flexion_{side}"), 12.0, vec![(25.0, 1.0, shift), (3.0, 2.0, 2.0 * shift + 0.4)]),
                (format!("hip_adduction_{side}"), 0.0, vec![(5.0, 1.0, shift + 0.5)]),
                (format!("hip_rotation_{side}"), 0.0, vec![(6.0, 1.0, shift + 1.0)]),
                (
                    format!("knee_angle_{side}"),
                    34.0,
                    vec![(26.0, 1.0, shift - 1.6), (9.0, 2.0, 2.0 * shift - 1.8)],
                ),
                (format!("ankle_angle_{side}"), 0.0, vec![(12.0, 1.0, shift + 1.0), (4.0, 2.0, 2.0 * shift)]),
            ];
            for (name, mean, terms) in leg {
                dofs.push(profile(&name, mean, &terms));
            }
        }
        Self {
            duration: 10.0,
            gait_frequency: 1.0,
            seed: 1,
            keypoint_rate: 30.0,
            attitude_rate: 55.0,
            gyro_rate: 562.5,
            phone_rate: 100.0,
            phone_time_offset: 0.0,
            dofs,
            camera: CameraProfile::default(),
            noise: NoiseConfig::default(),
            occlusion: OcclusionConfig::default(),
            sensors: vec![
                SensorSpec {
                    id: "thigh".into(),
                    segment: "thigh_r".into(),
                    r_sb_deg: [20.0, 80.0, 10.0],
                    drift_yaw_deg: default_drift(),
                    time_offset: 0.2,
                },
                SensorSpec {
                    id: "shank".into(),
                    segment: "shank_r".into(),
                    r_sb_deg: [-15.0, 70.0, 25.0],
                    drift_yaw_deg: default_drift(),
                    time_offset: 0.2,
                },
            ],
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self, tree: &KinematicTree) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive".into());
        }
        for (name, r) in [
            ("keypoint_rate", self.keypoint_rate),
            ("attitude_rate", self.attitude_rate),
            ("gyro_rate", self.gyro_rate),
            ("phone_rate", self.phone_rate),
        ] {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        let n = &self.noise;
        if [n.keypoint_mm, n.pixel, n.attitude_deg, n.gyro_dps, n.phone_gyro_dps]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("noise levels must be nonnegative".into());
        }
        let o = &self.occlusion;
        if !(0.0 <= o.start && o.start <= o.end && o.end <= 1.0) {
            return bad("occlusion window must satisfy 0 ≤ start ≤ end ≤ 1".into());
        }
        for s in &o.segments {
            if tree.segment_index(s).is_none() {
                return bad(format!("occlusion names unknown segment {s:?}"));
            }
        }
        for d in &self.dofs {
            if dof_index(tree, &d.name).is_none() {
                return bad(format!("unknown pose coordinate {:?}", d.name));
            }
        }
        for s in &self.sensors {
            if tree.segment_index(&s.segment).is_none() {
                return bad(format!("sensor {} attached to unknown segment {:?}", s.id, s.segment));
            }
            if s.time_offset.abs() > crate::sensor_model::MAX_TIME_OFFSET {
                return bad(format!("sensor {} time offset exceeds 0.5 s", s.id));
            }
        }
        if self.phone_time_offset.abs() > crate::sensor_model::MAX_TIME_OFFSET {
            return bad("phone time offset exceeds 0.5 s".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding plus the body model hash.
    pub fn hash(&self, tree: &KinematicTree) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.update(tree.descriptor_hash().as_bytes());
        hex::encode(h.finalize())
    }

    /// True calibrations in the optimizer's parameterization.
    pub fn true_calibration(&self) -> SensorCalibration {
        SensorCalibration {
            sensors: self
                .sensors
                .iter()
                .map(|s| {
                    let r = so3::exp_map(&Vector3::from(s.r_sb_deg).map(f64::to_radians));
                    let knot = |deg: f64| {
                        UnitQuaternion::from_axis_angle(&Vector3::y(), deg.to_radians()).to_array()
                    };
                    SensorCal {
                        r_sb: so3::matrix_to_quat(&r).to_array(),
                        drift: s.drift_yaw_deg.map(knot),
                        time_offset: s.time_offset,
                    }
                })
                .collect(),
            phone_time_offset: self.phone_time_offset,
        }
    }
}

fn dof_index(tree: &KinematicTree, name: &str) -> Option<usize> {
    ROOT_DOF_NAMES
        .iter()
        .position(|n| *n == name)
        .or_else(|| tree.dof_index(name))
}

fn is_translation(idx: usize) -> bool {
    idx < 3
}

/// Analytic ground truth for a scenario.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub config: ScenarioConfig,
    pub tree: KinematicTree,
    pub beta: ScaleParams,
    pub calibration: SensorCalibration,
    /// Per pose coordinate: `(mean, [(amplitude, ω, phase)])` in SI units.
    coeffs: Vec<(f64, Vec<(f64, f64, f64)>)>,
}

/// Pose, camera and their first two time derivatives at one instant.
#[derive(Debug, Clone)]
pub struct TruthSample {
    pub theta: [Vec<f64>; 3],
    pub r_nc: [Matrix3<f64>; 3],
}

/// Builds the analytic trajectory.
pub fn generate_trajectory(config: &ScenarioConfig, tree: &KinematicTree) -> Result<GroundTruth, SynthError> {
    config.validate(tree)?;
    let mut coeffs = vec![(0.0, Vec::new()); tree.dof_count()];
    for d in &config.dofs {
        let idx = dof_index(tree, &d.name).expect("validated");
        let unit = if is_translation(idx) { 1.0 } else { PI / 180.0 };
        coeffs[idx] = (
            d.mean * unit,
            d.terms
                .iter()
                .map(|t| (t.amplitude * unit, 2.0 * PI * t.harmonic * config.gait_frequency, t.phase))
                .collect(),
        );
    }
    Ok(GroundTruth {
        config: config.clone(),
        tree: tree.clone(),
        beta: ScaleParams::neutral(tree),
        calibration: config.true_calibration(),
        coeffs,
    })
}

impl GroundTruth {
    /// `θ`, `θ̇`, `θ̈` at recording time `t`.
    pub fn theta(&self, t: f64) -> [Vec<f64>; 3] {
        let n = self.coeffs.len();
        let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (i, (mean, terms)) in self.coeffs.iter().enumerate() {
            out[0][i] = *mean;
            for &(a, w, p) in terms {
                let (s, c) = (w * t + p).sin_cos();
                out[0][i] += a * s;
                out[1][i] += a * w * c;
                out[2][i] -= a * w * w * s;
            }
        }
        out
    }

    fn pan(&self, t: f64) -> [f64; 3] {
        if !self.config.camera.follow {
            return [0.0; 3];
        }
        let th = self.theta(t);
        let (x, z) = (th[0][0], th[0][2]);
        let (xd, zd) = (th[1][0], th[1][2]);
        let (xdd, zdd) = (th[2][0], th[2][2]);
        let th0 = self.theta(0.0);
        let psi0 = th0[0][0].atan2(th0[0][2]);
        let d = x * x + z * z;
        let n = xd * z - x * zd;
        let dd = 2.0 * (x * xd + z * zd);
        let nd = xdd * z - x * zdd;
        [x.atan2(z) - psi0, n / d, (nd * d - n * dd) / (d * d)]
    }

    fn tilt(&self, t: f64) -> [f64; 3] {
        let a = self.config.camera.tilt_amplitude_deg.to_radians();
        let w = 2.0 * PI * self.config.camera.tilt_frequency_hz;
        let (s, c) = (w * t).sin_cos();
        [a * s, a * w * c, -a * w * w * s]
    }

    /// Camera orientation `R_nc = R_y(ψ) R_x(φ)` and its first two
    /// derivatives.
    pub fn camera(&self, t: f64) -> [Matrix3<f64>; 3] {
        let [p, pd, pdd] = self.pan(t);
        let [q, qd, qdd] = self.tilt(t);
        let (ey, ex) = (Vector3::y(), Vector3::x());
        let ry = so3::axis_angle(&ey, p);
        let rx = so3::axis_angle(&ex, q);
        let (hy, hx) = (so3::hat(&ey), so3::hat(&ex));
        let ry1 = hy * ry;
        let ry2 = hy * hy * ry;
        let rx1 = hx * rx;
        let rx2 = hx * hx * rx;
        let r = ry * rx;
        let rd = ry1 * rx * pd + ry * rx1 * qd;
        let rdd = ry2 * rx * pd * pd + ry1 * rx * pdd + 2.0 * ry1 * rx1 * pd * qd + ry * rx2 * qd * qd + ry * rx1 * qdd;
        [r, rd, rdd]
    }

    /// Analytic phone gyro `R_x(φ)ᵀ ψ̇ ŷ + φ̇ x̂`.
    pub fn phone_gyro(&self, t: f64) -> Vector3<f64> {
        let [_, pd, _] = self.pan(t);
        let [q, qd, _] = self.tilt(t);
        so3::axis_angle(&Vector3::x(), q).transpose() * Vector3::y() * pd + Vector3::x() * qd
    }

    pub fn sample(&self, t: f64) -> TruthSample {
        TruthSample {
            theta: self.theta(t),
            r_nc: self.camera(t),
        }
    }

    /// True trajectory in the network output layout: rows are times,
    /// columns `[θ, first two columns of R_nc]`, one array per derivative order.
    pub fn outputs(&self, times: &[f64]) -> [Array2<f64>; 3] {
        let n = self.tree.dof_count();
        let mut out: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((times.len(), n + CAMERA_HEAD)));
        for (i, &t) in times.iter().enumerate() {
            let s = self.sample(t);
            for k in 0..3 {
                for j in 0..n {
                    out[k][[i, j]] = s.theta[k][j];
                }
                let r = &s.r_nc[k];
                for c in 0..2 {
                    for row in 0..3 {
                        out[k][[i, n + 3 * c + row]] = r[(row, c)];
                    }
                }
            }
        }
        out
    }

    pub fn segment_state(&self, t: f64, seg: usize) -> (RotationMatrix, Vector3<f64>) {
        let th = self.theta(t);
        let c = FkCache::compute(&self.tree, &self.beta, &th[0]);
        (c.rot[seg], c.body_rate(&self.tree, seg, &th[1]))
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, std: f64) -> Vector3<f64> {
    if std == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, std).expect("finite std");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn sample_count(rate: f64, duration: f64) -> usize {
    (rate * duration).round() as usize
}

const STREAM_KEYPOINTS: u64 = 1;
const STREAM_PHONE: u64 = 2;
const STREAM_IMU_BASE: u64 = 16;

/// Whether frame time `t` falls in the occlusion window.
pub fn is_occluded(config: &ScenarioConfig, t: f64) -> bool {
    let o = &config.occlusion;
    o.end > o.start && t >= o.start * config.duration && t < o.end * config.duration
}

/// Video keypoint frames from the true trajectory.
pub fn render_observations(truth: &GroundTruth) -> Vec<KeypointFrame> {
    let cfg = &truth.config;
    let tree = &truth.tree;
    let intr = &cfg.camera.intrinsics;
    let occluded_segments: Vec<usize> = cfg
        .occlusion
        .segments
        .iter()
        .filter_map(|s| tree.segment_index(s))
        .collect();
    let n = sample_count(cfg.keypoint_rate, cfg.duration);
    let sigma_m = cfg.noise.keypoint_mm / 1000.0;
    exec::map_indexed(n, 16, |k| {
        let t = k as f64 / cfg.keypoint_rate;
        let mut rng = keyed_rng(cfg.seed, STREAM_KEYPOINTS, k as u64);
        let th = truth.theta(t);
        let c = FkCache::compute(tree, &truth.beta, &th[0]);
        let r_nc = truth.camera(t)[0];
        let occ = is_occluded(cfg, t);
        let mut p_c = Vec::with_capacity(tree.markers.len());
        let mut x2d = Vec::with_capacity(tree.markers.len());
        let mut sigma = Vec::with_capacity(tree.markers.len());
        for (m, marker) in tree.markers.iter().enumerate() {
            let p_true = r_nc.transpose() * c.markers[m];
            let p_noise = gaussian3(&mut rng, sigma_m);
            let px_noise = gaussian3(&mut rng, cfg.noise.pixel);
            let visible = p_true.z > MIN_DEPTH && !(occ && occluded_segments.contains(&marker.segment));
            if visible {
                let uv = intr.project(&p_true).expect("depth checked");
                p_c.push(p_true + p_noise);
                x2d.push(uv + Vector2::new(px_noise.x, px_noise.y));
                sigma.push(Some(cfg.noise.keypoint_mm));
            } else {
                p_c.push(Vector3::zeros());
                x2d.push(Vector2::zeros());
                sigma.push(None);
            }
        }
        KeypointFrame::new(t, p_c, x2d, sigma)
    })
}

/// IMU streams and phone gyroscope from the true trajectory.
pub fn simulate_imu(truth: &GroundTruth) -> (Vec<SensorStream>, PhoneGyroStream) {
    let cfg = &truth.config;
    let tree = &truth.tree;
    let att_std = cfg.noise.attitude_deg.to_radians() / 3f64.sqrt();
    let gyro_std = cfg.noise.gyro_dps.to_radians();
    let phone_std = cfg.noise.phone_gyro_dps.to_radians();
    let sensors = cfg
        .sensors
        .iter()
        .zip(&truth.calibration.sensors)
        .enumerate()
        .map(|(i, (spec, cal))| {
            let seg = tree.segment_index(&spec.segment).expect("validated");
            let r_sb = cal.r_sb_matrix();
            let stream_att = STREAM_IMU_BASE + 2 * i as u64;
            let n_att = sample_count(cfg.attitude_rate, cfg.duration);
            let attitude = exec::map_indexed(n_att, 32, |k| {
                let tau = k as f64 / cfg.attitude_rate;
                let ts = tau - cal.time_offset;
                let (r_nb, _) = truth.segment_state(tau, seg);
                let drift = cal.drift_matrix(ts, cfg.duration);
                let mut rng = keyed_rng(cfg.seed, stream_att, k as u64);
                let noise = so3::exp_map(&gaussian3(&mut rng, att_std));
                AttitudeSample {
                    t: ts,
                    r: drift.transpose() * r_nb * r_sb.transpose() * noise,
                }
            });
            let n_gyro = sample_count(cfg.gyro_rate, cfg.duration);
            let gyro = exec::map_indexed(n_gyro, 64, |k| {
                let tau = k as f64 / cfg.gyro_rate;
                let (_, w_b) = truth.segment_state(tau, seg);
                let mut rng = keyed_rng(cfg.seed, stream_att + 1, k as u64);
                GyroSample {
                    t: tau - cal.time_offset,
                    omega: r_sb * w_b + gaussian3(&mut rng, gyro_std),
                }
            });
            SensorStream {
                id: spec.id.clone(),
                segment: spec.segment.clone(),
                attitude_rate: cfg.attitude_rate,
                gyro_rate: cfg.gyro_rate,
                attitude,
                gyro,
            }
        })
        .collect();
    let n_phone = sample_count(cfg.phone_rate, cfg.duration);
    let samples = exec::map_indexed(n_phone, 64, |k| {
        let tau = k as f64 / cfg.phone_rate;
        let mut rng = keyed_rng(cfg.seed, STREAM_PHONE, k as u64);
        GyroSample {
            t: tau - cfg.phone_time_offset,
            omega: truth.phone_gyro(tau) + gaussian3(&mut rng, phone_std),
        }
    });
    (
        sensors,
        PhoneGyroStream {
            rate: cfg.phone_rate,
            samples,
        },
    )
}

/// Full simulated recording plus its ground truth.
pub fn simulate(config: &ScenarioConfig, tree: &KinematicTree) -> Result<(Recording, GroundTruth), SynthError> {
    let truth = generate_trajectory(config, tree)?;
    let keypoints = render_observations(&truth);
    let (sensors, phone) = simulate_imu(&truth);
    let rec = Recording {
        duration: config.duration,
        intrinsics: config.camera.intrinsics,
        keypoints,
        sensors,
        phone: Some(phone),
        scenario_hash: Some(config.hash(tree)),
    };
    Ok((rec, truth))
}

/// Ground-truth sidecar written next to a simulated recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub schema: String,
    pub scenario_hash: String,
    pub descriptor_hash: String,
    pub scenario: ScenarioConfig,
    pub dof_names: Vec<String>,
    /// Evaluation timestamps (the video frame times), seconds.
    pub times: Vec<f64>,
    /// Pose rows; translations in meters, rotations in degrees.
    pub theta: Vec<Vec<f64>>,
    /// Camera orientation quaternions `[w, x, y, z]`.
    pub r_nc: Vec<[f64; 4]>,
    pub calibration: SensorCalibration,
}

impl GroundTruthFile {
    pub fn from_truth(truth: &GroundTruth) -> Self {
        let cfg = &truth.config;
        let tree = &truth.tree;
        let n = sample_count(cfg.keypoint_rate, cfg.duration);
        let times: Vec<f64> = (0..n).map(|k| k as f64 / cfg.keypoint_rate).collect();
        let mut dof_names: Vec<String> = ROOT_DOF_NAMES.iter().map(|s| s.to_string()).collect();
        for s in &tree.segments {
            dof_names.extend(s.dofs.iter().map(|d| d.name.clone()));
        }
        let theta = times
            .iter()
            .map(|&t| {
                truth.theta(t)[0]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if is_translation(i) { *v } else { v.to_degrees() })
                    .collect()
            })
            .collect();
        let r_nc = times
            .iter()
            .map(|&t| so3::matrix_to_quat(&truth.camera(t)[0]).to_array())
            .collect();
        Self {
            schema: TRUTH_SCHEMA.to_string(),
            scenario_hash: cfg.hash(tree),
            descriptor_hash: tree.descriptor_hash().to_string(),
            scenario: cfg.clone(),
            dof_names,
            times,
            theta,
            r_nc,
            calibration: truth.calibration.clone(),
        }
    }

    /// Series of one pose coordinate in file units.
    pub fn series(&self, dof: &str) -> Option<Vec<f64>> {
        let i = self.dof_names.iter().position(|n| n == dof)?;
        Some(self.theta.iter().map(|row| row[i]).collect())
    }
}
