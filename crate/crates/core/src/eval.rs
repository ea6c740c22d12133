//! Residual diagnostics, joint-angle comparison metrics and the occlusion
//! experiment.

use crate::body_model::{KinematicTree, PoseVector, ROOT_DOF};
use crate::objective::{self, Batch, FitConfig, FitError, FitMode, FitParams, FitResult, Problem, TermScales, Trajectory};
use crate::recording::Recording;
use crate::sensor_model::SensorCalibration;
use crate::so3::{self, RotationMatrix};
use crate::synth::{self, GroundTruth, GroundTruthFile, ScenarioConfig};
use crate::trajectory_net::TrajectoryParams;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("series lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("series are empty")]
    Empty,
    #[error("unknown joint {0:?}")]
    Joint(String),
    #[error("scenario mismatch: fit {fit} vs ground truth {truth}")]
    ScenarioMismatch { fit: String, truth: String },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("{0}")]
    Other(String),
}

/// Mean residual of each stream over the full recording. Absent when the
/// stream is missing or not used by the fit mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub keypoint_cm: Option<f64>,
    pub reprojection_px: Option<f64>,
    pub phone_gyro_dps: Option<f64>,
    pub sensor_gyro_dps: Option<f64>,
    pub attitude_deg: Option<f64>,
    /// Model keypoints skipped by the reprojection residual.
    pub behind_camera: usize,
}

/// Evaluates the fitted model at every observation timestamp of every
/// stream and averages the raw residuals.
pub fn compute_residuals(
    params: &FitParams,
    rec: &Recording,
    tree: &KinematicTree,
    config: &FitConfig,
    mode: FitMode,
) -> Result<ResidualReport, EvalError> {
    residuals_of(Trajectory::Net(&params.net), &params.beta, &params.calibration, rec, tree, config, mode)
}

/// Residuals of any trajectory source, including the analytic truth.
pub fn residuals_of(
    traj: Trajectory<'_>,
    beta: &crate::body_model::ScaleParams,
    cal: &SensorCalibration,
    rec: &Recording,
    tree: &KinematicTree,
    config: &FitConfig,
    mode: FitMode,
) -> Result<ResidualReport, EvalError> {
    let use_sensors = mode == FitMode::Fusion;
    let problem = Problem::new(rec, tree, config.weights.clone(), config.centering, use_sensors)?;
    let batch = Batch::full(rec, use_sensors);
    let ev = problem.evaluate(traj, beta, cal, &batch, &TermScales::ALL, false, false);
    let r = ev.residuals;
    Ok(ResidualReport {
        keypoint_cm: r.keypoint.map(|v| v * 100.0),
        reprojection_px: r.reprojection,
        phone_gyro_dps: r.gyro_phone.map(f64::to_degrees),
        sensor_gyro_dps: r.gyro_sensor.map(f64::to_degrees),
        attitude_deg: r.attitude.map(f64::to_degrees),
        behind_camera: r.behind_camera,
    })
}

fn check(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Mean absolute difference.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean absolute difference after removing each series' mean.
pub fn mae_ma(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    Ok(a.iter().zip(b).map(|(x, y)| ((x - ma) - (y - mb)).abs()).sum::<f64>() / a.len() as f64)
}

/// Sample correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>, EvalError> {
    check(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// Median and interquartile range of a sample.
pub fn median_iqr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
    };
    Some((q(0.5), q(0.75) - q(0.25)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMetrics {
    pub joint: String,
    pub mae_deg: f64,
    pub mae_ma_deg: f64,
    pub pearson: Option<f64>,
}

/// Joint-angle agreement of one fit with the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario_hash: String,
    pub mode: FitMode,
    /// Evaluation window `[start, end)` in seconds; `None` for all times.
    pub window: Option<(f64, f64)>,
    pub times: Vec<f64>,
    pub joints: Vec<JointMetrics>,
}

impl ComparisonReport {
    pub fn joint(&self, name: &str) -> Option<&JointMetrics> {
        self.joints.iter().find(|j| j.joint == name)
    }
}

/// Pose rows of the network at `times`.
pub fn predicted_poses(net: &TrajectoryParams, times: &[f64], duration: f64) -> Vec<PoseVector> {
    let out = net.forward_batch(times, duration, 0).out;
    (0..times.len())
        .map(|i| PoseVector(out[0].row(i).iter().take(net.n_dof).copied().collect()))
        .collect()
}

/// Names of every joint DOF (the root is excluded).
pub fn joint_dof_names(tree: &KinematicTree) -> Vec<String> {
    tree.segments
        .iter()
        .flat_map(|s| s.dofs.iter().map(|d| d.name.clone()))
        .collect()
}

/// Compares predicted joint angles against the truth sidecar at its
/// timestamps, optionally restricted to a time window.
pub fn compare_joints(
    net: &TrajectoryParams,
    tree: &KinematicTree,
    truth: &GroundTruthFile,
    mode: FitMode,
    window: Option<(f64, f64)>,
) -> Result<ComparisonReport, EvalError> {
    let duration = truth.scenario.duration;
    let keep: Vec<usize> = (0..truth.times.len())
        .filter(|&i| window.is_none_or(|(a, b)| truth.times[i] >= a && truth.times[i] < b))
        .collect();
    let times: Vec<f64> = keep.iter().map(|&i| truth.times[i]).collect();
    let poses = predicted_poses(net, &times, duration);
    let mut joints = Vec::new();
    for name in joint_dof_names(tree) {
        let series = truth.series(&name).ok_or_else(|| EvalError::Joint(name.clone()))?;
        let truth_deg: Vec<f64> = keep.iter().map(|&i| series[i]).collect();
        let pred_deg = poses
            .iter()
            .map(|p| crate::body_model::extract_joint_angle(tree, p, &name))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Other(e.to_string()))?;
        joints.push(JointMetrics {
            joint: name,
            mae_deg: mae(&pred_deg, &truth_deg)?,
            mae_ma_deg: mae_ma(&pred_deg, &truth_deg)?,
            pearson: pearson(&pred_deg, &truth_deg)?,
        });
    }
    Ok(ComparisonReport {
        scenario_hash: truth.scenario_hash.clone(),
        mode,
        window,
        times,
        joints,
    })
}

/// Rotation `Q` minimizing `Σ‖Q A_i − B_i‖²`, the best global alignment of
/// predicted orientations `A_i` to true ones `B_i`.
pub fn gauge_alignment(pred: &[RotationMatrix], truth: &[RotationMatrix]) -> RotationMatrix {
    let mut m = Matrix3::zeros();
    for (a, b) in pred.iter().zip(truth) {
        m += b * a.transpose();
    }
    so3::project_to_rotation(&m)
}

/// Quality of the recovered calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Mean geodesic angle between `R_nn'(t)·R_n's·R_sb` and the true
    /// segment orientation over all attitude samples, after removing the
    /// unobservable global rotation.
    pub attitude_map_error_deg: f64,
    /// Per sensor `|δ̂ − δ|`, seconds.
    pub time_offset_error_s: Vec<f64>,
    /// Fitted offsets, seconds.
    pub time_offsets_s: Vec<f64>,
}

pub fn calibration_error(
    cal: &SensorCalibration,
    rec: &Recording,
    truth: &GroundTruth,
) -> Result<CalibrationReport, EvalError> {
    let tree = &truth.tree;
    let duration = rec.duration;
    let mut pred = Vec::new();
    let mut real = Vec::new();
    for (s, stream) in rec.sensors.iter().enumerate() {
        let seg = tree
            .segment_index(&stream.segment)
            .ok_or_else(|| EvalError::Other(format!("unknown segment {}", stream.segment)))?;
        let c = &cal.sensors[s];
        let true_offset = truth.calibration.sensors[s].time_offset;
        for a in &stream.attitude {
            pred.push(crate::sensor_model::predicted_attitude(c, &a.r, a.t, duration));
            real.push(truth.segment_state(a.t + true_offset, seg).0);
        }
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let q = gauge_alignment(&pred, &real);
    let err = pred
        .iter()
        .zip(&real)
        .map(|(p, r)| so3::geodesic_angle(&(q * p), r))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(CalibrationReport {
        attitude_map_error_deg: err.to_degrees(),
        time_offset_error_s: cal
            .sensors
            .iter()
            .zip(&truth.calibration.sensors)
            .map(|(a, b)| (a.time_offset - b.time_offset).abs())
            .collect(),
        time_offsets_s: cal.sensors.iter().map(|c| c.time_offset).collect(),
    })
}

/// Outcome of fitting one occluded recording in both modes.
#[derive(Debug, Clone)]
pub struct OcclusionOutcome {
    pub video: ComparisonReport,
    pub fusion: ComparisonReport,
    /// Same metrics restricted to the occluded window.
    pub video_occluded: ComparisonReport,
    pub fusion_occluded: ComparisonReport,
    pub fits: (FitResult, FitResult),
}

/// Simulates `scenario`, fits it video-only and with fusion, and compares
/// joint angles against the truth over the whole recording and over the
/// occlusion window.
pub fn run_occlusion_experiment(
    scenario: &ScenarioConfig,
    tree: &KinematicTree,
    video_cfg: &FitConfig,
    fusion_cfg: &FitConfig,
) -> Result<OcclusionOutcome, EvalError> {
    let (rec, truth) = synth::simulate(scenario, tree).map_err(|e| EvalError::Other(e.to_string()))?;
    let truth_file = GroundTruthFile::from_truth(&truth);
    let video = objective::optimize(&rec, tree, video_cfg, FitMode::Video)?;
    let fusion = objective::optimize(&rec, tree, fusion_cfg, FitMode::Fusion)?;
    let t = scenario.duration;
    let window = Some((scenario.occlusion.start * t, scenario.occlusion.end * t));
    Ok(OcclusionOutcome {
        video: compare_joints(&video.params.net, tree, &truth_file, FitMode::Video, None)?,
        fusion: compare_joints(&fusion.params.net, tree, &truth_file, FitMode::Fusion, None)?,
        video_occluded: compare_joints(&video.params.net, tree, &truth_file, FitMode::Video, window)?,
        fusion_occluded: compare_joints(&fusion.params.net, tree, &truth_file, FitMode::Fusion, window)?,
        fits: (video, fusion),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

/// Flat CSV, one row per report and joint.
pub fn comparison_csv(reports: &[ComparisonReport]) -> String {
    let mut s = String::from("scenario_hash,mode,joint,mae_deg,mae_ma_deg,pearson\n");
    for r in reports {
        for j in &r.joints {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{}",
                r.scenario_hash,
                r.mode,
                j.joint,
                j.mae_deg,
                j.mae_ma_deg,
                opt(j.pearson)
            );
        }
    }
    s
}

/// Per-joint differences `b − a` of every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub joint: String,
    pub mae_deg: f64,
    pub mae_ma_deg: f64,
    pub pearson: Option<f64>,
}

pub fn paired_deltas(a: &ComparisonReport, b: &ComparisonReport) -> Vec<PairedDelta> {
    a.joints
        .iter()
        .filter_map(|ja| {
            let jb = b.joint(&ja.joint)?;
            Some(PairedDelta {
                joint: ja.joint.clone(),
                mae_deg: jb.mae_deg - ja.mae_deg,
                mae_ma_deg: jb.mae_ma_deg - ja.mae_ma_deg,
                pearson: ja.pearson.zip(jb.pearson).map(|(x, y)| y - x),
            })
        })
        .collect()
}

/// CSV of paired deltas labelled `<b>-<a>`.
pub fn paired_delta_csv(a: &ComparisonReport, b: &ComparisonReport) -> String {
    let mut s = String::from("scenario_hash,pair,joint,delta_mae_deg,delta_mae_ma_deg,delta_pearson\n");
    for d in paired_deltas(a, b) {
        let _ = writeln!(
            s,
            "{},{}-{},{},{:.6},{:.6},{}",
            a.scenario_hash,
            b.mode,
            a.mode,
            d.joint,
            d.mae_deg,
            d.mae_ma_deg,
            opt(d.pearson)
        );
    }
    s
}

/// Count of root coordinates, re-exported for report consumers.
pub const ROOT_COORDINATES: usize = ROOT_DOF;
