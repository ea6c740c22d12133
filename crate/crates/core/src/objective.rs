//! Loss terms, batch sampling and the staged three-group optimizer.
//!
//! Group A holds the trajectory network and the body scale parameters,
//! group B the sensor-to-segment rotations and drift knots, group C the
//! clock offsets. Loss terms are evaluated on rows of network outputs
//! (`[θ, camera head]` and their time derivatives), so the same kernels
//! score the analytic ground truth.

use crate::body_model::{FkCache, KinematicTree, ScaleParams, MARKER_OFFSET_BOUND};
use crate::camera::{self, CameraIntrinsics, CenteringMode, KeypointFrame, MIN_DEPTH};
use crate::dual::{self, Dual};
use crate::exec;
use crate::random::keyed_rng;
use crate::recording::Recording;
use crate::sensor_model::{self, SensorCal, SensorCalibration};
use crate::so3;
use crate::synth::GroundTruth;
use crate::trajectory_net::{self as tnet, NetConfig, NetError, TrajectoryParams, CAMERA_HEAD};
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Rows handled per parallel task in the per-sample kernels.
const KERNEL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("recording unusable for this fit: {0}")]
    Data(String),
    #[error("optimization diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// Parameters before the failing step.
        last_finite: Box<FitParams>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Robust penalty: `r²/2` up to `delta`, linear beyond.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// `huber'(r) / r`, the factor applied to the residual vector.
fn huber_scale(r: f64, delta: f64) -> f64 {
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

/// Linear ramp of the inertial term weights from 0 at `start` to 1 at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anneal {
    pub start: u64,
    pub end: u64,
}

impl Anneal {
    pub fn factor(&self, step: u64) -> f64 {
        if step < self.start {
            0.0
        } else if step >= self.end {
            1.0
        } else {
            (step - self.start) as f64 / (self.end - self.start) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub keypoint: f64,
    pub reprojection: f64,
    pub attitude: f64,
    pub gyro_sensor: f64,
    pub gyro_phone: f64,
    /// Huber threshold of the 3D keypoint term, meters.
    pub huber_keypoint_m: f64,
    /// Huber threshold of the reprojection term, pixels.
    pub huber_reprojection_px: f64,
    /// Ramp applied to the attitude and sensor gyro terms.
    pub anneal: Anneal,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            keypoint: 1.0,
            reprojection: 1e-4,
            attitude: 1.0,
            gyro_sensor: 1e-3,
            gyro_phone: 1e-2,
            huber_keypoint_m: 1.0,
            huber_reprojection_px: 100.0,
            anneal: Anneal {
                start: 10_000,
                end: 15_000,
            },
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), FitError> {
        let w = [
            self.keypoint,
            self.reprojection,
            self.attitude,
            self.gyro_sensor,
            self.gyro_phone,
        ];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(FitError::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.huber_keypoint_m > 0.0 && self.huber_reprojection_px > 0.0) {
            return Err(FitError::Config("Huber thresholds must be positive".into()));
        }
        if self.anneal.start > self.anneal.end {
            return Err(FitError::Config("anneal start must not exceed its end".into()));
        }
        Ok(())
    }

    /// Effective weights at `step`.
    pub fn at_step(&self, step: u64, mode: FitMode) -> TermScales {
        let a = match mode {
            FitMode::Video => 0.0,
            FitMode::Fusion => self.anneal.factor(step),
        };
        TermScales {
            keypoint: self.keypoint,
            reprojection: self.reprojection,
            attitude: a * self.attitude,
            gyro_sensor: a * self.gyro_sensor,
            gyro_phone: self.gyro_phone,
        }
    }
}

/// Weights multiplying each term in one evaluation. A zero weight skips
/// the term entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermScales {
    pub keypoint: f64,
    pub reprojection: f64,
    pub attitude: f64,
    pub gyro_sensor: f64,
    pub gyro_phone: f64,
}

impl TermScales {
    pub const ALL: Self = Self {
        keypoint: 1.0,
        reprojection: 1.0,
        attitude: 1.0,
        gyro_sensor: 1.0,
        gyro_phone: 1.0,
    };

    pub const NONE: Self = Self {
        keypoint: 0.0,
        reprojection: 0.0,
        attitude: 0.0,
        gyro_sensor: 0.0,
        gyro_phone: 0.0,
    };

    fn as_array(&self) -> [f64; 5] {
        [
            self.keypoint,
            self.reprojection,
            self.attitude,
            self.gyro_sensor,
            self.gyro_phone,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Keypoints and phone gyroscope only; IMU streams are ignored.
    Video,
    /// All streams.
    Fusion,
}

impl std::str::FromStr for FitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "video" => Ok(Self::Video),
            "fusion" => Ok(Self::Fusion),
            other => Err(format!("unknown mode {other:?} (expected video or fusion)")),
        }
    }
}

impl std::fmt::Display for FitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Video => "video",
            Self::Fusion => "fusion",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupA {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for GroupA {
    fn default() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 1e-5,
            beta1: 0.9,
            beta2: 0.8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupB {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub start_step: u64,
}

impl Default for GroupB {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            start_step: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupC {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub start_step: u64,
}

impl Default for GroupC {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.85,
            beta2: 0.999,
            start_step: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub steps: u64,
    /// Samples drawn per data source and step.
    pub batch_size: usize,
    pub seed: u64,
    pub group_a: GroupA,
    pub group_b: GroupB,
    pub group_c: GroupC,
    /// Per-group gradient norm cap; off when absent.
    pub clip_norm: Option<f64>,
    pub log_every: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 500,
            seed: 0,
            group_a: GroupA::default(),
            group_b: GroupB::default(),
            group_c: GroupC::default(),
            clip_norm: None,
            log_every: 500,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.to_string()));
        let a = &self.group_a;
        for lr in [a.lr_start, a.lr_end, self.group_b.lr, self.group_c.lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        for b in [
            a.beta1,
            a.beta2,
            self.group_b.beta1,
            self.group_b.beta2,
            self.group_c.beta1,
            self.group_c.beta2,
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad("moment coefficients must lie in [0, 1)");
            }
        }
        if !(a.weight_decay >= 0.0) {
            return bad("weight decay must be nonnegative");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch size must be positive");
        }
        if self.group_b.start_step >= self.steps || self.group_c.start_step >= self.steps {
            return bad("calibration groups must activate before the last step");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip norm must be positive");
            }
        }
        Ok(())
    }

    /// Group A learning rate, decaying exponentially over the run.
    pub fn lr_a(&self, step: u64) -> f64 {
        let a = &self.group_a;
        let frac = step as f64 / self.steps as f64;
        a.lr_start * (a.lr_end / a.lr_start).powf(frac)
    }
}

/// Everything that controls a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub net: NetConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub centering: CenteringMode,
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<Self, FitError> {
        toml::from_str(text).map_err(|e| FitError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fit config serializes")
    }

    pub fn validate(&self) -> Result<(), FitError> {
        self.net.validate()?;
        self.optimizer.validate()?;
        self.weights.validate()
    }

    /// Same schedule compressed or stretched to `steps` total steps: group
    /// activation and annealing keep their fraction of the run.
    pub fn with_steps(mut self, steps: u64) -> Self {
        let old = self.optimizer.steps.max(1);
        let scale = |s: u64| ((s as u128 * steps as u128) / old as u128) as u64;
        let opt = &mut self.optimizer;
        opt.group_b.start_step = scale(opt.group_b.start_step);
        opt.group_c.start_step = scale(opt.group_c.start_step);
        self.weights.anneal.start = scale(self.weights.anneal.start);
        self.weights.anneal.end = scale(self.weights.anneal.end);
        opt.steps = steps;
        self
    }
}

/// All optimized quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct FitParams {
    pub net: TrajectoryParams,
    pub beta: ScaleParams,
    pub calibration: SensorCalibration,
}

/// Gradient of one sensor's calibration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CalGrad {
    pub r_sb: [f64; 4],
    pub drift: [[f64; 4]; 3],
    pub time_offset: f64,
}

impl CalGrad {
    fn add(&mut self, o: &CalGrad) {
        for k in 0..4 {
            self.r_sb[k] += o.r_sb[k];
        }
        for (a, b) in self.drift.iter_mut().zip(&o.drift) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        self.time_offset += o.time_offset;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub net: Vec<f64>,
    /// Same layout as [`ScaleParams::to_flat`].
    pub beta: Vec<f64>,
    pub sensors: Vec<CalGrad>,
    pub phone_time_offset: f64,
}

impl Gradient {
    pub fn is_finite(&self) -> bool {
        self.net.iter().chain(&self.beta).all(|v| v.is_finite())
            && self.phone_time_offset.is_finite()
            && self.sensors.iter().all(|s| {
                s.r_sb.iter().chain(s.drift.iter().flatten()).all(|v| v.is_finite())
                    && s.time_offset.is_finite()
            })
    }
}

/// Raw (unweighted) mean loss of each term; absent when not evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub keypoint: Option<f64>,
    pub reprojection: Option<f64>,
    pub attitude: Option<f64>,
    pub gyro_sensor: Option<f64>,
    pub gyro_phone: Option<f64>,
}

impl LossTerms {
    fn from_parts(vals: [f64; 5], present: [bool; 5]) -> Self {
        let f = |k: usize| present[k].then_some(vals[k]);
        Self {
            keypoint: f(0),
            reprojection: f(1),
            attitude: f(2),
            gyro_sensor: f(3),
            gyro_phone: f(4),
        }
    }

    pub fn weighted_total(&self, s: &TermScales) -> f64 {
        let v = [
            self.keypoint,
            self.reprojection,
            self.attitude,
            self.gyro_sensor,
            self.gyro_phone,
        ];
        v.iter()
            .zip(s.as_array())
            .map(|(l, w)| l.map_or(0.0, |l| w * l))
            .sum()
    }
}

/// Mean raw residual of each term over the evaluated samples, in SI units
/// (meters, pixels, rad/s, rad).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RawResiduals {
    pub keypoint: Option<f64>,
    pub reprojection: Option<f64>,
    pub attitude: Option<f64>,
    pub gyro_sensor: Option<f64>,
    pub gyro_phone: Option<f64>,
    /// Model keypoints at or behind the camera plane, skipped by the
    /// reprojection term.
    pub behind_camera: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: LossTerms,
    pub total: f64,
    pub residuals: RawResiduals,
    pub grad: Option<Gradient>,
}

/// Sample indices drawn for one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub frames: Vec<usize>,
    pub attitude: Vec<Vec<usize>>,
    pub gyro: Vec<Vec<usize>>,
    pub phone: Vec<usize>,
}

const STREAM_FRAMES: u64 = 0;
const STREAM_PHONE: u64 = 1;
const STREAM_SENSOR_BASE: u64 = 2;

fn draw(n: usize, size: usize, seed: u64, stream: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = keyed_rng(seed, stream, step);
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

impl Batch {
    /// Uniform draws with replacement from each stream, keyed by
    /// `(seed, step, stream)`.
    pub fn sample(rec: &Recording, use_sensors: bool, size: usize, seed: u64, step: u64) -> Self {
        let mut b = Batch {
            frames: draw(rec.keypoints.len(), size, seed, STREAM_FRAMES, step),
            phone: rec
                .phone
                .as_ref()
                .map_or(Vec::new(), |p| draw(p.samples.len(), size, seed, STREAM_PHONE, step)),
            ..Default::default()
        };
        if use_sensors {
            for (s, st) in rec.sensors.iter().enumerate() {
                let base = STREAM_SENSOR_BASE + 2 * s as u64;
                b.attitude.push(draw(st.attitude.len(), size, seed, base, step));
                b.gyro.push(draw(st.gyro.len(), size, seed, base + 1, step));
            }
        }
        b
    }

    /// Every sample of every stream once.
    pub fn full(rec: &Recording, use_sensors: bool) -> Self {
        let mut b = Batch {
            frames: (0..rec.keypoints.len()).collect(),
            phone: rec.phone.as_ref().map_or(Vec::new(), |p| (0..p.samples.len()).collect()),
            ..Default::default()
        };
        if use_sensors {
            for st in &rec.sensors {
                b.attitude.push((0..st.attitude.len()).collect());
                b.gyro.push((0..st.gyro.len()).collect());
            }
        }
        b
    }
}

/// Source of trajectory rows for the kernels.
#[derive(Clone, Copy)]
pub enum Trajectory<'a> {
    Net(&'a TrajectoryParams),
    Truth(&'a GroundTruth),
}

enum Forward {
    Net(tnet::NetBatch),
    Truth([Array2<f64>; 3]),
}

impl Forward {
    fn out(&self) -> &[Array2<f64>; 3] {
        match self {
            Forward::Net(b) => &b.out,
            Forward::Truth(o) => o,
        }
    }
}

impl Trajectory<'_> {
    fn forward(&self, times: &[f64], duration: f64, order: usize) -> Forward {
        match self {
            Trajectory::Net(n) => Forward::Net(n.forward_batch(times, duration, order)),
            Trajectory::Truth(t) => Forward::Truth(t.outputs(times)),
        }
    }
}

/// Per-chunk accumulator; reduced in chunk order.
#[derive(Debug, Clone)]
struct Accum {
    loss: [f64; 5],
    resid: [f64; 5],
    count: [usize; 5],
    behind: usize,
    g_beta: Vec<f64>,
    g_cal: Vec<CalGrad>,
    g_phone_delta: f64,
    /// Gradient rows for the value and first-derivative channels.
    gy: Vec<f64>,
    gyd: Vec<f64>,
}

impl Accum {
    fn new(n_beta: usize, n_sensors: usize) -> Self {
        Self {
            loss: [0.0; 5],
            resid: [0.0; 5],
            count: [0; 5],
            behind: 0,
            g_beta: vec![0.0; n_beta],
            g_cal: vec![CalGrad::default(); n_sensors],
            g_phone_delta: 0.0,
            gy: Vec::new(),
            gyd: Vec::new(),
        }
    }

    fn merge(&mut self, o: Accum) {
        for k in 0..5 {
            self.loss[k] += o.loss[k];
            self.resid[k] += o.resid[k];
            self.count[k] += o.count[k];
        }
        self.behind += o.behind;
        exec::add_into(&mut self.g_beta, &o.g_beta);
        for (a, b) in self.g_cal.iter_mut().zip(&o.g_cal) {
            a.add(b);
        }
        self.g_phone_delta += o.g_phone_delta;
        self.gy.extend(o.gy);
        self.gyd.extend(o.gyd);
    }
}

const KP: usize = 0;
const RP: usize = 1;
const ATT: usize = 2;
const GS: usize = 3;
const GP: usize = 4;

/// A recording bound to a body model, ready for loss evaluation.
pub struct Problem<'a> {
    pub rec: &'a Recording,
    pub tree: &'a KinematicTree,
    pub weights: LossWeights,
    pub centering: CenteringMode,
    /// Whether IMU streams take part.
    pub use_sensors: bool,
    sensor_segments: Vec<usize>,
}

/// One gyro-type row: a sensor gyro sample or a phone gyro sample.
#[derive(Debug, Clone, Copy)]
enum GyroRow {
    Sensor { s: usize, k: usize },
    Phone { k: usize },
}

impl<'a> Problem<'a> {
    pub fn new(
        rec: &'a Recording,
        tree: &'a KinematicTree,
        weights: LossWeights,
        centering: CenteringMode,
        use_sensors: bool,
    ) -> Result<Self, FitError> {
        let sensor_segments = rec
            .sensors
            .iter()
            .map(|s| {
                tree.segment_index(&s.segment)
                    .ok_or_else(|| FitError::Data(format!("sensor {} on unknown segment {}", s.id, s.segment)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(f) = rec.keypoints.iter().find(|f| f.len() != tree.markers.len()) {
            return Err(FitError::Data(format!(
                "keypoint frame at t = {} has {} keypoints, model has {} markers",
                f.t,
                f.len(),
                tree.markers.len()
            )));
        }
        Ok(Self {
            rec,
            tree,
            weights,
            centering,
            use_sensors,
            sensor_segments,
        })
    }

    fn n_out(&self) -> usize {
        self.tree.dof_count() + CAMERA_HEAD
    }

    fn n_beta(&self) -> usize {
        self.tree.scale_names.len() + 3 * self.tree.markers.len()
    }

    /// Evaluates the weighted objective on `batch`. Terms whose weight is
    /// zero are skipped. `delta_grad` requests time-offset gradients, which
    /// need one extra derivative order. Network gradients are only
    /// available for [`Trajectory::Net`].
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        traj: Trajectory<'_>,
        beta: &ScaleParams,
        cal: &SensorCalibration,
        batch: &Batch,
        scales: &TermScales,
        delta_grad: bool,
        want_grad: bool,
    ) -> Evaluation {
        let n_out = self.n_out();
        let duration = self.rec.duration;
        let n_sensors = self.rec.sensors.len();
        let net_len = match traj {
            Trajectory::Net(n) => n.len(),
            Trajectory::Truth(_) => 0,
        };
        let mut total = Accum::new(self.n_beta(), n_sensors);
        let mut g_net = vec![0.0; net_len];
        let mut present = [false; 5];
        let backward = |fw: &Forward, acc: &Accum, with_rate: bool, g_net: &mut Vec<f64>| {
            if let (Trajectory::Net(n), Forward::Net(b), true) = (traj, fw, want_grad) {
                let rows = b.len();
                let gy = Array2::from_shape_vec((rows, n_out), acc.gy.clone()).expect("gy rows");
                let g = if with_rate {
                    let gyd = Array2::from_shape_vec((rows, n_out), acc.gyd.clone()).expect("gyd rows");
                    n.backward_batch(b, &gy, Some(&gyd))
                } else {
                    n.backward_batch(b, &gy, None)
                };
                exec::add_into(g_net, &g);
            }
        };

        // Video frames.
        let (sk, sr) = (scales.keypoint, scales.reprojection);
        if (sk > 0.0 || sr > 0.0) && !batch.frames.is_empty() {
            present[KP] = sk > 0.0;
            present[RP] = sr > 0.0;
            let times: Vec<f64> = batch.frames.iter().map(|&f| self.rec.keypoints[f].t).collect();
            let fw = traj.forward(&times, duration, 0);
            let norm = 1.0 / batch.frames.len() as f64;
            let out = fw.out();
            let acc = self.reduce(batch.frames.len(), |i, acc| {
                self.frame_row(&self.rec.keypoints[batch.frames[i]], beta, out, i, norm, sk, sr, want_grad, acc)
            });
            backward(&fw, &acc, false, &mut g_net);
            total.merge(Accum { gy: Vec::new(), gyd: Vec::new(), ..acc });
        }

        // Attitude.
        if self.use_sensors && scales.attitude > 0.0 && n_sensors > 0 {
            present[ATT] = true;
            let mut rows = Vec::new();
            let mut norms = Vec::new();
            let mut times = Vec::new();
            for (s, idx) in batch.attitude.iter().enumerate() {
                let st = &self.rec.sensors[s];
                let off = cal.sensors[s].time_offset;
                for &k in idx {
                    if let Some(t) = sensor_model::resolve_time(st.attitude[k].t, off, duration) {
                        rows.push((s, k));
                        times.push(t);
                        norms.push(1.0 / (n_sensors * idx.len()) as f64);
                    }
                }
            }
            let order = usize::from(delta_grad);
            let fw = traj.forward(&times, duration, order);
            let out = fw.out();
            let acc = self.reduce(rows.len(), |i, acc| {
                let (s, k) = rows[i];
                self.attitude_row(s, k, beta, &cal.sensors[s], out, i, norms[i], scales.attitude, delta_grad, want_grad, acc)
            });
            backward(&fw, &acc, false, &mut g_net);
            total.merge(Accum { gy: Vec::new(), gyd: Vec::new(), ..acc });
        }

        // Sensor and phone gyroscopes share one second-order batch.
        let use_gs = self.use_sensors && scales.gyro_sensor > 0.0 && n_sensors > 0;
        let use_gp = scales.gyro_phone > 0.0 && self.rec.phone.is_some() && !batch.phone.is_empty();
        if use_gs || use_gp {
            present[GS] = use_gs;
            present[GP] = use_gp;
            let mut rows = Vec::new();
            let mut norms = Vec::new();
            let mut times = Vec::new();
            if use_gs {
                for (s, idx) in batch.gyro.iter().enumerate() {
                    let st = &self.rec.sensors[s];
                    let off = cal.sensors[s].time_offset;
                    for &k in idx {
                        if let Some(t) = sensor_model::resolve_time(st.gyro[k].t, off, duration) {
                            rows.push(GyroRow::Sensor { s, k });
                            times.push(t);
                            norms.push(1.0 / (n_sensors * idx.len()) as f64);
                        }
                    }
                }
            }
            if use_gp {
                let p = self.rec.phone.as_ref().expect("checked");
                for &k in &batch.phone {
                    if let Some(t) = sensor_model::resolve_time(p.samples[k].t, cal.phone_time_offset, duration) {
                        rows.push(GyroRow::Phone { k });
                        times.push(t);
                        norms.push(1.0 / batch.phone.len() as f64);
                    }
                }
            }
            let order = 1 + usize::from(delta_grad);
            let fw = traj.forward(&times, duration, order);
            let out = fw.out();
            let acc = self.reduce(rows.len(), |i, acc| match rows[i] {
                GyroRow::Sensor { s, k } => self.sensor_gyro_row(
                    s,
                    k,
                    beta,
                    &cal.sensors[s],
                    out,
                    i,
                    norms[i],
                    scales.gyro_sensor,
                    delta_grad,
                    want_grad,
                    acc,
                ),
                GyroRow::Phone { k } => self.phone_gyro_row(k, out, i, norms[i], scales.gyro_phone, delta_grad, want_grad, acc),
            });
            backward(&fw, &acc, true, &mut g_net);
            total.merge(Accum { gy: Vec::new(), gyd: Vec::new(), ..acc });
        }

        let terms = LossTerms::from_parts(total.loss, present);
        let mean = |k: usize| (total.count[k] > 0).then(|| total.resid[k] / total.count[k] as f64);
        let residuals = RawResiduals {
            keypoint: mean(KP),
            reprojection: mean(RP),
            attitude: mean(ATT),
            gyro_sensor: mean(GS),
            gyro_phone: mean(GP),
            behind_camera: total.behind,
        };
        let grad = want_grad.then(|| Gradient {
            net: g_net,
            beta: total.g_beta,
            sensors: total.g_cal,
            phone_time_offset: total.g_phone_delta,
        });
        Evaluation {
            total: terms.weighted_total(scales),
            terms,
            residuals,
            grad,
        }
    }

    /// Runs `row` over `0..n` in fixed chunks and reduces in order.
    fn reduce<F>(&self, n: usize, row: F) -> Accum
    where
        F: Fn(usize, &mut Accum) + Sync + Send,
    {
        let n_beta = self.n_beta();
        let n_sensors = self.rec.sensors.len();
        let parts = exec::map_chunks(n, KERNEL_CHUNK, |r| {
            let mut acc = Accum::new(n_beta, n_sensors);
            for i in r {
                row(i, &mut acc);
            }
            acc
        });
        let mut total = Accum::new(n_beta, n_sensors);
        for p in parts {
            total.merge(p);
        }
        total
    }

    fn split_row(&self, out: &Array2<f64>, i: usize) -> (Vec<f64>, [f64; 6]) {
        let n = self.tree.dof_count();
        let row = out.row(i);
        let theta = row.iter().take(n).copied().collect();
        let mut h = [0.0; 6];
        for k in 0..6 {
            h[k] = row[n + k];
        }
        (theta, h)
    }

    fn push_rows(&self, acc: &mut Accum, g_theta: &[f64], g_h: &[f64; 6], g_theta_dot: Option<&[f64]>, g_hd: Option<&[f64; 6]>) {
        acc.gy.extend_from_slice(g_theta);
        acc.gy.extend_from_slice(g_h);
        let n = g_theta.len();
        match (g_theta_dot, g_hd) {
            (Some(a), Some(b)) => {
                acc.gyd.extend_from_slice(a);
                acc.gyd.extend_from_slice(b);
            }
            _ => acc.gyd.extend(std::iter::repeat_n(0.0, n + 6)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn frame_row(
        &self,
        frame: &KeypointFrame,
        beta: &ScaleParams,
        out: &[Array2<f64>; 3],
        i: usize,
        norm: f64,
        sk: f64,
        sr: f64,
        want_grad: bool,
        acc: &mut Accum,
    ) {
        let tree = self.tree;
        let (theta, h) = self.split_row(&out[0], i);
        let cache = FkCache::compute(tree, beta, &theta);
        let r = tnet::camera_rotation(&h);
        let j_inv = 1.0 / frame.len() as f64;
        let mut g_p = vec![Vector3::zeros(); frame.len()];
        let mut g_r = Matrix3::zeros();
        let intr: &CameraIntrinsics = &self.rec.intrinsics;

        if sk > 0.0 {
            if let Some(w) = camera::centering_weights(&frame.confidence, self.centering) {
                let m_hat: Vector3<f64> = cache.markers.iter().zip(&w).map(|(p, w)| p * *w).sum();
                let m_p: Vector3<f64> = frame.p_c.iter().zip(&w).map(|(p, w)| p * *w).sum();
                let mut sum_gd = Vector3::zeros();
                for (j, &c) in frame.confidence.iter().enumerate() {
                    if c <= 0.0 {
                        continue;
                    }
                    let q = frame.p_c[j] - m_p;
                    let d = cache.markers[j] - m_hat - r * q;
                    let dist = d.norm();
                    let delta = self.weights.huber_keypoint_m;
                    acc.loss[KP] += norm * c * j_inv * huber(dist, delta);
                    acc.resid[KP] += dist;
                    acc.count[KP] += 1;
                    if want_grad {
                        let gd = d * (sk * norm * c * j_inv * huber_scale(dist, delta));
                        g_p[j] += gd;
                        sum_gd += gd;
                        g_r -= gd * q.transpose();
                    }
                }
                if want_grad {
                    for (g, wj) in g_p.iter_mut().zip(&w) {
                        *g -= sum_gd * *wj;
                    }
                }
            }
        }

        if sr > 0.0 {
            let delta = self.weights.huber_reprojection_px;
            for (j, &c) in frame.confidence.iter().enumerate() {
                if c <= 0.0 {
                    continue;
                }
                let p = cache.markers[j];
                let q = r.transpose() * p;
                // Written negated so a NaN depth is skipped as well.
                if !(q.z > MIN_DEPTH) {
                    acc.behind += 1;
                    continue;
                }
                let (uv, jac) = intr.project_jacobian(&q).expect("depth checked");
                let e = uv - frame.x2d[j];
                let dist = e.norm();
                acc.loss[RP] += norm * c * j_inv * huber(dist, delta);
                acc.resid[RP] += dist;
                acc.count[RP] += 1;
                if want_grad {
                    let ge = e * (sr * norm * c * j_inv * huber_scale(dist, delta));
                    let gq = jac[0] * ge.x + jac[1] * ge.y;
                    g_p[j] += r * gq;
                    g_r += p * gq.transpose();
                }
            }
        }

        if want_grad {
            let mut g_theta = vec![0.0; theta.len()];
            cache.backprop(tree, Some(&g_p), &[], &mut g_theta, Some(&mut acc.g_beta));
            let g_h = dual::pullback33(&tnet::camera_rotation_dual(&h), &g_r);
            self.push_rows(acc, &g_theta, &g_h, None, None);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attitude_row(
        &self,
        s: usize,
        k: usize,
        beta: &ScaleParams,
        cal: &SensorCal,
        out: &[Array2<f64>; 3],
        i: usize,
        norm: f64,
        scale: f64,
        delta_grad: bool,
        want_grad: bool,
        acc: &mut Accum,
    ) {
        let tree = self.tree;
        let seg = self.sensor_segments[s];
        let sample = &self.rec.sensors[s].attitude[k];
        let duration = self.rec.duration;
        let (theta, _) = self.split_row(&out[0], i);
        let cache = FkCache::compute(tree, beta, &theta);
        let r_hat = cache.rot[seg];

        let (d_dual, s_dual) = if want_grad {
            let d = &cal.drift;
            let v = Dual::<12>::vars(
                [
                    d[0][0], d[0][1], d[0][2], d[0][3], d[1][0], d[1][1], d[1][2], d[1][3], d[2][0], d[2][1],
                    d[2][2], d[2][3],
                ],
                0,
            );
            let kd = [[v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]], [v[8], v[9], v[10], v[11]]];
            (
                Some(so3::piecewise_heading_g(&kd, sample.t, duration)),
                Some(so3::quat_to_matrix_g(Dual::<4>::vars(cal.r_sb, 0))),
            )
        } else {
            (None, None)
        };
        let (d, s_mat) = match (&d_dual, &s_dual) {
            (Some(d), Some(s4)) => (dual::re33(d), dual::re33(s4)),
            _ => (cal.drift_matrix(sample.t, duration), cal.r_sb_matrix()),
        };
        let a = sample.r;
        let pred = d * a * s_mat;
        let m = r_hat.transpose() * pred;
        let sin = so3::vee(&(0.5 * (m - m.transpose()))).norm();
        let cos = 0.5 * (m.trace() - 1.0);
        let ang = sin.atan2(cos);
        acc.loss[ATT] += norm * ang * ang;
        acc.resid[ATT] += ang;
        acc.count[ATT] += 1;
        if !want_grad {
            return;
        }
        let ratio = if sin > 1e-12 { ang / sin } else { 1.0 };
        let c = scale * norm * ratio;
        let g_rhat = -c * pred;
        let g_pred = -c * r_hat;
        let g_d = g_pred * (a * s_mat).transpose();
        let g_s = (d * a).transpose() * g_pred;
        let gk = dual::pullback33(d_dual.as_ref().expect("dual"), &g_d);
        let gq = dual::pullback33(s_dual.as_ref().expect("dual"), &g_s);
        let gc = &mut acc.g_cal[s];
        for q in 0..4 {
            gc.r_sb[q] += gq[q];
            for kn in 0..3 {
                gc.drift[kn][q] += gk[4 * kn + q];
            }
        }
        let mut g_theta = vec![0.0; theta.len()];
        cache.backprop(tree, None, &[(seg, g_rhat)], &mut g_theta, None);
        if delta_grad {
            let rate = out[1].row(i);
            gc.time_offset += g_theta.iter().zip(rate.iter()).map(|(g, v)| g * v).sum::<f64>();
        }
        self.push_rows(acc, &g_theta, &[0.0; 6], None, None);
    }

    #[allow(clippy::too_many_arguments)]
    fn sensor_gyro_row(
        &self,
        s: usize,
        k: usize,
        beta: &ScaleParams,
        cal: &SensorCal,
        out: &[Array2<f64>; 3],
        i: usize,
        norm: f64,
        scale: f64,
        delta_grad: bool,
        want_grad: bool,
        acc: &mut Accum,
    ) {
        let tree = self.tree;
        let seg = self.sensor_segments[s];
        let sample = &self.rec.sensors[s].gyro[k];
        let (theta, _) = self.split_row(&out[0], i);
        let (theta_dot, _) = self.split_row(&out[1], i);
        let cache = FkCache::compute(tree, beta, &theta);
        let w_b = cache.body_rate(tree, seg, &theta_dot);
        let s_dual = so3::quat_to_matrix_g(Dual::<4>::vars(cal.r_sb, 0));
        let s_mat = dual::re33(&s_dual);
        let e = s_mat * w_b - sample.omega;
        acc.loss[GS] += norm * e.norm_squared();
        acc.resid[GS] += e.norm();
        acc.count[GS] += 1;
        if !want_grad {
            return;
        }
        let c = 2.0 * scale * norm;
        let g_w = s_mat.transpose() * e * c;
        let g_s = e * w_b.transpose() * c;
        let gq = dual::pullback33(&s_dual, &g_s);
        let n = theta.len();
        let mut g_theta = vec![0.0; n];
        let mut g_theta_dot = vec![0.0; n];
        cache.body_rate_backprop(tree, seg, &theta_dot, &g_w, &mut g_theta, &mut g_theta_dot);
        let gc = &mut acc.g_cal[s];
        for q in 0..4 {
            gc.r_sb[q] += gq[q];
        }
        if delta_grad {
            let acc2 = out[2].row(i);
            let mut g = 0.0;
            for j in 0..n {
                g += g_theta[j] * theta_dot[j] + g_theta_dot[j] * acc2[j];
            }
            gc.time_offset += g;
        }
        self.push_rows(acc, &g_theta, &[0.0; 6], Some(&g_theta_dot), Some(&[0.0; 6]));
    }

    #[allow(clippy::too_many_arguments)]
    fn phone_gyro_row(
        &self,
        k: usize,
        out: &[Array2<f64>; 3],
        i: usize,
        norm: f64,
        scale: f64,
        delta_grad: bool,
        want_grad: bool,
        acc: &mut Accum,
    ) {
        let n = self.tree.dof_count();
        let sample = &self.rec.phone.as_ref().expect("phone stream").samples[k];
        let (_, h) = self.split_row(&out[0], i);
        let (_, hd) = self.split_row(&out[1], i);
        let v = Dual::<12>::vars([h[0], h[1], h[2], h[3], h[4], h[5], hd[0], hd[1], hd[2], hd[3], hd[4], hd[5]], 0);
        let hv = [v[0], v[1], v[2], v[3], v[4], v[5]];
        let hdv = [v[6], v[7], v[8], v[9], v[10], v[11]];
        let (r, rd) = tnet::camera_rotation_rate_g(&hv, &hdv);
        let w = sensor_model::phone_gyro_g(&r, &rd);
        let e = Vector3::new(w[0].re, w[1].re, w[2].re) - sample.omega;
        acc.loss[GP] += norm * e.norm_squared();
        acc.resid[GP] += e.norm();
        acc.count[GP] += 1;
        if !want_grad {
            return;
        }
        let g = dual::pullback3(&w, &(e * (2.0 * scale * norm)));
        let mut g_h = [0.0; 6];
        let mut g_hd = [0.0; 6];
        g_h.copy_from_slice(&g[..6]);
        g_hd.copy_from_slice(&g[6..]);
        if delta_grad {
            let (_, hdd) = self.split_row(&out[2], i);
            acc.g_phone_delta += (0..6).map(|q| g_h[q] * hd[q] + g_hd[q] * hdd[q]).sum::<f64>();
        }
        let zeros = vec![0.0; n];
        self.push_rows(acc, &zeros, &g_h, Some(&zeros), Some(&g_hd));
    }
}

/// AdamW state for one parameter group.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + weight_decay * params[i]);
        }
    }
}

fn clip(g: &mut [f64], max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > c {
            g.iter_mut().for_each(|v| *v *= c / n);
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub terms: LossTerms,
}

/// Outcome of [`optimize`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub mode: FitMode,
    pub params: FitParams,
    pub history: Vec<LossRecord>,
    /// Residuals over the full recording at the final parameters.
    pub residuals: crate::eval::ResidualReport,
    pub steps: u64,
    pub wall_time_s: f64,
}

/// Initial parameters: fresh network whose root translation bias sits at
/// the confidence-weighted centroid of the detected 3D keypoints, neutral
/// body scale, identity calibrations.
pub fn initial_params(rec: &Recording, tree: &KinematicTree, config: &FitConfig) -> Result<FitParams, FitError> {
    let mut net = tnet::init_trajectory(config.optimizer.seed, &config.net, tree.dof_count(), tree.descriptor_hash())?;
    let mut sum = Vector3::zeros();
    let mut wsum = 0.0;
    for f in &rec.keypoints {
        for (p, &c) in f.p_c.iter().zip(&f.confidence) {
            if c > 0.0 {
                sum += p * c;
                wsum += c;
            }
        }
    }
    if wsum > 0.0 {
        let centroid = sum / wsum;
        for k in 0..3 {
            let idx = net.output_bias_index(k);
            net.flat[idx] = centroid[k];
        }
    }
    Ok(FitParams {
        net,
        beta: ScaleParams::neutral(tree),
        calibration: SensorCalibration::identity(rec.sensors.len()),
    })
}

/// Runs the staged optimization.
pub fn optimize(rec: &Recording, tree: &KinematicTree, config: &FitConfig, mode: FitMode) -> Result<FitResult, FitError> {
    config.validate()?;
    rec.validate().map_err(|e| FitError::Data(e.to_string()))?;
    if rec.keypoints.is_empty() {
        return Err(FitError::Data("recording has no keypoint frames".into()));
    }
    let use_sensors = mode == FitMode::Fusion;
    if use_sensors && rec.sensors.is_empty() {
        return Err(FitError::Data("fusion mode needs at least one IMU stream".into()));
    }
    let started = Instant::now();
    let problem = Problem::new(rec, tree, config.weights.clone(), config.centering, use_sensors)?;
    let opt = &config.optimizer;
    let mut params = initial_params(rec, tree, config)?;
    let n_sensors = rec.sensors.len();
    let n_a = params.net.len() + problem.n_beta();
    let mut adam_a = Adam::new(n_a, opt.group_a.beta1, opt.group_a.beta2);
    let mut adam_b = Adam::new(16 * n_sensors, opt.group_b.beta1, opt.group_b.beta2);
    let mut adam_c = Adam::new(n_sensors + 1, opt.group_c.beta1, opt.group_c.beta2);
    let mut history = Vec::with_capacity(opt.steps as usize);

    for step in 0..opt.steps {
        let scales = config.weights.at_step(step, mode);
        let b_active = use_sensors && step >= opt.group_b.start_step;
        let c_active = step >= opt.group_c.start_step;
        let batch = Batch::sample(rec, use_sensors, opt.batch_size, opt.seed, step);
        let ev = problem.evaluate(
            Trajectory::Net(&params.net),
            &params.beta,
            &params.calibration,
            &batch,
            &scales,
            c_active,
            true,
        );
        let grad = ev.grad.expect("gradient requested");
        if !ev.total.is_finite() || !grad.is_finite() {
            return Err(FitError::Diverged {
                step,
                reason: if ev.total.is_finite() {
                    "non-finite gradient".into()
                } else {
                    "non-finite loss".into()
                },
                last_finite: Box::new(params),
            });
        }
        history.push(LossRecord {
            step,
            total: ev.total,
            terms: ev.terms,
        });
        if opt.log_every > 0 && (step % opt.log_every == 0 || step + 1 == opt.steps) {
            let t = &ev.terms;
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3e}"));
            log::info!(
                "step {step:>6} total {:.4e} kp {} rp {} att {} gyro {} phone {}",
                ev.total,
                f(t.keypoint),
                f(t.reprojection),
                f(t.attitude),
                f(t.gyro_sensor),
                f(t.gyro_phone)
            );
        }

        // Group A: network and body scale.
        let mut ga: Vec<f64> = grad.net.iter().chain(&grad.beta).copied().collect();
        clip(&mut ga, opt.clip_norm);
        let mut pa: Vec<f64> = params.net.flat.iter().copied().chain(params.beta.to_flat()).collect();
        adam_a.step(&mut pa, &ga, opt.lr_a(step), opt.group_a.weight_decay);
        let n_net = params.net.len();
        params.net.flat.copy_from_slice(&pa[..n_net]);
        params.beta = ScaleParams::from_flat(tree, &pa[n_net..]).map_err(|e| FitError::Data(e.to_string()))?;
        params.beta.clamp_offsets(MARKER_OFFSET_BOUND);

        // Group B: rotations and drift knots.
        if b_active {
            let mut gb = Vec::with_capacity(16 * n_sensors);
            let mut pb = Vec::with_capacity(16 * n_sensors);
            for (g, c) in grad.sensors.iter().zip(&params.calibration.sensors) {
                gb.extend(g.r_sb.iter().chain(g.drift.iter().flatten()));
                pb.extend(c.r_sb.iter().chain(c.drift.iter().flatten()));
            }
            clip(&mut gb, opt.clip_norm);
            adam_b.step(&mut pb, &gb, opt.group_b.lr, 0.0);
            for (s, c) in params.calibration.sensors.iter_mut().enumerate() {
                let p = &pb[16 * s..16 * (s + 1)];
                c.r_sb.copy_from_slice(&p[..4]);
                for kn in 0..3 {
                    c.drift[kn].copy_from_slice(&p[4 + 4 * kn..8 + 4 * kn]);
                }
                c.renormalize();
            }
        }

        // Group C: clock offsets.
        if c_active {
            let mut gc: Vec<f64> = grad.sensors.iter().map(|g| g.time_offset).collect();
            gc.push(grad.phone_time_offset);
            if !use_sensors {
                gc[..n_sensors].iter_mut().for_each(|g| *g = 0.0);
            }
            clip(&mut gc, opt.clip_norm);
            let mut pc: Vec<f64> = params.calibration.sensors.iter().map(|c| c.time_offset).collect();
            pc.push(params.calibration.phone_time_offset);
            adam_c.step(&mut pc, &gc, opt.group_c.lr, 0.0);
            for (c, v) in params.calibration.sensors.iter_mut().zip(&pc) {
                if use_sensors {
                    c.time_offset = *v;
                    c.renormalize();
                }
            }
            params.calibration.phone_time_offset = pc[n_sensors].clamp(-sensor_model::MAX_TIME_OFFSET, sensor_model::MAX_TIME_OFFSET);
        }
    }

    let residuals = crate::eval::compute_residuals(&params, rec, tree, config, mode)
        .map_err(|e| FitError::Data(e.to_string()))?;
    Ok(FitResult {
        mode,
        params,
        history,
        residuals,
        steps: opt.steps,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert!((huber(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((huber(3.0, 1.0) - 2.5).abs() < 1e-15);
        assert!((huber(0.1, 1.0) - 0.005).abs() < 1e-15);
        assert!((huber(10.0, 100.0) - 50.0).abs() < 1e-12);
        assert!((huber(200.0, 100.0) - 15_000.0).abs() < 1e-9);
        // Continuous slope at the threshold.
        let h = 1e-7;
        let left = (huber(1.0, 1.0) - huber(1.0 - h, 1.0)) / h;
        let right = (huber(1.0 + h, 1.0) - huber(1.0, 1.0)) / h;
        assert!((left - right).abs() < 1e-6);
    }

    #[test]
    fn anneal_is_monotone() {
        let a = Anneal { start: 10, end: 20 };
        let mut prev = 0.0;
        for s in 0..40 {
            let f = a.factor(s);
            assert!(f >= prev);
            prev = f;
        }
        assert_eq!(a.factor(9), 0.0);
        assert_eq!(a.factor(15), 0.5);
        assert_eq!(a.factor(20), 1.0);
        let step = Anneal { start: 5, end: 5 };
        assert_eq!(step.factor(4), 0.0);
        assert_eq!(step.factor(5), 1.0);
    }

    #[test]
    fn video_mode_disables_inertial_terms() {
        let w = LossWeights::default();
        let s = w.at_step(19_999, FitMode::Video);
        assert_eq!(s.attitude, 0.0);
        assert_eq!(s.gyro_sensor, 0.0);
        assert!(s.gyro_phone > 0.0);
        let f = w.at_step(19_999, FitMode::Fusion);
        assert_eq!(f.attitude, 1.0);
    }

    #[test]
    fn lr_decays_exponentially() {
        let o = OptimizerConfig::default();
        assert!((o.lr_a(0) - 1e-3).abs() < 1e-18);
        assert!((o.lr_a(10_000) - 1e-4).abs() < 1e-15);
        assert!((o.lr_a(20_000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut a = Adam::new(2, 0.9, 0.999);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[5.0, -0.01], 0.1, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn config_toml_roundtrip_and_validation() {
        let c = FitConfig::default();
        let back = FitConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        let partial = FitConfig::from_toml("[optimizer]\nsteps = 100\n[optimizer.group_b]\nstart_step = 50\n[optimizer.group_c]\nstart_step = 50\n").unwrap();
        assert_eq!(partial.optimizer.steps, 100);
        assert!(partial.validate().is_ok());
        assert!(FitConfig::default().validate().is_ok());
        let mut bad = FitConfig::default();
        bad.optimizer.group_b.start_step = 20_000;
        assert!(bad.validate().is_err());
        assert!(FitConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn with_steps_keeps_schedule_fractions() {
        let c = FitConfig::default().with_steps(2000);
        assert_eq!(c.optimizer.steps, 2000);
        assert_eq!(c.optimizer.group_b.start_step, 1000);
        assert_eq!(c.optimizer.group_c.start_step, 1000);
        assert_eq!((c.weights.anneal.start, c.weights.anneal.end), (1000, 1500));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn batch_sampling_is_keyed() {
        let (rec, _) = crate::synth::simulate(
            &crate::synth::ScenarioConfig {
                duration: 2.0,
                ..Default::default()
            },
            &KinematicTree::default_lower_body(),
        )
        .unwrap();
        let a = Batch::sample(&rec, true, 50, 3, 7);
        let b = Batch::sample(&rec, true, 50, 3, 7);
        let c = Batch::sample(&rec, true, 50, 3, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.attitude.len(), 2);
        assert!(a.frames.iter().all(|&f| f < rec.keypoints.len()));
        let v = Batch::sample(&rec, false, 50, 3, 7);
        assert!(v.attitude.is_empty() && v.gyro.is_empty());
    }
}
