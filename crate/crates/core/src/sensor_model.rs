//! Uncalibrated IMU and phone-gyroscope models.
//!
//! Conventions: `R_sb` maps segment-frame vectors to sensor-frame vectors,
//! so a sensor attached to segment `b` reports `R_n's = R_nn'⁻¹ R_nb R_sb⁻¹`
//! and gyro `ω_s = R_sb ω_b`. The heading drift `R_nn'(t)` is a three-knot
//! piecewise SLERP evaluated on the sensor's own clock.

use crate::dual::{self, Real, M3, V3};
use crate::so3::{self, RotationMatrix, UnitQuaternion};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Largest admissible time offset, seconds.
pub const MAX_TIME_OFFSET: f64 = 0.5;
pub const DEFAULT_ATTITUDE_RATE: f64 = 55.0;
pub const DEFAULT_GYRO_RATE: f64 = 562.5;
pub const DEFAULT_PHONE_GYRO_RATE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("stream {stream:?} line {line}: {msg}")]
    Parse {
        stream: String,
        line: usize,
        msg: String,
    },
    #[error("stream {stream:?}: {msg}")]
    Invalid { stream: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttitudeSample {
    pub t: f64,
    pub r: RotationMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GyroSample {
    pub t: f64,
    pub omega: Vector3<f64>,
}

/// One body-worn IMU.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorStream {
    pub id: String,
    pub segment: String,
    pub attitude_rate: f64,
    pub gyro_rate: f64,
    pub attitude: Vec<AttitudeSample>,
    pub gyro: Vec<GyroSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneGyroStream {
    pub rate: f64,
    pub samples: Vec<GyroSample>,
}

/// Calibration of one IMU. Quaternions are stored as raw `[w,x,y,z]`
/// parameters and renormalized after every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorCal {
    pub r_sb: [f64; 4],
    pub drift: [[f64; 4]; 3],
    pub time_offset: f64,
}

impl Default for SensorCal {
    fn default() -> Self {
        Self {
            r_sb: [1.0, 0.0, 0.0, 0.0],
            drift: [[1.0, 0.0, 0.0, 0.0]; 3],
            time_offset: 0.0,
        }
    }
}

impl SensorCal {
    pub fn r_sb_matrix(&self) -> RotationMatrix {
        dual::re33(&so3::quat_to_matrix_g(self.r_sb))
    }

    pub fn drift_matrix(&self, t: f64, duration: f64) -> RotationMatrix {
        dual::re33(&so3::piecewise_heading_g(&self.drift, t, duration))
    }

    /// Projects the quaternions back to unit norm with `w ≥ 0`, and clamps
    /// the time offset.
    pub fn renormalize(&mut self) {
        let canon = |q: [f64; 4]| {
            UnitQuaternion::normalize(q)
                .map(|u| u.canonical().to_array())
                .unwrap_or([1.0, 0.0, 0.0, 0.0])
        };
        self.r_sb = canon(self.r_sb);
        // Knots keep their relative signs so the interpolation path is
        // unchanged; only the first is canonicalized.
        let flip = if self.drift[0][0] < 0.0 { -1.0 } else { 1.0 };
        for k in &mut self.drift {
            let n = so3::normalize4(*k);
            *k = n.map(|v| v * flip);
        }
        self.time_offset = self.time_offset.clamp(-MAX_TIME_OFFSET, MAX_TIME_OFFSET);
    }
}

/// Calibrations for every IMU plus the phone clock offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorCalibration {
    pub sensors: Vec<SensorCal>,
    pub phone_time_offset: f64,
}

impl SensorCalibration {
    pub fn identity(n_sensors: usize) -> Self {
        Self {
            sensors: vec![SensorCal::default(); n_sensors],
            phone_time_offset: 0.0,
        }
    }
}

/// The sensor's claim about the segment's global orientation:
/// `R_nn'(t) · R_n's · R_sb`.
pub fn predicted_attitude(cal: &SensorCal, reading: &RotationMatrix, t: f64, duration: f64) -> RotationMatrix {
    cal.drift_matrix(t, duration) * reading * cal.r_sb_matrix()
}

/// Generic form of [`predicted_attitude`] split into its parameter-dependent
/// factors: returns `(R_nn'(t), R_sb)`.
pub fn attitude_factors_g<S: Real>(drift: &[[S; 4]; 3], r_sb: [S; 4], t: f64, duration: f64) -> (M3<S>, M3<S>) {
    (so3::piecewise_heading_g(drift, t, duration), so3::quat_to_matrix_g(r_sb))
}

/// Predicted gyro reading in the sensor frame, `R_sb · vee(R⁻¹Ṙ)`.
pub fn predicted_sensor_gyro(cal: &SensorCal, r_nb: &RotationMatrix, r_nb_dot: &Matrix3<f64>) -> Vector3<f64> {
    let body = so3::angular_velocity(r_nb, r_nb_dot).omega;
    cal.r_sb_matrix() * body
}

/// Generic sensor gyro from a body-frame rate.
pub fn sensor_gyro_g<S: Real>(r_sb: [S; 4], body_rate: &V3<S>) -> V3<S> {
    dual::matvec(&so3::quat_to_matrix_g(r_sb), body_rate)
}

/// Predicted phone gyro `vee(R_nc⁻¹ Ṙ_nc)`.
pub fn predicted_phone_gyro(r_nc: &RotationMatrix, r_nc_dot: &Matrix3<f64>) -> Vector3<f64> {
    so3::angular_velocity(r_nc, r_nc_dot).omega
}

/// Generic `vee(skew(RᵀṘ))`.
pub fn phone_gyro_g<S: Real>(r: &M3<S>, r_dot: &M3<S>) -> V3<S> {
    let m = dual::matmul(&dual::transpose(r), r_dot);
    let half = S::cst(0.5);
    [
        (m[2][1] - m[1][2]) * half,
        (m[0][2] - m[2][0]) * half,
        (m[1][0] - m[0][1]) * half,
    ]
}

/// Recording-clock time of a stream sample. Returns `None` when the result
/// falls outside `[−0.5, T + 0.5]`.
pub fn resolve_time(stream_t: f64, offset: f64, duration: f64) -> Option<f64> {
    let t = stream_t + offset;
    (t >= -MAX_TIME_OFFSET && t <= duration + MAX_TIME_OFFSET).then_some(t)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum StreamLine {
    Header {
        stream_id: String,
        segment: Option<String>,
        rates: StreamRates,
    },
    Sample {
        stream_id: String,
        channel: Channel,
        t: f64,
        data: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamRates {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    att: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    gyro: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    phone_gyro: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Channel {
    Att,
    Gyro,
    PhoneGyro,
}

fn write_line<W: Write>(w: &mut W, line: &StreamLine) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, line).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}

/// Writes an IMU stream as JSON lines; the first line is the header.
pub fn write_sensor_stream<W: Write>(mut w: W, s: &SensorStream) -> Result<(), SensorError> {
    write_line(
        &mut w,
        &StreamLine::Header {
            stream_id: s.id.clone(),
            segment: Some(s.segment.clone()),
            rates: StreamRates {
                att: Some(s.attitude_rate),
                gyro: Some(s.gyro_rate),
                phone_gyro: None,
            },
        },
    )?;
    for a in &s.attitude {
        let q = so3::matrix_to_quat(&a.r).to_array();
        write_line(
            &mut w,
            &StreamLine::Sample {
                stream_id: s.id.clone(),
                channel: Channel::Att,
                t: a.t,
                data: q.to_vec(),
            },
        )?;
    }
    for g in &s.gyro {
        write_line(
            &mut w,
            &StreamLine::Sample {
                stream_id: s.id.clone(),
                channel: Channel::Gyro,
                t: g.t,
                data: g.omega.as_slice().to_vec(),
            },
        )?;
    }
    Ok(())
}

pub fn write_phone_stream<W: Write>(mut w: W, s: &PhoneGyroStream) -> Result<(), SensorError> {
    let id = "phone".to_string();
    write_line(
        &mut w,
        &StreamLine::Header {
            stream_id: id.clone(),
            segment: None,
            rates: StreamRates {
                att: None,
                gyro: None,
                phone_gyro: Some(s.rate),
            },
        },
    )?;
    for g in &s.samples {
        write_line(
            &mut w,
            &StreamLine::Sample {
                stream_id: id.clone(),
                channel: Channel::PhoneGyro,
                t: g.t,
                data: g.omega.as_slice().to_vec(),
            },
        )?;
    }
    Ok(())
}

/// Parsed stream file: either an IMU or the phone gyroscope.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamFile {
    Imu(SensorStream),
    Phone(PhoneGyroStream),
}

pub fn read_stream<R: BufRead>(r: R, name: &str) -> Result<StreamFile, SensorError> {
    let perr = |line: usize, msg: String| SensorError::Parse {
        stream: name.to_string(),
        line,
        msg,
    };
    let mut lines = r.lines().enumerate().filter(|(_, l)| match l {
        Ok(s) => !s.trim().is_empty(),
        Err(_) => true,
    });
    let (_, first) = lines.next().ok_or_else(|| perr(1, "empty stream file".into()))?;
    let header: StreamLine = serde_json::from_str(&first?).map_err(|e| perr(1, e.to_string()))?;
    let StreamLine::Header {
        stream_id,
        segment,
        rates,
    } = header
    else {
        return Err(perr(1, "first line must be a header".into()));
    };
    let mut att = Vec::new();
    let mut gyro = Vec::new();
    let mut phone = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let rec: StreamLine = serde_json::from_str(&line?).map_err(|e| perr(ln, e.to_string()))?;
        let StreamLine::Sample {
            stream_id: sid,
            channel,
            t,
            data,
        } = rec
        else {
            return Err(perr(ln, "unexpected second header".into()));
        };
        if sid != stream_id {
            return Err(perr(ln, format!("stream id {sid:?} does not match header {stream_id:?}")));
        }
        if !t.is_finite() || data.iter().any(|v| !v.is_finite()) {
            return Err(perr(ln, "non-finite value".into()));
        }
        match channel {
            Channel::Att => {
                let q: [f64; 4] = data
                    .try_into()
                    .map_err(|_| perr(ln, "attitude needs 4 values".into()))?;
                let u = UnitQuaternion::new(q[0], q[1], q[2], q[3]).map_err(|e| perr(ln, e.to_string()))?;
                att.push(AttitudeSample { t, r: u.to_matrix() });
            }
            Channel::Gyro | Channel::PhoneGyro => {
                let v: [f64; 3] = data
                    .try_into()
                    .map_err(|_| perr(ln, "gyro needs 3 values".into()))?;
                let s = GyroSample {
                    t,
                    omega: Vector3::from(v),
                };
                if channel == Channel::Gyro {
                    gyro.push(s);
                } else {
                    phone.push(s);
                }
            }
        }
    }
    let invalid = |msg: &str| SensorError::Invalid {
        stream: name.to_string(),
        msg: msg.to_string(),
    };
    let increasing = |ts: &[f64]| ts.windows(2).all(|w| w[1] > w[0]);
    let att_t: Vec<f64> = att.iter().map(|s| s.t).collect();
    let gyro_t: Vec<f64> = gyro.iter().map(|s| s.t).collect();
    let phone_t: Vec<f64> = phone.iter().map(|s| s.t).collect();
    if !increasing(&att_t) || !increasing(&gyro_t) || !increasing(&phone_t) {
        return Err(invalid("timestamps must be strictly increasing per channel"));
    }
    match segment {
        Some(segment) => {
            if !phone.is_empty() {
                return Err(invalid("IMU stream contains phone gyro samples"));
            }
            Ok(StreamFile::Imu(SensorStream {
                id: stream_id,
                segment,
                attitude_rate: rates.att.unwrap_or(DEFAULT_ATTITUDE_RATE),
                gyro_rate: rates.gyro.unwrap_or(DEFAULT_GYRO_RATE),
                attitude: att,
                gyro,
            }))
        }
        None => {
            if !att.is_empty() || !gyro.is_empty() {
                return Err(invalid("phone stream contains IMU samples"));
            }
            Ok(StreamFile::Phone(PhoneGyroStream {
                rate: rates.phone_gyro.unwrap_or(DEFAULT_PHONE_GYRO_RATE),
                samples: phone,
            }))
        }
    }
}
