//! Pinhole camera, keypoint frames, detector confidences and centering.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Points closer than this to the camera plane are not projected.
pub const MIN_DEPTH: f64 = 1e-6;
/// Half-maximum of the detector confidence sigmoid, mm.
pub const CONFIDENCE_HALF_MM: f64 = 30.0;
/// Width of the detector confidence sigmoid, mm.
pub const CONFIDENCE_WIDTH_MM: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("keypoint frame {index}: {msg}")]
    Frame { index: usize, msg: String },
    #[error("keypoint file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// Portrait 1080×1920 smartphone video.
    fn default() -> Self {
        Self {
            fx: 1500.0,
            fy: 1500.0,
            cx: 540.0,
            cy: 960.0,
            width: 1080,
            height: 1920,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CameraError::Intrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(CameraError::Intrinsics("principal point outside image".into()));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if !(p.z > MIN_DEPTH) {
            return Err(CameraError::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Projection and its 2×3 Jacobian (rows u, v).
    pub fn project_jacobian(
        &self,
        p: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, [Vector3<f64>; 2]), CameraError> {
        let uv = self.project(p)?;
        let iz = 1.0 / p.z;
        Ok((
            uv,
            [
                Vector3::new(self.fx * iz, 0.0, -self.fx * p.x * iz * iz),
                Vector3::new(0.0, self.fy * iz, -self.fy * p.y * iz * iz),
            ],
        ))
    }
}

/// Detector confidence from the keypoint's predicted spread.
pub fn confidence_from_std(sigma_mm: f64) -> f64 {
    1.0 / (1.0 + ((sigma_mm - CONFIDENCE_HALF_MM) / CONFIDENCE_WIDTH_MM).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringMode {
    #[default]
    Weighted,
    Plain,
}

/// Averaging weights used by [`center_keypoints`], normalized to sum to 1.
/// Returns `None` when no keypoint has positive confidence.
pub fn centering_weights(conf: &[f64], mode: CenteringMode) -> Option<Vec<f64>> {
    let raw: Vec<f64> = conf
        .iter()
        .map(|&c| match mode {
            CenteringMode::Weighted => c.max(0.0),
            CenteringMode::Plain => f64::from(c > 0.0),
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Some(raw.into_iter().map(|w| w / total).collect())
    } else {
        None
    }
}

/// Removes the (confidence-weighted) mean translation.
pub fn center_keypoints(
    points: &[Vector3<f64>],
    conf: &[f64],
    mode: CenteringMode,
) -> Option<Vec<Vector3<f64>>> {
    let w = centering_weights(conf, mode)?;
    let mean: Vector3<f64> = points.iter().zip(&w).map(|(p, w)| p * *w).sum();
    Some(points.iter().map(|p| p - mean).collect())
}

/// One video frame of detections.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub t: f64,
    pub p_c: Vec<Vector3<f64>>,
    pub x2d: Vec<Vector2<f64>>,
    /// `None` marks a keypoint the detector did not report.
    pub sigma_mm: Vec<Option<f64>>,
    pub confidence: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: f64,
    p_c: Vec<[f64; 3]>,
    x2d: Vec<[f64; 2]>,
    sigma_mm: Vec<Option<f64>>,
}

impl KeypointFrame {
    pub fn new(
        t: f64,
        p_c: Vec<Vector3<f64>>,
        x2d: Vec<Vector2<f64>>,
        sigma_mm: Vec<Option<f64>>,
    ) -> Self {
        let confidence = sigma_mm
            .iter()
            .map(|s| s.map(confidence_from_std).unwrap_or(0.0))
            .collect();
        Self {
            t,
            p_c,
            x2d,
            sigma_mm,
            confidence,
        }
    }

    pub fn len(&self) -> usize {
        self.p_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_c.is_empty()
    }

    fn validate(&self, index: usize, markers: usize) -> Result<(), CameraError> {
        let err = |msg: String| CameraError::Frame { index, msg };
        if self.p_c.len() != markers || self.x2d.len() != markers || self.sigma_mm.len() != markers {
            return Err(err(format!(
                "expected {markers} keypoints, got p_c={} x2d={} sigma={}",
                self.p_c.len(),
                self.x2d.len(),
                self.sigma_mm.len()
            )));
        }
        if !self.t.is_finite() {
            return Err(err("non-finite timestamp".into()));
        }
        if self.sigma_mm.iter().flatten().any(|s| !(*s >= 0.0)) {
            return Err(err("negative or non-finite sigma".into()));
        }
        Ok(())
    }
}

/// Writes frames as JSON lines.
pub fn write_keypoints<W: Write>(mut w: W, frames: &[KeypointFrame]) -> Result<(), CameraError> {
    for f in frames {
        let rec = FrameRecord {
            t: f.t,
            p_c: f.p_c.iter().map(|p| [p.x, p.y, p.z]).collect(),
            x2d: f.x2d.iter().map(|p| [p.x, p.y]).collect(),
            sigma_mm: f.sigma_mm.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-lines keypoint frames, checking marker counts and time order.
pub fn read_keypoints<R: BufRead>(r: R, markers: usize) -> Result<Vec<KeypointFrame>, CameraError> {
    let mut frames: Vec<KeypointFrame> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| CameraError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let f = KeypointFrame::new(
            rec.t,
            rec.p_c.into_iter().map(Vector3::from).collect(),
            rec.x2d.into_iter().map(Vector2::from).collect(),
            rec.sigma_mm,
        );
        f.validate(frames.len(), markers)?;
        if let Some(prev) = frames.last() {
            if f.t <= prev.t {
                return Err(CameraError::Frame {
                    index: frames.len(),
                    msg: "timestamps must be strictly increasing".into(),
                });
            }
        }
        frames.push(f);
    }
    Ok(frames)
}
