//! In-memory recording and its on-disk manifest.
//!
//! A recording directory holds `manifest.json`, a keypoint JSON-lines file,
//! one JSON-lines file per IMU and optionally one for the phone gyroscope.

use crate::body_model::{BodyModelError, KinematicTree};
use crate::camera::{self, CameraError, CameraIntrinsics, KeypointFrame};
use crate::sensor_model::{self, PhoneGyroStream, SensorError, SensorStream, StreamFile};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_SCHEMA: &str = "kinefuse.recording/1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Allowed mismatch between the declared duration and stream extents.
pub const DURATION_SLACK: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("missing field `{0}` in manifest")]
    MissingField(&'static str),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Model(#[from] BodyModelError),
    #[error("recording inconsistent: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordingError + '_ {
    move |source| RecordingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// All observation streams of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub duration: f64,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<KeypointFrame>,
    pub sensors: Vec<SensorStream>,
    pub phone: Option<PhoneGyroStream>,
    /// Hash of the scenario that produced this recording, if simulated.
    pub scenario_hash: Option<String>,
}

impl Recording {
    /// Checks stream extents against the declared duration.
    pub fn validate(&self) -> Result<(), RecordingError> {
        self.intrinsics.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(RecordingError::Inconsistent("duration must be positive".into()));
        }
        let lo = -DURATION_SLACK;
        let hi = self.duration + DURATION_SLACK;
        let check = |name: &str, ts: &mut dyn Iterator<Item = f64>| -> Result<(), RecordingError> {
            for t in ts {
                if t < lo || t > hi {
                    return Err(RecordingError::Inconsistent(format!(
                        "{name} sample at t = {t} s lies outside the {} s recording",
                        self.duration
                    )));
                }
            }
            Ok(())
        };
        check("keypoint", &mut self.keypoints.iter().map(|f| f.t))?;
        for s in &self.sensors {
            check(&s.id, &mut s.attitude.iter().map(|a| a.t))?;
            check(&s.id, &mut s.gyro.iter().map(|g| g.t))?;
        }
        if let Some(p) = &self.phone {
            check("phone gyro", &mut p.samples.iter().map(|g| g.t))?;
        }
        Ok(())
    }
}

/// On-disk description of a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingManifest {
    pub schema: String,
    pub duration: Option<f64>,
    pub intrinsics: Option<CameraIntrinsics>,
    pub keypoints: Option<String>,
    #[serde(default)]
    pub sensors: Vec<String>,
    #[serde(default)]
    pub phone_gyro: Option<String>,
    /// Model descriptor path relative to the manifest; `None` selects the
    /// built-in lower-body model.
    #[serde(default)]
    pub model_descriptor: Option<String>,
    #[serde(default)]
    pub scenario_hash: Option<String>,
}

/// A loaded recording together with its body model.
#[derive(Debug, Clone)]
pub struct LoadedRecording {
    pub recording: Recording,
    pub tree: KinematicTree,
    pub manifest: RecordingManifest,
}

/// Loads a manifest and every stream it references. Sensor files are
/// skipped when `with_sensors` is false.
pub fn load(manifest_path: &Path, with_sensors: bool) -> Result<LoadedRecording, RecordingError> {
    let text = std::fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: RecordingManifest =
        serde_json::from_str(&text).map_err(|e| RecordingError::Manifest {
            path: manifest_path.to_path_buf(),
            msg: e.to_string(),
        })?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(RecordingError::Manifest {
            path: manifest_path.to_path_buf(),
            msg: format!("unsupported schema {:?}", manifest.schema),
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let duration = manifest.duration.ok_or(RecordingError::MissingField("duration"))?;
    let intrinsics = manifest.intrinsics.ok_or(RecordingError::MissingField("intrinsics"))?;
    let kp_name = manifest.keypoints.as_ref().ok_or(RecordingError::MissingField("keypoints"))?;
    let tree = match &manifest.model_descriptor {
        Some(p) => KinematicTree::from_descriptor_file(&dir.join(p))?,
        None => KinematicTree::default_lower_body(),
    };
    let kp_path = dir.join(kp_name);
    let f = File::open(&kp_path).map_err(io_err(&kp_path))?;
    let keypoints = camera::read_keypoints(BufReader::new(f), tree.markers.len())?;

    let mut sensors = Vec::new();
    if with_sensors {
        for name in &manifest.sensors {
            let path = dir.join(name);
            let f = File::open(&path).map_err(io_err(&path))?;
            match sensor_model::read_stream(BufReader::new(f), name)? {
                StreamFile::Imu(s) => {
                    if tree.segment_index(&s.segment).is_none() {
                        return Err(RecordingError::Inconsistent(format!(
                            "sensor {} is attached to unknown segment {:?}",
                            s.id, s.segment
                        )));
                    }
                    sensors.push(s)
                }
                StreamFile::Phone(_) => {
                    return Err(RecordingError::Inconsistent(format!(
                        "{name} is listed as an IMU stream but holds phone gyro data"
                    )))
                }
            }
        }
    }
    let phone = match &manifest.phone_gyro {
        Some(name) => {
            let path = dir.join(name);
            let f = File::open(&path).map_err(io_err(&path))?;
            match sensor_model::read_stream(BufReader::new(f), name)? {
                StreamFile::Phone(p) => Some(p),
                StreamFile::Imu(_) => {
                    return Err(RecordingError::Inconsistent(format!(
                        "{name} is listed as phone gyro but holds IMU data"
                    )))
                }
            }
        }
        None => None,
    };
    let recording = Recording {
        duration,
        intrinsics,
        keypoints,
        sensors,
        phone,
        scenario_hash: manifest.scenario_hash.clone(),
    };
    recording.validate()?;
    Ok(LoadedRecording {
        recording,
        tree,
        manifest,
    })
}

/// Writes all streams and the manifest into `dir`. When `descriptor_text`
/// is given it is stored as `model.toml` and referenced from the manifest.
pub fn save(
    rec: &Recording,
    dir: &Path,
    descriptor_text: Option<&str>,
) -> Result<PathBuf, RecordingError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let create = |name: &str| -> Result<BufWriter<File>, RecordingError> {
        let p = dir.join(name);
        File::create(&p).map(BufWriter::new).map_err(io_err(&p))
    };
    let flush = |mut w: BufWriter<File>, name: &str| -> Result<(), RecordingError> {
        w.flush().map_err(io_err(&dir.join(name)))
    };

    let kp = "keypoints.jsonl";
    let mut w = create(kp)?;
    camera::write_keypoints(&mut w, &rec.keypoints)?;
    flush(w, kp)?;

    let mut sensors = Vec::new();
    for s in &rec.sensors {
        let name = format!("imu_{}.jsonl", s.id);
        let mut w = create(&name)?;
        sensor_model::write_sensor_stream(&mut w, s)?;
        flush(w, &name)?;
        sensors.push(name);
    }
    let phone_gyro = match &rec.phone {
        Some(p) => {
            let name = "phone_gyro.jsonl";
            let mut w = create(name)?;
            sensor_model::write_phone_stream(&mut w, p)?;
            flush(w, name)?;
            Some(name.to_string())
        }
        None => None,
    };
    let model_descriptor = match descriptor_text {
        Some(text) => {
            let p = dir.join("model.toml");
            std::fs::write(&p, text).map_err(io_err(&p))?;
            Some("model.toml".to_string())
        }
        None => None,
    };
    let manifest = RecordingManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        duration: Some(rec.duration),
        intrinsics: Some(rec.intrinsics),
        keypoints: Some(kp.to_string()),
        sensors,
        phone_gyro,
        model_descriptor,
        scenario_hash: rec.scenario_hash.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}
