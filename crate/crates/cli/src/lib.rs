//! Subcommand implementations for the `kinefuse` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kinefuse::body_model::KinematicTree;
use kinefuse::eval::{self, ComparisonReport, ResidualReport};
use kinefuse::objective::{self, FitConfig, FitError, FitMode, LossRecord, LossTerms};
use kinefuse::recording::{self, RecordingError, MANIFEST_FILE};
use kinefuse::sensor_model::SensorCalibration;
use kinefuse::synth::{self, GroundTruthFile, ScenarioConfig};
use kinefuse::trajectory_net::TrajectoryParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRUTH_FILE: &str = "ground_truth.json";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const CHECKPOINT_FILE: &str = "trajectory.bin";
pub const STATE_FILE: &str = "fit_state.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESIDUAL_FILE: &str = "residuals.json";
pub const TIMING_FILE: &str = "timing.json";
pub const MODEL_FILE: &str = "model.toml";
pub const CONFIG_FILE: &str = "fit_config.toml";
pub const FIT_SCHEMA: &str = "kinefuse.fit/1";

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<RecordingError> for CliError {
    fn from(e: RecordingError) -> Self {
        match e {
            RecordingError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Diverged { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn load_tree(path: Option<&Path>) -> Result<(KinematicTree, String), CliError> {
    let text = match path {
        Some(p) => read_text(p)?,
        None => KinematicTree::default_descriptor_text().to_string(),
    };
    let tree = KinematicTree::from_descriptor_str(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((tree, text))
}

pub struct SimulateArgs {
    pub scenario: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub scenario_hash: String,
    pub keypoint_frames: usize,
    pub sensors: Vec<(String, usize, usize)>,
    pub phone_gyro_samples: usize,
}

/// Simulates a scenario and writes the recording, the scenario and the
/// ground-truth sidecar into `out`.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateSummary, CliError> {
    let mut scenario = match &args.scenario {
        Some(p) => ScenarioConfig::from_toml(&read_text(p)?).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let (tree, descriptor) = load_tree(args.model.as_deref())?;
    let (rec, truth) = synth::simulate(&scenario, &tree).map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(&args.out)?;
    recording::save(&rec, &args.out, Some(&descriptor))?;
    write_bytes(&args.out.join(SCENARIO_FILE), scenario.to_toml().as_bytes())?;
    write_json(&args.out.join(TRUTH_FILE), &GroundTruthFile::from_truth(&truth))?;
    Ok(SimulateSummary {
        scenario_hash: scenario.hash(&tree),
        keypoint_frames: rec.keypoints.len(),
        sensors: rec
            .sensors
            .iter()
            .map(|s| (s.id.clone(), s.attitude.len(), s.gyro.len()))
            .collect(),
        phone_gyro_samples: rec.phone.as_ref().map_or(0, |p| p.samples.len()),
    })
}

pub struct FitArgs {
    pub manifest: PathBuf,
    pub mode: FitMode,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub out: PathBuf,
}

/// Fitted parameters other than the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub schema: String,
    pub mode: FitMode,
    pub scenario_hash: Option<String>,
    pub descriptor_hash: String,
    pub scale_names: Vec<String>,
    pub beta_scale: Vec<f64>,
    pub beta_offsets: Vec<[f64; 3]>,
    pub calibration: SensorCalibration,
    pub sensor_ids: Vec<String>,
}

/// Deterministic run summary; wall time lives in a separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema: String,
    pub mode: FitMode,
    pub scenario_hash: Option<String>,
    pub steps: u64,
    pub final_losses: Option<LossTerms>,
    pub final_total: Option<f64>,
    pub history: Vec<LossRecord>,
    pub residuals: ResidualReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
    pub steps: u64,
    pub steps_per_s: f64,
}

pub fn load_fit_config(path: Option<&Path>) -> Result<FitConfig, CliError> {
    let cfg = match path {
        Some(p) => FitConfig::from_toml(&read_text(p)?)?,
        None => FitConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Fits a recording and writes checkpoint, state, summary, residuals and
/// timing into `out`.
pub fn cmd_fit(args: &FitArgs) -> Result<FitSummary, CliError> {
    let mut cfg = load_fit_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.optimizer.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg = cfg.with_steps(steps);
    }
    cfg.validate()?;
    let loaded = recording::load(&args.manifest, args.mode == FitMode::Fusion)?;
    let rec = &loaded.recording;
    let tree = &loaded.tree;
    let descriptor = match &loaded.manifest.model_descriptor {
        Some(p) => read_text(&args.manifest.parent().unwrap_or(Path::new(".")).join(p))?,
        None => KinematicTree::default_descriptor_text().to_string(),
    };
    let fit = objective::optimize(rec, tree, &cfg, args.mode)?;

    create_dir(&args.out)?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    let f = File::create(&ckpt).map_err(|e| io_error(&ckpt, e))?;
    let mut w = BufWriter::new(f);
    fit.params.net.write_checkpoint(&mut w).map_err(|e| io_error(&ckpt, e))?;
    w.flush().map_err(|e| io_error(&ckpt, e))?;

    let state = FitState {
        schema: FIT_SCHEMA.to_string(),
        mode: args.mode,
        scenario_hash: rec.scenario_hash.clone(),
        descriptor_hash: tree.descriptor_hash().to_string(),
        scale_names: tree.scale_names.clone(),
        beta_scale: fit.params.beta.scale.clone(),
        beta_offsets: fit.params.beta.offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
        calibration: fit.params.calibration.clone(),
        sensor_ids: rec.sensors.iter().map(|s| s.id.clone()).collect(),
    };
    write_json(&args.out.join(STATE_FILE), &state)?;
    write_bytes(&args.out.join(MODEL_FILE), descriptor.as_bytes())?;
    write_bytes(&args.out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let last = fit.history.last();
    let summary = FitSummary {
        schema: FIT_SCHEMA.to_string(),
        mode: args.mode,
        scenario_hash: rec.scenario_hash.clone(),
        steps: fit.steps,
        final_losses: last.map(|l| l.terms),
        final_total: last.map(|l| l.total),
        history: fit.history.clone(),
        residuals: fit.residuals,
    };
    write_json(&args.out.join(SUMMARY_FILE), &summary)?;
    write_json(&args.out.join(RESIDUAL_FILE), &fit.residuals)?;
    let timing = Timing {
        wall_time_s: fit.wall_time_s,
        steps: fit.steps,
        steps_per_s: fit.steps as f64 / fit.wall_time_s.max(1e-9),
    };
    write_json(&args.out.join(TIMING_FILE), &timing)?;
    Ok(summary)
}

/// A fit directory loaded back from disk.
pub struct LoadedFit {
    pub dir: PathBuf,
    pub state: FitState,
    pub net: TrajectoryParams,
    pub tree: KinematicTree,
}

pub fn load_fit(dir: &Path) -> Result<LoadedFit, CliError> {
    let missing: Vec<&str> = [CHECKPOINT_FILE, STATE_FILE, MODEL_FILE]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Usage(format!(
            "{} is not a fit directory; missing {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let state: FitState = read_json(&dir.join(STATE_FILE))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let f = File::open(&ckpt).map_err(|e| io_error(&ckpt, e))?;
    let net = TrajectoryParams::read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| CliError::Usage(format!("{}: {e}", ckpt.display())))?;
    let (tree, _) = load_tree(Some(&dir.join(MODEL_FILE)))?;
    if net.descriptor_hash != tree.descriptor_hash() || state.descriptor_hash != tree.descriptor_hash() {
        return Err(CliError::Usage(format!("{}: body model does not match checkpoint", dir.display())));
    }
    Ok(LoadedFit {
        dir: dir.to_path_buf(),
        state,
        net,
        tree,
    })
}

pub struct ReportArgs {
    pub fits: Vec<PathBuf>,
    pub truth: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub reports: Vec<ComparisonReport>,
    /// Fusion minus video per joint and metric, when both modes are present.
    pub paired_deltas: Vec<eval::PairedDelta>,
}

/// Compares each fit with the ground truth and writes JSON and CSV reports.
pub fn cmd_report(args: &ReportArgs) -> Result<Report, CliError> {
    if args.fits.is_empty() {
        return Err(CliError::Usage("report needs at least one fit directory".into()));
    }
    let truth: GroundTruthFile = read_json(&args.truth)?;
    let mut reports = Vec::new();
    for dir in &args.fits {
        let fit = load_fit(dir)?;
        match &fit.state.scenario_hash {
            Some(h) if *h == truth.scenario_hash => {}
            Some(h) => {
                return Err(CliError::Usage(format!(
                    "{}: scenario hash {h} does not match ground truth {}",
                    dir.display(),
                    truth.scenario_hash
                )))
            }
            None => {
                return Err(CliError::Usage(format!(
                    "{}: fit has no scenario hash to check against the ground truth",
                    dir.display()
                )))
            }
        }
        let report = eval::compare_joints(&fit.net, &fit.tree, &truth, fit.state.mode, None)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        reports.push(report);
    }
    let video = reports.iter().find(|r| r.mode == FitMode::Video);
    let fusion = reports.iter().find(|r| r.mode == FitMode::Fusion);
    create_dir(&args.out)?;
    let mut paired = Vec::new();
    if let (Some(v), Some(f)) = (video, fusion) {
        paired = eval::paired_deltas(v, f);
        write_bytes(&args.out.join("paired_deltas.csv"), eval::paired_delta_csv(v, f).as_bytes())?;
    }
    write_bytes(&args.out.join("comparison.csv"), eval::comparison_csv(&reports).as_bytes())?;
    let report = Report {
        reports,
        paired_deltas: paired,
    };
    write_json(&args.out.join("comparison.json"), &report)?;
    Ok(report)
}

/// Manifest path inside a simulated recording directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            CliError::Usage(String::new()).exit_code(),
            CliError::Numerical(String::new()).exit_code(),
            CliError::Io(String::new()).exit_code(),
        ];
        assert_eq!(codes, [1, 2, 3]);
    }

    #[test]
    fn divergence_maps_to_numerical() {
        let e: CliError = FitError::Config("x".into()).into();
        assert_eq!(e.exit_code(), 1);
    }
}
