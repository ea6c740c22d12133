use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kinefuse::exec;
use kinefuse::objective::FitMode;
use kinefuse_cli::{cmd_fit, cmd_report, cmd_simulate, CliError, FitArgs, ReportArgs, SimulateArgs};

#[derive(Parser)]
#[command(name = "kinefuse", version, about = "Video and inertial sensor fusion for joint-angle reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic recording with ground truth.
    Simulate {
        /// Scenario TOML; the built-in default scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Body model descriptor TOML; the built-in lower-body model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a trajectory to a recording.
    Fit {
        /// Recording manifest (or a directory containing manifest.json).
        manifest: PathBuf,
        #[arg(long, default_value = "fusion")]
        mode: FitMode,
        /// Fit configuration TOML; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Total optimizer steps; the schedule is rescaled to match.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare fits with a ground-truth sidecar.
    Report {
        /// Fit output directories.
        #[arg(required = true)]
        fits: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { scenario, model, seed, out } => {
            let s = cmd_simulate(&SimulateArgs { scenario, model, seed, out })?;
            println!("scenario {}", s.scenario_hash);
            println!("keypoint frames: {}", s.keypoint_frames);
            for (id, att, gyro) in &s.sensors {
                println!("sensor {id}: {att} attitude, {gyro} gyro samples");
            }
            println!("phone gyro samples: {}", s.phone_gyro_samples);
        }
        Command::Fit { manifest, mode, config, seed, steps, out } => {
            let manifest = if manifest.is_dir() { kinefuse_cli::manifest_path(&manifest) } else { manifest };
            let s = cmd_fit(&FitArgs { manifest, mode, config, seed, steps, out })?;
            println!("{} fit finished after {} steps", s.mode, s.steps);
            let r = &s.residuals;
            let show = |name: &str, v: Option<f64>, unit: &str| {
                if let Some(v) = v {
                    println!("  {name}: {v:.4} {unit}");
                }
            };
            show("keypoint", r.keypoint_cm, "cm");
            show("reprojection", r.reprojection_px, "px");
            show("phone gyro", r.phone_gyro_dps, "deg/s");
            show("sensor gyro", r.sensor_gyro_dps, "deg/s");
            show("attitude", r.attitude_deg, "deg");
        }
        Command::Report { fits, truth, out } => {
            let r = cmd_report(&ReportArgs { fits, truth, out })?;
            for rep in &r.reports {
                for j in &rep.joints {
                    println!(
                        "{:7} {:18} MAE {:7.3}  MAE-MA {:7.3}  r {}",
                        rep.mode.to_string(),
                        j.joint,
                        j.mae_deg,
                        j.mae_ma_deg,
                        j.pearson.map_or("-".into(), |p| format!("{p:.4}"))
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    exec::init_threads_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
