//! Command-line surface for the radar-to-map localization pipeline:
//! dataset synthesis, two-stage training, radar odometry, filter tracking,
//! coarse relocalization and trajectory evaluation.

use radloc_cli::{config, dataset, io, plot};

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radloc_core::bev::{polar_to_cartesian, BevImage, GridMap};
use radloc_core::error::PipelineError;
use radloc_core::filter::{track_sequence, FilterState};
use radloc_core::measnet::coarse_localize;
use radloc_core::odom::{odometry_chain, IcpConfig};
use radloc_core::pipeline::{
    absolute_errors, kitti_relative_errors, relative_pose_errors, sample_perturbations, Sample,
    SequenceData,
};
use radloc_core::se2::{boxplus, Pose2};
use radloc_core::synth::{generate_scene, simulate_trajectory};

use config::RunConfig;
use dataset::Dataset;

const EXIT_MISSING_FILE: u8 = 2;
const EXIT_INVALID_CONFIG: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// Radar-to-lidar-map localization pipeline.
#[derive(Parser)]
#[command(
    name = "radloc",
    version,
    after_help = "Exit codes: 0 success, 2 missing file, 3 invalid config, 4 numerical or shape error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpt {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigOpt {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene, trajectory and scan dataset directory.
    Synth {
        #[command(flatten)]
        config: ConfigOpt,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 training: single-step measurement losses on perturbed poses.
    Train1 {
        #[command(flatten)]
        config: ConfigOpt,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory for checkpoint, report and resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 training: sequence likelihood through the unrolled filter.
    Train2 {
        #[command(flatten)]
        config: ConfigOpt,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Stage-1 checkpoint stem (path without .bin/.json extension).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory for checkpoint, report and resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan-to-scan ICP odometry over a dataset; writes a controls CSV.
    Odom {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Intensity threshold for salient-point extraction.
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        /// Run directory for the odometry CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Kalman-filter tracking of a dataset with a trained checkpoint.
    Track {
        #[command(flatten)]
        config: ConfigOpt,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint stem (path without .bin/.json extension).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory for trajectory CSV, metrics and plots.
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarse relocalization trials with planted large offsets.
    Coarse {
        #[command(flatten)]
        config: ConfigOpt,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint stem (path without .bin/.json extension).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory for the per-trial estimates CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a trajectory CSV against ground truth; writes metrics and plots.
    Eval {
        /// Estimated trajectory CSV (columns t,x,y,theta, extras ignored).
        traj: PathBuf,
        /// Ground-truth trajectory CSV (same shape).
        gt: PathBuf,
        /// Run directory for metrics JSON and plot images.
        #[arg(long)]
        out: PathBuf,
        /// Optional map stem for the trajectory overlay backdrop.
        #[arg(long)]
        map: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Single machine-parseable line: code word, then the message.
            let (code, kind) = match &e {
                PipelineError::MissingFile(_) => (EXIT_MISSING_FILE, "missing-file"),
                PipelineError::Config(_) => (EXIT_INVALID_CONFIG, "invalid-config"),
                PipelineError::Numerical { .. } | PipelineError::Shape(_) => {
                    (EXIT_NUMERICAL, "numerical")
                }
            };
            eprintln!("error[{kind}]: {}", format!("{e}").replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Synth { config, seed, out } => cmd_synth(&config, seed, &out),
        Command::Train1 {
            config,
            dataset,
            out,
        } => cmd_train1(&config, &dataset, &out),
        Command::Train2 {
            config,
            dataset,
            checkpoint,
            out,
        } => cmd_train2(&config, &dataset, &checkpoint, &out),
        Command::Odom {
            dataset,
            threshold,
            out,
        } => cmd_odom(&dataset, threshold, &out),
        Command::Track {
            config,
            dataset,
            checkpoint,
            out,
        } => cmd_track(&config, &dataset, &checkpoint, &out),
        Command::Coarse {
            config,
            dataset,
            checkpoint,
            out,
        } => cmd_coarse(&config, &dataset, &checkpoint, &out),
        Command::Eval { traj, gt, out, map } => cmd_eval(&traj, &gt, &out, map.as_deref()),
    }
}

fn write_json_report(path: &Path, value: &serde_json::Value) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::numerical("serialize report", e.to_string()))?;
    fs::write(path, text).map_err(|e| PipelineError::numerical("write report", e.to_string()))
}

fn cmd_synth(config: &ConfigOpt, seed: Option<u64>, out: &Path) -> Result<(), PipelineError> {
    let mut cfg = config.load()?;
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    let scene = generate_scene(&cfg.scene)?;
    let data = simulate_trajectory(
        &scene,
        cfg.trajectory.steps,
        &cfg.trajectory.profile,
        &cfg.noise,
        &cfg.scan,
    )?;
    dataset::write_dataset(out, &scene, &data, cfg.trajectory.profile.dt)?;
    cfg.store(out)?;
    println!("dataset: {} steps at {}", cfg.trajectory.steps, out.display());
    Ok(())
}

/// Robot-frame bird's-eye images for every scan, at training geometry.
fn dataset_bevs(ds: &Dataset, cfg: &RunConfig) -> Vec<BevImage> {
    ds.scans
        .iter()
        .map(|s| {
            polar_to_cartesian(
                s,
                cfg.train.image_resolution,
                cfg.train.image_h,
                cfg.train.image_w,
            )
        })
        .collect()
}

fn cmd_train1(config: &ConfigOpt, dataset: &Path, out: &Path) -> Result<(), PipelineError> {
    let cfg = config.load()?;
    let ds = dataset::load_dataset(dataset)?;
    let bevs = dataset_bevs(&ds, &cfg);
    let map = Arc::new(ds.map);
    let samples: Vec<Sample> = bevs
        .into_iter()
        .zip(ds.poses.iter())
        .zip(ds.timestamps.iter())
        .map(|((bev, gt), t)| Sample {
            t: *t,
            bev,
            gt: *gt,
            map: map.clone(),
        })
        .collect();
    let report = radloc_core::pipeline::train_stage1(&samples, cfg.arch_config()?, &cfg.train)?;
    finish_training(&cfg, out, &report, "stage1")
}

fn cmd_train2(
    config: &ConfigOpt,
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let cfg = config.load()?;
    let ds = dataset::load_dataset(dataset)?;
    let (params, _) = io::read_checkpoint(checkpoint)?;
    let bevs = dataset_bevs(&ds, &cfg);
    // The controls move pose k to pose k+1, so scans/gt start at step 1.
    let map = Arc::new(ds.map);
    let seq = SequenceData {
        start: ds.poses[0],
        map: map.clone(),
        t0: ds.timestamps[0],
        dt: cfg.trajectory.profile.dt,
        controls: ds.controls.clone(),
        scans: bevs[1..].to_vec(),
        gt: ds.poses[1..].to_vec(),
    };
    let report = radloc_core::pipeline::train_stage2(&params, &[seq], &cfg.train)?;
    finish_training(&cfg, out, &report, "stage2")
}

fn finish_training(
    cfg: &RunConfig,
    out: &Path,
    report: &radloc_core::pipeline::TrainReport,
    stage: &str,
) -> Result<(), PipelineError> {
    cfg.store(out)?;
    io::write_checkpoint(
        &out.join("checkpoint"),
        &report.params,
        cfg.train.grid_limits,
        cfg.train.grid_resolutions,
    )?;
    write_json_report(
        &out.join("report.json"),
        &serde_json::json!({
            "stage": stage,
            "train_loss": report.train_loss,
            "val_loss": report.val_loss,
            "best_epoch": report.best_epoch,
            "aborted": report.aborted,
            "skipped_windows": report.skipped_windows,
        }),
    )?;
    let last = report.val_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "{stage}: best epoch {} val loss {:.4} -> {}",
        report.best_epoch,
        last,
        out.display()
    );
    if report.aborted {
        return Err(PipelineError::numerical(
            stage,
            "training aborted on non-finite loss; last finite checkpoint written",
        ));
    }
    Ok(())
}

fn cmd_odom(dataset: &Path, threshold: f64, out: &Path) -> Result<(), PipelineError> {
    let ds = dataset::load_dataset(dataset)?;
    let steps = odometry_chain(&ds.scans, threshold, &IcpConfig::default())?;
    fs::create_dir_all(out).map_err(|e| PipelineError::numerical("create run dir", e.to_string()))?;
    let mut csv = String::from("t,dx,dy,dtheta,converged,rmse\n");
    for (k, s) in steps.iter().enumerate() {
        csv.push_str(&format!(
            "{:.6},{:.9},{:.9},{:.9},{},{:.9}\n",
            ds.timestamps[k + 1],
            s.control.dx,
            s.control.dy,
            s.control.dtheta,
            s.converged,
            s.rmse
        ));
    }
    fs::write(out.join("odometry.csv"), csv)
        .map_err(|e| PipelineError::numerical("write odometry", e.to_string()))?;
    println!("odometry: {} steps -> {}", steps.len(), out.display());
    Ok(())
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9}")
    } else {
        "NaN".into()
    }
}

fn cmd_track(
    config: &ConfigOpt,
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let cfg = config.load()?;
    let ds = dataset::load_dataset(dataset)?;
    let (params, manifest) = io::read_checkpoint(checkpoint)?;
    let grid = radloc_core::se2::OffsetGrid::build(manifest.grid_limits, manifest.grid_resolutions)?;
    let bevs = dataset_bevs(&ds, &cfg);
    let map = Arc::new(ds.map);
    let noise = cfg.train.noise_config();
    let init = FilterState::new(ds.poses[0], noise.initial_cov, ds.timestamps[0]);
    let traj = track_sequence(
        &params,
        init,
        &ds.controls,
        &bevs[1..],
        &map,
        &grid,
        &noise,
        &cfg.train.measure_config(),
        cfg.trajectory.profile.dt,
    )?;

    fs::create_dir_all(out).map_err(|e| PipelineError::numerical("create run dir", e.to_string()))?;
    cfg.store(out)?;
    let mut csv = String::from(
        "t,x,y,theta,cov00,cov01,cov02,cov10,cov11,cov12,cov20,cov21,cov22,\
         pred_x,pred_y,pred_theta,z_x,z_y,z_theta\n",
    );
    for (k, s) in traj.steps.iter().enumerate() {
        let p = s.posterior.pose;
        let c = s.posterior.cov.0;
        let pr = s.predicted.pose;
        let z = s
            .measurement
            .as_ref()
            .map(|m| (m.z.x, m.z.y, m.z.theta))
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        csv.push_str(&format!(
            "{:.6},{:.9},{:.9},{:.9},{},{},{},{},{},{},{},{},{},{:.9},{:.9},{:.9},{},{},{}\n",
            ds.timestamps[k + 1],
            p.x,
            p.y,
            p.theta,
            fmt_opt(c[(0, 0)]),
            fmt_opt(c[(0, 1)]),
            fmt_opt(c[(0, 2)]),
            fmt_opt(c[(1, 0)]),
            fmt_opt(c[(1, 1)]),
            fmt_opt(c[(1, 2)]),
            fmt_opt(c[(2, 0)]),
            fmt_opt(c[(2, 1)]),
            fmt_opt(c[(2, 2)]),
            pr.x,
            pr.y,
            pr.theta,
            fmt_opt(z.0),
            fmt_opt(z.1),
            fmt_opt(z.2),
        ));
    }
    fs::write(out.join("trajectory.csv"), csv)
        .map_err(|e| PipelineError::numerical("write trajectory", e.to_string()))?;

    let est = traj.poses();
    let gt = &ds.poses[1..];
    let abs = absolute_errors(&est, gt)?;
    let n_meas = traj.steps.iter().filter(|s| s.measurement.is_some()).count();
    write_json_report(
        &out.join("metrics.json"),
        &serde_json::json!({
            "absolute": abs,
            "steps": est.len(),
            "measurement_updates": n_meas,
        }),
    )?;
    plot::plot_trajectories(&out.join("trajectory.png"), &map, gt, &est)?;
    println!(
        "track: {} steps rmse {:.3} m / {:.2} deg -> {}",
        est.len(),
        abs.rmse_trans,
        abs.rmse_rot_deg,
        out.display()
    );
    Ok(())
}

fn cmd_coarse(
    config: &ConfigOpt,
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let cfg = config.load()?;
    let ds = dataset::load_dataset(dataset)?;
    let (params, manifest) = io::read_checkpoint(checkpoint)?;
    let sub_grid =
        radloc_core::se2::OffsetGrid::build(manifest.grid_limits, manifest.grid_resolutions)?;
    let bevs = dataset_bevs(&ds, &cfg);
    let map = Arc::new(ds.map);
    let mcfg = cfg.train.measure_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xc0a5_5e00);

    fs::create_dir_all(out).map_err(|e| PipelineError::numerical("create run dir", e.to_string()))?;
    cfg.store(out)?;
    let mut csv =
        String::from("trial,step,true_dx,true_dy,true_dtheta,est_dx,est_dy,est_dtheta\n");
    let mut hits = 0usize;
    for trial in 0..cfg.coarse.trials {
        let step = rng.gen_range(0..ds.poses.len());
        let (prior, target) = sample_perturbations(ds.poses[step], cfg.coarse.limits, &mut rng);
        let est = coarse_localize(
            &params,
            &bevs[step],
            &map,
            prior,
            cfg.coarse.limits,
            &sub_grid,
            &mcfg,
        )?;
        let recovered = boxplus(prior, est);
        let gt = ds.poses[step];
        let err = ((recovered.x - gt.x).powi(2) + (recovered.y - gt.y).powi(2)).sqrt();
        if err <= sub_grid.resolutions.0 {
            hits += 1;
        }
        csv.push_str(&format!(
            "{trial},{step},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            target.dx, target.dy, target.dtheta, est.dx, est.dy, est.dtheta
        ));
    }
    fs::write(out.join("coarse.csv"), csv)
        .map_err(|e| PipelineError::numerical("write coarse results", e.to_string()))?;
    println!(
        "coarse: {hits}/{} trials within grid resolution -> {}",
        cfg.coarse.trials,
        out.display()
    );
    Ok(())
}

/// Read `t,x,y,theta` rows from a CSV, ignoring extra columns.
fn read_pose_csv(path: &Path) -> Result<Vec<Pose2>, PipelineError> {
    let text =
        fs::read_to_string(path).map_err(|_| PipelineError::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(PipelineError::Shape(format!(
                "{}:{}: expected at least 4 columns, got {}",
                path.display(),
                n + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| {
                PipelineError::numerical(
                    "parse trajectory",
                    format!("{}:{}: {e}", path.display(), n + 1),
                )
            })
        };
        out.push(Pose2::new(parse(fields[1])?, parse(fields[2])?, parse(fields[3])?));
    }
    Ok(out)
}

fn cmd_eval(
    traj_path: &Path,
    gt_path: &Path,
    out: &Path,
    map: Option<&Path>,
) -> Result<(), PipelineError> {
    let traj = read_pose_csv(traj_path)?;
    let gt = read_pose_csv(gt_path)?;
    let abs = absolute_errors(&traj, &gt)?;
    let drift = kitti_relative_errors(&traj, &gt).ok();
    let distances: Vec<f64> = (1..=8).map(|k| 100.0 * k as f64).collect();
    let bins = relative_pose_errors(&traj, &gt, &distances).unwrap_or_default();

    fs::create_dir_all(out).map_err(|e| PipelineError::numerical("create run dir", e.to_string()))?;
    write_json_report(
        &out.join("metrics.json"),
        &serde_json::json!({
            "absolute": abs,
            "drift": drift,
            "per_distance": bins,
        }),
    )?;

    let trans_curve: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.trans_percent.is_finite())
        .map(|b| (b.distance, b.trans_percent))
        .collect();
    if trans_curve.len() >= 2 {
        plot::plot_error_curve(&out.join("drift_translation.png"), &trans_curve)?;
    }
    let rot_curve: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.rot_deg.is_finite())
        .map(|b| (b.distance, b.rot_deg))
        .collect();
    if rot_curve.len() >= 2 {
        plot::plot_error_curve(&out.join("drift_rotation.png"), &rot_curve)?;
    }
    let backdrop = match map {
        Some(stem) => io::read_map(stem)?,
        None => bounding_map(&gt),
    };
    plot::plot_trajectories(&out.join("trajectory.png"), &backdrop, &gt, &traj)?;
    println!(
        "eval: rmse {:.3} m / {:.2} deg -> {}",
        abs.rmse_trans,
        abs.rmse_rot_deg,
        out.display()
    );
    Ok(())
}

/// Blank map covering the trajectory bounding box, for overlays without a
/// stored map.
fn bounding_map(gt: &[Pose2]) -> GridMap {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in gt {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 = -1.0;
        x1 = 1.0;
    }
    if !y0.is_finite() || y1 <= y0 {
        y0 = -1.0;
        y1 = 1.0;
    }
    let res = ((x1 - x0).max(y1 - y0) / 100.0).max(1e-3);
    let rows = ((y1 - y0) / res).ceil() as usize + 3;
    let cols = ((x1 - x0) / res).ceil() as usize + 3;
    GridMap::new(
        ndarray::Array2::zeros((rows, cols)),
        res,
        (x0 - res, y0 - res),
    )
}
