//! Dataset directory layout written by `radloc synth` and consumed by the
//! training, tracking and odometry commands:
//!
//! ```text
//! dir/
//!   scene.json          world description (seeded)
//!   map.bin, map.json   occupancy raster
//!   poses.csv           timestamp,x,y,theta         (one row per scan)
//!   controls.csv        t,dx,dy,dtheta              (row k moves pose k-1 to k)
//!   scans/scan_00000.bin/.json                      (polar frames)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use radloc_core::bev::{GridMap, PolarScan};
use radloc_core::error::PipelineError;
use radloc_core::se2::{Offset, Pose2};
use radloc_core::synth::{Scene, SceneSpec, TrajectoryData};

use crate::io;

fn missing(p: &Path) -> PipelineError {
    PipelineError::MissingFile(p.to_path_buf())
}

fn io_err(context: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::numerical(context, e.to_string())
}

/// A dataset loaded back into memory.
pub struct Dataset {
    pub spec: SceneSpec,
    pub map: GridMap,
    pub poses: Vec<Pose2>,
    pub timestamps: Vec<f64>,
    pub controls: Vec<Offset>,
    pub scans: Vec<PolarScan>,
}

pub fn scan_stem(dir: &Path, k: usize) -> PathBuf {
    dir.join("scans").join(format!("scan_{k:05}"))
}

/// Write a full dataset directory. Deterministic: identical inputs produce
/// byte-identical files.
pub fn write_dataset(
    dir: &Path,
    scene: &Scene,
    data: &TrajectoryData,
    dt: f64,
) -> Result<(), PipelineError> {
    fs::create_dir_all(dir.join("scans")).map_err(|e| io_err("create dataset dir", e))?;
    let spec_json = serde_json::to_string_pretty(&scene.spec)
        .map_err(|e| io_err("serialize scene", e))?;
    fs::write(dir.join("scene.json"), spec_json).map_err(|e| io_err("write scene", e))?;
    io::write_map(&dir.join("map"), &scene.map)?;

    let mut poses = String::from("timestamp,x,y,theta\n");
    for (k, p) in data.poses.iter().enumerate() {
        poses.push_str(&format!(
            "{:.6},{:.9},{:.9},{:.9}\n",
            k as f64 * dt,
            p.x,
            p.y,
            p.theta
        ));
    }
    fs::write(dir.join("poses.csv"), poses).map_err(|e| io_err("write poses", e))?;

    let mut controls = String::from("t,dx,dy,dtheta\n");
    for (k, u) in data.controls.iter().enumerate() {
        controls.push_str(&format!(
            "{:.6},{:.9},{:.9},{:.9}\n",
            (k + 1) as f64 * dt,
            u.dx,
            u.dy,
            u.dtheta
        ));
    }
    fs::write(dir.join("controls.csv"), controls).map_err(|e| io_err("write controls", e))?;

    for (k, scan) in data.scans.iter().enumerate() {
        io::write_scan(&scan_stem(dir, k), scan)?;
    }
    Ok(())
}

fn parse_csv(path: &Path, columns: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|_| missing(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| {
            io_err("parse csv", format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        if vals.len() != columns {
            return Err(PipelineError::Shape(format!(
                "{}:{}: {} columns, expected {columns}",
                path.display(),
                i + 1,
                vals.len()
            )));
        }
        rows.push(vals);
    }
    Ok(rows)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, PipelineError> {
    let spec: SceneSpec = serde_json::from_str(
        &fs::read_to_string(dir.join("scene.json")).map_err(|_| missing(&dir.join("scene.json")))?,
    )
    .map_err(|e| io_err("parse scene", e))?;
    let map = io::read_map(&dir.join("map"))?;
    let pose_rows = parse_csv(&dir.join("poses.csv"), 4)?;
    let timestamps: Vec<f64> = pose_rows.iter().map(|r| r[0]).collect();
    let poses: Vec<Pose2> = pose_rows
        .iter()
        .map(|r| Pose2::new(r[1], r[2], r[3]))
        .collect();
    let control_rows = parse_csv(&dir.join("controls.csv"), 4)?;
    let controls: Vec<Offset> = control_rows
        .iter()
        .map(|r| Offset::new(r[1], r[2], r[3]))
        .collect();
    if controls.len() + 1 != poses.len() {
        return Err(PipelineError::Shape(format!(
            "{} poses with {} controls (expected one fewer control)",
            poses.len(),
            controls.len()
        )));
    }
    let mut scans = Vec::with_capacity(poses.len());
    for k in 0..poses.len() {
        scans.push(io::read_scan(&scan_stem(dir, k))?);
    }
    Ok(Dataset {
        spec,
        map,
        poses,
        timestamps,
        controls,
        scans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use radloc_core::synth::{
        generate_scene, simulate_trajectory, MotionProfile, RadarNoiseModel, SceneSpec,
        ScanGeometry, TrajectoryData,
    };

    fn small_world() -> (radloc_core::synth::Scene, TrajectoryData) {
        let spec = SceneSpec {
            seed: 11,
            extent: 40.0,
            resolution: 0.5,
            walls: Vec::new(),
            buildings: Vec::new(),
            random_buildings: 3,
            clutter_density: 0.01,
            dynamic_objects: 0,
            dynamic_speed: (0.5, 1.0),
        };
        let scene = generate_scene(&spec).unwrap();
        let profile = MotionProfile {
            start: Pose2::new(-8.0, -8.0, 0.5),
            speed: 0.5,
            dt: 1.0,
            turn_rate: 0.05,
            turn_period: 12,
        };
        let geom = ScanGeometry {
            azimuths: 90,
            bins: 40,
            range_res: 0.5,
        };
        let data =
            simulate_trajectory(&scene, 5, &profile, &RadarNoiseModel::noiseless(), &geom)
                .unwrap();
        (scene, data)
    }

    #[test]
    fn dataset_roundtrips() {
        let (scene, data) = small_world();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scene, &data, 1.0).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.poses.len(), 6);
        assert_eq!(ds.controls.len(), 5);
        assert_eq!(ds.scans.len(), 6);
        assert_eq!(ds.timestamps, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(ds.spec.seed, scene.spec.seed);
        assert_eq!(ds.map.cells.dim(), scene.map.cells.dim());
        // CSV poses carry 9 decimals; roundtrip is within that quantization.
        for (a, b) in ds.poses.iter().zip(data.poses.iter()) {
            assert!((a.x - b.x).abs() < 1e-9);
            assert!((a.y - b.y).abs() < 1e-9);
            assert!((a.theta - b.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_scan_is_reported_as_missing_file() {
        let (scene, data) = small_world();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scene, &data, 1.0).unwrap();
        fs::remove_file(scan_stem(dir.path(), 3).with_extension("bin")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(PipelineError::MissingFile(_))
        ));
    }

    #[test]
    fn control_count_mismatch_is_rejected() {
        let (scene, data) = small_world();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scene, &data, 1.0).unwrap();
        let text = fs::read_to_string(dir.path().join("controls.csv")).unwrap();
        let trimmed: Vec<&str> = text.lines().collect();
        fs::write(
            dir.path().join("controls.csv"),
            trimmed[..trimmed.len() - 1].join("\n"),
        )
        .unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(PipelineError::Shape(_))
        ));
    }
}
