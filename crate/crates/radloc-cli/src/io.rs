//! On-disk formats: raster `.bin` payloads with JSON sidecars, and the
//! versioned model checkpoint container.
//!
//! All raster payloads are little-endian float32, row-major. A file pair
//! `foo.bin` + `foo.json` is addressed by the stem `foo`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use radloc_core::bev::{BevImage, GridMap, PolarScan};
use radloc_core::error::PipelineError;
use radloc_core::nn::{ArchConfig, ModelParams};
use radloc_core::se2::Pose2;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn missing(p: &Path) -> PipelineError {
    PipelineError::MissingFile(p.to_path_buf())
}

fn io_err(context: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::numerical(context, e.to_string())
}

fn write_f32<'a>(path: &Path, values: impl Iterator<Item = &'a f64>) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path).map_err(|e| io_err("write raster", e))?;
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| io_err("write raster", e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>, PipelineError> {
    let mut f = fs::File::open(path).map_err(|_| missing(path))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| io_err("read raster", e))?;
    if buf.len() != expected * 4 {
        return Err(PipelineError::Shape(format!(
            "{}: {} bytes but sidecar implies {}",
            path.display(),
            buf.len(),
            expected * 4
        )));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| io_err("serialize sidecar", e))?;
    fs::write(path, s).map_err(|e| io_err("write sidecar", e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let s = fs::read_to_string(path).map_err(|_| missing(path))?;
    serde_json::from_str(&s).map_err(|e| io_err("parse sidecar", e))
}

/// Sidecar for maps and BEV images.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterSidecar {
    pub height: usize,
    pub width: usize,
    pub resolution_m_per_px: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub theta: f64,
}

/// Sidecar for polar radar frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSidecar {
    pub azimuths: usize,
    pub range_bins: usize,
    pub range_resolution_m: f64,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

pub fn write_map(stem: &Path, map: &GridMap) -> Result<(), PipelineError> {
    write_f32(&with_ext(stem, ".bin"), map.cells.iter())?;
    write_json(
        &with_ext(stem, ".json"),
        &RasterSidecar {
            height: map.cells.nrows(),
            width: map.cells.ncols(),
            resolution_m_per_px: map.resolution,
            origin_x: map.origin.0,
            origin_y: map.origin.1,
            theta: map.theta,
        },
    )
}

pub fn read_map(stem: &Path) -> Result<GridMap, PipelineError> {
    let side: RasterSidecar = read_json(&with_ext(stem, ".json"))?;
    let data = read_f32(&with_ext(stem, ".bin"), side.height * side.width)?;
    let cells = Array2::from_shape_vec((side.height, side.width), data)
        .map_err(|e| io_err("map shape", e))?;
    let mut map = GridMap::new(cells, side.resolution_m_per_px, (side.origin_x, side.origin_y));
    map.theta = side.theta;
    Ok(map)
}

pub fn write_bev(stem: &Path, bev: &BevImage) -> Result<(), PipelineError> {
    write_f32(&with_ext(stem, ".bin"), bev.pixels.iter())?;
    write_json(
        &with_ext(stem, ".json"),
        &RasterSidecar {
            height: bev.height(),
            width: bev.width(),
            resolution_m_per_px: bev.resolution,
            origin_x: bev.center.x,
            origin_y: bev.center.y,
            theta: bev.center.theta,
        },
    )
}

pub fn read_bev(stem: &Path) -> Result<BevImage, PipelineError> {
    let side: RasterSidecar = read_json(&with_ext(stem, ".json"))?;
    let data = read_f32(&with_ext(stem, ".bin"), side.height * side.width)?;
    let pixels = Array2::from_shape_vec((side.height, side.width), data)
        .map_err(|e| io_err("bev shape", e))?;
    Ok(BevImage {
        pixels,
        resolution: side.resolution_m_per_px,
        center: Pose2::new(side.origin_x, side.origin_y, side.theta),
    })
}

pub fn write_scan(stem: &Path, scan: &PolarScan) -> Result<(), PipelineError> {
    write_f32(&with_ext(stem, ".bin"), scan.intensities.iter())?;
    write_json(
        &with_ext(stem, ".json"),
        &ScanSidecar {
            azimuths: scan.azimuths(),
            range_bins: scan.range_bins(),
            range_resolution_m: scan.range_resolution,
        },
    )
}

pub fn read_scan(stem: &Path) -> Result<PolarScan, PipelineError> {
    let side: ScanSidecar = read_json(&with_ext(stem, ".json"))?;
    let data = read_f32(&with_ext(stem, ".bin"), side.azimuths * side.range_bins)?;
    let intensities = Array2::from_shape_vec((side.azimuths, side.range_bins), data)
        .map_err(|e| io_err("scan shape", e))?;
    Ok(PolarScan {
        intensities,
        range_resolution: side.range_resolution_m,
    })
}

// ---------------------------------------------------------------------------
// checkpoints

/// Index entry for one named tensor in the checkpoint payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element (not byte) offset into the payload.
    pub offset: usize,
}

/// Checkpoint manifest: format version, architecture, grid configuration
/// and the tensor index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub grid_limits: (f64, f64, f64),
    pub grid_resolutions: (f64, f64, f64),
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(
    stem: &Path,
    params: &ModelParams,
    grid_limits: (f64, f64, f64),
    grid_resolutions: (f64, f64, f64),
) -> Result<(), PipelineError> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &params.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    write_f32(
        &with_ext(stem, ".bin"),
        params.tensors.values().flat_map(|t| t.iter()),
    )?;
    write_json(
        &with_ext(stem, ".json"),
        &CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: params.arch,
            grid_limits,
            grid_resolutions,
            tensors: entries,
        },
    )
}

/// Load a checkpoint; the manifest must carry the supported format version
/// and describe exactly the tensor set of its architecture.
pub fn read_checkpoint(stem: &Path) -> Result<(ModelParams, CheckpointManifest), PipelineError> {
    let manifest: CheckpointManifest = read_json(&with_ext(stem, ".json"))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(PipelineError::numerical(
            "checkpoint",
            format!(
                "unsupported format version {} (expected {})",
                manifest.format_version, CHECKPOINT_FORMAT_VERSION
            ),
        ));
    }
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let data = read_f32(&with_ext(stem, ".bin"), total)?;
    let reference = ModelParams::init(manifest.arch, 0);
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let expected = reference.tensors.get(&e.name).ok_or_else(|| {
            PipelineError::Shape(format!(
                "checkpoint tensor {} not part of architecture {:?}",
                e.name, manifest.arch
            ))
        })?;
        if expected.shape() != e.shape.as_slice() {
            return Err(PipelineError::Shape(format!(
                "checkpoint tensor {}: shape {:?} but architecture expects {:?}",
                e.name,
                e.shape,
                expected.shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let slice = data
            .get(e.offset..e.offset + n)
            .ok_or_else(|| PipelineError::Shape(format!("checkpoint tensor {} out of payload bounds", e.name)))?;
        tensors.insert(
            e.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&e.shape), slice.to_vec())
                .map_err(|e| io_err("checkpoint tensor", e))?,
        );
    }
    if tensors.len() != reference.tensors.len() {
        return Err(PipelineError::Shape(format!(
            "checkpoint holds {} tensors but architecture {:?} has {}",
            tensors.len(),
            manifest.arch,
            reference.tensors.len()
        )));
    }
    Ok((
        ModelParams {
            arch: manifest.arch,
            tensors,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use radloc_core::nn::ArchProfile;

    fn tiny() -> ArchConfig {
        ArchConfig {
            profile: ArchProfile::Tiny,
            n_candidates: 27,
            patch_k: 2,
        }
    }

    #[test]
    fn map_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cells = Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) as f64) / 64.0);
        let mut map = GridMap::new(cells, 0.25, (-3.0, 2.0));
        map.theta = 0.5;
        write_map(&dir.path().join("m"), &map).unwrap();
        let back = read_map(&dir.path().join("m")).unwrap();
        assert_eq!(back.cells, map.cells);
        assert_eq!(back.resolution, map.resolution);
        assert_eq!(back.origin, map.origin);
        assert_eq!(back.theta, map.theta);
    }

    #[test]
    fn bev_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let bev = BevImage {
            pixels: Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) / 8.0),
            resolution: 0.5,
            center: Pose2::new(1.0, -2.0, 0.25),
        };
        write_bev(&dir.path().join("b"), &bev).unwrap();
        let back = read_bev(&dir.path().join("b")).unwrap();
        assert_eq!(back.pixels, bev.pixels);
        assert_eq!(back.center, bev.center);
    }

    #[test]
    fn scan_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let scan = PolarScan {
            intensities: Array2::from_shape_fn((8, 5), |(a, b)| ((a + 2 * b) as f64) / 32.0),
            range_resolution: 0.5,
        };
        write_scan(&dir.path().join("s"), &scan).unwrap();
        let back = read_scan(&dir.path().join("s")).unwrap();
        assert_eq!(back.intensities, scan.intensities);
        assert_eq!(back.range_resolution, scan.range_resolution);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let map = GridMap::new(Array2::zeros((4, 4)), 0.5, (0.0, 0.0));
        write_map(&dir.path().join("m"), &map).unwrap();
        let bytes = fs::read(dir.path().join("m.bin")).unwrap();
        fs::write(dir.path().join("m.bin"), &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_map(&dir.path().join("m")),
            Err(PipelineError::Shape(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrips_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::init(tiny(), 42);
        write_checkpoint(&dir.path().join("ck"), &params, (2.0, 2.0, 0.2), (1.0, 1.0, 0.1))
            .unwrap();
        let (back, manifest) = read_checkpoint(&dir.path().join("ck")).unwrap();
        assert_eq!(manifest.grid_limits, (2.0, 2.0, 0.2));
        assert_eq!(back.tensors.len(), params.tensors.len());
        for (name, t) in &params.tensors {
            let b = &back.tensors[name];
            assert_eq!(b.shape(), t.shape());
            for (x, y) in t.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32, "tensor {name} altered by roundtrip");
            }
        }
    }

    #[test]
    fn checkpoint_version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::init(tiny(), 1);
        write_checkpoint(&dir.path().join("ck"), &params, (1.0, 1.0, 0.1), (1.0, 1.0, 0.1))
            .unwrap();
        let text = fs::read_to_string(dir.path().join("ck.json")).unwrap();
        fs::write(
            dir.path().join("ck.json"),
            text.replace("\"format_version\": 1", "\"format_version\": 99"),
        )
        .unwrap();
        assert!(read_checkpoint(&dir.path().join("ck")).is_err());
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::init(tiny(), 1);
        write_checkpoint(&dir.path().join("ck"), &params, (1.0, 1.0, 0.1), (1.0, 1.0, 0.1))
            .unwrap();
        // Claim a different architecture than the payload was written for.
        let text = fs::read_to_string(dir.path().join("ck.json")).unwrap();
        fs::write(
            dir.path().join("ck.json"),
            text.replace("\"n_candidates\": 27", "\"n_candidates\": 8"),
        )
        .unwrap();
        assert!(read_checkpoint(&dir.path().join("ck")).is_err());
    }
}
