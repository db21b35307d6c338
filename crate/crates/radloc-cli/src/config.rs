//! Run configuration: one TOML file covering every module's defaults.
//! Unknown keys are rejected; a resolved copy is written into each run
//! directory so runs are reproducible from their own output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use radloc_core::error::{ConfigError, PipelineError};
use radloc_core::nn::{ArchConfig, ArchProfile};
use radloc_core::pipeline::TrainConfig;
use radloc_core::se2::Pose2;
use radloc_core::synth::{MotionProfile, RadarNoiseModel, ScanGeometry, SceneSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub steps: usize,
    pub profile: MotionProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub profile: ArchProfile,
    pub patch_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseSection {
    /// Half-width of the searched offset space per axis (m, m, rad); must
    /// be an odd integer multiple of the per-tile grid limits.
    pub limits: (f64, f64, f64),
    pub trials: usize,
}

/// The resolved configuration of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub noise: RadarNoiseModel,
    pub trajectory: TrajectorySection,
    pub scan: ScanGeometry,
    pub train: TrainConfig,
    pub arch: ArchSection,
    pub coarse: CoarseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec {
                seed: 0,
                extent: 60.0,
                resolution: 0.5,
                walls: Vec::new(),
                buildings: Vec::new(),
                random_buildings: 6,
                clutter_density: 0.02,
                dynamic_objects: 0,
                dynamic_speed: (0.5, 2.0),
            },
            noise: RadarNoiseModel {
                speckle_sigma: 0.02,
                gain_jitter: 0.05,
                dropout_prob: 0.02,
                ghost_prob: 0.01,
                occlusion: true,
            },
            trajectory: TrajectorySection {
                steps: 40,
                profile: MotionProfile {
                    start: Pose2::new(-12.0, -12.0, 0.7),
                    speed: 0.6,
                    dt: 1.0,
                    turn_rate: 0.08,
                    turn_period: 24,
                },
            },
            scan: ScanGeometry {
                azimuths: 360,
                bins: 80,
                range_res: 0.5,
            },
            train: TrainConfig::default(),
            arch: ArchSection {
                profile: ArchProfile::Tiny,
                patch_k: 2,
            },
            coarse: CoarseSection {
                limits: (3.0, 3.0, 0.3),
                trials: 20,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|_| PipelineError::MissingFile(path.to_path_buf()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.train.validate()?;
        if self.coarse.trials == 0 {
            return Err(ConfigError::new("coarse.trials must be positive").into());
        }
        Ok(())
    }

    /// Architecture implied by the training grid: one candidate channel per
    /// grid cell.
    pub fn arch_config(&self) -> Result<ArchConfig, PipelineError> {
        let grid = self.train.grid()?;
        Ok(ArchConfig {
            profile: self.arch.profile,
            n_candidates: grid.len(),
            patch_k: self.arch.patch_k,
        })
    }

    /// Write the resolved config into a run directory.
    pub fn store(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)
            .map_err(|e| PipelineError::numerical("create run dir", e.to_string()))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| PipelineError::numerical("serialize config", e.to_string()))?;
        fs::write(dir.join("config.toml"), text)
            .map_err(|e| PipelineError::numerical("write config", e.to_string()))
    }
}
