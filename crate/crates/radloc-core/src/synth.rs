//! Synthetic worlds for desk-scale experiments: occupancy maps built from
//! walls, buildings and clutter; ray-cast radar scans with configurable
//! noise; and smooth ground-truth trajectories.
//!
//! Everything is deterministic from seeds, with per-step RNG streams so
//! serial and parallel generation agree bit-for-bit.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{GridMap, PolarScan};
use crate::error::{ConfigError, PipelineError};
use crate::se2::{boxplus, Offset, Pose2};

/// A wall segment in world coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

/// Axis-aligned building footprint; radar and lidar see its outline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub center: (f64, f64),
    pub half: (f64, f64),
}

impl Rect {
    pub fn segments(&self) -> [Segment; 4] {
        let (cx, cy) = self.center;
        let (hx, hy) = self.half;
        let c = [
            (cx - hx, cy - hy),
            (cx + hx, cy - hy),
            (cx + hx, cy + hy),
            (cx - hx, cy + hy),
        ];
        [
            Segment { a: c[0], b: c[1] },
            Segment { a: c[1], b: c[2] },
            Segment { a: c[2], b: c[3] },
            Segment { a: c[3], b: c[0] },
        ]
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        (p.0 - self.center.0).abs() <= self.half.0 && (p.1 - self.center.1).abs() <= self.half.1
    }
}

/// World description; fully determines the static scene given the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side length of the square world, meters; the world spans
    /// [-extent/2, extent/2] on both axes.
    pub extent: f64,
    pub resolution: f64,
    pub walls: Vec<Segment>,
    pub buildings: Vec<Rect>,
    /// Extra random buildings drawn from the seed.
    pub random_buildings: usize,
    /// Clutter points per square meter.
    pub clutter_density: f64,
    pub dynamic_objects: usize,
    pub dynamic_speed: (f64, f64),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.extent > 0.0) || !(self.resolution > 0.0) {
            return Err(ConfigError::new("extent and resolution must be positive"));
        }
        if self.clutter_density < 0.0 {
            return Err(ConfigError::new("clutter density must be non-negative"));
        }
        Ok(())
    }
}

/// Radar imperfections; all off (zeros / false) is the noiseless model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarNoiseModel {
    pub speckle_sigma: f64,
    pub gain_jitter: f64,
    pub dropout_prob: f64,
    pub ghost_prob: f64,
    pub occlusion: bool,
}

impl RadarNoiseModel {
    pub fn noiseless() -> Self {
        RadarNoiseModel {
            speckle_sigma: 0.0,
            gain_jitter: 0.0,
            dropout_prob: 0.0,
            ghost_prob: 0.0,
            occlusion: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.speckle_sigma < 0.0 || self.gain_jitter < 0.0 {
            return Err(ConfigError::new("noise sigmas must be non-negative"));
        }
        for (name, p) in [
            ("dropout_prob", self.dropout_prob),
            ("ghost_prob", self.ghost_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::new(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A generated world: the prior map, the ray-cast geometry, and the moving
/// objects (present in scans, absent from the map).
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub map: GridMap,
    pub segments: Vec<Segment>,
    pub clutter: Vec<(f64, f64)>,
    pub structure_points: Vec<(f64, f64)>,
    pub dynamic: Vec<DynamicObject>,
}

#[derive(Debug, Clone, Copy)]
pub struct DynamicObject {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub half: f64,
}

impl Scene {
    /// Footprints of the moving objects at time t, folded back into the
    /// world square so they never wander off.
    pub fn dynamic_rects_at(&self, t: f64) -> Vec<Rect> {
        let half_ext = self.spec.extent / 2.0;
        self.dynamic
            .iter()
            .map(|d| {
                let wrap = |v: f64| {
                    let span = 2.0 * half_ext;
                    let mut w = (v + half_ext) % span;
                    if w < 0.0 {
                        w += span;
                    }
                    w - half_ext
                };
                Rect {
                    center: (
                        wrap(d.start.0 + d.velocity.0 * t),
                        wrap(d.start.1 + d.velocity.1 * t),
                    ),
                    half: (d.half, d.half),
                }
            })
            .collect()
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        let h = self.spec.extent / 2.0;
        p.0.abs() <= h && p.1.abs() <= h
    }
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(salt))
}

/// Build the deterministic scene: explicit structures plus seeded random
/// buildings and clutter, rasterized into the occupancy map.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, PipelineError> {
    spec.validate()?;
    let half = spec.extent / 2.0;
    let mut segments = spec.walls.clone();
    let mut rects = spec.buildings.clone();

    // snap generated geometry to the map lattice so the binary occupancy map
    // represents wall positions exactly (no sub-cell quantization offset)
    let snap = |v: f64| (v / spec.resolution).round() * spec.resolution;
    let mut rng = stream(spec.seed, 1);
    for _ in 0..spec.random_buildings {
        let hx = snap(rng.gen_range(1.0..spec.extent / 8.0)).max(spec.resolution);
        let hy = snap(rng.gen_range(1.0..spec.extent / 8.0)).max(spec.resolution);
        let cx = snap(rng.gen_range(-half + hx..half - hx));
        let cy = snap(rng.gen_range(-half + hy..half - hy));
        rects.push(Rect {
            center: (cx, cy),
            half: (hx, hy),
        });
    }
    for r in &rects {
        segments.extend(r.segments());
    }

    let mut clutter_rng = stream(spec.seed, 2);
    let expected = spec.clutter_density * spec.extent * spec.extent;
    let n_clutter = expected.round() as usize;
    let mut clutter = Vec::with_capacity(n_clutter);
    while clutter.len() < n_clutter {
        let p = (
            snap(clutter_rng.gen_range(-half..half)),
            snap(clutter_rng.gen_range(-half..half)),
        );
        // keep clutter outside buildings so it stays visible to the radar
        if rects.iter().any(|r| r.contains(p)) {
            continue;
        }
        clutter.push(p);
    }

    // structure points: walls sampled at map resolution, plus clutter
    let mut structure_points = Vec::new();
    for s in &segments {
        let len = ((s.b.0 - s.a.0).powi(2) + (s.b.1 - s.a.1).powi(2)).sqrt();
        let n = (len / spec.resolution).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            structure_points.push((
                s.a.0 + t * (s.b.0 - s.a.0),
                s.a.1 + t * (s.b.1 - s.a.1),
            ));
        }
    }
    structure_points.extend(clutter.iter().cloned());

    let n_cells = (spec.extent / spec.resolution).round() as usize;
    let mut cells = Array2::zeros((n_cells, n_cells));
    let map_origin = (-half, -half);
    // rows index y, columns index x
    for &(x, y) in &structure_points {
        let i = ((y - map_origin.1) / spec.resolution).round() as i64;
        let j = ((x - map_origin.0) / spec.resolution).round() as i64;
        if i >= 0 && j >= 0 && (i as usize) < n_cells && (j as usize) < n_cells {
            cells[(i as usize, j as usize)] = 1.0;
        }
    }
    let map = GridMap::new(cells, spec.resolution, map_origin);

    let mut dyn_rng = stream(spec.seed, 3);
    let dynamic = (0..spec.dynamic_objects)
        .map(|_| {
            let speed = dyn_rng.gen_range(spec.dynamic_speed.0..=spec.dynamic_speed.1.max(spec.dynamic_speed.0 + 1e-9));
            let heading = dyn_rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            DynamicObject {
                start: (
                    dyn_rng.gen_range(-half..half),
                    dyn_rng.gen_range(-half..half),
                ),
                velocity: (speed * heading.cos(), speed * heading.sin()),
                half: dyn_rng.gen_range(0.5..1.5),
            }
        })
        .collect();

    Ok(Scene {
        spec: spec.clone(),
        map,
        segments,
        clutter,
        structure_points,
        dynamic,
    })
}

/// Ray / segment intersection distance along the ray, if any.
fn ray_segment(origin: (f64, f64), dir: (f64, f64), s: &Segment) -> Option<f64> {
    let (ex, ey) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let denom = dir.0 * ey - dir.1 * ex;
    if denom.abs() < 1e-12 {
        return None;
    }
    let (dx, dy) = (s.a.0 - origin.0, s.a.1 - origin.1);
    let t = (dx * ey - dy * ex) / denom;
    let u = (dx * dir.1 - dy * dir.0) / denom;
    if t > 1e-9 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Perpendicular-hit distance of the ray against a small disk of clutter.
fn ray_point(origin: (f64, f64), dir: (f64, f64), p: (f64, f64), radius: f64) -> Option<f64> {
    let (dx, dy) = (p.0 - origin.0, p.1 - origin.1);
    let along = dx * dir.0 + dy * dir.1;
    if along <= 1e-9 {
        return None;
    }
    let perp = (dx * dir.1 - dy * dir.0).abs();
    if perp <= radius {
        Some(along)
    } else {
        None
    }
}

/// Ray-cast one polar scan at a world pose and time. Deterministic given
/// (scene, pose, noise, seed).
#[allow(clippy::too_many_arguments)]
pub fn simulate_radar(
    scene: &Scene,
    pose: Pose2,
    time: f64,
    noise: &RadarNoiseModel,
    azimuths: usize,
    bins: usize,
    range_res: f64,
    seed: u64,
) -> Result<PolarScan, PipelineError> {
    noise.validate()?;
    if !scene.contains((pose.x, pose.y)) {
        return Err(PipelineError::numerical(
            "simulate_radar",
            format!("pose ({:.2}, {:.2}) outside scene", pose.x, pose.y),
        ));
    }
    let mut rng = stream(seed, 4);
    let max_range = (bins as f64) * range_res;
    let radius = scene.spec.resolution / 2.0;
    let dynamic_segments: Vec<Segment> = scene
        .dynamic_rects_at(time)
        .iter()
        .flat_map(|r| r.segments())
        .collect();
    let gain = 1.0 + noise.gain_jitter * rng.gen_range(-1.0..1.0_f64);
    let mut cells = Array2::zeros((azimuths, bins));
    for a in 0..azimuths {
        let dropped = noise.dropout_prob > 0.0 && rng.gen_bool(noise.dropout_prob);
        let az = 2.0 * std::f64::consts::PI * a as f64 / azimuths as f64;
        let world = pose.theta + az;
        let dir = (world.cos(), world.sin());
        let origin = (pose.x, pose.y);
        let mut hits: Vec<f64> = Vec::new();
        for s in scene.segments.iter().chain(dynamic_segments.iter()) {
            if let Some(t) = ray_segment(origin, dir, s) {
                if t < max_range {
                    hits.push(t);
                }
            }
        }
        for &p in &scene.clutter {
            if let Some(t) = ray_point(origin, dir, p, radius) {
                if t < max_range {
                    hits.push(t);
                }
            }
        }
        hits.sort_by(f64::total_cmp);
        if noise.occlusion {
            hits.truncate(1);
        }
        if !dropped {
            for &t in &hits {
                // mild range attenuation; return split linearly across the two
                // adjacent bins so downstream range interpolation sees it
                let q = t / range_res;
                let b0 = q.floor() as usize;
                let frac = q - b0 as f64;
                let v = gain * (1.0 - 0.3 * t / max_range);
                for (b, w) in [(b0, 1.0 - frac), (b0 + 1, frac)] {
                    if b < bins && v * w > cells[(a, b)] {
                        cells[(a, b)] = v * w;
                    }
                }
            }
        }
        if noise.ghost_prob > 0.0 && rng.gen_bool(noise.ghost_prob) {
            let b = rng.gen_range(0..bins);
            let v: f64 = rng.gen_range(0.5..1.0);
            if v > cells[(a, b)] {
                cells[(a, b)] = v;
            }
        }
        if noise.speckle_sigma > 0.0 {
            for b in 0..bins {
                let n: f64 = rng.gen_range(-1.0..1.0);
                cells[(a, b)] = (cells[(a, b)] + noise.speckle_sigma * n).clamp(0.0, 1.0);
            }
        } else {
            for b in 0..bins {
                cells[(a, b)] = cells[(a, b)].clamp(0.0, 1.0);
            }
        }
    }
    Ok(PolarScan {
        intensities: cells,
        range_resolution: range_res,
    })
}

/// Vehicle-like motion: constant speed, smoothly varying turn rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionProfile {
    pub start: Pose2,
    pub speed: f64,
    pub dt: f64,
    /// Peak turn rate, rad/s; the actual rate varies sinusoidally.
    pub turn_rate: f64,
    /// Period of the turn-rate oscillation in steps; 0 = straight line.
    pub turn_period: usize,
}

/// Scan geometry shared by the trajectory simulator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub azimuths: usize,
    pub bins: usize,
    pub range_res: f64,
}

/// Ground-truth rollout: poses, exact controls and one scan per pose.
pub struct TrajectoryData {
    pub poses: Vec<Pose2>,
    pub controls: Vec<Offset>,
    pub scans: Vec<PolarScan>,
}

pub fn simulate_trajectory(
    scene: &Scene,
    steps: usize,
    profile: &MotionProfile,
    noise: &RadarNoiseModel,
    geom: &ScanGeometry,
) -> Result<TrajectoryData, PipelineError> {
    let mut poses = vec![profile.start];
    let mut controls = Vec::with_capacity(steps);
    for k in 0..steps {
        let rate = if profile.turn_period == 0 {
            0.0
        } else {
            profile.turn_rate
                * (2.0 * std::f64::consts::PI * k as f64 / profile.turn_period as f64).sin()
        };
        let u = Offset::new(profile.speed * profile.dt, 0.0, rate * profile.dt);
        let next = boxplus(*poses.last().unwrap(), u);
        if !scene.contains((next.x, next.y)) {
            return Err(PipelineError::numerical(
                "simulate_trajectory",
                format!("path exits the scene at step {}", k + 1),
            ));
        }
        controls.push(u);
        poses.push(next);
    }
    let mut scans = Vec::with_capacity(poses.len());
    for (k, p) in poses.iter().enumerate() {
        let t = k as f64 * profile.dt;
        scans.push(simulate_radar(
            scene,
            *p,
            t,
            noise,
            geom.azimuths,
            geom.bins,
            geom.range_res,
            scene.spec.seed.wrapping_add(1000 + k as u64),
        )?);
    }
    Ok(TrajectoryData {
        poses,
        controls,
        scans,
    })
}

/// Intersection-over-union of two thresholded fields.
pub fn thresholded_iou(a: &Array2<f64>, b: &Array2<f64>, threshold: f64) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        let ax = *x > threshold;
        let by = *y > threshold;
        if ax && by {
            inter += 1;
        }
        if ax || by {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::{crop_at, polar_to_cartesian};

    fn base_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            extent: 60.0,
            resolution: 0.5,
            walls: vec![],
            buildings: vec![],
            random_buildings: 6,
            clutter_density: 0.02,
            dynamic_objects: 0,
            dynamic_speed: (0.5, 2.0),
        }
    }

    #[test]
    fn empty_spec_gives_empty_map() {
        let spec = SceneSpec {
            random_buildings: 0,
            clutter_density: 0.0,
            ..base_spec(1)
        };
        let scene = generate_scene(&spec).unwrap();
        assert!(scene.map.cells.iter().all(|&v| v == 0.0));
        assert!(scene.structure_points.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&base_spec(7)).unwrap();
        let b = generate_scene(&base_spec(7)).unwrap();
        assert_eq!(a.map.cells, b.map.cells);
        assert_eq!(a.clutter, b.clutter);
        let c = generate_scene(&base_spec(8)).unwrap();
        assert_ne!(a.map.cells, c.map.cells);
    }

    #[test]
    fn occupancy_tracks_expected_density() {
        // clutter-only scene: occupied cells within [0.5x, 2x] of the
        // expected clutter count (cell collisions only reduce it)
        let spec = SceneSpec {
            random_buildings: 0,
            clutter_density: 0.05,
            ..base_spec(9)
        };
        let scene = generate_scene(&spec).unwrap();
        let occupied = scene.map.cells.iter().filter(|&&v| v > 0.0).count() as f64;
        let expected = 0.05 * 60.0 * 60.0;
        assert!(occupied >= 0.5 * expected, "{occupied} vs {expected}");
        assert!(occupied <= 2.0 * expected, "{occupied} vs {expected}");
    }

    #[test]
    fn radar_single_wall_ahead() {
        let spec = SceneSpec {
            random_buildings: 0,
            clutter_density: 0.0,
            walls: vec![Segment {
                a: (10.0, -15.0),
                b: (10.0, 15.0),
            }],
            ..base_spec(10)
        };
        let scene = generate_scene(&spec).unwrap();
        let scan = simulate_radar(
            &scene,
            Pose2::identity(),
            0.0,
            &RadarNoiseModel::noiseless(),
            360,
            100,
            0.25,
            0,
        )
        .unwrap();
        // forward azimuth 0: wall at 10 m -> bin 40
        assert!(scan.intensities[(0, 40)] > 0.5);
        // behind the robot: nothing
        assert!(scan.intensities.row(180).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_one_silences_everything() {
        let scene = generate_scene(&base_spec(11)).unwrap();
        let noise = RadarNoiseModel {
            dropout_prob: 1.0,
            ..RadarNoiseModel::noiseless()
        };
        let scan =
            simulate_radar(&scene, Pose2::identity(), 0.0, &noise, 128, 64, 0.5, 3).unwrap();
        assert!(scan.intensities.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radar_deterministic_per_seed() {
        let scene = generate_scene(&base_spec(12)).unwrap();
        let noise = RadarNoiseModel {
            speckle_sigma: 0.05,
            gain_jitter: 0.1,
            dropout_prob: 0.05,
            ghost_prob: 0.02,
            occlusion: true,
        };
        let a = simulate_radar(&scene, Pose2::identity(), 0.0, &noise, 128, 64, 0.5, 5).unwrap();
        let b = simulate_radar(&scene, Pose2::identity(), 0.0, &noise, 128, 64, 0.5, 5).unwrap();
        assert_eq!(a.intensities, b.intensities);
        let c = simulate_radar(&scene, Pose2::identity(), 0.0, &noise, 128, 64, 0.5, 6).unwrap();
        assert_ne!(a.intensities, c.intensities);
    }

    #[test]
    fn cross_modal_scan_matches_map_crop() {
        let scene = generate_scene(&base_spec(13)).unwrap();
        let noiseless = RadarNoiseModel::noiseless();
        for (k, pose) in [
            Pose2::new(0.0, 0.0, 0.0),
            Pose2::new(5.0, -3.0, 0.7),
            Pose2::new(-8.0, 6.0, -1.9),
        ]
        .iter()
        .enumerate()
        {
            let scan =
                simulate_radar(&scene, *pose, 0.0, &noiseless, 720, 80, 0.5, k as u64).unwrap();
            let bev = polar_to_cartesian(&scan, 0.5, 64, 64);
            let crop = crop_at(&scene.map, *pose, 64, 64, 0.5);
            let iou = thresholded_iou(&bev.pixels, &crop.pixels, 0.25);
            assert!(iou > 0.6, "pose {k}: IoU {iou}");
        }
    }

    #[test]
    fn dynamic_objects_in_scan_not_map() {
        let spec = SceneSpec {
            random_buildings: 0,
            clutter_density: 0.0,
            dynamic_objects: 5,
            ..base_spec(14)
        };
        let scene = generate_scene(&spec).unwrap();
        assert!(scene.map.cells.iter().all(|&v| v == 0.0));
        let scan = simulate_radar(
            &scene,
            Pose2::identity(),
            0.0,
            &RadarNoiseModel::noiseless(),
            360,
            120,
            0.25,
            0,
        )
        .unwrap();
        assert!(scan.intensities.iter().any(|&v| v > 0.0));
        // objects move between timestamps
        let later = simulate_radar(
            &scene,
            Pose2::identity(),
            5.0,
            &RadarNoiseModel::noiseless(),
            360,
            120,
            0.25,
            0,
        )
        .unwrap();
        assert_ne!(scan.intensities, later.intensities);
    }

    #[test]
    fn trajectory_zero_steps() {
        let scene = generate_scene(&base_spec(15)).unwrap();
        let profile = MotionProfile {
            start: Pose2::new(1.0, 2.0, 0.3),
            speed: 1.0,
            dt: 0.25,
            turn_rate: 0.2,
            turn_period: 16,
        };
        let geom = ScanGeometry {
            azimuths: 128,
            bins: 64,
            range_res: 0.5,
        };
        let t = simulate_trajectory(&scene, 0, &profile, &RadarNoiseModel::noiseless(), &geom)
            .unwrap();
        assert_eq!(t.poses.len(), 1);
        assert!(t.controls.is_empty());
        assert_eq!(t.scans.len(), 1);
    }

    #[test]
    fn trajectory_controls_chain_to_poses() {
        let scene = generate_scene(&base_spec(16)).unwrap();
        let profile = MotionProfile {
            start: Pose2::new(-10.0, -10.0, 0.4),
            speed: 1.2,
            dt: 0.25,
            turn_rate: 0.3,
            turn_period: 12,
        };
        let geom = ScanGeometry {
            azimuths: 64,
            bins: 32,
            range_res: 1.0,
        };
        let t = simulate_trajectory(&scene, 30, &profile, &RadarNoiseModel::noiseless(), &geom)
            .unwrap();
        let mut p = t.poses[0];
        for (k, u) in t.controls.iter().enumerate() {
            p = boxplus(p, *u);
            assert!((p.x - t.poses[k + 1].x).abs() < 1e-9);
            assert!((p.y - t.poses[k + 1].y).abs() < 1e-9);
            assert!((p.theta - t.poses[k + 1].theta).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_profile_has_zero_rotation() {
        let scene = generate_scene(&base_spec(17)).unwrap();
        let profile = MotionProfile {
            start: Pose2::new(-20.0, 0.0, 0.0),
            speed: 1.0,
            dt: 0.5,
            turn_rate: 0.5,
            turn_period: 0,
        };
        let geom = ScanGeometry {
            azimuths: 64,
            bins: 32,
            range_res: 1.0,
        };
        let t = simulate_trajectory(&scene, 20, &profile, &RadarNoiseModel::noiseless(), &geom)
            .unwrap();
        assert!(t.controls.iter().all(|u| u.dtheta == 0.0));
    }

    #[test]
    fn trajectory_exiting_scene_errors() {
        let scene = generate_scene(&base_spec(18)).unwrap();
        let profile = MotionProfile {
            start: Pose2::new(25.0, 0.0, 0.0),
            speed: 2.0,
            dt: 1.0,
            turn_rate: 0.0,
            turn_period: 0,
        };
        let geom = ScanGeometry {
            azimuths: 64,
            bins: 32,
            range_res: 1.0,
        };
        let err = simulate_trajectory(&scene, 10, &profile, &RadarNoiseModel::noiseless(), &geom);
        assert!(err.is_err());
    }
}
