//! Bird's-eye-view rasters: lidar grid maps, radar scans, map cropping at a
//! pose, and warping of fields by pose offsets.
//!
//! Image convention: row axis points along robot -x (forward is up), column
//! axis along robot +y. Pixel (H/2, W/2) sits on the robot. The single
//! source of truth for the convention is the crop/warp consistency test.

use ndarray::{Array2, Array3};


use crate::se2::{Offset, OffsetGrid, Pose2};

/// A metric occupancy raster in the world frame.
///
/// Cell (row, col) has world coordinates `origin + R(theta) * (col*res, row*res)`.
#[derive(Debug, Clone)]
pub struct GridMap {
    pub cells: Array2<f64>,
    pub resolution: f64,
    pub origin: (f64, f64),
    pub theta: f64,
}

impl GridMap {
    pub fn new(cells: Array2<f64>, resolution: f64, origin: (f64, f64)) -> Self {
        assert!(resolution > 0.0);
        GridMap {
            cells,
            resolution,
            origin,
            theta: 0.0,
        }
    }

    /// Continuous cell coordinates (row, col) of a world point.
    pub fn world_to_cell(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = wx - self.origin.0;
        let ey = wy - self.origin.1;
        let dx = c * ex + s * ey;
        let dy = -s * ex + c * ey;
        (dy / self.resolution, dx / self.resolution)
    }
}

/// A single-channel bird's-eye-view image centered on and aligned to a pose.
#[derive(Debug, Clone)]
pub struct BevImage {
    pub pixels: Array2<f64>,
    pub resolution: f64,
    pub center: Pose2,
}

impl BevImage {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }
    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Raw FMCW radar frame: azimuth x range intensity array.
///
/// Azimuth 0 is the robot +x axis, increasing counter-clockwise; range bin b
/// sits at range `b * range_resolution`.
#[derive(Debug, Clone)]
pub struct PolarScan {
    pub intensities: Array2<f64>,
    pub range_resolution: f64,
}

impl PolarScan {
    pub fn azimuths(&self) -> usize {
        self.intensities.nrows()
    }
    pub fn range_bins(&self) -> usize {
        self.intensities.ncols()
    }
}

/// Robot-frame coordinates of the center of pixel (i, j).
#[inline]
pub fn pixel_to_robot(i: f64, j: f64, h: usize, w: usize, res: f64) -> (f64, f64) {
    ((h as f64 / 2.0 - i) * res, (j - w as f64 / 2.0) * res)
}

/// Continuous pixel coordinates of a robot-frame point.
#[inline]
pub fn robot_to_pixel(x: f64, y: f64, h: usize, w: usize, res: f64) -> (f64, f64) {
    (h as f64 / 2.0 - x / res, w as f64 / 2.0 + y / res)
}

/// Bilinear sample with zero fill outside the raster.
pub fn bilinear(img: &Array2<f64>, i: f64, j: f64) -> f64 {
    let (h, w) = img.dim();
    let i0 = i.floor();
    let j0 = j.floor();
    let fi = i - i0;
    let fj = j - j0;
    let mut acc = 0.0;
    for (di, wi) in [(0.0, 1.0 - fi), (1.0, fi)] {
        for (dj, wj) in [(0.0, 1.0 - fj), (1.0, fj)] {
            let ii = i0 + di;
            let jj = j0 + dj;
            if ii >= 0.0 && jj >= 0.0 && (ii as usize) < h && (jj as usize) < w && wi * wj != 0.0 {
                acc += wi * wj * img[(ii as usize, jj as usize)];
            }
        }
    }
    acc
}

/// Rasterize weighted world points into a BEV image centered at a pose.
///
/// Cell value is the max of contributing weights, clamped to [0, 1].
pub fn rasterize_points(
    points: &[(f64, f64, f64)],
    resolution: f64,
    h: usize,
    w: usize,
    center: Pose2,
) -> BevImage {
    assert!(resolution > 0.0);
    let mut pixels = Array2::<f64>::zeros((h, w));
    let (s, c) = center.theta.sin_cos();
    for &(px, py, weight) in points {
        let ex = px - center.x;
        let ey = py - center.y;
        let rx = c * ex + s * ey;
        let ry = -s * ex + c * ey;
        let (pi, pj) = robot_to_pixel(rx, ry, h, w, resolution);
        let i = pi.round();
        let j = pj.round();
        if i >= 0.0 && j >= 0.0 && (i as usize) < h && (j as usize) < w {
            let cell = &mut pixels[(i as usize, j as usize)];
            *cell = cell.max(weight.clamp(0.0, 1.0));
        }
    }
    BevImage {
        pixels,
        resolution,
        center,
    }
}

/// Convert a polar radar frame to a Cartesian BEV image by inverse mapping:
/// nearest azimuth, linear range interpolation, zero beyond max range.
pub fn polar_to_cartesian(scan: &PolarScan, resolution: f64, h: usize, w: usize) -> BevImage {
    let a = scan.azimuths();
    let b = scan.range_bins();
    let two_pi = 2.0 * std::f64::consts::PI;
    let az_step = two_pi / a as f64;
    let mut pixels = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (rx, ry) = pixel_to_robot(i as f64, j as f64, h, w, resolution);
            let range = (rx * rx + ry * ry).sqrt();
            let q = range / scan.range_resolution;
            if q > (b - 1) as f64 {
                continue;
            }
            let mut az = ry.atan2(rx);
            if az < 0.0 {
                az += two_pi;
            }
            let ai = ((az / az_step).round() as usize) % a;
            let b0 = q.floor() as usize;
            let frac = q - b0 as f64;
            let v0 = scan.intensities[(ai, b0)];
            let v1 = if b0 + 1 < b {
                scan.intensities[(ai, b0 + 1)]
            } else {
                0.0
            };
            pixels[(i, j)] = v0 * (1.0 - frac) + v1 * frac;
        }
    }
    BevImage {
        pixels,
        resolution,
        center: Pose2::identity(),
    }
}

/// Crop an H x W window of the map, centered at `pose` and rotated so the
/// robot +x axis points up. Bilinear interpolation, zero outside the map.
pub fn crop_at(map: &GridMap, pose: Pose2, h: usize, w: usize, resolution: f64) -> BevImage {
    let (s, c) = pose.theta.sin_cos();
    let mut pixels = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (rx, ry) = pixel_to_robot(i as f64, j as f64, h, w, resolution);
            let wx = pose.x + c * rx - s * ry;
            let wy = pose.y + s * rx + c * ry;
            let (ci, cj) = map.world_to_cell(wx, wy);
            pixels[(i, j)] = bilinear(&map.cells, ci, cj);
        }
    }
    BevImage {
        pixels,
        resolution,
        center: pose,
    }
}

/// Source pixel coordinates for `warp_by_offset`: where output pixel (i, j)
/// of the displaced view reads in the input field.
#[inline]
pub fn warp_source_pixel(
    i: f64,
    j: f64,
    h: usize,
    w: usize,
    offset: Offset,
    resolution: f64,
) -> (f64, f64) {
    let (gx, gy) = pixel_to_robot(i, j, h, w, resolution);
    let (s, c) = offset.dtheta.sin_cos();
    let tx = gx + offset.dx;
    let ty = gy + offset.dy;
    let dx = c * tx - s * ty;
    let dy = s * tx + c * ty;
    robot_to_pixel(dx, dy, h, w, resolution)
}

/// The field as observed from the pose displaced by `offset`: rotation about
/// the image center plus metric translation, bilinear inverse sampling, zero
/// outside. Differentiable with respect to the input pixel values (the warp
/// is linear in them); the autodiff op in `graph` shares this geometry.
pub fn warp_by_offset(field: &Array2<f64>, offset: Offset, resolution: f64) -> Array2<f64> {
    let (h, w) = field.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = warp_source_pixel(i as f64, j as f64, h, w, offset, resolution);
            out[(i, j)] = bilinear(field, si, sj);
        }
    }
    out
}

/// Warp a field by every candidate of the grid; stack order matches the
/// grid's candidate enumeration.
pub fn batch_warp(field: &Array2<f64>, grid: &OffsetGrid, resolution: f64) -> Array3<f64> {
    let (h, w) = field.dim();
    let mut out = Array3::zeros((grid.len(), h, w));
    for (m, &cand) in grid.candidates.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), m)
            .assign(&warp_by_offset(field, cand, resolution));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se2::boxplus;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn smooth_map(seed: u64, n: usize, res: f64) -> GridMap {
        // random low-frequency field in [0,1]
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.gen_range(0.02..0.1),
                    rng.gen_range(0.02..0.1),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let mut cells = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for &(fx, fy, ph) in &waves {
                    v += (fx * i as f64 + fy * j as f64 + ph).sin();
                }
                cells[(i, j)] = (v / 12.0 + 0.5).clamp(0.0, 1.0);
            }
        }
        GridMap::new(cells, res, (-(n as f64) * res / 2.0, -(n as f64) * res / 2.0))
    }

    #[test]
    fn rasterize_empty_is_zero() {
        let img = rasterize_points(&[], 0.5, 8, 8, Pose2::identity());
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_center_point_hot_at_center() {
        let p = Pose2::new(3.0, -2.0, 0.7);
        let img = rasterize_points(&[(3.0, -2.0, 1.0)], 0.5, 16, 16, p);
        assert_eq!(img.pixels[(8, 8)], 1.0);
        assert_eq!(img.pixels.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn rasterize_matches_naive_binning() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64, f64)> = (0..200)
            .map(|_| {
                (
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let img = rasterize_points(&pts, 0.25, 32, 32, Pose2::identity());
        // naive oracle: per-point binning with max accumulation
        let mut oracle = Array2::zeros((32, 32));
        for &(x, y, wg) in &pts {
            let i = (16.0 - x / 0.25).round();
            let j = (16.0 + y / 0.25).round();
            if i >= 0.0 && j >= 0.0 && (i as usize) < 32 && (j as usize) < 32 {
                let c = &mut oracle[(i as usize, j as usize)];
                *c = f64::max(*c, wg);
            }
        }
        assert_eq!(img.pixels, oracle);
    }

    #[test]
    fn polar_uniform_fills_in_range() {
        let scan = PolarScan {
            intensities: Array2::from_elem((64, 40), 0.6),
            range_resolution: 0.5,
        };
        let img = polar_to_cartesian(&scan, 0.5, 32, 32);
        // interior pixels well inside max range should be exactly 0.6
        for i in 10..22 {
            for j in 10..22 {
                assert!((img.pixels[(i, j)] - 0.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn polar_all_zero_gives_zero() {
        let scan = PolarScan {
            intensities: Array2::zeros((64, 40)),
            range_resolution: 0.5,
        };
        let img = polar_to_cartesian(&scan, 0.5, 32, 32);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn polar_hot_azimuth_forms_arc() {
        let mut ints = Array2::zeros((128, 40));
        // hot cells at range 5 m over a block of azimuths
        for a in 0..128 {
            ints[(a, 10)] = 1.0;
        }
        let scan = PolarScan {
            intensities: ints,
            range_resolution: 0.5,
        };
        let img = polar_to_cartesian(&scan, 0.25, 64, 64);
        // forward-project oracle: hot pixels lie near radius 5/0.25 = 20 px
        for i in 0..64 {
            for j in 0..64 {
                if img.pixels[(i, j)] > 0.5 {
                    let r = ((i as f64 - 32.0).powi(2) + (j as f64 - 32.0).powi(2)).sqrt();
                    assert!((r - 20.0).abs() < 1.5, "hot pixel at radius {r}");
                }
            }
        }
        assert!(img.pixels.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn crop_axis_aligned_equals_slicing() {
        let map = smooth_map(1, 64, 0.5);
        // pose at the center of cell grid, theta = 0
        let pose = Pose2::identity();
        let img = crop_at(&map, pose, 16, 16, 0.5);
        for i in 0..16 {
            for j in 0..16 {
                let (rx, ry) = pixel_to_robot(i as f64, j as f64, 16, 16, 0.5);
                let (ci, cj) = map.world_to_cell(pose.x + rx, pose.y + ry);
                let direct = bilinear(&map.cells, ci, cj);
                assert!((img.pixels[(i, j)] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_rotated_pi_flips_axes() {
        let map = smooth_map(2, 64, 0.5);
        let a = crop_at(&map, Pose2::identity(), 16, 16, 0.5);
        let b = crop_at(&map, Pose2::new(0.0, 0.0, PI), 16, 16, 0.5);
        // 180-degree crop equals flipping both axes, up to the half-pixel
        // center shift of even-sized images
        let mut max_err: f64 = 0.0;
        for i in 1..15 {
            for j in 1..15 {
                let flipped = bilinear(&a.pixels, 16.0 - i as f64, 16.0 - j as f64);
                max_err = max_err.max((b.pixels[(i, j)] - flipped).abs());
            }
        }
        assert!(max_err < 1e-9, "max err {max_err}");
    }

    #[test]
    fn crop_outside_map_is_zero() {
        let map = smooth_map(3, 32, 0.5);
        let img = crop_at(&map, Pose2::new(1000.0, 1000.0, 0.3), 16, 16, 0.5);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_zero_offset_is_identity() {
        let map = smooth_map(4, 32, 0.5);
        let out = warp_by_offset(&map.cells, Offset::zero(), 0.5);
        let mut max_err: f64 = 0.0;
        for i in 1..31 {
            for j in 1..31 {
                max_err = max_err.max((out[(i, j)] - map.cells[(i, j)]).abs());
            }
        }
        assert_eq!(max_err, 0.0);
    }

    #[test]
    fn warp_matches_point_transform_oracle() {
        // sparse hot pixels, transformed per the element map by hand
        let h = 64;
        let w = 64;
        let res = 0.5;
        let mut field = Array2::zeros((h, w));
        let pts = [(20usize, 30usize), (40, 12), (33, 50), (14, 14)];
        for &(i, j) in &pts {
            field[(i, j)] = 1.0;
        }
        let off = Offset::new(1.0, -1.5, 0.15);
        let out = warp_by_offset(&field, off, res);
        // forward map: output position of each hot input pixel is the inverse
        // of warp_source_pixel
        let (s, c) = off.dtheta.sin_cos();
        for &(i, j) in &pts {
            let (rx, ry) = pixel_to_robot(i as f64, j as f64, h, w, res);
            // invert d = R(dt)(g + t):  g = R(-dt) d - t
            let gx = c * rx + s * ry - off.dx;
            let gy = -s * rx + c * ry - off.dy;
            let (oi, oj) = robot_to_pixel(gx, gy, h, w, res);
            // mass should concentrate within half a pixel of the predicted spot
            let mut total = 0.0;
            let mut ci = 0.0;
            let mut cj = 0.0;
            for ii in 0..h {
                for jj in 0..w {
                    let v = out[(ii, jj)];
                    if v > 1e-9
                        && ((ii as f64 - oi).powi(2) + (jj as f64 - oj).powi(2)).sqrt() < 2.0
                    {
                        total += v;
                        ci += v * ii as f64;
                        cj += v * jj as f64;
                    }
                }
            }
            assert!(total > 0.5, "mass near predicted spot for pixel ({i},{j})");
            ci /= total;
            cj /= total;
            assert!(
                ((ci - oi).powi(2) + (cj - oj).powi(2)).sqrt() <= 0.5 + 1e-9,
                "centroid error for pixel ({i},{j})"
            );
        }
    }

    #[test]
    fn crop_then_warp_consistency() {
        let map = smooth_map(5, 256, 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let pose = Pose2::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-PI..PI),
            );
            let off = Offset::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-0.2..0.2),
            );
            let direct = crop_at(&map, boxplus(pose, off), 48, 48, 0.5);
            let warped = warp_by_offset(&crop_at(&map, pose, 48, 48, 0.5).pixels, off, 0.5);
            // compare away from borders
            let mut sum = 0.0;
            let mut n = 0.0;
            for i in 8..40 {
                for j in 8..40 {
                    sum += (direct.pixels[(i, j)] - warped[(i, j)]).abs();
                    n += 1.0;
                }
            }
            assert!(sum / n < 0.05, "mean abs diff {}", sum / n);
        }
    }

    #[test]
    fn warp_composition_consistency() {
        let map = smooth_map(6, 128, 0.5);
        let field = crop_at(&map, Pose2::identity(), 64, 64, 0.5).pixels;
        let o1 = Offset::new(0.8, -0.5, 0.1);
        let o2 = Offset::new(-0.4, 0.7, -0.05);
        // composition per the pose algebra: warp by o1 then o2 should match
        // warping once by boxminus(p + o1 + o2, p)
        let p = Pose2::identity();
        let combined = crate::se2::boxminus(boxplus(boxplus(p, o1), o2), p);
        let two_step = warp_by_offset(&warp_by_offset(&field, o1, 0.5), o2, 0.5);
        let one_step = warp_by_offset(&field, combined, 0.5);
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 12..52 {
            for j in 12..52 {
                sum += (two_step[(i, j)] - one_step[(i, j)]).abs();
                n += 1.0;
            }
        }
        assert!(sum / n < 0.05, "mean abs diff {}", sum / n);
    }

    #[test]
    fn batch_warp_matches_loop_and_shapes() {
        let map = smooth_map(7, 64, 0.5);
        let field = crop_at(&map, Pose2::identity(), 32, 32, 0.5).pixels;
        let grid = OffsetGrid::build((1.0, 1.0, 0.1), (1.0, 1.0, 0.1)).unwrap();
        let stack = batch_warp(&field, &grid, 0.5);
        assert_eq!(stack.dim(), (27, 32, 32));
        for (m, &cand) in grid.candidates.iter().enumerate() {
            let single = warp_by_offset(&field, cand, 0.5);
            assert_eq!(stack.index_axis(ndarray::Axis(0), m), single.view());
        }
    }

    #[test]
    fn batch_warp_single_candidate_identity() {
        let grid = OffsetGrid::build((1.0, 1.0, 0.1), (1.0, 1.0, 0.1)).unwrap();
        let center_only = OffsetGrid {
            limits: (0.0, 0.0, 0.0),
            resolutions: grid.resolutions,
            counts: (1, 1, 1),
            candidates: vec![Offset::zero()],
        };
        let field = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 17 + j * 3) % 7) as f64 / 7.0);
        let stack = batch_warp(&field, &center_only, 0.5);
        assert_eq!(stack.index_axis(ndarray::Axis(0), 0), field.view());
    }
}
