//! SE(2) pose algebra, the discretized offset solution space, and
//! classification targets over it.
//!
//! Angles are radians everywhere inside the library; degrees exist only at
//! the CLI/config boundary.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.sin().atan2(theta.cos());
    // atan2 maps pi to +pi already, but -pi can appear from rounding
    if w <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

/// A planar pose (x, y, theta) in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }
}

/// A robot-frame pose offset (dx, dy, dtheta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Offset {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Offset {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Offset {
            dx,
            dy,
            dtheta: wrap_angle(dtheta),
        }
    }

    pub fn zero() -> Self {
        Offset {
            dx: 0.0,
            dy: 0.0,
            dtheta: 0.0,
        }
    }

    pub fn neg(&self) -> Self {
        Offset::new(-self.dx, -self.dy, -self.dtheta)
    }

    pub fn norm2(&self) -> f64 {
        (self.dx * self.dx + self.dy * self.dy + self.dtheta * self.dtheta).sqrt()
    }
}

/// Apply a robot-frame offset to a world-frame pose.
///
/// The offset translation is expressed in the frame already rotated by
/// dtheta, i.e. the rotation applied to (dx, dy) is theta + dtheta.
pub fn boxplus(pose: Pose2, offset: Offset) -> Pose2 {
    let a = pose.theta + offset.dtheta;
    let (s, c) = a.sin_cos();
    Pose2::new(
        pose.x + c * offset.dx - s * offset.dy,
        pose.y + s * offset.dx + c * offset.dy,
        a,
    )
}

/// Inverse of [`boxplus`]: the offset o with `boxplus(pose_a, o) == pose_b`.
pub fn boxminus(pose_b: Pose2, pose_a: Pose2) -> Offset {
    let dtheta = wrap_angle(pose_b.theta - pose_a.theta);
    let (s, c) = pose_b.theta.sin_cos();
    let ex = pose_b.x - pose_a.x;
    let ey = pose_b.y - pose_a.y;
    // rotate the world-frame difference back by -theta_b
    Offset {
        dx: c * ex + s * ey,
        dy: -s * ex + c * ey,
        dtheta,
    }
}

/// Jacobian of boxplus with respect to the pose, evaluated at (pose, u).
pub fn motion_jacobian(pose: Pose2, u: Offset) -> Matrix3<f64> {
    let a = pose.theta + u.dtheta;
    let (s, c) = a.sin_cos();
    let mut j = Matrix3::identity();
    j[(0, 2)] = -s * u.dx - c * u.dy;
    j[(1, 2)] = c * u.dx - s * u.dy;
    j
}

/// A 3x3 pose covariance with (m^2, m^2, rad^2) on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn zeros() -> Self {
        Covariance3(Matrix3::zeros())
    }

    pub fn diagonal(vx: f64, vy: f64, vt: f64) -> Self {
        Covariance3(Matrix3::from_diagonal(&nalgebra::Vector3::new(vx, vy, vt)))
    }

    /// Enforce symmetry after an algebraic step.
    pub fn symmetrized(&self) -> Self {
        Covariance3((self.0 + self.0.transpose()) * 0.5)
    }

    /// Check positive semi-definiteness with a small numerical slack.
    pub fn is_psd(&self) -> bool {
        let sym = self.symmetrized().0;
        nalgebra::SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .all(|&e| e >= -1e-9)
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }
}

/// The bounded, regularly discretized offset neighborhood around a pose.
///
/// Candidates are enumerated row-major in (i, j, k) over (dx, dy, dtheta).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGrid {
    pub limits: (f64, f64, f64),
    pub resolutions: (f64, f64, f64),
    pub counts: (usize, usize, usize),
    pub candidates: Vec<Offset>,
}

fn axis_count(limit: f64, res: f64) -> Result<usize, ConfigError> {
    if !(limit > 0.0) || !(res > 0.0) {
        return Err(ConfigError::new(format!(
            "offset grid limit/resolution must be positive, got {limit}/{res}"
        )));
    }
    let ratio = limit / res;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > 1e-9 {
        return Err(ConfigError::new(format!(
            "offset grid limit {limit} is not an integer multiple of resolution {res}"
        )));
    }
    Ok(2 * rounded as usize + 1)
}

impl OffsetGrid {
    pub fn build(limits: (f64, f64, f64), resolutions: (f64, f64, f64)) -> Result<Self, ConfigError> {
        let nx = axis_count(limits.0, resolutions.0)?;
        let ny = axis_count(limits.1, resolutions.1)?;
        let nt = axis_count(limits.2, resolutions.2)?;
        let mut candidates = Vec::with_capacity(nx * ny * nt);
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nt {
                    candidates.push(Offset {
                        dx: -limits.0 + i as f64 * resolutions.0,
                        dy: -limits.1 + j as f64 * resolutions.1,
                        dtheta: -limits.2 + k as f64 * resolutions.2,
                    });
                }
            }
        }
        Ok(OffsetGrid {
            limits,
            resolutions,
            counts: (nx, ny, nt),
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Axis bin centers for one of the three axes (0 = x, 1 = y, 2 = theta).
    pub fn axis_values(&self, axis: usize) -> Vec<f64> {
        let (limit, res, n) = match axis {
            0 => (self.limits.0, self.resolutions.0, self.counts.0),
            1 => (self.limits.1, self.resolutions.1, self.counts.1),
            2 => (self.limits.2, self.resolutions.2, self.counts.2),
            _ => panic!("axis out of range"),
        };
        (0..n).map(|i| -limit + i as f64 * res).collect()
    }

    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.counts.1 + j) * self.counts.2 + k
    }
}

/// Nearest bin on one axis; exact midpoints resolve to the lower index.
fn nearest_bin(value: f64, limit: f64, res: f64, n: usize) -> usize {
    let q = (value + limit) / res;
    let idx = (q - 0.5).ceil();
    (idx.max(0.0) as usize).min(n - 1)
}

/// One-hot classification targets over the three grid axes.
pub fn one_hot_targets(
    grid: &OffsetGrid,
    gt: Offset,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ConfigError> {
    let tol = 1e-9;
    if gt.dx.abs() > grid.limits.0 + tol
        || gt.dy.abs() > grid.limits.1 + tol
        || gt.dtheta.abs() > grid.limits.2 + tol
    {
        return Err(ConfigError::new(format!(
            "ground-truth offset ({}, {}, {}) outside grid limits",
            gt.dx, gt.dy, gt.dtheta
        )));
    }
    let mut cx = vec![0.0; grid.counts.0];
    let mut cy = vec![0.0; grid.counts.1];
    let mut ct = vec![0.0; grid.counts.2];
    cx[nearest_bin(gt.dx, grid.limits.0, grid.resolutions.0, grid.counts.0)] = 1.0;
    cy[nearest_bin(gt.dy, grid.limits.1, grid.resolutions.1, grid.counts.1)] = 1.0;
    ct[nearest_bin(gt.dtheta, grid.limits.2, grid.resolutions.2, grid.counts.2)] = 1.0;
    Ok((cx, cy, ct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn boxplus_identity_rotation() {
        let p = boxplus(Pose2::identity(), Offset::new(2.0, -1.0, 0.0));
        assert_abs_diff_eq!(p.x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn boxplus_quarter_turn() {
        let p = boxplus(Pose2::new(1.0, 2.0, PI / 2.0), Offset::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn boxplus_zero_offset() {
        let p = boxplus(Pose2::new(5.0, -3.0, 0.3), Offset::zero());
        assert_abs_diff_eq!(p.x, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, -3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn boxminus_inverts_boxplus_by_hand() {
        let o = boxminus(Pose2::new(1.0, 3.0, PI / 2.0), Pose2::new(1.0, 2.0, PI / 2.0));
        assert_abs_diff_eq!(o.dx, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.dy, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.dtheta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn boxminus_self_is_zero() {
        let p = Pose2::new(4.2, -7.7, 2.1);
        let o = boxminus(p, p);
        assert!(o.norm2() < 1e-12);
    }

    #[test]
    fn roundtrip_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = Pose2::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-PI..PI),
            );
            let b = Pose2::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-PI..PI),
            );
            let o = boxminus(b, a);
            let b2 = boxplus(a, o);
            assert!((b2.x - b.x).abs() < 1e-9);
            assert!((b2.y - b.y).abs() < 1e-9);
            assert!(wrap_angle(b2.theta - b.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let p = Pose2::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-PI..PI),
            );
            let u = Offset::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-0.5..0.5),
            );
            let j = motion_jacobian(p, u);
            for col in 0..3 {
                let mut lo = [p.x, p.y, p.theta];
                let mut hi = lo;
                lo[col] -= h;
                hi[col] += h;
                let fl = boxplus(Pose2 { x: lo[0], y: lo[1], theta: lo[2] }, u);
                let fh = boxplus(Pose2 { x: hi[0], y: hi[1], theta: hi[2] }, u);
                let fd = [
                    (fh.x - fl.x) / (2.0 * h),
                    (fh.y - fl.y) / (2.0 * h),
                    wrap_angle(fh.theta - fl.theta) / (2.0 * h),
                ];
                for row in 0..3 {
                    assert!(
                        (j[(row, col)] - fd[row]).abs() < 1e-6,
                        "J[{row},{col}] = {} vs fd {}",
                        j[(row, col)],
                        fd[row]
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_trivial_cases() {
        let j = motion_jacobian(Pose2::new(3.0, 1.0, 0.7), Offset::zero());
        assert!((j - Matrix3::identity()).norm() < 1e-12);
        let j = motion_jacobian(Pose2::identity(), Offset::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(j[(0, 2)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j[(1, 2)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j[(2, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_counts_paper_configs() {
        let deg = PI / 180.0;
        let g = OffsetGrid::build((2.0, 2.0, 2.0 * deg), (2.0, 2.0, 2.0 * deg)).unwrap();
        assert_eq!(g.counts, (3, 3, 3));
        assert_eq!(g.len(), 27);
        let g = OffsetGrid::build((6.0, 6.0, 6.0 * deg), (2.0, 2.0, 2.0 * deg)).unwrap();
        assert_eq!(g.counts, (7, 7, 7));
        assert_eq!(g.len(), 343);
    }

    #[test]
    fn grid_center_candidate_exists_and_symmetry() {
        let g = OffsetGrid::build((1.0, 1.0, 0.1), (1.0, 1.0, 0.1)).unwrap();
        assert_eq!(g.counts, (3, 3, 3));
        assert!(g
            .candidates
            .iter()
            .any(|c| c.dx == 0.0 && c.dy == 0.0 && c.dtheta == 0.0));
        for c in &g.candidates {
            assert!(g.candidates.iter().any(|d| (d.dx + c.dx).abs() < 1e-12
                && (d.dy + c.dy).abs() < 1e-12
                && (d.dtheta + c.dtheta).abs() < 1e-12));
        }
    }

    #[test]
    fn grid_rejects_non_divisible_limits() {
        assert!(OffsetGrid::build((2.0, 2.0, 1.0), (1.5, 2.0, 1.0)).is_err());
    }

    #[test]
    fn one_hot_center() {
        let g = OffsetGrid::build((6.0, 6.0, 6.0), (2.0, 2.0, 2.0)).unwrap();
        let (cx, cy, ct) = one_hot_targets(&g, Offset::zero()).unwrap();
        assert_eq!(cx.iter().position(|&v| v == 1.0), Some(3));
        assert_eq!(cy.iter().position(|&v| v == 1.0), Some(3));
        assert_eq!(ct.iter().position(|&v| v == 1.0), Some(3));
        assert_eq!(cx.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn one_hot_nearest_bins() {
        let g = OffsetGrid::build((6.0, 6.0, 6.0), (2.0, 2.0, 2.0)).unwrap();
        let (cx, cy, ct) = one_hot_targets(&g, Offset::new(1.9, -2.1, 0.0)).unwrap();
        // bins at -6,-4,-2,0,2,4,6
        assert_eq!(cx.iter().position(|&v| v == 1.0), Some(4)); // +2
        assert_eq!(cy.iter().position(|&v| v == 1.0), Some(2)); // -2
        assert_eq!(ct.iter().position(|&v| v == 1.0), Some(3)); // 0
    }

    #[test]
    fn one_hot_midpoint_ties_go_low() {
        let g = OffsetGrid::build((6.0, 6.0, 6.0), (2.0, 2.0, 2.0)).unwrap();
        let (cx, _, _) = one_hot_targets(&g, Offset::new(1.0, 0.0, 0.0)).unwrap();
        // 1.0 is midway between bins 0 and 2; lower index wins
        assert_eq!(cx.iter().position(|&v| v == 1.0), Some(3));
    }

    #[test]
    fn one_hot_out_of_range() {
        let g = OffsetGrid::build((6.0, 6.0, 6.0), (2.0, 2.0, 2.0)).unwrap();
        assert!(one_hot_targets(&g, Offset::new(6.5, 0.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn prop_boxplus_zero_neutral(x in -100.0..100.0f64, y in -100.0..100.0f64, t in -3.1..3.1f64) {
            let p = Pose2::new(x, y, t);
            let q = boxplus(p, Offset::zero());
            prop_assert!((q.x - p.x).abs() < 1e-12);
            prop_assert!((q.y - p.y).abs() < 1e-12);
            prop_assert!(wrap_angle(q.theta - p.theta).abs() < 1e-12);
        }

        #[test]
        fn prop_wrap_in_range(t in -100.0..100.0f64) {
            let w = wrap_angle(t);
            prop_assert!(w > -PI && w <= PI);
        }
    }
}
