//! Scan-to-scan radar odometry: salient-point extraction by intensity
//! threshold and trimmed point-to-point ICP with a closed-form planar
//! rigid solve.

use crate::bev::PolarScan;
use crate::error::PipelineError;
use crate::se2::Offset;

/// 2-D points in the robot frame with their source intensities.
#[derive(Debug, Clone, Default)]
pub struct PointSet2 {
    pub points: Vec<(f64, f64)>,
    pub intensities: Vec<f64>,
}

impl PointSet2 {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// ICP knobs; defaults follow the module's tuning, all overridable.
#[derive(Debug, Clone, Copy)]
pub struct IcpConfig {
    pub trim_fraction: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            trim_fraction: 0.8,
            max_iterations: 50,
            tolerance: 1e-4,
        }
    }
}

/// Default intensity threshold for salient-point extraction.
pub const DEFAULT_INTENSITY_THRESHOLD: f64 = 0.7;

/// One aligned scan pair of an odometry chain.
#[derive(Debug, Clone, Copy)]
pub struct OdomStep {
    pub control: Offset,
    pub converged: bool,
    pub rmse: f64,
}

/// Polar cells above the threshold as Cartesian points, azimuth-major.
pub fn extract_salient_points(scan: &PolarScan, threshold: f64) -> PointSet2 {
    let (na, nb) = (scan.azimuths(), scan.range_bins());
    let mut out = PointSet2::default();
    for a in 0..na {
        let az = 2.0 * std::f64::consts::PI * a as f64 / na as f64;
        let (s, c) = az.sin_cos();
        for b in 0..nb {
            let v = scan.intensities[(a, b)];
            if v > threshold {
                let r = b as f64 * scan.range_resolution;
                out.points.push((r * c, r * s));
                out.intensities.push(v);
            }
        }
    }
    out
}

// Small immutable 2-d k-d tree over point indices.
struct KdTree<'a> {
    pts: &'a [(f64, f64)],
    // (point index, split axis) in heap order; empty slots usize::MAX
    nodes: Vec<usize>,
}

impl<'a> KdTree<'a> {
    fn build(pts: &'a [(f64, f64)]) -> Self {
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        let mut nodes = Vec::new();
        Self::split(pts, &mut idx, 0, 0, &mut nodes);
        KdTree { pts, nodes }
    }

    fn split(pts: &[(f64, f64)], idx: &mut [usize], depth: usize, slot: usize, nodes: &mut Vec<usize>) {
        if idx.is_empty() {
            return;
        }
        if nodes.len() <= slot {
            nodes.resize(slot + 1, usize::MAX);
        }
        let axis = depth % 2;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            let ka = if axis == 0 { pts[a].0 } else { pts[a].1 };
            let kb = if axis == 0 { pts[b].0 } else { pts[b].1 };
            ka.total_cmp(&kb)
        });
        nodes[slot] = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        Self::split(pts, lo, depth + 1, 2 * slot + 1, nodes);
        Self::split(pts, hi, depth + 1, 2 * slot + 2, nodes);
    }

    fn nearest(&self, q: (f64, f64)) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.descend(q, 0, 0, &mut best);
        (best.0, best.1.sqrt())
    }

    fn descend(&self, q: (f64, f64), slot: usize, depth: usize, best: &mut (usize, f64)) {
        if slot >= self.nodes.len() || self.nodes[slot] == usize::MAX {
            return;
        }
        let i = self.nodes[slot];
        let p = self.pts[i];
        let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
        if d2 < best.1 {
            *best = (i, d2);
        }
        let axis = depth % 2;
        let diff = if axis == 0 { q.0 - p.0 } else { q.1 - p.1 };
        let (near, far) = if diff < 0.0 {
            (2 * slot + 1, 2 * slot + 2)
        } else {
            (2 * slot + 2, 2 * slot + 1)
        };
        self.descend(q, near, depth + 1, best);
        if diff * diff < best.1 {
            self.descend(q, far, depth + 1, best);
        }
    }
}

fn apply(o: Offset, p: (f64, f64)) -> (f64, f64) {
    let (s, c) = o.dtheta.sin_cos();
    (c * p.0 - s * p.1 + o.dx, s * p.0 + c * p.1 + o.dy)
}

/// Compose two rigid maps: (b then a).
fn compose(a: Offset, b: Offset) -> Offset {
    let (s, c) = a.dtheta.sin_cos();
    Offset::new(
        a.dx + c * b.dx - s * b.dy,
        a.dy + s * b.dx + c * b.dy,
        crate::se2::wrap_angle(a.dtheta + b.dtheta),
    )
}

/// Trimmed point-to-point ICP. Returns the rigid map `u` taking src points
/// into dst's frame (dst ≈ R(uθ)·src + u_xy), a convergence flag, and the
/// trimmed RMSE of the final association.
pub fn icp_align(
    src: &PointSet2,
    dst: &PointSet2,
    init: Offset,
    cfg: &IcpConfig,
) -> Result<(Offset, bool, f64), PipelineError> {
    if src.len() < 3 || dst.len() < 3 {
        return Ok((Offset::zero(), false, f64::INFINITY));
    }
    if is_collinear(&src.points) || is_collinear(&dst.points) {
        return Ok((Offset::zero(), false, f64::INFINITY));
    }
    let tree = KdTree::build(&dst.points);
    // two phases: an untrimmed pass first so the estimate can travel to the
    // right basin, then trimmed refinement that sheds outlier associations
    let keep_all = src.len();
    let keep_trim = (((src.len() as f64) * cfg.trim_fraction).ceil() as usize).max(3);
    let (u1, conv1, _) = icp_iterate(src, dst, &tree, init, keep_all, cfg);
    let _ = conv1;
    let (u, converged, rmse) = icp_iterate(src, dst, &tree, u1, keep_trim, cfg);
    Ok((u, converged, rmse))
}

fn icp_iterate(
    src: &PointSet2,
    dst: &PointSet2,
    tree: &KdTree,
    init: Offset,
    keep: usize,
    cfg: &IcpConfig,
) -> (Offset, bool, f64) {
    let mut u = init;
    let mut converged = false;
    let mut rmse = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        // associate transformed src with nearest dst, keep the best pairs
        let mut pairs: Vec<(usize, usize, f64)> = src
            .points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let q = apply(u, p);
                let (j, d) = tree.nearest(q);
                (i, j, d)
            })
            .collect();
        pairs.sort_by(|a, b| a.2.total_cmp(&b.2));
        pairs.truncate(keep);

        // closed-form rigid fit on the trimmed association
        let n = pairs.len() as f64;
        let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
        for &(i, j, _) in &pairs {
            let p = apply(u, src.points[i]);
            sx += p.0;
            sy += p.1;
            dx += dst.points[j].0;
            dy += dst.points[j].1;
        }
        let (scx, scy, dcx, dcy) = (sx / n, sy / n, dx / n, dy / n);
        let (mut num, mut den) = (0.0, 0.0);
        for &(i, j, _) in &pairs {
            let p = apply(u, src.points[i]);
            let (px, py) = (p.0 - scx, p.1 - scy);
            let (qx, qy) = (dst.points[j].0 - dcx, dst.points[j].1 - dcy);
            num += px * qy - py * qx;
            den += px * qx + py * qy;
        }
        let dtheta = num.atan2(den);
        let (s, c) = dtheta.sin_cos();
        let step = Offset::new(
            dcx - (c * scx - s * scy),
            dcy - (s * scx + c * scy),
            dtheta,
        );
        u = compose(step, u);

        // convergence: mean displacement the correction induces on the cloud
        let mean_r = (scx * scx + scy * scy).sqrt() + 1.0;
        let correction = (step.dx * step.dx + step.dy * step.dy).sqrt()
            + step.dtheta.abs() * mean_r;
        let mut err = 0.0;
        for &(i, j, _) in &pairs {
            let p = apply(u, src.points[i]);
            err += (p.0 - dst.points[j].0).powi(2) + (p.1 - dst.points[j].1).powi(2);
        }
        rmse = (err / n).sqrt();
        if correction < cfg.tolerance {
            converged = true;
            break;
        }
    }
    (u, converged, rmse)
}

fn is_collinear(pts: &[(f64, f64)]) -> bool {
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (a, b) = (p.0 - mx, p.1 - my);
        xx += a * a;
        xy += a * b;
        yy += b * b;
    }
    // smaller eigenvalue of the scatter
    let tr = xx + yy;
    let det = xx * yy - xy * xy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 - disc) / n < 1e-9
}

/// Consecutive-pair odometry. The control of step t moves the robot's pose
/// forward: pose_t = pose_{t-1} (+) control_t. Each alignment is seeded
/// with the previous step's solution.
pub fn odometry_chain(
    scans: &[PolarScan],
    threshold: f64,
    cfg: &IcpConfig,
) -> Result<Vec<OdomStep>, PipelineError> {
    if scans.len() < 2 {
        return Err(PipelineError::Shape(format!(
            "odometry needs at least 2 scans, got {}",
            scans.len()
        )));
    }
    let sets: Vec<PointSet2> = scans
        .iter()
        .map(|s| extract_salient_points(s, threshold))
        .collect();
    let mut out = Vec::with_capacity(scans.len() - 1);
    let mut warm = Offset::zero();
    for w in sets.windows(2) {
        // a static point seen at p in the older scan appears at
        // R(-dθ)·p - (dx,dy) in the newer one, so the rigid map from the
        // older cloud to the newer is the negated control
        let (o, converged, rmse) = icp_align(&w[0], &w[1], warm, cfg)?;
        let control = if converged { o.neg() } else { Offset::zero() };
        warm = if converged { o } else { Offset::zero() };
        out.push(OdomStep {
            control,
            converged,
            rmse,
        });
    }
    Ok(out)
}
