//! Training objectives: per-step classification over the offset grid,
//! per-step offset regression, and the sequential negative log-likelihood
//! used to train through the filter.
//!
//! Each loss comes in a plain-value form (for logging and oracle tests) and
//! a graph form (for backpropagation); the tests cross-check them.

use crate::error::PipelineError;
use crate::graph::{Graph, NodeId};
use crate::se2::{wrap_angle, Covariance3, Offset, Pose2};

/// One-hot target vectors (x, y, theta) over the grid axes.
pub type OneHotTargets = (Vec<f64>, Vec<f64>, Vec<f64>);

const LOG_CLAMP: f64 = 1e-12;

/// A loss scalar with its named sub-terms for logging.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub scalar: f64,
    pub breakdown: Vec<(String, f64)>,
}

impl LossValue {
    fn new(scalar: f64, breakdown: Vec<(String, f64)>) -> Self {
        LossValue { scalar, breakdown }
    }
}

/// Angle weight of the regression loss; the angle residual enters in
/// degrees so metres and degrees carry comparable magnitudes.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Determinant penalty weight of the sequential loss.
pub const DEFAULT_BETA: f64 = 0.01;
/// Training sequence length for the sequential loss.
pub const DEFAULT_SEQ_LEN: usize = 8;

/// Triple cross-entropy of the three marginals against one-hot targets.
pub fn loss_classification(marginals: &[Vec<f64>; 3], targets: &OneHotTargets) -> LossValue {
    let axes = [&targets.0, &targets.1, &targets.2];
    let names = ["x", "y", "theta"];
    let mut total = 0.0;
    let mut breakdown = Vec::new();
    for axis in 0..3 {
        let p = &marginals[axis];
        let t = axes[axis];
        assert_eq!(p.len(), t.len(), "axis {axis} length");
        let term: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&pi, &ti)| -ti * pi.max(LOG_CLAMP).ln())
            .sum();
        total += term;
        breakdown.push((format!("ce_{}", names[axis]), term));
    }
    LossValue::new(total, breakdown)
}

/// Graph form of the classification loss on three marginal vectors.
pub fn loss_classification_nodes(
    g: &mut Graph,
    marginals: &[NodeId; 3],
    targets: &OneHotTargets,
) -> NodeId {
    let axes = [&targets.0, &targets.1, &targets.2];
    let mut acc: Option<NodeId> = None;
    for axis in 0..3 {
        let clamped = g.max_const(marginals[axis], LOG_CLAMP);
        let lp = g.log_clamped(clamped, LOG_CLAMP);
        let picked = g.dot_const(lp, axes[axis]);
        let term = g.neg(picked);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.unwrap()
}

/// Squared offset error; translation in native units, rotation residual
/// wrapped and expressed in degrees, weighted by alpha.
pub fn loss_regression(est: Offset, gt: Offset, alpha: f64) -> LossValue {
    let dx = est.dx - gt.dx;
    let dy = est.dy - gt.dy;
    let dt_deg = wrap_angle(est.dtheta - gt.dtheta).to_degrees();
    let trans = dx * dx + dy * dy;
    let rot = alpha * dt_deg * dt_deg;
    LossValue::new(
        trans + rot,
        vec![("translation".into(), trans), ("rotation".into(), rot)],
    )
}

/// Graph form of the regression loss on the three expected-offset scalars.
pub fn loss_regression_nodes(
    g: &mut Graph,
    est: &[NodeId; 3],
    gt: Offset,
    alpha: f64,
) -> NodeId {
    let ex = g.add_const(est[0], -gt.dx);
    let ey = g.add_const(est[1], -gt.dy);
    let dt = g.add_const(est[2], -gt.dtheta);
    let wt = g.wrap_angle(dt);
    let wt_deg = g.scale(wt, 180.0 / std::f64::consts::PI);
    let sx = g.mul(ex, ex);
    let sy = g.mul(ey, ey);
    let st = g.mul(wt_deg, wt_deg);
    let sts = g.scale(st, alpha);
    let t = g.add(sx, sy);
    g.add(t, sts)
}

/// Wrapped component residual x_hat (-) gt.
pub fn pose_residual(est: Pose2, gt: Pose2) -> (f64, f64, f64) {
    (est.x - gt.x, est.y - gt.y, wrap_angle(est.theta - gt.theta))
}

/// Mean over the sequence of e^T Sigma^-1 e + beta * det(Sigma).
pub fn loss_sequential(
    posterior: &[(Pose2, Covariance3)],
    gt: &[Pose2],
    beta: f64,
) -> Result<LossValue, PipelineError> {
    if posterior.is_empty() || posterior.len() != gt.len() {
        return Err(PipelineError::Shape(format!(
            "sequential loss: {} states vs {} ground-truth poses",
            posterior.len(),
            gt.len()
        )));
    }
    let k = posterior.len() as f64;
    let mut nll = 0.0;
    let mut det_term = 0.0;
    for ((pose, cov), &truth) in posterior.iter().zip(gt.iter()) {
        let (ex, ey, et) = pose_residual(*pose, truth);
        let e = nalgebra::Vector3::new(ex, ey, et);
        let inv = cov.0.try_inverse().ok_or_else(|| {
            PipelineError::numerical("loss_sequential", "singular posterior covariance")
        })?;
        nll += (e.transpose() * inv * e)[(0, 0)];
        det_term += beta * cov.0.determinant();
    }
    nll /= k;
    det_term /= k;
    Ok(LossValue::new(
        nll + det_term,
        vec![("mahalanobis".into(), nll), ("det".into(), det_term)],
    ))
}

/// Determinant of a 3x3 of scalar nodes (cofactor expansion).
pub fn det3_nodes(g: &mut Graph, m: &[[NodeId; 3]; 3]) -> NodeId {
    let c0 = cofactor2(g, m, 1, 2, 1, 2);
    let c1 = cofactor2(g, m, 1, 2, 0, 2);
    let c2 = cofactor2(g, m, 1, 2, 0, 1);
    let t0 = g.mul(m[0][0], c0);
    let t1 = g.mul(m[0][1], c1);
    let t2 = g.mul(m[0][2], c2);
    let d = g.sub(t0, t1);
    g.add(d, t2)
}

fn cofactor2(
    g: &mut Graph,
    m: &[[NodeId; 3]; 3],
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
) -> NodeId {
    let a = g.mul(m[r0][c0], m[r1][c1]);
    let b = g.mul(m[r0][c1], m[r1][c0]);
    g.sub(a, b)
}

/// Adjugate inverse of a 3x3 of scalar nodes.
pub fn inv3_nodes(g: &mut Graph, m: &[[NodeId; 3]; 3]) -> [[NodeId; 3]; 3] {
    let det = det3_nodes(g, m);
    let inv_det = g.recip(det);
    let mut out = [[0usize; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // adjugate: cofactor of (j, i) with sign (-1)^(i+j)
            let (r0, r1) = other_two(j);
            let (c0, c1) = other_two(i);
            let mut cof = cofactor2(g, m, r0, r1, c0, c1);
            if (i + j) % 2 == 1 {
                cof = g.neg(cof);
            }
            out[i][j] = g.mul(cof, inv_det);
        }
    }
    out
}

fn other_two(k: usize) -> (usize, usize) {
    match k {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// One sequential-loss term on scalar nodes: e^T Sigma^-1 e + beta det.
pub fn sequential_term_nodes(
    g: &mut Graph,
    pose: &[NodeId; 3],
    cov: &[[NodeId; 3]; 3],
    gt: Pose2,
    beta: f64,
) -> NodeId {
    let ex = g.add_const(pose[0], -gt.x);
    let ey = g.add_const(pose[1], -gt.y);
    let dt = g.add_const(pose[2], -gt.theta);
    let et = g.wrap_angle(dt);
    let e = [ex, ey, et];
    let inv = inv3_nodes(g, cov);
    let mut quad: Option<NodeId> = None;
    for i in 0..3 {
        for j in 0..3 {
            let p = g.mul(e[i], inv[i][j]);
            let p = g.mul(p, e[j]);
            quad = Some(match quad {
                Some(q) => g.add(q, p),
                None => p,
            });
        }
    }
    let det = det3_nodes(g, cov);
    let pen = g.scale(det, beta);
    let q = quad.unwrap();
    g.add(q, pen)
}

/// Mean of per-step sequential terms.
pub fn loss_sequential_nodes(
    g: &mut Graph,
    steps: &[([NodeId; 3], [[NodeId; 3]; 3])],
    gt: &[Pose2],
    beta: f64,
) -> Result<NodeId, PipelineError> {
    if steps.is_empty() || steps.len() != gt.len() {
        return Err(PipelineError::Shape(format!(
            "sequential loss: {} states vs {} ground-truth poses",
            steps.len(),
            gt.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for ((pose, cov), &truth) in steps.iter().zip(gt.iter()) {
        let term = sequential_term_nodes(g, pose, cov, truth, beta);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / steps.len() as f64))
}
