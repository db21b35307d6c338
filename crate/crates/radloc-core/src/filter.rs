//! Kalman filter over planar pose: odometry prediction, measurement update
//! against the learned cost-volume observation, and whole-sequence tracking
//! with gradients flowing back into the model parameters.
//!
//! The plain path (nalgebra) drives inference; the graph path builds the
//! same arithmetic on scalar nodes for training. Tests cross-check them.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::bev::{BevImage, GridMap};
use crate::error::PipelineError;
use crate::graph::{Graph, NodeId};
use crate::losses::inv3_nodes;
use crate::measnet::{
    extract_measurement, measure_nodes, within_coverage, MeasureConfig, Measurement,
};
use crate::nn::{ModelParams, ParamBinding};
use crate::se2::{
    boxplus, motion_jacobian, wrap_angle, Covariance3, Offset, OffsetGrid, Pose2,
};

/// Pose belief at one timestamp.
#[derive(Debug, Clone, Copy)]
pub struct FilterState {
    pub pose: Pose2,
    pub cov: Covariance3,
    pub t: f64,
}

impl FilterState {
    pub fn new(pose: Pose2, cov: Covariance3, t: f64) -> Self {
        FilterState { pose, cov, t }
    }
}

/// Process and prior noise of the filter.
#[derive(Debug, Clone, Copy)]
pub struct NoiseConfig {
    pub sigma_m: Covariance3,
    pub initial_cov: Covariance3,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, c) in [("sigma_m", &self.sigma_m), ("initial_cov", &self.initial_cov)] {
            if !c.is_psd() || (0..3).any(|i| c.0[(i, i)] <= 0.0) {
                return Err(PipelineError::numerical(
                    "noise config",
                    format!("{name} must be PSD with positive diagonal"),
                ));
            }
        }
        Ok(())
    }
}

/// One recorded tracking step.
#[derive(Debug, Clone)]
pub struct TrackStep {
    pub predicted: FilterState,
    pub posterior: FilterState,
    pub measurement: Option<Measurement>,
}

/// Full tracking output: the initial state plus one entry per control.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub init: FilterState,
    pub steps: Vec<TrackStep>,
}

impl Trajectory {
    pub fn poses(&self) -> Vec<Pose2> {
        self.steps.iter().map(|s| s.posterior.pose).collect()
    }
}

/// Motion prediction: compose the control, propagate the covariance through
/// the motion Jacobian, add the process noise.
pub fn predict(state: &FilterState, u: Offset, noise: &NoiseConfig, dt: f64) -> FilterState {
    let pose = boxplus(state.pose, u);
    let f = motion_jacobian(state.pose, u);
    let cov = (f * state.cov.0 * f.transpose() + noise.sigma_m.0).symmetric_part();
    FilterState::new(pose, Covariance3(cov), state.t + dt)
}

fn symmetrize(m: Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Measurement update with identity observation model.
pub fn update(pred: &FilterState, meas: &Measurement) -> Result<FilterState, PipelineError> {
    let s = pred.cov.0 + meas.sigma_o.0;
    let s_inv = s.try_inverse().ok_or_else(|| {
        PipelineError::numerical(
            "filter update",
            format!("singular innovation covariance, det = {:.3e}", s.determinant()),
        )
    })?;
    let k = pred.cov.0 * s_inv;
    let r = Vector3::new(
        meas.z.x - pred.pose.x,
        meas.z.y - pred.pose.y,
        wrap_angle(meas.z.theta - pred.pose.theta),
    );
    let corr = k * r;
    let pose = Pose2::new(
        pred.pose.x + corr[0],
        pred.pose.y + corr[1],
        wrap_angle(pred.pose.theta + corr[2]),
    );
    let cov = symmetrize((Matrix3::identity() - k) * pred.cov.0);
    Ok(FilterState::new(pose, Covariance3(cov), pred.t))
}

/// Track a sequence: predict with each control, measure from the paired
/// scan, update. A predicted pose outside the map skips the update and
/// dead-reckons through the step.
#[allow(clippy::too_many_arguments)]
pub fn track_sequence(
    params: &ModelParams,
    init: FilterState,
    controls: &[Offset],
    scans: &[BevImage],
    map: &Arc<GridMap>,
    grid: &OffsetGrid,
    noise: &NoiseConfig,
    cfg: &MeasureConfig,
    dt: f64,
) -> Result<Trajectory, PipelineError> {
    if controls.len() != scans.len() {
        return Err(PipelineError::Shape(format!(
            "{} controls vs {} scans",
            controls.len(),
            scans.len()
        )));
    }
    noise.validate()?;
    let mut state = init;
    let mut steps = Vec::with_capacity(controls.len());
    for (u, scan) in controls.iter().zip(scans.iter()) {
        let pred = predict(&state, *u, noise, dt);
        if within_coverage(map, pred.pose) {
            let mut g = Graph::new();
            let binding = params.bind(&mut g);
            let pn = [
                g.scalar_leaf(pred.pose.x),
                g.scalar_leaf(pred.pose.y),
                g.scalar_leaf(pred.pose.theta),
            ];
            let nodes =
                measure_nodes(&mut g, params, &binding, scan, map.clone(), pn, grid, cfg)?;
            let meas = extract_measurement(&g, &nodes, grid);
            let post = update(&pred, &meas)?;
            state = post;
            steps.push(TrackStep {
                predicted: pred,
                posterior: post,
                measurement: Some(meas),
            });
        } else {
            state = pred;
            steps.push(TrackStep {
                predicted: pred,
                posterior: pred,
                measurement: None,
            });
        }
    }
    Ok(Trajectory { init, steps })
}

/// Posterior state as graph nodes for backprop through time.
pub struct StateNodes {
    pub pose: [NodeId; 3],
    pub cov: [[NodeId; 3]; 3],
}

/// Predict on scalar nodes. The control and noise are constants; only the
/// previous state carries gradient, matching training where odometry is
/// not learned.
pub fn predict_nodes(
    g: &mut Graph,
    state: &StateNodes,
    u: Offset,
    noise: &NoiseConfig,
) -> StateNodes {
    let off = [
        g.scalar_leaf(u.dx),
        g.scalar_leaf(u.dy),
        g.scalar_leaf(u.dtheta),
    ];
    let pose = crate::measnet::boxplus_nodes(g, state.pose, off);
    // F as nodes so the heading's effect on the propagated covariance
    // backpropagates too
    let a = pose[2];
    let s = g.sin(a);
    let c = g.cos(a);
    let sdx = g.scale(s, -u.dx);
    let cdy = g.scale(c, -u.dy);
    let f02 = g.add(sdx, cdy);
    let cdx = g.scale(c, u.dx);
    let sdy = g.scale(s, -u.dy);
    let f12 = g.add(cdx, sdy);
    let one = g.scalar_leaf(1.0);
    let zero = g.scalar_leaf(0.0);
    let f = [[one, zero, f02], [zero, one, f12], [zero, zero, one]];
    let mut cov = [[0usize; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // (F Sigma F^T)[i][j] + Sigma_m[i][j]
            let mut acc: Option<NodeId> = None;
            for a in 0..3 {
                for b in 0..3 {
                    let t = g.mul(f[i][a], state.cov[a][b]);
                    let t = g.mul(t, f[j][b]);
                    acc = Some(match acc {
                        Some(x) => g.add(x, t),
                        None => t,
                    });
                }
            }
            cov[i][j] = g.add_const(acc.unwrap(), noise.sigma_m.0[(i, j)]);
        }
    }
    symmetrize_nodes(g, &mut cov);
    StateNodes { pose, cov }
}

fn symmetrize_nodes(g: &mut Graph, m: &mut [[NodeId; 3]; 3]) {
    for i in 0..3 {
        for j in (i + 1)..3 {
            let s = g.add(m[i][j], m[j][i]);
            let h = g.scale(s, 0.5);
            m[i][j] = h;
            m[j][i] = h;
        }
    }
}

/// Update on scalar nodes: gradient flows through z and Sigma_o.
pub fn update_nodes(
    g: &mut Graph,
    pred: &StateNodes,
    z: &[NodeId; 3],
    sigma_o: &[[NodeId; 3]; 3],
) -> StateNodes {
    let mut s = [[0usize; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = g.add(pred.cov[i][j], sigma_o[i][j]);
        }
    }
    let s_inv = inv3_nodes(g, &s);
    let mut k = [[0usize; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc: Option<NodeId> = None;
            for a in 0..3 {
                let t = g.mul(pred.cov[i][a], s_inv[a][j]);
                acc = Some(match acc {
                    Some(x) => g.add(x, t),
                    None => t,
                });
            }
            k[i][j] = acc.unwrap();
        }
    }
    let rx = g.sub(z[0], pred.pose[0]);
    let ry = g.sub(z[1], pred.pose[1]);
    let dt = g.sub(z[2], pred.pose[2]);
    let rt = g.wrap_angle(dt);
    let r = [rx, ry, rt];
    let mut pose = [0usize; 3];
    for i in 0..3 {
        let mut acc = pred.pose[i];
        for a in 0..3 {
            let t = g.mul(k[i][a], r[a]);
            acc = g.add(acc, t);
        }
        pose[i] = acc;
    }
    pose[2] = g.wrap_angle(pose[2]);
    // (I - K) Sigma
    let mut cov = [[0usize; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = pred.cov[i][j];
            for a in 0..3 {
                let t = g.mul(k[i][a], pred.cov[a][j]);
                acc = g.sub(acc, t);
            }
            cov[i][j] = acc;
        }
    }
    symmetrize_nodes(g, &mut cov);
    StateNodes { pose, cov }
}

/// Training sequence: one shared graph across all steps so a loss on the
/// posteriors backpropagates through every filter iteration into the model
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn track_sequence_nodes(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    init: &FilterState,
    controls: &[Offset],
    scans: &[BevImage],
    map: &Arc<GridMap>,
    grid: &OffsetGrid,
    noise: &NoiseConfig,
    cfg: &MeasureConfig,
) -> Result<Vec<StateNodes>, PipelineError> {
    if controls.len() != scans.len() {
        return Err(PipelineError::Shape(format!(
            "{} controls vs {} scans",
            controls.len(),
            scans.len()
        )));
    }
    noise.validate()?;
    let mut state = StateNodes {
        pose: [
            g.scalar_leaf(init.pose.x),
            g.scalar_leaf(init.pose.y),
            g.scalar_leaf(init.pose.theta),
        ],
        cov: {
            let mut c = [[0usize; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    c[i][j] = g.scalar_leaf(init.cov.0[(i, j)]);
                }
            }
            c
        },
    };
    let mut out = Vec::with_capacity(controls.len());
    for (u, scan) in controls.iter().zip(scans.iter()) {
        let pred = predict_nodes(g, &state, *u, noise);
        let p = Pose2::new(
            g.scalar_value(pred.pose[0]),
            g.scalar_value(pred.pose[1]),
            g.scalar_value(pred.pose[2]),
        );
        let next = if within_coverage(map, p) {
            let nodes =
                measure_nodes(g, params, binding, scan, map.clone(), pred.pose, grid, cfg)?;
            update_nodes(g, &pred, &nodes.z, &nodes.sigma)
        } else {
            pred
        };
        state = StateNodes {
            pose: next.pose,
            cov: next.cov,
        };
        out.push(next);
    }
    Ok(out)
}

/// Plain state read out of graph nodes.
pub fn state_of_nodes(g: &Graph, s: &StateNodes, t: f64) -> FilterState {
    let mut cov = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            cov[(i, j)] = g.scalar_value(s.cov[i][j]);
        }
    }
    FilterState::new(
        Pose2::new(
            g.scalar_value(s.pose[0]),
            g.scalar_value(s.pose[1]),
            g.scalar_value(s.pose[2]),
        ),
        Covariance3(cov),
        t,
    )
}
