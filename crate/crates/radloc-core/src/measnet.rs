//! The learnable measurement model: noise masking, cross-modal embedding,
//! candidate warping, patch-based difference scoring, softmin normalization
//! into a cost volume, marginals, expected offset, and measurement
//! covariance.
//!
//! Everything here runs inside the autodiff graph so the whole map from
//! model parameters to the measurement is differentiable; the plain-value
//! wrappers build a throwaway graph and read the results out.

use std::sync::Arc;

use ndarray::{Array3, ArrayD, IxDyn};

use crate::bev::{BevImage, GridMap};
use crate::error::{ConfigError, PipelineError};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    net_forward, patch_input_side, ModelParams, ParamBinding, NET_MAP, NET_MASK, NET_PATCH,
    NET_RADAR,
};
use crate::se2::{boxminus, boxplus, Covariance3, Offset, OffsetGrid, Pose2};

/// Normalized probability volume over the offset grid.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub values: Array3<f64>,
    pub grid: OffsetGrid,
}

impl CostVolume {
    pub fn is_normalized(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0) && (self.values.sum() - 1.0).abs() <= 1e-6
    }
}

/// Per-axis marginal distributions of a cost volume.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub px: Vec<f64>,
    pub py: Vec<f64>,
    pub ptheta: Vec<f64>,
}

/// World-frame network observation for the filter.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub z: Pose2,
    pub sigma_o: Covariance3,
    pub volume: CostVolume,
    pub offset: Offset,
}

/// Geometry and normalization knobs of the measurement model.
#[derive(Debug, Clone)]
pub struct MeasureConfig {
    pub h: usize,
    pub w: usize,
    pub resolution: f64,
    pub temperature: f64,
}

impl MeasureConfig {
    pub fn new(h: usize, w: usize, resolution: f64) -> Self {
        MeasureConfig {
            h,
            w,
            resolution,
            temperature: 1.0,
        }
    }
}

/// Variance floor per axis: (resolution/4)^2 in native units.
pub fn covariance_floor(grid: &OffsetGrid) -> (f64, f64, f64) {
    (
        (grid.resolutions.0 / 4.0).powi(2),
        (grid.resolutions.1 / 4.0).powi(2),
        (grid.resolutions.2 / 4.0).powi(2),
    )
}

/// Graph node handles of one measurement evaluation.
pub struct MeasurementNodes {
    pub masked: NodeId,
    pub embed_radar: NodeId,
    pub embed_map: NodeId,
    pub scores: NodeId,
    pub volume: NodeId,
    pub marginals: [NodeId; 3],
    pub offset: [NodeId; 3],
    pub z: [NodeId; 3],
    pub sigma: [[NodeId; 3]; 3],
}

fn as_nchw(g: &mut Graph, x: NodeId, h: usize, w: usize) -> NodeId {
    g.reshape(x, &[1, 1, h, w])
}

fn as_hw(g: &mut Graph, x: NodeId, h: usize, w: usize) -> NodeId {
    g.reshape(x, &[h, w])
}

/// R * F_m(R): suppress radar noise with the learned [0,1] mask.
pub fn mask_radar(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    radar: NodeId,
) -> Result<NodeId, PipelineError> {
    let shape = g.value(radar).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let x = as_nchw(g, radar, h, w);
    let m = net_forward(g, params, binding, NET_MASK, x)?;
    let m2 = as_hw(g, m, h, w);
    Ok(g.mul(radar, m2))
}

pub fn embed_radar(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    masked: NodeId,
) -> Result<NodeId, PipelineError> {
    embed(g, params, binding, NET_RADAR, masked)
}

pub fn embed_map(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    map_crop: NodeId,
) -> Result<NodeId, PipelineError> {
    embed(g, params, binding, NET_MAP, map_crop)
}

fn embed(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    net: &str,
    input: NodeId,
) -> Result<NodeId, PipelineError> {
    let shape = g.value(input).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let x = as_nchw(g, input, h, w);
    let e = net_forward(g, params, binding, net, x)?;
    Ok(as_hw(g, e, h, w))
}

/// Element-wise subtraction E^r - warped[m] for every candidate.
pub fn difference_tensor(
    g: &mut Graph,
    embed_r: NodeId,
    warped_stack: NodeId,
) -> Result<NodeId, PipelineError> {
    let es = g.value(embed_r).shape().to_vec();
    let ws = g.value(warped_stack).shape().to_vec();
    if ws.len() != 3 || es != ws[1..] {
        return Err(PipelineError::Shape(format!(
            "difference tensor: embedding {es:?} vs stack {ws:?}"
        )));
    }
    Ok(g.sub_broadcast0(embed_r, warped_stack))
}

/// Mean over the k x k patches of the patch network's per-candidate scalar.
pub fn patch_scores(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    delta: NodeId,
    k: usize,
) -> Result<NodeId, PipelineError> {
    let shape = g.value(delta).shape().to_vec();
    let (m, h, w) = (shape[0], shape[1], shape[2]);
    if h % k != 0 || w % k != 0 {
        return Err(ConfigError::new(format!(
            "patch count {k} does not divide field size {h}x{w}"
        ))
        .into());
    }
    let side = h / k;
    let need = patch_input_side(params.arch.profile);
    if side < need || w / k != side {
        return Err(ConfigError::new(format!(
            "patch side {side} incompatible with patch network input size {need}"
        ))
        .into());
    }
    if m != params.arch.n_candidates {
        return Err(PipelineError::Shape(format!(
            "candidate count {m} vs architecture {}",
            params.arch.n_candidates
        )));
    }
    let patches = g.patch_extract(delta, k); // [k*k, M, side, side]
    let out = net_forward(g, params, binding, NET_PATCH, patches)?;
    let per_patch = g.mean_spatial(out); // [k*k, M]
    Ok(g.mean_axis0(per_patch)) // [M]
}

/// Softmin: V = softmax(-scores / tau), reshaped to the grid.
pub fn softmin_normalize(
    g: &mut Graph,
    scores: NodeId,
    grid: &OffsetGrid,
    temperature: f64,
) -> NodeId {
    let neg = g.scale(scores, -1.0 / temperature);
    let sm = g.softmax(neg);
    g.reshape(sm, &[grid.counts.0, grid.counts.1, grid.counts.2])
}

/// The three axis sums of the cost volume.
pub fn marginals(g: &mut Graph, volume: NodeId) -> [NodeId; 3] {
    [
        g.sum_axes3(volume, 0),
        g.sum_axes3(volume, 1),
        g.sum_axes3(volume, 2),
    ]
}

/// Component-wise marginal expectations.
pub fn expected_offset(g: &mut Graph, marg: &[NodeId; 3], grid: &OffsetGrid) -> [NodeId; 3] {
    [
        g.dot_const(marg[0], &grid.axis_values(0)),
        g.dot_const(marg[1], &grid.axis_values(1)),
        g.dot_const(marg[2], &grid.axis_values(2)),
    ]
}

/// Robot-frame diagonal of floored per-axis marginal variances, (x, y)
/// block rotated into the world frame by the heading.
pub fn measurement_covariance(
    g: &mut Graph,
    marg: &[NodeId; 3],
    grid: &OffsetGrid,
    heading: NodeId,
) -> [[NodeId; 3]; 3] {
    let floor = covariance_floor(grid);
    let mut vars = [0usize; 3];
    for axis in 0..3 {
        let vals = grid.axis_values(axis);
        let sq: Vec<f64> = vals.iter().map(|v| v * v).collect();
        let ex = g.dot_const(marg[axis], &vals);
        let ex2 = g.dot_const(marg[axis], &sq);
        let mean_sq = g.mul(ex, ex);
        let var = g.sub(ex2, mean_sq);
        vars[axis] = g.max_const(var, [floor.0, floor.1, floor.2][axis]);
    }
    let s = g.sin(heading);
    let c = g.cos(heading);
    let cc = g.mul(c, c);
    let ss = g.mul(s, s);
    let sc = g.mul(s, c);
    // world xy block of R diag(vx, vy) R^T
    let a1 = g.mul(cc, vars[0]);
    let a2 = g.mul(ss, vars[1]);
    let xx = g.add(a1, a2);
    let b1 = g.mul(ss, vars[0]);
    let b2 = g.mul(cc, vars[1]);
    let yy = g.add(b1, b2);
    let d = g.sub(vars[0], vars[1]);
    let xy = g.mul(sc, d);
    let zero_a = g.scalar_leaf(0.0);
    let zero_b = g.scalar_leaf(0.0);
    [
        [xx, xy, zero_a],
        [xy, yy, zero_b],
        [zero_a, zero_b, vars[2]],
    ]
}

/// boxplus on scalar nodes: pose (world) composed with an offset.
pub fn boxplus_nodes(g: &mut Graph, pose: [NodeId; 3], off: [NodeId; 3]) -> [NodeId; 3] {
    let a = g.add(pose[2], off[2]);
    let s = g.sin(a);
    let c = g.cos(a);
    let cx = g.mul(c, off[0]);
    let sy = g.mul(s, off[1]);
    let tx = g.sub(cx, sy);
    let x = g.add(pose[0], tx);
    let sx = g.mul(s, off[0]);
    let cy = g.mul(c, off[1]);
    let ty = g.add(sx, cy);
    let y = g.add(pose[1], ty);
    [x, y, a]
}

/// Does the pose fall inside the map rectangle?
pub fn within_coverage(map: &GridMap, pose: Pose2) -> bool {
    let (ci, cj) = map.world_to_cell(pose.x, pose.y);
    ci >= 0.0 && cj >= 0.0 && ci < map.cells.nrows() as f64 && cj < map.cells.ncols() as f64
}

/// Full measurement pipeline at a predicted pose given as graph nodes:
/// crop, mask, embed, warp per candidate, difference, patch scores, softmin,
/// marginals, expected offset, observation and covariance.
pub fn measure_nodes(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    radar_bev: &BevImage,
    map: Arc<GridMap>,
    pose: [NodeId; 3],
    grid: &OffsetGrid,
    cfg: &MeasureConfig,
) -> Result<MeasurementNodes, PipelineError> {
    let p = Pose2 {
        x: g.scalar_value(pose[0]),
        y: g.scalar_value(pose[1]),
        theta: g.scalar_value(pose[2]),
    };
    if !within_coverage(&map, p) {
        return Err(PipelineError::numerical(
            "measure",
            format!("pose ({:.2}, {:.2}) outside map coverage", p.x, p.y),
        ));
    }
    let radar = g.leaf(radar_bev.pixels.clone().into_dyn());
    let crop = g.crop_at(map, pose, cfg.h, cfg.w, cfg.resolution);
    let masked = mask_radar(g, params, binding, radar)?;
    let er = embed_radar(g, params, binding, masked)?;
    let el = embed_map(g, params, binding, crop)?;
    let warped = g.batch_warp(el, &grid.candidates, cfg.resolution);
    let delta = difference_tensor(g, er, warped)?;
    let scores = patch_scores(g, params, binding, delta, params.arch.patch_k)?;
    let volume = softmin_normalize(g, scores, grid, cfg.temperature);
    let marg = marginals(g, volume);
    let offset = expected_offset(g, &marg, grid);
    let z = boxplus_nodes(g, pose, offset);
    let sigma = measurement_covariance(g, &marg, grid, pose[2]);
    Ok(MeasurementNodes {
        masked,
        embed_radar: er,
        embed_map: el,
        scores,
        volume,
        marginals: marg,
        offset,
        z,
        sigma,
    })
}

/// Plain-value measurement: builds a throwaway graph and extracts the
/// observation.
pub fn measure(
    params: &ModelParams,
    radar_bev: &BevImage,
    map: &Arc<GridMap>,
    pose: Pose2,
    grid: &OffsetGrid,
    cfg: &MeasureConfig,
) -> Result<Measurement, PipelineError> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let pn = [
        g.scalar_leaf(pose.x),
        g.scalar_leaf(pose.y),
        g.scalar_leaf(pose.theta),
    ];
    let nodes = measure_nodes(&mut g, params, &binding, radar_bev, map.clone(), pn, grid, cfg)?;
    Ok(extract_measurement(&g, &nodes, grid))
}

/// Read plain values out of a measurement's graph nodes.
pub fn extract_measurement(g: &Graph, nodes: &MeasurementNodes, grid: &OffsetGrid) -> Measurement {
    let volume = g
        .value(nodes.volume)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    let mut sig = nalgebra::Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            sig[(i, j)] = g.scalar_value(nodes.sigma[i][j]);
        }
    }
    Measurement {
        z: Pose2::new(
            g.scalar_value(nodes.z[0]),
            g.scalar_value(nodes.z[1]),
            g.scalar_value(nodes.z[2]),
        ),
        sigma_o: Covariance3(sig),
        volume: CostVolume {
            values: volume,
            grid: grid.clone(),
        },
        offset: Offset::new(
            g.scalar_value(nodes.offset[0]),
            g.scalar_value(nodes.offset[1]),
            g.scalar_value(nodes.offset[2]),
        ),
    }
}

pub fn marginals_of(volume: &CostVolume) -> Marginals {
    let mut g = Graph::new();
    let v = g.leaf(volume.values.clone().into_dyn());
    let m = marginals(&mut g, v);
    Marginals {
        px: g.value(m[0]).iter().cloned().collect(),
        py: g.value(m[1]).iter().cloned().collect(),
        ptheta: g.value(m[2]).iter().cloned().collect(),
    }
}

/// Large-offset search: tile the big space with sub-space centers, run the
/// measurement model at each center, and pick the refined candidate whose
/// warped map embedding best matches the radar embedding.
pub fn coarse_localize(
    params: &ModelParams,
    radar_bev: &BevImage,
    map: &Arc<GridMap>,
    pose: Pose2,
    big_limits: (f64, f64, f64),
    sub_grid: &OffsetGrid,
    cfg: &MeasureConfig,
) -> Result<Offset, PipelineError> {
    let centers = tile_centers(big_limits, sub_grid.limits)?;
    let mut best: Option<(f64, Offset)> = None;
    for &center in &centers {
        let tile_pose = boxplus(pose, center);
        if !within_coverage(map, tile_pose) {
            continue;
        }
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let pn = [
            g.scalar_leaf(tile_pose.x),
            g.scalar_leaf(tile_pose.y),
            g.scalar_leaf(tile_pose.theta),
        ];
        let nodes = measure_nodes(
            &mut g,
            params,
            &binding,
            radar_bev,
            map.clone(),
            pn,
            sub_grid,
            cfg,
        )?;
        let refined = Offset::new(
            g.scalar_value(nodes.offset[0]),
            g.scalar_value(nodes.offset[1]),
            g.scalar_value(nodes.offset[2]),
        );
        // embedding-subtraction similarity at the refined alignment
        let er = g
            .value(nodes.embed_radar)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let el = g
            .value(nodes.embed_map)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let warped = crate::bev::warp_by_offset(&el, refined, cfg.resolution);
        let dissim = (&er - &warped).mapv(f64::abs).mean().unwrap();
        let answer = boxminus(boxplus(tile_pose, refined), pose);
        match best {
            Some((d, _)) if d <= dissim => {}
            _ => best = Some((dissim, answer)),
        }
    }
    best.map(|(_, o)| o).ok_or_else(|| {
        PipelineError::numerical("coarse_localize", "no tile center within map coverage")
    })
}

/// Sub-space centers tiling [-big, big] per axis; requires big to be an odd
/// integer multiple of the sub-grid limit.
pub fn tile_centers(
    big: (f64, f64, f64),
    sub: (f64, f64, f64),
) -> Result<Vec<Offset>, ConfigError> {
    let per_axis = |b: f64, s: f64| -> Result<Vec<f64>, ConfigError> {
        if !(s > 0.0) || !(b > 0.0) {
            return Err(ConfigError::new("tile limits must be positive"));
        }
        let m = b / s;
        let mr = m.round();
        if (m - mr).abs() > 1e-9 || (mr as i64) % 2 != 1 {
            return Err(ConfigError::new(format!(
                "big limit {b} must be an odd integer multiple of sub limit {s}"
            )));
        }
        let n = mr as i64;
        Ok((0..n).map(|i| -b + s + (2 * i) as f64 * s).collect())
    };
    let xs = per_axis(big.0, sub.0)?;
    let ys = per_axis(big.1, sub.1)?;
    let ts = per_axis(big.2, sub.2)?;
    let mut out = Vec::with_capacity(xs.len() * ys.len() * ts.len());
    for &x in &xs {
        for &y in &ys {
            for &t in &ts {
                out.push(Offset::new(x, y, t));
            }
        }
    }
    Ok(out)
}

/// Leaf helper for tests and callers holding plain fields.
pub fn field_leaf(g: &mut Graph, field: &ndarray::Array2<f64>) -> NodeId {
    g.leaf(field.clone().into_dyn())
}

/// Convenience: plain ArrayD from a measurement's masked radar node.
pub fn node_array2(g: &Graph, id: NodeId) -> ndarray::Array2<f64> {
    g.value(id)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned()
}

pub fn scalar_arrayd(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}
