//! Dataset ingestion, two-stage training orchestration, and trajectory
//! evaluation metrics.
//!
//! Stage 1 trains the measurement model alone on randomly perturbed poses
//! with the classification + regression loss; stage 2 unrolls the filter
//! over short windows and minimizes the sequential likelihood loss through
//! it. Metrics mirror the standard global (RMSE / median) and sub-sequence
//! drift evaluation protocols.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{BevImage, GridMap};
use crate::error::{ConfigError, PipelineError};
use crate::filter::{
    state_of_nodes, track_sequence_nodes, FilterState, NoiseConfig,
};
use crate::graph::Graph;
use crate::losses::{
    loss_classification_nodes, loss_regression_nodes, loss_sequential_nodes,
    DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_SEQ_LEN,
};
use crate::measnet::{measure_nodes, MeasureConfig};
use crate::nn::{ArchConfig, ModelParams};
use crate::se2::{
    one_hot_targets, wrap_angle, Covariance3, Offset, OffsetGrid, Pose2,
};

// ---------------------------------------------------------------------------
// dataset types

/// One indexed dataset record: where the scan lives and where the robot was.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexRecord {
    pub timestamp: f64,
    pub scan_path: PathBuf,
    pub gt: Pose2,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Ordered index of a dataset directory: per-step records plus the map they
/// are localized against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub map_path: PathBuf,
    pub records: Vec<IndexRecord>,
}

impl DatasetIndex {
    /// Timestamps strictly increasing and every referenced file present.
    pub fn validate(&self) -> Result<(), PipelineError> {
        for w in self.records.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(PipelineError::numerical(
                    "dataset index",
                    format!(
                        "timestamps not strictly increasing: {} then {}",
                        w[0].timestamp, w[1].timestamp
                    ),
                ));
            }
        }
        if !self.map_path.exists() {
            return Err(PipelineError::MissingFile(self.map_path.clone()));
        }
        for r in &self.records {
            if !r.scan_path.exists() {
                return Err(PipelineError::MissingFile(r.scan_path.clone()));
            }
        }
        Ok(())
    }
}

/// One in-memory training sample: rasterized radar frame and its true pose.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub bev: BevImage,
    pub gt: Pose2,
    /// Map the sample localizes against; samples may come from different
    /// scenes.
    pub map: Arc<GridMap>,
}

/// One in-memory sequence for filter training: per-step controls, scans and
/// ground truth (all of length n), starting from `start`.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub start: Pose2,
    pub map: Arc<GridMap>,
    pub t0: f64,
    pub dt: f64,
    pub controls: Vec<Offset>,
    pub scans: Vec<BevImage>,
    pub gt: Vec<Pose2>,
}

// ---------------------------------------------------------------------------
// configuration

/// Everything the two training stages need, serializable into run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub grid_limits: (f64, f64, f64),
    pub grid_resolutions: (f64, f64, f64),
    pub image_h: usize,
    pub image_w: usize,
    pub image_resolution: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_seq: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub perturb_limits: (f64, f64, f64),
    /// Process-noise standard deviations per axis (m, m, rad).
    pub process_sigma: (f64, f64, f64),
    /// Initial belief standard deviations per axis (m, m, rad).
    pub initial_sigma: (f64, f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grid_limits: (1.0, 1.0, 0.1),
            grid_resolutions: (1.0, 1.0, 0.1),
            image_h: 64,
            image_w: 64,
            image_resolution: 0.5,
            temperature: 1.0,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            k_seq: DEFAULT_SEQ_LEN,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 4,
            epochs: 4,
            perturb_limits: (1.0, 1.0, 0.1),
            process_sigma: (0.05, 0.05, 0.01),
            initial_sigma: (0.5, 0.5, 0.1),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positives = [
            ("temperature", self.temperature),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("learning rate", self.learning_rate),
            ("image resolution", self.image_resolution),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(ConfigError::new(format!("{name} must be positive, got {v}")));
            }
        }
        if self.image_h == 0 || self.image_w == 0 || self.batch_size == 0 || self.k_seq == 0 {
            return Err(ConfigError::new(
                "image size, batch size and k_seq must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::new(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        let l = self.perturb_limits;
        let g = self.grid_limits;
        if l.0 > g.0 || l.1 > g.1 || l.2 > g.2 || l.0 < 0.0 || l.1 < 0.0 || l.2 < 0.0 {
            return Err(ConfigError::new(format!(
                "perturbation limits {l:?} must be nonnegative and within grid limits {g:?}"
            )));
        }
        for (name, s) in [
            ("process sigma", self.process_sigma),
            ("initial sigma", self.initial_sigma),
        ] {
            if !(s.0 > 0.0 && s.1 > 0.0 && s.2 > 0.0) {
                return Err(ConfigError::new(format!("{name} must be positive, got {s:?}")));
            }
        }
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<OffsetGrid, ConfigError> {
        OffsetGrid::build(self.grid_limits, self.grid_resolutions)
    }

    pub fn measure_config(&self) -> MeasureConfig {
        MeasureConfig {
            h: self.image_h,
            w: self.image_w,
            resolution: self.image_resolution,
            temperature: self.temperature,
        }
    }

    pub fn noise_config(&self) -> NoiseConfig {
        let p = self.process_sigma;
        let i = self.initial_sigma;
        NoiseConfig {
            sigma_m: Covariance3::diagonal(p.0 * p.0, p.1 * p.1, p.2 * p.2),
            initial_cov: Covariance3::diagonal(i.0 * i.0, i.1 * i.1, i.2 * i.2),
        }
    }
}

// ---------------------------------------------------------------------------
// perturbation sampling

/// Draw a uniform per-axis offset within `limits` and the perturbed pose
/// whose measurement should recover it: `boxplus(perturbed, target) == gt`.
pub fn sample_perturbations(
    gt: Pose2,
    limits: (f64, f64, f64),
    rng: &mut impl Rng,
) -> (Pose2, Offset) {
    let draw = |rng: &mut dyn rand::RngCore, l: f64| {
        if l > 0.0 {
            rng.gen_range(-l..=l)
        } else {
            0.0
        }
    };
    let target = Offset::new(
        draw(rng, limits.0),
        draw(rng, limits.1),
        draw(rng, limits.2),
    );
    // invert boxplus: the offset translation is rotated by gt.theta
    let (s, c) = gt.theta.sin_cos();
    let perturbed = Pose2::new(
        gt.x - (c * target.dx - s * target.dy),
        gt.y - (s * target.dx + c * target.dy),
        wrap_angle(gt.theta - target.dtheta),
    );
    (perturbed, target)
}

// ---------------------------------------------------------------------------
// optimizer

/// Stochastic gradient descent with classical momentum over named tensors.
struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) {
        for (name, g) in grads {
            let tensor = params
                .tensors
                .get_mut(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"));
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v *= self.momentum;
            *v += g;
            tensor.scaled_add(-lr, v);
        }
    }
}

/// Cosine-decayed learning rate over the whole run.
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Per-tensor gradients of a scalar root, keyed by parameter name.
fn collect_grads(
    g: &Graph,
    binding: &crate::nn::ParamBinding,
    root: crate::graph::NodeId,
) -> BTreeMap<String, ArrayD<f64>> {
    let all = g.backward(root);
    binding
        .ids
        .iter()
        .filter_map(|(name, id)| all[*id].clone().map(|gr| (name.clone(), gr)))
        .collect()
}

fn accumulate(into: &mut BTreeMap<String, ArrayD<f64>>, from: BTreeMap<String, ArrayD<f64>>) {
    for (name, g) in from {
        into.entry(name)
            .and_modify(|acc| *acc += &g)
            .or_insert(g);
    }
}

fn scale_grads(grads: &mut BTreeMap<String, ArrayD<f64>>, s: f64) {
    for g in grads.values_mut() {
        *g *= s;
    }
}

/// Global-norm gradient clipping. Sharp softmin temperatures scale gradients
/// by 1/tau; clipping keeps the step size meaningful across temperature
/// regimes instead of forcing the learning rate to compensate.
const GRAD_CLIP_NORM: f64 = 5.0;

fn clip_grads(grads: &mut BTreeMap<String, ArrayD<f64>>) {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > GRAD_CLIP_NORM {
        scale_grads(grads, GRAD_CLIP_NORM / norm);
    }
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(salt))
}

// ---------------------------------------------------------------------------
// training

/// Per-epoch record of a training run plus the resulting parameters.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    /// True when a non-finite loss aborted training; `params` is then the
    /// last finite checkpoint.
    pub aborted: bool,
    /// Stage-2 windows skipped because the filter could not be evaluated.
    pub skipped_windows: usize,
}

/// Stage-1 loss graph for one (sample, perturbation) pair. Returns the loss
/// node; the caller decides whether to backpropagate.
fn stage1_loss_graph(
    g: &mut Graph,
    params: &ModelParams,
    binding: &crate::nn::ParamBinding,
    sample: &Sample,
    perturbed: Pose2,
    target: Offset,
    grid: &OffsetGrid,
    mcfg: &MeasureConfig,
    alpha: f64,
) -> Result<crate::graph::NodeId, PipelineError> {
    let pose = [
        g.scalar_leaf(perturbed.x),
        g.scalar_leaf(perturbed.y),
        g.scalar_leaf(perturbed.theta),
    ];
    let nodes = measure_nodes(g, params, binding, &sample.bev, sample.map.clone(), pose, grid, mcfg)?;
    let targets = one_hot_targets(grid, target)?;
    let l1 = loss_classification_nodes(g, &nodes.marginals, &targets);
    let l2 = loss_regression_nodes(g, &nodes.offset, target, alpha);
    Ok(g.add(l1, l2))
}

/// Split sample indices into train and validation (10%, at least one when
/// there are at least two samples), deterministically per seed.
fn validation_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 17));
    let n_val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Train the measurement model alone on random pose perturbations with the
/// classification + regression loss. Deterministic per config seed.
pub fn train_stage1(
    samples: &[Sample],
    arch: ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(PipelineError::Shape("no training samples".into()));
    }
    let grid = cfg.grid()?;
    if grid.len() != arch.n_candidates {
        return Err(PipelineError::Shape(format!(
            "grid has {} candidates but the architecture expects {}",
            grid.len(),
            arch.n_candidates
        )));
    }
    let mcfg = cfg.measure_config();
    let mut params = ModelParams::init(arch, cfg.seed);
    let (train_idx, val_idx) = validation_split(samples.len(), cfg.seed);

    // fixed validation perturbations so epochs are comparable
    let mut val_rng = stream(cfg.seed, 23);
    let val_set: Vec<(usize, Pose2, Offset)> = val_idx
        .iter()
        .map(|&i| {
            let (p, t) = sample_perturbations(samples[i].gt, cfg.perturb_limits, &mut val_rng);
            (i, p, t)
        })
        .collect();

    let eval_val = |params: &ModelParams| -> Result<f64, PipelineError> {
        if val_set.is_empty() {
            return Ok(f64::NAN);
        }
        let mut acc = 0.0;
        for (i, p, t) in &val_set {
            let mut g = Graph::new();
            let binding = params.bind(&mut g);
            let loss = stage1_loss_graph(
                &mut g, params, &binding, &samples[*i], *p, *t, &grid, &mcfg, cfg.alpha,
            )?;
            acc += g.scalar_value(loss);
        }
        Ok(acc / val_set.len() as f64)
    };

    let mut report = TrainReport {
        params: params.clone(),
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        aborted: false,
        skipped_windows: 0,
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }

    let mut opt = Sgd::new(cfg.momentum);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    // Seed best-checkpoint selection with the pre-training validation loss so
    // an epoch that hurts can never leave us worse than where we started.
    let mut best_val = eval_val(&params)?;
    let mut best = params.clone();
    let mut best_epoch = 0usize;
    let mut checkpoint = params.clone();

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, 100 + epoch as u64));
        let mut perturb_rng = stream(cfg.seed, 200 + epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (p, t) =
                    sample_perturbations(samples[i].gt, cfg.perturb_limits, &mut perturb_rng);
                let mut g = Graph::new();
                let binding = params.bind(&mut g);
                let loss = stage1_loss_graph(
                    &mut g, &params, &binding, &samples[i], p, t, &grid, &mcfg, cfg.alpha,
                )?;
                let lv = g.scalar_value(loss);
                if !lv.is_finite() {
                    report.params = checkpoint;
                    report.aborted = true;
                    report.best_epoch = best_epoch;
                    return Ok(report);
                }
                batch_loss += lv;
                accumulate(&mut grads, collect_grads(&g, &binding, loss));
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            clip_grads(&mut grads);
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            opt.step(&mut params, &grads, lr);
            if !params.all_finite() {
                report.params = checkpoint;
                report.aborted = true;
                report.best_epoch = best_epoch;
                return Ok(report);
            }
            epoch_loss += batch_loss;
            epoch_count += batch.len();
            step += 1;
        }
        checkpoint = params.clone();
        report.train_loss.push(epoch_loss / epoch_count.max(1) as f64);
        let vl = eval_val(&params)?;
        report.val_loss.push(vl);
        if val_set.is_empty() || vl < best_val {
            best_val = vl;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    report.params = best;
    report.best_epoch = best_epoch;
    Ok(report)
}

/// One k_seq training window cut from a sequence.
struct Window<'a> {
    init: FilterState,
    map: &'a Arc<GridMap>,
    controls: &'a [Offset],
    scans: &'a [BevImage],
    gt: &'a [Pose2],
}

fn windows_of<'a>(seq: &'a SequenceData, k: usize, noise: &NoiseConfig) -> Vec<Window<'a>> {
    let n = seq.controls.len().min(seq.scans.len()).min(seq.gt.len());
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + k <= n {
        let init_pose = if start == 0 { seq.start } else { seq.gt[start - 1] };
        out.push(Window {
            map: &seq.map,
            init: FilterState::new(
                init_pose,
                noise.initial_cov,
                seq.t0 + start as f64 * seq.dt,
            ),
            controls: &seq.controls[start..start + k],
            scans: &seq.scans[start..start + k],
            gt: &seq.gt[start..start + k],
        });
        start += k;
    }
    out
}

/// Stage 2: unroll the filter over k_seq-step windows and minimize the
/// sequential likelihood loss end to end. Windows where the filter cannot
/// be evaluated are skipped and counted.
pub fn train_stage2(
    params: &ModelParams,
    sequences: &[SequenceData],
    cfg: &TrainConfig,
) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    if grid.len() != params.arch.n_candidates {
        return Err(PipelineError::Shape(format!(
            "grid has {} candidates but the architecture expects {}",
            grid.len(),
            params.arch.n_candidates
        )));
    }
    let mcfg = cfg.measure_config();
    let noise = cfg.noise_config();
    let all: Vec<Window> = sequences
        .iter()
        .flat_map(|s| windows_of(s, cfg.k_seq, &noise))
        .collect();
    if all.is_empty() {
        return Err(PipelineError::Shape(format!(
            "no {}-step windows available for stage-2 training",
            cfg.k_seq
        )));
    }
    let (train_idx, val_idx) = validation_split(all.len(), cfg.seed.wrapping_add(1));

    let window_loss = |params: &ModelParams,
                       w: &Window,
                       want_grads: bool|
     -> Result<(f64, BTreeMap<String, ArrayD<f64>>), PipelineError> {
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let states = track_sequence_nodes(
            &mut g, params, &binding, &w.init, w.controls, w.scans, w.map, &grid, &noise, &mcfg,
        )?;
        let steps: Vec<([crate::graph::NodeId; 3], [[crate::graph::NodeId; 3]; 3])> =
            states.iter().map(|s| (s.pose, s.cov)).collect();
        let loss = loss_sequential_nodes(&mut g, &steps, w.gt, cfg.beta)?;
        let lv = g.scalar_value(loss);
        let grads = if want_grads && lv.is_finite() {
            collect_grads(&g, &binding, loss)
        } else {
            BTreeMap::new()
        };
        // touch the states so intermediate posteriors stay inspectable
        let _ = state_of_nodes(&g, states.last().unwrap(), 0.0);
        Ok((lv, grads))
    };

    let mut out = params.clone();
    let mut report = TrainReport {
        params: out.clone(),
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        aborted: false,
        skipped_windows: 0,
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }

    let eval_val = |params: &ModelParams, skipped: &mut usize| -> f64 {
        if val_idx.is_empty() {
            return f64::NAN;
        }
        let mut acc = 0.0;
        let mut n = 0usize;
        for &i in &val_idx {
            match window_loss(params, &all[i], false) {
                Ok((lv, _)) if lv.is_finite() => {
                    acc += lv;
                    n += 1;
                }
                _ => *skipped += 1,
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            acc / n as f64
        }
    };

    let mut opt = Sgd::new(cfg.momentum);
    let total_steps = train_idx.len().max(1) * cfg.epochs;
    let mut step = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best = out.clone();
    let mut best_epoch = 0usize;
    let mut checkpoint = out.clone();

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, 300 + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for &i in &order {
            let (lv, grads) = match window_loss(&out, &all[i], true) {
                Ok(r) => r,
                Err(_) => {
                    report.skipped_windows += 1;
                    continue;
                }
            };
            if !lv.is_finite() {
                report.skipped_windows += 1;
                continue;
            }
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let mut grads = grads;
            clip_grads(&mut grads);
            opt.step(&mut out, &grads, lr);
            step += 1;
            if !out.all_finite() {
                report.params = checkpoint;
                report.aborted = true;
                report.best_epoch = best_epoch;
                return Ok(report);
            }
            epoch_loss += lv;
            epoch_count += 1;
        }
        checkpoint = out.clone();
        report
            .train_loss
            .push(epoch_loss / epoch_count.max(1) as f64);
        let vl = eval_val(&out, &mut report.skipped_windows);
        report.val_loss.push(vl);
        if val_idx.is_empty() || (vl.is_finite() && vl < best_val) {
            best_val = vl;
            best = out.clone();
            best_epoch = epoch;
        }
    }
    report.params = best;
    report.best_epoch = best_epoch;
    Ok(report)
}

// ---------------------------------------------------------------------------
// evaluation metrics

/// Global trajectory errors against ground truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AbsoluteErrors {
    pub rmse_trans: f64,
    pub rmse_rot_deg: f64,
    pub median_trans: f64,
    pub median_rot_deg: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-step Euclidean translation error and wrapped absolute heading error,
/// aggregated as RMSE and median.
pub fn absolute_errors(traj: &[Pose2], gt: &[Pose2]) -> Result<AbsoluteErrors, PipelineError> {
    if traj.len() != gt.len() || traj.is_empty() {
        return Err(PipelineError::Shape(format!(
            "trajectory length {} vs ground truth {}",
            traj.len(),
            gt.len()
        )));
    }
    let trans: Vec<f64> = traj
        .iter()
        .zip(gt)
        .map(|(a, b)| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt())
        .collect();
    let rot: Vec<f64> = traj
        .iter()
        .zip(gt)
        .map(|(a, b)| wrap_angle(a.theta - b.theta).abs().to_degrees())
        .collect();
    let rmse = |v: &[f64]| (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt();
    Ok(AbsoluteErrors {
        rmse_trans: rmse(&trans),
        rmse_rot_deg: rmse(&rot),
        median_trans: median(trans),
        median_rot_deg: median(rot),
    })
}

/// Sub-sequence drift averaged over the standard 100..800 m lengths.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DriftErrors {
    pub drift_trans_percent: f64,
    pub drift_rot_deg_per_m: f64,
    /// True when the trajectory was too short for some standard lengths.
    pub partial: bool,
}

/// Per-distance relative errors without cross-length averaging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistanceBinError {
    pub distance: f64,
    pub trans_percent: f64,
    pub rot_deg: f64,
}

/// Cumulative ground-truth travel distance per step.
fn cumulative_distance(gt: &[Pose2]) -> Vec<f64> {
    let mut d = Vec::with_capacity(gt.len());
    let mut acc = 0.0;
    d.push(0.0);
    for w in gt.windows(2) {
        acc += ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
        d.push(acc);
    }
    d
}

/// Relative motion of pose b expressed in pose a's frame.
fn relative_motion(a: Pose2, b: Pose2) -> (f64, f64, f64) {
    let (s, c) = a.theta.sin_cos();
    let ex = b.x - a.x;
    let ey = b.y - a.y;
    (
        c * ex + s * ey,
        -s * ex + c * ey,
        wrap_angle(b.theta - a.theta),
    )
}

/// End-pose error of one aligned sub-sequence: translation norm and wrapped
/// rotation magnitude of the relative-motion difference.
fn subsequence_error(traj: &[Pose2], gt: &[Pose2], start: usize, end: usize) -> (f64, f64) {
    let (tx, ty, tt) = relative_motion(traj[start], traj[end]);
    let (gx, gy, gt_t) = relative_motion(gt[start], gt[end]);
    let trans = ((tx - gx).powi(2) + (ty - gy).powi(2)).sqrt();
    let rot = wrap_angle(tt - gt_t).abs();
    (trans, rot)
}

/// All (start, end, length) sub-sequences of ground-truth travel `length`,
/// ends chosen as the first step reaching the target distance.
fn subsequences(cum: &[f64], length: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let mut end = 0usize;
    for start in 0..cum.len() {
        let target = cum[start] + length;
        if end <= start {
            end = start + 1;
        }
        while end < cum.len() && cum[end] < target {
            end += 1;
        }
        if end >= cum.len() {
            break;
        }
        out.push((start, end, cum[end] - cum[start]));
    }
    out
}

/// Average drift over the standard sub-sequence lengths (100, 200, ..,
/// 800 m), clipped to the available travel; translation in percent of the
/// length, rotation in degrees per meter.
pub fn kitti_relative_errors(traj: &[Pose2], gt: &[Pose2]) -> Result<DriftErrors, PipelineError> {
    if traj.len() != gt.len() || traj.len() < 2 {
        return Err(PipelineError::Shape(format!(
            "trajectory length {} vs ground truth {} (need at least 2)",
            traj.len(),
            gt.len()
        )));
    }
    let cum = cumulative_distance(gt);
    let lengths: Vec<f64> = (1..=8).map(|k| 100.0 * k as f64).collect();
    let mut trans_acc = 0.0;
    let mut rot_acc = 0.0;
    let mut n = 0usize;
    let mut partial = false;
    for &len in &lengths {
        let subs = subsequences(&cum, len);
        if subs.is_empty() {
            partial = true;
            continue;
        }
        for (start, end, actual) in subs {
            let (et, er) = subsequence_error(traj, gt, start, end);
            trans_acc += et / actual * 100.0;
            rot_acc += er.to_degrees() / actual;
            n += 1;
        }
    }
    if n == 0 {
        return Err(PipelineError::numerical(
            "relative errors",
            format!(
                "ground truth covers only {:.1} m, below the shortest sub-sequence length",
                cum.last().unwrap()
            ),
        ));
    }
    Ok(DriftErrors {
        drift_trans_percent: trans_acc / n as f64,
        drift_rot_deg_per_m: rot_acc / n as f64,
        partial,
    })
}

/// Relative errors per requested travel distance: mean translation error in
/// percent of the distance and mean rotation error in degrees. Distances
/// the trajectory cannot cover produce NaN bins.
pub fn relative_pose_errors(
    traj: &[Pose2],
    gt: &[Pose2],
    distances: &[f64],
) -> Result<Vec<DistanceBinError>, PipelineError> {
    if traj.len() != gt.len() || traj.len() < 2 {
        return Err(PipelineError::Shape(format!(
            "trajectory length {} vs ground truth {} (need at least 2)",
            traj.len(),
            gt.len()
        )));
    }
    let cum = cumulative_distance(gt);
    let mut out = Vec::with_capacity(distances.len());
    for &len in distances {
        if !(len > 0.0) {
            return Err(PipelineError::numerical(
                "relative errors",
                format!("distance bins must be positive, got {len}"),
            ));
        }
        let subs = subsequences(&cum, len);
        if subs.is_empty() {
            out.push(DistanceBinError {
                distance: len,
                trans_percent: f64::NAN,
                rot_deg: f64::NAN,
            });
            continue;
        }
        let mut trans_acc = 0.0;
        let mut rot_acc = 0.0;
        for &(start, end, actual) in &subs {
            let (et, er) = subsequence_error(traj, gt, start, end);
            trans_acc += et / actual * 100.0;
            rot_acc += er.to_degrees();
        }
        out.push(DistanceBinError {
            distance: len,
            trans_percent: trans_acc / subs.len() as f64,
            rot_deg: rot_acc / subs.len() as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se2::boxplus;
    use crate::bev::GridMap;
    use crate::nn::{ArchProfile, NET_MASK};
    use crate::se2::boxminus;
    use ndarray::Array2;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            profile: ArchProfile::Tiny,
            n_candidates: 27,
            patch_k: 2,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            grid_limits: (1.0, 1.0, 0.1),
            grid_resolutions: (1.0, 1.0, 0.1),
            image_h: 32,
            image_w: 32,
            image_resolution: 0.5,
            temperature: 1.0,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            k_seq: 2,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 4,
            epochs: 2,
            perturb_limits: (1.0, 1.0, 0.1),
            process_sigma: (0.05, 0.05, 0.01),
            initial_sigma: (0.5, 0.5, 0.1),
            seed: 7,
        }
    }

    /// Smooth structured map so the matcher has gradients to follow.
    fn smooth_map() -> Arc<GridMap> {
        let n = 96;
        let cells = Array2::from_shape_fn((n, n), |(i, j)| {
            let x = i as f64 * 0.23;
            let y = j as f64 * 0.31;
            0.5 + 0.25 * x.sin() + 0.25 * (y + 0.4 * x).cos()
        });
        Arc::new(GridMap::new(cells, 0.5, (-24.0, -24.0)))
    }

    fn map_samples(map: &Arc<GridMap>, poses: &[Pose2]) -> Vec<Sample> {
        poses
            .iter()
            .enumerate()
            .map(|(k, &p)| Sample {
                t: k as f64,
                bev: crate::bev::crop_at(map, p, 32, 32, 0.5),
                gt: p,
                map: map.clone(),
            })
            .collect()
    }

    // -- perturbation sampling ---------------------------------------------

    #[test]
    fn zero_limits_return_ground_truth() {
        let mut rng = stream(1, 1);
        let gt = Pose2::new(3.0, -2.0, 0.8);
        let (p, t) = sample_perturbations(gt, (0.0, 0.0, 0.0), &mut rng);
        assert_eq!(p, gt);
        assert_eq!(t, Offset::zero());
    }

    #[test]
    fn perturbation_satisfies_boxplus_identity() {
        let mut rng = stream(2, 1);
        for _ in 0..200 {
            let gt = Pose2::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-3.0..3.0),
            );
            let (p, t) = sample_perturbations(gt, (2.0, 2.0, 0.3), &mut rng);
            let back = boxplus(p, t);
            assert!((back.x - gt.x).abs() < 1e-9);
            assert!((back.y - gt.y).abs() < 1e-9);
            assert!(wrap_angle(back.theta - gt.theta).abs() < 1e-9);
            let o = boxminus(gt, p);
            assert!((o.dx - t.dx).abs() < 1e-9);
            assert!((o.dy - t.dy).abs() < 1e-9);
            assert!(wrap_angle(o.dtheta - t.dtheta).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbation_mean_magnitude_matches_uniform_moment() {
        // mean |U(-6, 6)| = 3 per axis; theta limit 6 degrees
        let limits = (6.0, 6.0, 6.0_f64.to_radians());
        let mut rng = stream(3, 1);
        let n = 10_000;
        let (mut sx, mut sy, mut st) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (_, t) = sample_perturbations(Pose2::identity(), limits, &mut rng);
            sx += t.dx.abs();
            sy += t.dy.abs();
            st += t.dtheta.abs().to_degrees();
        }
        let nf = n as f64;
        for mean in [sx / nf, sy / nf, st / nf] {
            assert!((mean - 3.0).abs() < 0.15, "mean |target| {mean}");
        }
    }

    // -- dataset index ------------------------------------------------------

    #[test]
    fn dataset_index_checks_order_and_files() {
        let dir = std::env::temp_dir().join(format!("radloc-index-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let map_path = dir.join("map.bin");
        let scan_path = dir.join("scan0.bin");
        std::fs::write(&map_path, b"x").unwrap();
        std::fs::write(&scan_path, b"x").unwrap();
        let rec = |t: f64| IndexRecord {
            timestamp: t,
            scan_path: scan_path.clone(),
            gt: Pose2::identity(),
            split: Split::Train,
        };
        let good = DatasetIndex {
            map_path: map_path.clone(),
            records: vec![rec(0.0), rec(1.0)],
        };
        good.validate().unwrap();
        let unordered = DatasetIndex {
            map_path: map_path.clone(),
            records: vec![rec(1.0), rec(1.0)],
        };
        assert!(unordered.validate().is_err());
        let mut missing = good.clone();
        missing.records[0].scan_path = dir.join("absent.bin");
        assert!(missing.validate().is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn config_rejects_perturbation_beyond_grid() {
        let mut cfg = tiny_cfg();
        cfg.perturb_limits = (2.0, 1.0, 0.1);
        assert!(cfg.validate().is_err());
        cfg.perturb_limits = (1.0, 1.0, 0.1);
        cfg.validate().unwrap();
    }

    // -- metrics ------------------------------------------------------------

    #[test]
    fn absolute_errors_zero_on_identical_trajectories() {
        let traj: Vec<Pose2> = (0..5).map(|k| Pose2::new(k as f64, 0.5, 0.1)).collect();
        let e = absolute_errors(&traj, &traj).unwrap();
        assert_eq!(e.rmse_trans, 0.0);
        assert_eq!(e.rmse_rot_deg, 0.0);
        assert_eq!(e.median_trans, 0.0);
        assert_eq!(e.median_rot_deg, 0.0);
    }

    #[test]
    fn absolute_errors_constant_offset_is_three_four_five() {
        let gt: Vec<Pose2> = (0..7).map(|k| Pose2::new(k as f64, 0.0, 0.0)).collect();
        let traj: Vec<Pose2> = gt.iter().map(|p| Pose2::new(p.x + 3.0, p.y + 4.0, 0.0)).collect();
        let e = absolute_errors(&traj, &gt).unwrap();
        assert!((e.rmse_trans - 5.0).abs() < 1e-12);
        assert!((e.median_trans - 5.0).abs() < 1e-12);
    }

    #[test]
    fn absolute_errors_single_step_rmse_equals_median() {
        let e = absolute_errors(&[Pose2::new(1.0, 1.0, 0.3)], &[Pose2::identity()]).unwrap();
        assert!((e.rmse_trans - e.median_trans).abs() < 1e-12);
        assert!((e.rmse_rot_deg - e.median_rot_deg).abs() < 1e-12);
    }

    #[test]
    fn absolute_errors_rejects_length_mismatch() {
        assert!(absolute_errors(&[Pose2::identity()], &[]).is_err());
    }

    fn straight_gt(n: usize, step: f64) -> Vec<Pose2> {
        (0..n).map(|k| Pose2::new(k as f64 * step, 0.0, 0.0)).collect()
    }

    #[test]
    fn relative_drift_zero_on_identical_trajectories() {
        let gt = straight_gt(901, 1.0);
        let d = kitti_relative_errors(&gt, &gt).unwrap();
        assert_eq!(d.drift_trans_percent, 0.0);
        assert_eq!(d.drift_rot_deg_per_m, 0.0);
        assert!(!d.partial);
    }

    #[test]
    fn relative_drift_matches_constructed_lateral_drift() {
        // 1% lateral drift per meter traveled, heading exact
        let gt = straight_gt(901, 1.0);
        let traj: Vec<Pose2> = gt.iter().map(|p| Pose2::new(p.x, 0.01 * p.x, 0.0)).collect();
        let d = kitti_relative_errors(&traj, &gt).unwrap();
        assert!((d.drift_trans_percent - 1.0).abs() < 0.1, "{}", d.drift_trans_percent);
        assert!(d.drift_rot_deg_per_m.abs() < 1e-9);
    }

    #[test]
    fn relative_drift_flags_short_trajectories() {
        let gt = straight_gt(151, 1.0);
        let d = kitti_relative_errors(&gt, &gt).unwrap();
        assert!(d.partial);
        let too_short = straight_gt(50, 1.0);
        assert!(kitti_relative_errors(&too_short, &too_short).is_err());
    }

    #[test]
    fn per_distance_bins_match_constructed_drift() {
        let gt = straight_gt(901, 1.0);
        let traj: Vec<Pose2> = gt.iter().map(|p| Pose2::new(p.x, 0.01 * p.x, 0.0)).collect();
        let bins = relative_pose_errors(&traj, &gt, &[100.0, 200.0, 400.0]).unwrap();
        for b in &bins {
            assert!((b.trans_percent - 1.0).abs() < 0.1, "bin {b:?}");
            assert!(b.rot_deg.abs() < 1e-9);
        }
        let empty_bin = relative_pose_errors(&traj, &gt, &[5000.0]).unwrap();
        assert!(empty_bin[0].trans_percent.is_nan());
    }

    #[test]
    fn metrics_invariant_to_global_rigid_transform() {
        let t = Pose2::new(5.0, -3.0, 0.8);
        let apply = |p: Pose2| {
            let (s, c) = t.theta.sin_cos();
            Pose2::new(
                t.x + c * p.x - s * p.y,
                t.y + s * p.x + c * p.y,
                wrap_angle(t.theta + p.theta),
            )
        };
        let mut rng = stream(9, 1);
        let gt: Vec<Pose2> = (0..40)
            .map(|k| Pose2::new(k as f64 * 4.0, (k as f64 * 0.3).sin(), 0.1 * (k % 5) as f64))
            .collect();
        let traj: Vec<Pose2> = gt
            .iter()
            .map(|p| {
                Pose2::new(
                    p.x + rng.gen_range(-0.5..0.5),
                    p.y + rng.gen_range(-0.5..0.5),
                    p.theta + rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let gt2: Vec<Pose2> = gt.iter().map(|&p| apply(p)).collect();
        let traj2: Vec<Pose2> = traj.iter().map(|&p| apply(p)).collect();
        let a = absolute_errors(&traj, &gt).unwrap();
        let b = absolute_errors(&traj2, &gt2).unwrap();
        assert!((a.rmse_trans - b.rmse_trans).abs() < 1e-9);
        assert!((a.rmse_rot_deg - b.rmse_rot_deg).abs() < 1e-9);
        let da = kitti_relative_errors(&traj, &gt).unwrap();
        let db = kitti_relative_errors(&traj2, &gt2).unwrap();
        assert!((da.drift_trans_percent - db.drift_trans_percent).abs() < 1e-9);
        assert!((da.drift_rot_deg_per_m - db.drift_rot_deg_per_m).abs() < 1e-9);
    }

    // -- training -----------------------------------------------------------

    #[test]
    fn zero_epochs_return_initialized_params() {
        let map = smooth_map();
        let poses = vec![Pose2::identity(), Pose2::new(2.0, 1.0, 0.2)];
        let samples = map_samples(&map, &poses);
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        let report = train_stage1(&samples, tiny_arch(), &cfg).unwrap();
        let init = ModelParams::init(tiny_arch(), cfg.seed);
        for (name, t) in &init.tensors {
            assert_eq!(t, &report.params.tensors[name], "{name} changed");
        }
        assert!(report.train_loss.is_empty());
    }

    #[test]
    fn stage1_validation_loss_does_not_regress() {
        let map = smooth_map();
        let mut rng = stream(11, 1);
        let poses: Vec<Pose2> = (0..20)
            .map(|_| {
                Pose2::new(
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-0.5..0.5),
                )
            })
            .collect();
        let samples = map_samples(&map, &poses);
        let mut cfg = tiny_cfg();
        cfg.epochs = 6;
        cfg.learning_rate = 0.01;
        cfg.temperature = 0.3;
        cfg.alpha = 0.01;
        let report = train_stage1(&samples, tiny_arch(), &cfg).unwrap();
        assert!(!report.aborted);
        assert_eq!(report.val_loss.len(), cfg.epochs);
        let first = report.val_loss[0];
        let best = report
            .val_loss
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(
            best <= first + 1e-9,
            "validation loss regressed: val {:?} train {:?}",
            report.val_loss,
            report.train_loss
        );
    }

    #[test]
    fn stage1_is_deterministic_per_seed() {
        let map = smooth_map();
        let poses = vec![
            Pose2::identity(),
            Pose2::new(3.0, -1.0, 0.3),
            Pose2::new(-4.0, 2.0, -0.4),
            Pose2::new(1.0, 5.0, 0.9),
        ];
        let samples = map_samples(&map, &poses);
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let a = train_stage1(&samples, tiny_arch(), &cfg).unwrap();
        let b = train_stage1(&samples, tiny_arch(), &cfg).unwrap();
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.val_loss, b.val_loss);
        for (name, t) in &a.params.tensors {
            assert_eq!(t, &b.params.tensors[name], "{name} differs across runs");
        }
    }

    #[test]
    fn stage2_updates_mask_parameters_through_filter() {
        let map = smooth_map();
        // 4-step sequence along the map's smooth field
        let gt: Vec<Pose2> = (0..=4).map(|k| Pose2::new(k as f64 * 0.8, 0.4, 0.1)).collect();
        let controls: Vec<Offset> = gt.windows(2).map(|w| boxminus(w[1], w[0])).collect();
        let scans: Vec<BevImage> = gt[1..]
            .iter()
            .map(|&p| crate::bev::crop_at(&map, p, 32, 32, 0.5))
            .collect();
        let seq = SequenceData {
            start: gt[0],
            map: map.clone(),
            t0: 0.0,
            dt: 1.0,
            controls,
            scans,
            gt: gt[1..].to_vec(),
        };
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.k_seq = 4;
        let init = ModelParams::init(tiny_arch(), cfg.seed);
        let report = train_stage2(&init, &[seq], &cfg).unwrap();
        assert!(!report.aborted);
        assert_eq!(report.skipped_windows, 0);
        let moved = init
            .tensors
            .iter()
            .filter(|(name, _)| name.starts_with(NET_MASK))
            .any(|(name, t)| t != &report.params.tensors[name]);
        assert!(moved, "no mask-network parameter changed in stage 2");
    }
}
