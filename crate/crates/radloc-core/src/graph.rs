//! A small reverse-mode automatic differentiation engine over f64 tensors.
//!
//! Nodes live in a flat tape; every operation records its parents and enough
//! data to replay the backward pass. The op set is exactly what the
//! measurement network and the differentiable filter need: convolutions,
//! normalization, pooling, bilinear warps/crops, softmax, and scalar algebra
//! for the 3x3 filter equations.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

use crate::bev::{pixel_to_robot, warp_source_pixel, GridMap};
use crate::se2::Offset;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    Recip(NodeId),
    RsqrtEps(NodeId, f64),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogClamped(NodeId, f64),
    MaxConst(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis0(NodeId),
    MeanSpatial(NodeId),
    Reshape(NodeId),
    ConcatC(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: Conv2dSpec,
    },
    MaxPool2(NodeId),
    Upsample2(NodeId),
    ChanNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        over_batch: bool,
        eps: f64,
    },
    ChanAffine {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    Softmax(NodeId),
    SumAxes3 {
        input: NodeId,
        keep: usize,
    },
    DotConst {
        input: NodeId,
        weights: Vec<f64>,
    },
    BatchWarp {
        input: NodeId,
        offsets: Vec<Offset>,
        resolution: f64,
    },
    PatchExtract {
        input: NodeId,
        k: usize,
    },
    SubBroadcast0 {
        single: NodeId,
        stack: NodeId,
    },
    CropAt {
        pose: [NodeId; 3],
        map: std::sync::Arc<GridMap>,
        h: usize,
        w: usize,
        resolution: f64,
    },
    WrapAngle(NodeId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        *self.nodes[id].value.first().expect("scalar node")
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.push(scalar(v), Op::Leaf)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| c * x);
        self.push(v, Op::ScaleConst(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    /// Elementwise 1 / sqrt(x + eps).
    pub fn rsqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (x + eps).sqrt());
        self.push(v, Op::RsqrtEps(a, eps))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_clamped(&mut self, a: NodeId, min: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(min).ln());
        self.push(v, Op::LogClamped(a, min))
    }

    /// Elementwise max(x, c); gradient passes only where x > c.
    pub fn max_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(c));
        self.push(v, Op::MaxConst(a, c))
    }

    pub fn wrap_angle(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(crate::se2::wrap_angle);
        self.push(v, Op::WrapAngle(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = scalar(self.nodes[a].value.sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = scalar(self.nodes[a].value.mean().unwrap());
        self.push(v, Op::Mean(a))
    }

    /// Mean over the leading axis.
    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mean_axis(Axis(0)).unwrap();
        self.push(v, Op::MeanAxis0(a))
    }

    /// [N, C, H, W] -> [N, C]: spatial mean per channel.
    pub fn mean_spatial(&mut self, a: NodeId) -> NodeId {
        let val = &self.nodes[a].value;
        let shape = val.shape().to_vec();
        assert_eq!(shape.len(), 4);
        let v4 = val.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = Array2::<f64>::zeros((shape[0], shape[1]));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                out[(n, c)] = v4.index_axis(Axis(0), n).index_axis(Axis(0), c).mean().unwrap();
            }
        }
        self.push(out.into_dyn(), Op::MeanSpatial(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Concatenate two [N, C, H, W] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let v = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
        self.push(v, Op::ConcatC(a, b))
    }

    /// Broadcast-multiply a tensor by a scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let v = self.nodes[a].value.mapv(|x| x * sv);
        self.push(v, Op::MulScalar(a, s))
    }

    /// Weighted sum of a vector with constant weights -> scalar.
    pub fn dot_const(&mut self, a: NodeId, weights: &[f64]) -> NodeId {
        let val = &self.nodes[a].value;
        assert_eq!(val.len(), weights.len());
        let v: f64 = val.iter().zip(weights).map(|(x, w)| x * w).sum();
        self.push(
            scalar(v),
            Op::DotConst {
                input: a,
                weights: weights.to_vec(),
            },
        )
    }

    // ---- neural network ops ----

    /// 2-D convolution, input [N, C, H, W], weight [O, C, k, k], bias [O].
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, spec: Conv2dSpec) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let wt = self.nodes[weight]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let b = self.nodes[bias]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let out = conv2d_forward(&x, &wt, &b, spec);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        )
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for di in 0..2 {
                            for dj in 0..2 {
                                m = m.max(x[(ni, ci, 2 * i + di, 2 * j + dj)]);
                            }
                        }
                        out[(ni, ci, i, j)] = m;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2(input))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out[(ni, ci, i, j)] = x[(ni, ci, i / 2, j / 2)];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2(input))
    }

    /// Per-channel normalization with learnable scale/shift.
    ///
    /// `over_batch = false` normalizes each (n, c) slice over its spatial
    /// extent (instance norm); `true` normalizes per channel over the whole
    /// batch (batch norm, always in normalization mode).
    pub fn chan_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        over_batch: bool,
    ) -> NodeId {
        let eps = 1e-5;
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let g = self.nodes[gamma].value.clone();
        let bt = self.nodes[beta].value.clone();
        let out = chan_norm_forward(&x, &g, &bt, over_batch, eps);
        self.push(
            out.into_dyn(),
            Op::ChanNorm {
                input,
                gamma,
                beta,
                over_batch,
                eps,
            },
        )
    }

    /// Per-channel affine transform of a [N, C, H, W] tensor:
    /// y[n, c, h, w] = x[n, c, h, w] * scale[c] + shift[c].
    pub fn chan_affine(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let sc = self.nodes[scale].value.clone();
        let sh = self.nodes[shift].value.clone();
        let mut out = x;
        for c in 0..out.shape()[1] {
            let (s, b) = (sc[[c]], sh[[c]]);
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s + b);
        }
        self.push(
            out.into_dyn(),
            Op::ChanAffine {
                input,
                scale,
                shift,
            },
        )
    }

    /// Numerically stable softmax over a 1-D vector.
    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input].value;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = x.mapv(|v| (v - m).exp());
        let s = e.sum();
        self.push(e.mapv(|v| v / s), Op::Softmax(input))
    }

    /// Marginalize a [a, b, c] volume down to the kept axis.
    pub fn sum_axes3(&mut self, input: NodeId, keep: usize) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let dims = [x.dim().0, x.dim().1, x.dim().2];
        let mut out = Array1::<f64>::zeros(dims[keep]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let idx = [i, j, k][keep];
                    out[idx] += x[(i, j, k)];
                }
            }
        }
        self.push(out.into_dyn(), Op::SumAxes3 { input, keep })
    }

    /// Warp a [H, W] field by every offset; output [M, H, W].
    pub fn batch_warp(&mut self, input: NodeId, offsets: &[Offset], resolution: f64) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let (h, w) = x.dim();
        let mut out = ndarray::Array3::<f64>::zeros((offsets.len(), h, w));
        for (m, &off) in offsets.iter().enumerate() {
            out.index_axis_mut(Axis(0), m)
                .assign(&crate::bev::warp_by_offset(&x, off, resolution));
        }
        self.push(
            out.into_dyn(),
            Op::BatchWarp {
                input,
                offsets: offsets.to_vec(),
                resolution,
            },
        )
    }

    /// out[m] = single - stack[m]; single is [H, W], stack is [M, H, W].
    pub fn sub_broadcast0(&mut self, single: NodeId, stack: NodeId) -> NodeId {
        let s = self.nodes[single]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let st = self.nodes[stack]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut out = st.mapv(|v| -v);
        for mut lane in out.axis_iter_mut(Axis(0)) {
            lane += &s;
        }
        self.push(out.into_dyn(), Op::SubBroadcast0 { single, stack })
    }

    /// Split a [M, H, W] stack into k*k tiles: output [k*k, M, H/k, W/k],
    /// tiles enumerated row-major.
    pub fn patch_extract(&mut self, input: NodeId, k: usize) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let (m, h, w) = x.dim();
        assert!(h % k == 0 && w % k == 0);
        let (ph, pw) = (h / k, w / k);
        let mut out = Array4::<f64>::zeros((k * k, m, ph, pw));
        for pi in 0..k {
            for pj in 0..k {
                for mi in 0..m {
                    for i in 0..ph {
                        for j in 0..pw {
                            out[(pi * k + pj, mi, i, j)] = x[(mi, pi * ph + i, pj * pw + j)];
                        }
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::PatchExtract { input, k })
    }

    /// Differentiable map crop: output [H, W], parents are the three pose
    /// scalars (x, y, theta). Gradients flow into the pose via the bilinear
    /// spatial derivative of the map.
    pub fn crop_at(
        &mut self,
        map: std::sync::Arc<GridMap>,
        pose: [NodeId; 3],
        h: usize,
        w: usize,
        resolution: f64,
    ) -> NodeId {
        let p = crate::se2::Pose2 {
            x: self.scalar_value(pose[0]),
            y: self.scalar_value(pose[1]),
            theta: self.scalar_value(pose[2]),
        };
        let img = crate::bev::crop_at(&map, p, h, w, resolution);
        self.push(
            img.pixels.into_dyn(),
            Op::CropAt {
                pose,
                map,
                h,
                w,
                resolution,
            },
        )
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar root. Returns one gradient slot per
    /// node (None where no gradient reached).
    pub fn backward(&self, root: NodeId) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accum(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        use Op::*;
        match &self.nodes[id].op {
            Leaf => {}
            Add(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.clone());
            }
            Sub(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.mapv(|x| -x));
            }
            Mul(a, b) => {
                Self::accum(grads, *a, g * &self.nodes[*b].value);
                Self::accum(grads, *b, g * &self.nodes[*a].value);
            }
            Neg(a) => Self::accum(grads, *a, g.mapv(|x| -x)),
            ScaleConst(a, c) => Self::accum(grads, *a, g.mapv(|x| c * x)),
            AddConst(a) => Self::accum(grads, *a, g.clone()),
            Recip(a) => {
                let v = &self.nodes[*a].value;
                Self::accum(grads, *a, g * &v.mapv(|x| -1.0 / (x * x)));
            }
            RsqrtEps(a, eps) => {
                let v = &self.nodes[*a].value;
                let eps = *eps;
                Self::accum(
                    grads,
                    *a,
                    g * &v.mapv(|x| -0.5 * (x + eps).powf(-1.5)),
                );
            }
            Sin(a) => {
                let v = &self.nodes[*a].value;
                Self::accum(grads, *a, g * &v.mapv(f64::cos));
            }
            Cos(a) => {
                let v = &self.nodes[*a].value;
                Self::accum(grads, *a, g * &v.mapv(|x| -x.sin()));
            }
            Relu(a) => {
                let v = &self.nodes[*a].value;
                Self::accum(grads, *a, g * &v.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            }
            Sigmoid(a) => {
                let y = &self.nodes[id].value;
                Self::accum(grads, *a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            LogClamped(a, min) => {
                let v = &self.nodes[*a].value;
                let min = *min;
                Self::accum(
                    grads,
                    *a,
                    g * &v.mapv(|x| if x > min { 1.0 / x } else { 0.0 }),
                );
            }
            MaxConst(a, c) => {
                let v = &self.nodes[*a].value;
                let c = *c;
                Self::accum(grads, *a, g * &v.mapv(|x| if x > c { 1.0 } else { 0.0 }));
            }
            WrapAngle(a) => Self::accum(grads, *a, g.clone()),
            Sum(a) => {
                let gv = *g.first().unwrap();
                Self::accum(grads, *a, self.nodes[*a].value.mapv(|_| gv));
            }
            Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let gv = *g.first().unwrap() / n;
                Self::accum(grads, *a, self.nodes[*a].value.mapv(|_| gv));
            }
            MeanAxis0(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let n0 = shape[0] as f64;
                let mut ga = ArrayD::<f64>::zeros(IxDyn(&shape));
                for mut lane in ga.axis_iter_mut(Axis(0)) {
                    lane.assign(&g.mapv(|x| x / n0));
                }
                Self::accum(grads, *a, ga);
            }
            MeanSpatial(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let hw = (shape[2] * shape[3]) as f64;
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut ga = Array4::<f64>::zeros((shape[0], shape[1], shape[2], shape[3]));
                for n in 0..shape[0] {
                    for c in 0..shape[1] {
                        let gv = g2[(n, c)] / hw;
                        ga.index_axis_mut(Axis(0), n)
                            .index_axis_mut(Axis(0), c)
                            .fill(gv);
                    }
                }
                Self::accum(grads, *a, ga.into_dyn());
            }
            Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                Self::accum(grads, *a, g.clone().into_shape(IxDyn(&shape)).unwrap());
            }
            ConcatC(a, b) => {
                let ca = self.nodes[*a].value.shape()[1];
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
                Self::accum(grads, *a, ga);
                Self::accum(grads, *b, gb);
            }
            MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                Self::accum(grads, *a, g.mapv(|x| x * sv));
                let ds: f64 = (g * &self.nodes[*a].value).sum();
                Self::accum(grads, *s, scalar(ds));
            }
            DotConst { input, weights } => {
                let gv = *g.first().unwrap();
                let ga = Array1::from_iter(weights.iter().map(|w| w * gv));
                Self::accum(grads, *input, ga.into_dyn());
            }
            Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.nodes[*input]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let wt = self.nodes[*weight]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let go = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (gx, gw, gb) = conv2d_backward(&x, &wt, &go, *spec);
                Self::accum(grads, *input, gx.into_dyn());
                Self::accum(grads, *weight, gw.into_dyn());
                Self::accum(grads, *bias, gb.into_dyn());
            }
            MaxPool2(a) => {
                let x = self.nodes[*a]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let go = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (n, c, h, w) = x.dim();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h / 2 {
                            for j in 0..w / 2 {
                                let mut best = (0, 0);
                                let mut m = f64::NEG_INFINITY;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        let v = x[(ni, ci, 2 * i + di, 2 * j + dj)];
                                        if v > m {
                                            m = v;
                                            best = (di, dj);
                                        }
                                    }
                                }
                                gx[(ni, ci, 2 * i + best.0, 2 * j + best.1)] += go[(ni, ci, i, j)];
                            }
                        }
                    }
                }
                Self::accum(grads, *a, gx.into_dyn());
            }
            Upsample2(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let go = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((shape[0], shape[1], shape[2], shape[3]));
                for ni in 0..shape[0] {
                    for ci in 0..shape[1] {
                        for i in 0..2 * shape[2] {
                            for j in 0..2 * shape[3] {
                                gx[(ni, ci, i / 2, j / 2)] += go[(ni, ci, i, j)];
                            }
                        }
                    }
                }
                Self::accum(grads, *a, gx.into_dyn());
            }
            ChanNorm {
                input,
                gamma,
                beta,
                over_batch,
                eps,
            } => {
                let x = self.nodes[*input]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let gm = &self.nodes[*gamma].value;
                let go = g.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
                let (gx, gg, gb) = chan_norm_backward(&x, gm, &go, *over_batch, *eps);
                Self::accum(grads, *input, gx.into_dyn());
                Self::accum(grads, *gamma, gg.into_dyn());
                Self::accum(grads, *beta, gb.into_dyn());
            }
            ChanAffine {
                input,
                scale,
                shift,
            } => {
                let x = self.nodes[*input]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let sc = &self.nodes[*scale].value;
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let c_count = x.shape()[1];
                let mut gx = g4.to_owned();
                let mut gs = ndarray::Array1::<f64>::zeros(c_count);
                let mut gb = ndarray::Array1::<f64>::zeros(c_count);
                for c in 0..c_count {
                    let s = sc[[c]];
                    gx.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s);
                    let gc = g4.index_axis(Axis(1), c);
                    let xc = x.index_axis(Axis(1), c);
                    gs[c] = (&gc.to_owned() * &xc).sum();
                    gb[c] = gc.sum();
                }
                Self::accum(grads, *input, gx.into_dyn());
                Self::accum(grads, *scale, gs.into_dyn());
                Self::accum(grads, *shift, gb.into_dyn());
            }
            Softmax(a) => {
                let y = &self.nodes[id].value;
                let dot: f64 = (g * y).sum();
                Self::accum(grads, *a, y * &g.mapv(|x| x) - y.mapv(|v| v * dot));
            }
            SumAxes3 { input, keep } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = ndarray::Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
                for i in 0..shape[0] {
                    for j in 0..shape[1] {
                        for k in 0..shape[2] {
                            gx[(i, j, k)] = g1[[i, j, k][*keep]];
                        }
                    }
                }
                Self::accum(grads, *input, gx.into_dyn());
            }
            BatchWarp {
                input,
                offsets,
                resolution,
            } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let (h, w) = (shape[0], shape[1]);
                let go = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut gx = Array2::<f64>::zeros((h, w));
                for (m, &off) in offsets.iter().enumerate() {
                    for i in 0..h {
                        for j in 0..w {
                            let gv = go[(m, i, j)];
                            if gv == 0.0 {
                                continue;
                            }
                            let (si, sj) =
                                warp_source_pixel(i as f64, j as f64, h, w, off, *resolution);
                            scatter_bilinear(&mut gx, si, sj, gv);
                        }
                    }
                }
                Self::accum(grads, *input, gx.into_dyn());
            }
            SubBroadcast0 { single, stack } => {
                let gs = g.sum_axis(Axis(0));
                Self::accum(grads, *single, gs);
                Self::accum(grads, *stack, g.mapv(|x| -x));
            }
            PatchExtract { input, k } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let (m, h, w) = (shape[0], shape[1], shape[2]);
                let (ph, pw) = (h / k, w / k);
                let go = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx = ndarray::Array3::<f64>::zeros((m, h, w));
                for pi in 0..*k {
                    for pj in 0..*k {
                        for mi in 0..m {
                            for i in 0..ph {
                                for j in 0..pw {
                                    gx[(mi, pi * ph + i, pj * pw + j)] +=
                                        go[(pi * k + pj, mi, i, j)];
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, *input, gx.into_dyn());
            }
            CropAt {
                pose,
                map,
                h,
                w,
                resolution,
            } => {
                let px = self.scalar_value(pose[0]);
                let py = self.scalar_value(pose[1]);
                let th = self.scalar_value(pose[2]);
                let go = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (s, c) = th.sin_cos();
                let (ms, mc) = map.theta.sin_cos();
                let inv_res = 1.0 / map.resolution;
                let mut gp = [0.0; 3];
                for i in 0..*h {
                    for j in 0..*w {
                        let gv = go[(i, j)];
                        if gv == 0.0 {
                            continue;
                        }
                        let (rx, ry) = pixel_to_robot(i as f64, j as f64, *h, *w, *resolution);
                        let wx = px + c * rx - s * ry;
                        let wy = py + s * rx + c * ry;
                        let (ci, cj) = map.world_to_cell(wx, wy);
                        let (d_di, d_dj) = bilinear_spatial_grad(&map.cells, ci, cj);
                        // chain: cell coords to world
                        // cj = ( mc*ex + ms*ey)/res, ci = (-ms*ex + mc*ey)/res
                        let dv_dwx = (d_dj * mc - d_di * ms) * inv_res;
                        let dv_dwy = (d_dj * ms + d_di * mc) * inv_res;
                        gp[0] += gv * dv_dwx;
                        gp[1] += gv * dv_dwy;
                        let dwx_dth = -s * rx - c * ry;
                        let dwy_dth = c * rx - s * ry;
                        gp[2] += gv * (dv_dwx * dwx_dth + dv_dwy * dwy_dth);
                    }
                }
                for (axis, pid) in pose.iter().enumerate() {
                    Self::accum(grads, *pid, scalar(gp[axis]));
                }
            }
        }
    }
}

/// Gradient of `bilinear(img, i, j)` with respect to (i, j).
fn bilinear_spatial_grad(img: &Array2<f64>, i: f64, j: f64) -> (f64, f64) {
    let (h, w) = img.dim();
    let i0 = i.floor();
    let j0 = j.floor();
    let fi = i - i0;
    let fj = j - j0;
    let at = |ii: f64, jj: f64| -> f64 {
        if ii >= 0.0 && jj >= 0.0 && (ii as usize) < h && (jj as usize) < w {
            img[(ii as usize, jj as usize)]
        } else {
            0.0
        }
    };
    let v00 = at(i0, j0);
    let v01 = at(i0, j0 + 1.0);
    let v10 = at(i0 + 1.0, j0);
    let v11 = at(i0 + 1.0, j0 + 1.0);
    let d_di = (1.0 - fj) * (v10 - v00) + fj * (v11 - v01);
    let d_dj = (1.0 - fi) * (v01 - v00) + fi * (v11 - v10);
    (d_di, d_dj)
}

/// Scatter-add the bilinear sampling weights of position (i, j).
fn scatter_bilinear(img: &mut Array2<f64>, i: f64, j: f64, v: f64) {
    let (h, w) = img.dim();
    let i0 = i.floor();
    let j0 = j.floor();
    let fi = i - i0;
    let fj = j - j0;
    for (di, wi) in [(0.0, 1.0 - fi), (1.0, fi)] {
        for (dj, wj) in [(0.0, 1.0 - fj), (1.0, fj)] {
            let ii = i0 + di;
            let jj = j0 + dj;
            if ii >= 0.0 && jj >= 0.0 && (ii as usize) < h && (jj as usize) < w && wi * wj != 0.0 {
                img[(ii as usize, jj as usize)] += v * wi * wj;
            }
        }
    }
}

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// im2col: input [N, C, H, W] -> column matrix [C*k*k, N*OH*OW].
fn im2col(
    x: &ndarray::ArrayView4<f64>,
    k: usize,
    spec: Conv2dSpec,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * k * k, n * oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut col_row = col.row_mut(row);
                for ni in 0..n {
                    for oi in 0..oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            col_row[(ni * oh + oi) * ow + oj] =
                                x[(ni, ci, ii as usize, jj as usize)];
                        }
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward(
    x: &ndarray::ArrayView4<f64>,
    wt: &ndarray::ArrayView4<f64>,
    b: &ndarray::ArrayView1<f64>,
    spec: Conv2dSpec,
) -> Array4<f64> {
    let (n, _c, h, w) = x.dim();
    let (o, c2, k, _k2) = wt.dim();
    let oh = conv_out_dim(h, k, spec.stride, spec.pad);
    let ow = conv_out_dim(w, k, spec.stride, spec.pad);
    let col = im2col(x, k, spec, oh, ow);
    let wmat = wt
        .to_shape((o, c2 * k * k))
        .expect("contiguous weight")
        .to_owned();
    let out_mat = wmat.dot(&col); // [O, N*OH*OW]
    let mut out = Array4::<f64>::zeros((n, o, oh, ow));
    for oi in 0..o {
        let bias = b[oi];
        for ni in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    out[(ni, oi, i, j)] = out_mat[(oi, (ni * oh + i) * ow + j)] + bias;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &ndarray::ArrayView4<f64>,
    wt: &ndarray::ArrayView4<f64>,
    go: &ndarray::ArrayView4<f64>,
    spec: Conv2dSpec,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let (o, _c2, k, _) = wt.dim();
    let (_, _, oh, ow) = go.dim();
    // gradient as matrix [O, N*OH*OW]
    let mut go_mat = Array2::<f64>::zeros((o, n * oh * ow));
    let mut gb = Array1::<f64>::zeros(o);
    for oi in 0..o {
        for ni in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let v = go[(ni, oi, i, j)];
                    go_mat[(oi, (ni * oh + i) * ow + j)] = v;
                    gb[oi] += v;
                }
            }
        }
    }
    let col = im2col(x, k, spec, oh, ow);
    let gw_mat = go_mat.dot(&col.t()); // [O, C*k*k]
    let gw = gw_mat.into_shape((o, c, k, k)).unwrap();
    let wmat = wt.to_shape((o, c * k * k)).unwrap().to_owned();
    let gcol = wmat.t().dot(&go_mat); // [C*k*k, N*OH*OW]
    // col2im scatter-add
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for ni in 0..n {
                    for oi in 0..oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            gx[(ni, ci, ii as usize, jj as usize)] +=
                                gcol[(row, (ni * oh + oi) * ow + oj)];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn chan_norm_forward(
    x: &Array4<f64>,
    gamma: &ArrayD<f64>,
    beta: &ArrayD<f64>,
    over_batch: bool,
    eps: f64,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        let g = gamma[[ci]];
        let b = beta[[ci]];
        if over_batch {
            let lane = x.index_axis(Axis(1), ci);
            let mean = lane.mean().unwrap();
            let var = lane.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        out[(ni, ci, i, j)] = g * (x[(ni, ci, i, j)] - mean) * inv + b;
                    }
                }
            }
        } else {
            for ni in 0..n {
                let lane = x.index_axis(Axis(0), ni);
                let lane = lane.index_axis(Axis(0), ci);
                let mean = lane.mean().unwrap();
                let var = lane.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..h {
                    for j in 0..w {
                        out[(ni, ci, i, j)] = g * (x[(ni, ci, i, j)] - mean) * inv + b;
                    }
                }
            }
        }
    }
    out
}

fn chan_norm_backward(
    x: &Array4<f64>,
    gamma: &ArrayD<f64>,
    go: &Array4<f64>,
    over_batch: bool,
    eps: f64,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    let mut gg = Array1::<f64>::zeros(c);
    let mut gb = Array1::<f64>::zeros(c);
    // groups: (all n, one c) for batch mode; (one n, one c) for instance mode
    let groups: Vec<(Vec<usize>, usize)> = if over_batch {
        (0..c).map(|ci| ((0..n).collect(), ci)).collect()
    } else {
        (0..n)
            .flat_map(|ni| (0..c).map(move |ci| (vec![ni], ci)))
            .collect()
    };
    for (ns, ci) in groups {
        let g = gamma[[ci]];
        let m = (ns.len() * h * w) as f64;
        let mut mean = 0.0;
        for &ni in &ns {
            for i in 0..h {
                for j in 0..w {
                    mean += x[(ni, ci, i, j)];
                }
            }
        }
        mean /= m;
        let mut var = 0.0;
        for &ni in &ns {
            for i in 0..h {
                for j in 0..w {
                    let d = x[(ni, ci, i, j)] - mean;
                    var += d * d;
                }
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for &ni in &ns {
            for i in 0..h {
                for j in 0..w {
                    let xhat = (x[(ni, ci, i, j)] - mean) * inv;
                    let dy = go[(ni, ci, i, j)];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                    gg[ci] += dy * xhat;
                    gb[ci] += dy;
                }
            }
        }
        for &ni in &ns {
            for i in 0..h {
                for j in 0..w {
                    let xhat = (x[(ni, ci, i, j)] - mean) * inv;
                    let dy = go[(ni, ci, i, j)];
                    gx[(ni, ci, i, j)] =
                        g * inv * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
                }
            }
        }
    }
    (gx, gg, gb)
}
