//! Network building blocks: the masking/embedding U-Nets and the patch
//! scoring network, with named parameter storage and initialization.
//!
//! Two architecture profiles exist: `Paper` (4-level U-Net with the
//! 8/16/32/64 channel plan, patch network of strided conv + batch-norm +
//! ReLU blocks) and `Tiny` (2-level, 4/8 channels) for desk-scale training
//! and tests.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::graph::{Conv2dSpec, Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchProfile {
    /// Appendix-table architecture: 4 encoder/decoder levels, 8/16/32/64
    /// channels, 4-block patch network.
    Paper,
    /// 2 levels, 4/8 channels, 2-block patch network with global averaging.
    Tiny,
}

/// Architecture descriptor; pinned into checkpoints so loading can reject
/// mismatched tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub profile: ArchProfile,
    /// Number of offset candidates (channel count of the patch network).
    pub n_candidates: usize,
    /// Patch grid side k; each patch is (H/k) x (W/k).
    pub patch_k: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvShape {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv(ConvShape),
    /// Per-channel norm; `true` normalizes over the batch axis too.
    Norm(usize, bool),
    Relu,
    Sigmoid,
    Pool,
    /// Upsample x2 then concatenate the encoder activation saved at level i.
    UpSkip(usize),
    /// Remember the current activation as encoder level i.
    Save(usize),
}

fn dnet(layers: &mut Vec<Layer>, cin: usize, cmid: usize, cout: usize) {
    layers.push(Layer::Conv(ConvShape { cin, cout: cmid, k: 3, stride: 1, pad: 1 }));
    layers.push(Layer::Norm(cmid, false));
    layers.push(Layer::Relu);
    layers.push(Layer::Conv(ConvShape { cin: cmid, cout, k: 3, stride: 1, pad: 1 }));
    layers.push(Layer::Norm(cout, false));
    layers.push(Layer::Relu);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnetHead {
    /// Masking network: 1x1 conv + sigmoid, output in [0, 1].
    Mask,
    /// Embedding network: 3x3 conv + norm + ReLU, output nonnegative.
    Embed,
}

/// Shared U-Net trunk; the head differs per network.
fn unet_layers(profile: ArchProfile, head: UnetHead) -> Vec<Layer> {
    let mut l = Vec::new();
    let base = match profile {
        ArchProfile::Paper => {
            dnet(&mut l, 1, 8, 8);
            l.push(Layer::Save(0));
            l.push(Layer::Pool);
            dnet(&mut l, 8, 16, 16);
            l.push(Layer::Save(1));
            l.push(Layer::Pool);
            dnet(&mut l, 16, 32, 32);
            l.push(Layer::Save(2));
            l.push(Layer::Pool);
            dnet(&mut l, 32, 64, 64);
            l.push(Layer::Save(3));
            l.push(Layer::Pool);
            dnet(&mut l, 64, 64, 64);
            l.push(Layer::UpSkip(3));
            dnet(&mut l, 128, 64, 32);
            l.push(Layer::UpSkip(2));
            dnet(&mut l, 64, 32, 16);
            l.push(Layer::UpSkip(1));
            dnet(&mut l, 32, 16, 8);
            l.push(Layer::UpSkip(0));
            dnet(&mut l, 16, 8, 8);
            8
        }
        ArchProfile::Tiny => {
            dnet(&mut l, 1, 4, 4);
            l.push(Layer::Save(0));
            l.push(Layer::Pool);
            dnet(&mut l, 4, 8, 8);
            l.push(Layer::UpSkip(0));
            dnet(&mut l, 12, 8, 4);
            4
        }
    };
    match head {
        UnetHead::Mask => {
            l.push(Layer::Conv(ConvShape { cin: base, cout: 1, k: 1, stride: 1, pad: 0 }));
            l.push(Layer::Sigmoid);
        }
        UnetHead::Embed => {
            l.push(Layer::Conv(ConvShape { cin: base, cout: 1, k: 3, stride: 1, pad: 1 }));
            l.push(Layer::Norm(1, false));
            l.push(Layer::Relu);
        }
    }
    l
}

/// Patch scoring network: consumes all candidate channels jointly, one
/// scalar per candidate per patch (patches ride on the batch axis).
fn patchnet_layers(profile: ArchProfile, n: usize) -> Vec<Layer> {
    let mut l = Vec::new();
    match profile {
        ArchProfile::Paper => {
            for _ in 0..3 {
                l.push(Layer::Conv(ConvShape { cin: n, cout: n, k: 4, stride: 2, pad: 1 }));
                l.push(Layer::Norm(n, true));
                l.push(Layer::Relu);
            }
            l.push(Layer::Conv(ConvShape { cin: n, cout: n, k: 4, stride: 1, pad: 0 }));
            l.push(Layer::Norm(n, true));
            l.push(Layer::Relu);
        }
        ArchProfile::Tiny => {
            for _ in 0..2 {
                l.push(Layer::Conv(ConvShape { cin: n, cout: n, k: 4, stride: 4, pad: 0 }));
                l.push(Layer::Norm(n, true));
                l.push(Layer::Relu);
            }
        }
    }
    l
}

pub const NET_MASK: &str = "mask";
pub const NET_RADAR: &str = "embed_radar";
pub const NET_MAP: &str = "embed_map";
pub const NET_PATCH: &str = "patch";

fn net_layers(arch: &ArchConfig, net: &str) -> Vec<Layer> {
    match net {
        NET_MASK => unet_layers(arch.profile, UnetHead::Mask),
        NET_RADAR | NET_MAP => unet_layers(arch.profile, UnetHead::Embed),
        NET_PATCH => patchnet_layers(arch.profile, arch.n_candidates),
        _ => panic!("unknown network {net}"),
    }
}

/// All learnable tensors of the four sub-networks, keyed by name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ModelParams {
    /// Deterministic-per-seed initialization with a useful starting point:
    ///
    /// - The two embedding networks draw from the same random stream, so the
    ///   sensor and map embeddings start as identical functions and a zero
    ///   offset already yields the smallest embedding difference.
    /// - The patch network's convolutions start diagonal-dominant (per-channel
    ///   averaging plus small noise), so each candidate's initial score is
    ///   approximately the mean rectified embedding difference — a one-sided
    ///   template-matching cost that trains into a learned one.
    /// - The masking head's final bias starts positive so the mask begins
    ///   near pass-through instead of suppressing everything at random.
    /// - Batch-normalizing layers carry trainable stored statistics
    ///   (`mean` starts at 0, `var` at 1), so they start as pure affine maps
    ///   and never mix information across candidates within a forward pass.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for net in [NET_MASK, NET_RADAR, NET_MAP, NET_PATCH] {
            let stream = match net {
                NET_MASK => 0,
                NET_RADAR | NET_MAP => 1,
                _ => 2,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut conv_idx = 0usize;
            let mut norm_idx = 0usize;
            let mut last_conv = 0usize;
            for layer in net_layers(&arch, net) {
                match layer {
                    Layer::Conv(cs) => {
                        let fan_in = (cs.cin * cs.k * cs.k) as f64;
                        let bound = 1.0 / fan_in.sqrt();
                        let noise = 0.02 * bound;
                        let mut w = ArrayD::from_shape_fn(
                            IxDyn(&[cs.cout, cs.cin, cs.k, cs.k]),
                            |_| rng.gen_range(-noise..noise),
                        );
                        let b = ArrayD::from_shape_fn(IxDyn(&[cs.cout]), |_| {
                            rng.gen_range(-noise..noise)
                        });
                        if net == NET_PATCH {
                            // Per-channel spatial averaging: each candidate's
                            // score starts as the mean rectified difference.
                            let avg = 1.0 / (cs.k * cs.k) as f64;
                            for m in 0..cs.cout.min(cs.cin) {
                                for i in 0..cs.k {
                                    for j in 0..cs.k {
                                        w[[m, m, i, j]] += avg;
                                    }
                                }
                            }
                        } else {
                            // Delta kernel: pass the input through, so the
                            // whole model starts as an approximate raw-pixel
                            // matcher instead of a random feature extractor.
                            for m in 0..cs.cout {
                                w[[m, m % cs.cin, cs.k / 2, cs.k / 2]] += 1.0;
                            }
                        }
                        tensors.insert(format!("{net}.conv{conv_idx}.weight"), w);
                        tensors.insert(format!("{net}.conv{conv_idx}.bias"), b);
                        last_conv = conv_idx;
                        conv_idx += 1;
                    }
                    Layer::Norm(c, over_batch) => {
                        tensors.insert(
                            format!("{net}.norm{norm_idx}.gamma"),
                            ArrayD::from_elem(IxDyn(&[c]), 1.0),
                        );
                        tensors.insert(
                            format!("{net}.norm{norm_idx}.beta"),
                            ArrayD::zeros(IxDyn(&[c])),
                        );
                        if over_batch {
                            tensors.insert(
                                format!("{net}.norm{norm_idx}.mean"),
                                ArrayD::zeros(IxDyn(&[c])),
                            );
                            tensors.insert(
                                format!("{net}.norm{norm_idx}.var"),
                                ArrayD::from_elem(IxDyn(&[c]), 1.0),
                            );
                        }
                        norm_idx += 1;
                    }
                    _ => {}
                }
            }
            if net == NET_MASK {
                tensors
                    .get_mut(&format!("{net}.conv{last_conv}.bias"))
                    .unwrap()
                    .fill(2.0);
            }
        }
        ModelParams { arch, tensors }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Load every tensor into a graph as a leaf; the binding maps names to
    /// node ids so gradients can be collected per tensor after backward.
    pub fn bind(&self, g: &mut Graph) -> ParamBinding {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
            .collect();
        ParamBinding { ids }
    }
}

#[derive(Debug, Clone)]
pub struct ParamBinding {
    pub ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Run one of the four sub-networks. Input is [N, C, H, W]; the result keeps
/// the layer list's output shape.
pub fn net_forward(
    g: &mut Graph,
    params: &ModelParams,
    binding: &ParamBinding,
    net: &str,
    input: NodeId,
) -> Result<NodeId, PipelineError> {
    let mut x = input;
    let mut saved: Vec<Option<NodeId>> = vec![None; 8];
    let mut conv_idx = 0usize;
    let mut norm_idx = 0usize;
    for layer in net_layers(&params.arch, net) {
        x = match layer {
            Layer::Conv(cs) => {
                let w = binding.id(&format!("{net}.conv{conv_idx}.weight"));
                let b = binding.id(&format!("{net}.conv{conv_idx}.bias"));
                conv_idx += 1;
                g.conv2d(x, w, b, Conv2dSpec { stride: cs.stride, pad: cs.pad })
            }
            Layer::Norm(_, over_batch) => {
                let gm = binding.id(&format!("{net}.norm{norm_idx}.gamma"));
                let bt = binding.id(&format!("{net}.norm{norm_idx}.beta"));
                if over_batch {
                    // Stored-statistic normalization: a per-channel affine map
                    // gamma * (x - mean) / sqrt(var + eps) + beta, with mean
                    // and var as trainable tensors. Using per-forward batch
                    // statistics here would standardize each candidate
                    // channel's scores, erasing the amplitude differences the
                    // score volume depends on.
                    let mean = binding.id(&format!("{net}.norm{norm_idx}.mean"));
                    let var = binding.id(&format!("{net}.norm{norm_idx}.var"));
                    norm_idx += 1;
                    let inv = g.rsqrt_eps(var, 1e-5);
                    let scale = g.mul(gm, inv);
                    let ms = g.mul(mean, scale);
                    let shift = g.sub(bt, ms);
                    g.chan_affine(x, scale, shift)
                } else {
                    norm_idx += 1;
                    g.chan_norm(x, gm, bt, over_batch)
                }
            }
            Layer::Relu => g.relu(x),
            Layer::Sigmoid => g.sigmoid(x),
            Layer::Pool => g.max_pool2(x),
            Layer::UpSkip(i) => {
                let up = g.upsample2(x);
                let skip = saved[i].expect("skip connection before save");
                g.concat_channels(skip, up)
            }
            Layer::Save(i) => {
                saved[i] = Some(x);
                x
            }
        };
        let val = g.value(x);
        if !val.iter().all(|v| v.is_finite()) {
            return Err(PipelineError::numerical(
                format!("{net} layer {conv_idx}/{norm_idx}"),
                "non-finite activation",
            ));
        }
    }
    Ok(x)
}

/// Minimum input side for which the patch network's conv stack is valid.
pub fn patch_input_side(profile: ArchProfile) -> usize {
    match profile {
        ArchProfile::Paper => 32,
        ArchProfile::Tiny => 16,
    }
}
