//! The digit recognizer: convolutional stem, primary capsules, one
//! convolutional capsule layer, class capsules, and a reconstruction decoder.
//!
//! ```text
//! [B,1,32,32] -conv 5x5/2 + ReLU-> [B,stem,14,14]
//!             -conv 1x1-> primary capsules (4x4 pose + sigmoid activation) on 14x14
//!             -3x3/2 capsule windows, EM routing-> conv capsules on 6x6
//!             -EM routing over all 6x6 capsules-> class capsules [B,10]
//! decoder: masked [B,10*17] -> hidden ReLU layers -> sigmoid [B,1,32,32]
//! ```
//!
//! Each 3x3 window of the convolutional capsule layer is routed as its own
//! group: a child that falls in two overlapping windows contributes to both
//! and is normalized within each window separately. Transform matrices are
//! shared across window positions, like a convolution kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::capsule::{em_routing_traced, spread_loss, CapsuleState, RoutingConfig, RoutingState, TransformWeights};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const STEM_KERNEL: usize = 5;
pub const STEM_STRIDE: usize = 2;
pub const CAPS_KERNEL: usize = 3;
pub const CAPS_STRIDE: usize = 2;
/// Pose entries plus the activation fed to the decoder per class capsule.
pub const DECODER_SLOT: usize = 17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub stem_channels: usize,
    pub primary_caps: usize,
    pub conv_caps: usize,
    pub n_classes: usize,
    pub pose_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub input_side: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            stem_channels: 64,
            primary_caps: 8,
            conv_caps: 16,
            n_classes: 10,
            pose_dim: 4,
            decoder_hidden: vec![512, 1024],
            input_side: 32,
        }
    }
}

impl ArchitectureSpec {
    /// Scaled-down network used for desk-scale training runs.
    pub fn reduced() -> Self {
        ArchitectureSpec {
            stem_channels: 32,
            primary_caps: 8,
            conv_caps: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |layer: &str, why: String| Err(Error::contract(format!("architecture, {layer}: {why}")));
        if self.pose_dim != 4 {
            return fail("capsules", format!("pose_dim must be 4, got {}", self.pose_dim));
        }
        if self.input_side != 32 {
            return fail("input", format!("only 32x32 inputs are supported, got {}", self.input_side));
        }
        if self.n_classes < 2 {
            return fail("class_caps", format!("need >= 2 classes, got {}", self.n_classes));
        }
        for (layer, v) in [
            ("stem", self.stem_channels),
            ("primary_caps", self.primary_caps),
            ("conv_caps", self.conv_caps),
        ] {
            if v == 0 {
                return fail(layer, "width must be >= 1".into());
            }
        }
        if let Some(pos) = self.decoder_hidden.iter().position(|&h| h == 0) {
            return fail("decoder", format!("hidden layer {pos} has width 0"));
        }
        Ok(())
    }

    pub fn stem_side(&self) -> usize {
        (self.input_side - STEM_KERNEL) / STEM_STRIDE + 1
    }

    pub fn caps_side(&self) -> usize {
        (self.stem_side() - CAPS_KERNEL) / CAPS_STRIDE + 1
    }

    /// Children per routing window of the convolutional capsule layer.
    pub fn conv_caps_inputs(&self) -> usize {
        CAPS_KERNEL * CAPS_KERNEL * self.primary_caps
    }

    pub fn class_caps_inputs(&self) -> usize {
        self.caps_side() * self.caps_side() * self.conv_caps
    }

    pub fn decoder_input(&self) -> usize {
        self.n_classes * DECODER_SLOT
    }

    /// Name and shape of every learnable tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![
            ("stem.kernel".into(), vec![self.stem_channels, 1, STEM_KERNEL, STEM_KERNEL]),
            ("stem.bias".into(), vec![self.stem_channels]),
            (
                "primary.kernel".into(),
                vec![self.primary_caps * DECODER_SLOT, self.stem_channels, 1, 1],
            ),
            ("primary.bias".into(), vec![self.primary_caps * DECODER_SLOT]),
            ("conv_caps.w".into(), vec![self.conv_caps_inputs(), self.conv_caps, 4, 4]),
            ("conv_caps.beta_a".into(), vec![self.conv_caps]),
            ("conv_caps.beta_u".into(), vec![self.conv_caps]),
            ("class_caps.w".into(), vec![self.class_caps_inputs(), self.n_classes, 4, 4]),
            ("class_caps.beta_a".into(), vec![self.n_classes]),
            ("class_caps.beta_u".into(), vec![self.n_classes]),
        ];
        let mut widths = vec![self.decoder_input()];
        widths.extend(&self.decoder_hidden);
        widths.push(self.input_side * self.input_side);
        for (k, pair) in widths.windows(2).enumerate() {
            v.push((format!("decoder.{k}.weight"), vec![pair[0], pair[1]]));
            v.push((format!("decoder.{k}.bias"), vec![pair[1]]));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ArchitectureSpec,
    params: Vec<Param<T>>,
}

/// Model parameters registered as leaves on one tape.
pub struct BoundParams<'t, T: Element> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> BoundParams<'t, T> {
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// Values captured at one capsule layer for inspection.
#[derive(Debug, Clone)]
pub struct LayerCapture<T> {
    pub name: &'static str,
    /// `[B, (H, W,)? types, 4, 4]`
    pub poses: Tensor<T>,
    /// `[B, (H, W,)? types]`
    pub activations: Tensor<T>,
}

pub struct Forward<'t, T: Element> {
    /// `[B, n_classes]`
    pub class_activations: Var<'t, T>,
    /// `[B, 1, 32, 32]`
    pub reconstructions: Var<'t, T>,
    /// Class index whose capsule fed the decoder, per batch item.
    pub decoded_classes: Vec<usize>,
    pub captures: Vec<LayerCapture<T>>,
    /// Final routing state of the conv-capsule and class-capsule layers.
    pub routing: Vec<RoutingState<T>>,
}

/// Child row indices for every `CAPS_KERNEL`^2 window, ordered
/// `(batch, out_y, out_x)` then `(ky, kx, type)`.
fn window_rows(batch: usize, side_in: usize, side_out: usize, types: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(batch * side_out * side_out * CAPS_KERNEL * CAPS_KERNEL * types);
    for b in 0..batch {
        for oy in 0..side_out {
            for ox in 0..side_out {
                for ky in 0..CAPS_KERNEL {
                    for kx in 0..CAPS_KERNEL {
                        let (y, x) = (oy * CAPS_STRIDE + ky, ox * CAPS_STRIDE + kx);
                        for t in 0..types {
                            rows.push(((b * side_in + y) * side_in + x) * types + t);
                        }
                    }
                }
            }
        }
    }
    rows
}

impl<T: Element> Model<T> {
    /// Freshly initialized model; identical seeds give bit-identical weights.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let output_layer = format!("decoder.{}.weight", spec.decoder_hidden.len());
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                // He scaling ahead of ReLUs, Xavier-style elsewhere
                let gain = if name == output_layer || name.starts_with("primary") { 1.0 } else { 2.0 };
                let value = init_param(&name, &shape, gain, &mut rng)?;
                Ok(Param { name, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { spec, params })
    }

    /// Reassemble a model from stored tensors, checking names and shapes.
    pub fn from_params(spec: ArchitectureSpec, params: Vec<Param<T>>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Consistency(format!(
                "architecture expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Consistency(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replace every parameter value; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::contract("set_values: tensor count mismatch"));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("set_values", format!("{} {:?} vs {:?}", p.name, p.value.shape(), v.shape())));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Full forward pass.
    ///
    /// The decoder sees the capsule of `decoder_targets` when given (training)
    /// and of the most active class otherwise.
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t, T>,
        images: Var<'t, T>,
        routing: &RoutingConfig,
        decoder_targets: Option<&[usize]>,
    ) -> Result<Forward<'t, T>> {
        let spec = &self.spec;
        let side = spec.input_side;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [1, side, side] {
            return Err(Error::shape(
                "forward",
                format!("images {shape:?} must be [B, 1, {side}, {side}]"),
            ));
        }
        let b = shape[0];
        let tape = images.tape();
        let p = &bound.vars;
        let (stem_side, caps_side) = (spec.stem_side(), spec.caps_side());
        let (pt, ct, nc) = (spec.primary_caps, spec.conv_caps, spec.n_classes);

        let stem = images.conv2d(p[0], STEM_STRIDE, 0)?.add_channel_bias(p[1])?.relu()?;

        // primary capsules: per position, `pt` slots of 16 pose entries + 1 logit
        let prim = stem.conv2d(p[2], 1, 0)?.add_channel_bias(p[3])?;
        let prim = prim
            .reshape(vec![b, pt * DECODER_SLOT, stem_side * stem_side])?
            .transpose()? // [B, HW, pt*17]
            .reshape(vec![b * stem_side * stem_side * pt, DECODER_SLOT])?;
        let prim_pose = prim.slice_last(0, 16)?;
        let prim_act = prim.slice_last(16, 17)?.sigmoid()?;

        let windows = window_rows(b, stem_side, caps_side, pt);
        let groups = b * caps_side * caps_side;
        let n_in = spec.conv_caps_inputs();
        let child = CapsuleState {
            poses: prim_pose.gather_rows(&windows)?.reshape(vec![groups, n_in, 4, 4])?,
            activations: prim_act.gather_rows(&windows)?.reshape(vec![groups, n_in])?,
        };
        let conv_w = TransformWeights {
            w: p[4],
            beta_a: p[5],
            beta_u: p[6],
        };
        let (conv_caps, conv_state) = em_routing_traced(&child, &conv_w, routing)?;

        let n_in = spec.class_caps_inputs();
        let child = CapsuleState {
            poses: conv_caps.poses.reshape(vec![b, n_in, 4, 4])?,
            activations: conv_caps.activations.reshape(vec![b, n_in])?,
        };
        let class_w = TransformWeights {
            w: p[7],
            beta_a: p[8],
            beta_u: p[9],
        };
        let (class_caps, class_state) = em_routing_traced(&child, &class_w, routing)?;

        let class_act = class_caps.activations;
        let decoded_classes = match decoder_targets {
            Some(t) => {
                if t.len() != b || t.iter().any(|&c| c >= nc) {
                    return Err(Error::contract(format!("decoder targets {t:?} invalid for batch {b}")));
                }
                t.to_vec()
            }
            None => class_act.value().argmax_rows(),
        };
        let mask = Tensor::from_fn(vec![b, nc, DECODER_SLOT], |ix| {
            T::from_f64((decoded_classes[ix[0]] == ix[1]) as u8 as f64)
        });
        let slots = Var::concat_last(&[
            class_caps.poses.reshape(vec![b, nc, 16])?,
            class_act.reshape(vec![b, nc, 1])?,
        ])?;
        let mut h = slots.mul(tape.constant(mask))?.reshape(vec![b, nc * DECODER_SLOT])?;
        let n_dec = spec.decoder_hidden.len() + 1;
        for k in 0..n_dec {
            h = h.matmul(p[10 + 2 * k])?.add(p[11 + 2 * k])?;
            h = if k + 1 < n_dec { h.relu()? } else { h.sigmoid()? };
        }
        let reconstructions = h.reshape(vec![b, 1, side, side])?;

        let captures = vec![
            LayerCapture {
                name: "primary_caps",
                poses: prim_pose.value().reshape(vec![b, stem_side, stem_side, pt, 4, 4])?,
                activations: prim_act.value().reshape(vec![b, stem_side, stem_side, pt])?,
            },
            LayerCapture {
                name: "conv_caps",
                poses: conv_caps.poses.value().reshape(vec![b, caps_side, caps_side, ct, 4, 4])?,
                activations: conv_caps.activations.value().reshape(vec![b, caps_side, caps_side, ct])?,
            },
            LayerCapture {
                name: "class_caps",
                poses: class_caps.poses.value(),
                activations: class_act.value(),
            },
        ];
        Ok(Forward {
            class_activations: class_act,
            reconstructions,
            decoded_classes,
            captures,
            routing: vec![conv_state, class_state],
        })
    }

    /// Inference-only forward; returns `(class activations, reconstructions)`.
    pub fn predict(&self, images: &Tensor<T>, routing: &RoutingConfig) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        let out = self.forward(&bound, tape.constant(images.clone()), routing, None)?;
        Ok((out.class_activations.value(), out.reconstructions.value()))
    }

    /// Forward pass returning the per-layer capsule captures.
    pub fn capture(&self, images: &Tensor<T>, routing: &RoutingConfig) -> Result<Vec<LayerCapture<T>>> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        Ok(self.forward(&bound, tape.constant(images.clone()), routing, None)?.captures)
    }
}

fn init_param<T: Element>(name: &str, shape: &[usize], gain: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let normal = |std: f64| Normal::new(0.0, std).map_err(|e| Error::contract(format!("{name}: {e}")));
    let data: Vec<f64> = if name.ends_with(".bias") || name.contains(".beta_") {
        vec![0.0; n]
    } else if name.ends_with(".w") {
        // transform matrices: identity plus N(0, 0.1^2)
        let d = normal(0.1)?;
        (0..n)
            .map(|k| {
                let e = k % 16;
                d.sample(rng) + if e / 4 == e % 4 { 1.0 } else { 0.0 }
            })
            .collect()
    } else {
        let fan_in: usize = if name.starts_with("decoder") {
            shape[0]
        } else {
            shape[1..].iter().product()
        };
        let d = normal((gain / fan_in as f64).sqrt())?;
        (0..n).map(|_| d.sample(rng)).collect()
    };
    Tensor::from_f64_slice(shape.to_vec(), &data)
}

/// Training objective: spread loss plus `recon_weight` times the mean squared
/// reconstruction error over all pixels.
pub fn loss<'t, T: Element>(
    class_activations: Var<'t, T>,
    reconstructions: Var<'t, T>,
    images: Var<'t, T>,
    targets: &[usize],
    margin: f64,
    recon_weight: f64,
) -> Result<Var<'t, T>> {
    if !(recon_weight >= 0.0) {
        return Err(Error::contract(format!("recon_weight {recon_weight} must be >= 0")));
    }
    let spread = spread_loss(class_activations, targets, margin)?;
    if recon_weight == 0.0 {
        return Ok(spread);
    }
    if reconstructions.shape() != images.shape() {
        return Err(Error::shape(
            "loss",
            format!("reconstructions {:?} vs images {:?}", reconstructions.shape(), images.shape()),
        ));
    }
    let mse = reconstructions.sub(images)?.square()?.mean_all()?;
    spread.add(mse.scale(recon_weight)?)
}
