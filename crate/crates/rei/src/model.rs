//! The trainable image-to-image reconstructor.
//!
//! A small residual encoder-decoder: 3x3 convolutions with ReLU, stride-2
//! average-pool downsampling, nearest-neighbour upsampling, channel-concat
//! skip connections, and a residual add of the input. The final convolution
//! is zero-initialised so a fresh model is exactly the identity on its input,
//! i.e. the full reconstruction function starts at the plain backprojection.
//!
//! All parameters live in one flat tensor whose layout is a pure function of
//! the layer configuration, which keeps optimizer state and checkpoints trivial.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReiError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Image channels in and out (1 for CT/inpainting, 2 for complex MRI).
    pub in_channels: usize,
    /// Feature channels at every scale.
    pub width: usize,
    /// Number of pool/upsample levels; input extents must divide by 2^depth.
    pub depth: usize,
}

/// Shape of one convolution layer in application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cout: usize,
    pub cin: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }
    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

impl ModelSpec {
    pub fn new(in_channels: usize, width: usize, depth: usize) -> Result<Self> {
        if !(1..=3).contains(&in_channels) {
            return Err(ReiError::config(format!(
                "in_channels must be 1, 2 or 3, got {in_channels}"
            )));
        }
        if width == 0 || width > 32 {
            return Err(ReiError::config(format!("width must be in 1..=32, got {width}")));
        }
        Ok(ModelSpec {
            in_channels,
            width,
            depth,
        })
    }

    /// Convolutions in application order: head, encoders, decoders, final.
    pub fn conv_layers(&self) -> Vec<ConvShape> {
        let (c, w) = (self.in_channels, self.width);
        let mut layers = vec![ConvShape { cout: w, cin: c }];
        for _ in 0..self.depth {
            layers.push(ConvShape { cout: w, cin: w });
        }
        for _ in 0..self.depth {
            layers.push(ConvShape { cout: w, cin: 2 * w });
        }
        layers.push(ConvShape { cout: c, cin: w });
        layers
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(|l| l.param_len()).sum()
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(ReiError::shape(format!(
                "model expects [{}, h, w], got {:?}",
                self.in_channels, shape
            )));
        }
        let div = 1usize << self.depth;
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(ReiError::shape(format!(
                "extents {}x{} not divisible by 2^{}",
                shape[1], shape[2], self.depth
            )));
        }
        Ok(())
    }

    /// Kaiming-uniform fan-in weights, zero biases, zero final layer.
    pub fn init_params(&self, rng: &mut impl Rng) -> Tensor {
        let layers = self.conv_layers();
        let mut data = Vec::with_capacity(self.param_count());
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            if i == last {
                data.extend(std::iter::repeat(0.0).take(layer.param_len()));
                continue;
            }
            let bound = (6.0 / (layer.cin as f64 * 9.0)).sqrt();
            for _ in 0..layer.weight_len() {
                data.push(rng.gen_range(-bound..bound));
            }
            data.extend(std::iter::repeat(0.0).take(layer.cout));
        }
        Tensor::from_vec(vec![data.len()], data).unwrap()
    }

    /// Records the network on the tape. `params` must be a flat leaf of
    /// length `param_count()`; gradients w.r.t. it cover every layer.
    pub fn apply_t(&self, tape: &mut Tape, params: NodeId, x: NodeId) -> Result<NodeId> {
        self.validate_input(tape.value(x).shape())?;
        if tape.value(params).numel() != self.param_count() {
            return Err(ReiError::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                tape.value(params).numel()
            )));
        }
        let layers = self.conv_layers();
        let mut offset = 0;
        let mut conv = |tape: &mut Tape, layer: &ConvShape, input: NodeId| {
            let wf = tape.slice(params, offset, layer.weight_len());
            let w = tape.reshape(wf, vec![layer.cout, layer.cin, 3, 3]);
            let b = tape.slice(params, offset + layer.weight_len(), layer.cout);
            offset += layer.param_len();
            tape.conv3x3(input, w, b)
        };

        let mut li = 0;
        let mut skips = Vec::with_capacity(self.depth + 1);
        let h0 = conv(tape, &layers[li], x);
        li += 1;
        let mut cur = tape.relu(h0);
        skips.push(cur);
        for _ in 0..self.depth {
            let p = tape.avgpool2(cur);
            let h = conv(tape, &layers[li], p);
            li += 1;
            cur = tape.relu(h);
            skips.push(cur);
        }
        for level in (0..self.depth).rev() {
            let up = tape.upsample2(cur);
            let cat = tape.concat_c(up, skips[level]);
            let h = conv(tape, &layers[li], cat);
            li += 1;
            cur = tape.relu(h);
        }
        let residual = conv(tape, &layers[li], cur);
        Ok(tape.add(x, residual))
    }
}

/// A spec plus its current flat parameters.
#[derive(Clone, Debug)]
pub struct ReconModel {
    pub spec: ModelSpec,
    pub params: Tensor,
}

impl ReconModel {
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Self {
        let params = spec.init_params(rng);
        ReconModel { spec, params }
    }

    pub fn with_params(spec: ModelSpec, params: Tensor) -> Result<Self> {
        if params.numel() != spec.param_count() {
            return Err(ReiError::shape(format!(
                "spec wants {} parameters, got {}",
                spec.param_count(),
                params.numel()
            )));
        }
        Ok(ReconModel { spec, params })
    }

    /// Value-level forward pass: records on a private tape so that the exact
    /// same arithmetic runs with or without gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.input(self.params.clone());
        let xid = tape.input(x.clone());
        let out = self.spec.apply_t(&mut tape, p, xid)?;
        Ok(tape.value(out).clone())
    }

    /// Loose but computable bound on how much the output can move when a
    /// single parameter is perturbed by delta (explosion smoke check).
    pub fn param_perturbation_bound(&self, x: &Tensor) -> f64 {
        let layers = self.spec.conv_layers();
        let mut offset = 0;
        let mut act_bound = x.max_abs();
        let mut max_act = act_bound;
        let mut gain_product = 1.0f64;
        for layer in &layers {
            let wdata = &self.params.data()[offset..offset + layer.weight_len()];
            let bdata = &self.params.data()[offset + layer.weight_len()..offset + layer.param_len()];
            let gain = (0..layer.cout)
                .map(|co| {
                    wdata[co * layer.cin * 9..(co + 1) * layer.cin * 9]
                        .iter()
                        .map(|v| v.abs())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max)
                .max(1.0);
            let bmax = bdata.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // Concat at most doubles the contributing activations.
            act_bound = 2.0 * gain * act_bound + bmax;
            max_act = max_act.max(act_bound);
            gain_product *= 2.0 * gain;
            offset += layer.param_len();
        }
        (max_act + 1.0) * (gain_product + 1.0)
    }
}
