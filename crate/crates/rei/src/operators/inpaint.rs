//! Pixel-mask inpainting: A = diag(a) for a binary mask a, and A = A-dagger.

use std::sync::Arc;

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha12Rng;

use crate::error::{ReiError, Result};
use crate::operators::ForwardOperator;
use crate::tape::{LinearMap, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InpaintOp {
    /// Binary [h, w] mask; 1 keeps a pixel, 0 drops it.
    mask: Tensor,
    kept_fraction: f64,
    channels: usize,
}

impl InpaintOp {
    /// Keeps exactly round(kept_fraction * h * w) pixels, chosen uniformly.
    pub fn random(
        channels: usize,
        h: usize,
        w: usize,
        kept_fraction: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if !(kept_fraction > 0.0 && kept_fraction <= 1.0) {
            return Err(ReiError::config(format!(
                "kept_fraction must lie in (0, 1], got {kept_fraction}"
            )));
        }
        let keep = ((kept_fraction * (h * w) as f64).round() as usize).clamp(1, h * w);
        let mut data = vec![0.0; h * w];
        for idx in index_sample(rng, h * w, keep) {
            data[idx] = 1.0;
        }
        Ok(InpaintOp {
            mask: Tensor::from_vec(vec![h, w], data).unwrap(),
            kept_fraction,
            channels,
        })
    }

    pub fn from_mask(channels: usize, mask: Tensor) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(ReiError::shape("inpainting mask must be [h, w]"));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(ReiError::domain("inpainting mask must be binary"));
        }
        let kept_fraction = mask.sum() / mask.numel() as f64;
        Ok(InpaintOp {
            mask,
            kept_fraction,
            channels,
        })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept_fraction
    }

    pub fn kept_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    fn shape(&self) -> Vec<usize> {
        let s = self.mask.shape();
        vec![self.channels, s[0], s[1]]
    }

    fn mask_mul(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.shape().as_slice() {
            return Err(ReiError::shape(format!(
                "inpaint expects {:?}, got {:?}",
                self.shape(),
                x.shape()
            )));
        }
        let plane = self.mask.numel();
        let mdat = self.mask.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| mdat[i % plane] * v)
            .collect();
        Tensor::from_vec(x.shape().to_vec(), data)
    }
}

struct MaskMap(InpaintOp);

impl LinearMap for MaskMap {
    fn out_shape(&self, in_shape: &[usize]) -> Vec<usize> {
        in_shape.to_vec()
    }
    fn forward(&self, x: &Tensor) -> Tensor {
        self.0.mask_mul(x).expect("validated at recording")
    }
    fn adjoint(&self, grad: &Tensor) -> Tensor {
        // diag(a) is symmetric.
        self.0.mask_mul(grad).expect("validated at recording")
    }
    fn label(&self) -> &'static str {
        "inpaint-mask"
    }
}

impl ForwardOperator for InpaintOp {
    fn image_shape(&self) -> Vec<usize> {
        self.shape()
    }
    fn measurement_shape(&self) -> Vec<usize> {
        self.shape()
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.mask_mul(x)
    }
    fn pinv(&self, y: &Tensor) -> Result<Tensor> {
        // The projector is its own pseudo-inverse.
        self.mask_mul(y)
    }
    fn apply_t(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.mask_mul(tape.value(x))?; // shape validation
        Ok(tape.apply_map(x, Arc::new(MaskMap(self.clone()))))
    }
    fn pinv_t(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        self.apply_t(tape, y)
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn adjoint(&self, y: &Tensor) -> Option<Tensor> {
        self.mask_mul(y).ok()
    }
    fn label(&self) -> &'static str {
        "inpaint"
    }
    fn sampling_pattern(&self) -> Option<Tensor> {
        Some(self.mask.clone())
    }
}
