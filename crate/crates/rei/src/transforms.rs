//! Finite transformation groups acting on images.
//!
//! Two kinds: cyclic 2-d shifts (exact permutations) and rotations about the
//! image centre. Shifts and quarter-turn rotations move data without
//! arithmetic, so they are exactly unitary; other rotation angles use
//! bilinear interpolation restricted to the centred inscribed disk and are
//! only approximately norm-preserving, which `unitarity_defect` quantifies.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReiError, Result};
use crate::kernels;
use crate::tape::{LinearMap, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Shift2d,
    Rotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformGroup {
    pub kind: GroupKind,
    /// Spatial extents the group is defined over (square for rotations).
    pub height: usize,
    pub width: usize,
    order: usize,
}

impl TransformGroup {
    /// All cyclic shifts of an h x w grid; |G| = h*w.
    pub fn shift2d(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ReiError::config("shift group needs positive extents"));
        }
        Ok(TransformGroup { kind: GroupKind::Shift2d, height, width, order: height * width })
    }

    /// Rotations by multiples of 360/order degrees on a square grid.
    pub fn rotate(side: usize, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(ReiError::config("rotation group needs order >= 1"));
        }
        Ok(TransformGroup { kind: GroupKind::Rotate, height: side, width: side, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn shift_of(&self, g: usize) -> (usize, usize) {
        (g / self.width, g % self.width)
    }

    /// Angle in radians for a rotation element.
    fn angle_of(&self, g: usize) -> f64 {
        2.0 * std::f64::consts::PI * g as f64 / self.order as f64
    }

    /// Number of exact quarter turns if this element is one, else None.
    fn quarter_turns(&self, g: usize) -> Option<usize> {
        if (g * 4) % self.order == 0 {
            Some((g * 4) / self.order)
        } else {
            None
        }
    }

    fn check_element(&self, g: usize) -> Result<()> {
        if g >= self.order {
            return Err(ReiError::domain(format!(
                "group element {g} out of range for |G| = {}",
                self.order
            )));
        }
        Ok(())
    }

    fn check_image(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let (c, h, w) = match shape {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(ReiError::shape(format!(
                    "transform expects [h,w] or [c,h,w], got {shape:?}"
                )))
            }
        };
        if (h, w) != (self.height, self.width) {
            return Err(ReiError::shape(format!(
                "group defined over {}x{}, image is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok((c, h, w))
    }

    /// Applies T_g. g = 0 is the identity and returns the input untouched.
    pub fn apply(&self, g: usize, x: &Tensor) -> Result<Tensor> {
        self.check_element(g)?;
        let (c, h, w) = self.check_image(x.shape())?;
        if g == 0 {
            return Ok(x.clone());
        }
        let plane = h * w;
        let mut out = vec![0.0; x.numel()];
        match self.kind {
            GroupKind::Shift2d => {
                let (dy, dx) = self.shift_of(g);
                for ci in 0..c {
                    let src = &x.data()[ci * plane..(ci + 1) * plane];
                    let dst = &mut out[ci * plane..(ci + 1) * plane];
                    for y in 0..h {
                        let sy = (y + h - dy) % h;
                        for xo in 0..w {
                            dst[y * w + xo] = src[sy * w + (xo + w - dx) % w];
                        }
                    }
                }
            }
            GroupKind::Rotate => match self.quarter_turns(g) {
                Some(k) => {
                    for ci in 0..c {
                        let src = &x.data()[ci * plane..(ci + 1) * plane];
                        let dst = &mut out[ci * plane..(ci + 1) * plane];
                        rot90_exact(src, h, k, dst);
                    }
                }
                None => {
                    let angle = self.angle_of(g);
                    for ci in 0..c {
                        let src = &x.data()[ci * plane..(ci + 1) * plane];
                        let dst = &mut out[ci * plane..(ci + 1) * plane];
                        kernels::rotate_bilinear(src, h, w, angle, true, dst);
                    }
                }
            },
        }
        Tensor::from_vec(x.shape().to_vec(), out)
    }

    /// Index of the inverse element.
    pub fn inverse(&self, g: usize) -> usize {
        match self.kind {
            GroupKind::Shift2d => {
                let (dy, dx) = self.shift_of(g);
                ((self.height - dy) % self.height) * self.width + (self.width - dx) % self.width
            }
            GroupKind::Rotate => (self.order - g) % self.order,
        }
    }

    /// Index of T_{g1} composed with T_{g2} (first g2, then g1).
    pub fn compose(&self, g1: usize, g2: usize) -> usize {
        match self.kind {
            GroupKind::Shift2d => {
                let (dy1, dx1) = self.shift_of(g1);
                let (dy2, dx2) = self.shift_of(g2);
                ((dy1 + dy2) % self.height) * self.width + (dx1 + dx2) % self.width
            }
            GroupKind::Rotate => (g1 + g2) % self.order,
        }
    }

    /// Uniform draw over non-identity elements (the identity carries no
    /// learning signal); returns 0 only for the trivial group.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> usize {
        if self.order <= 1 {
            0
        } else {
            rng.gen_range(1..self.order)
        }
    }

    /// Records T_g on the tape; the VJP is the exact adjoint.
    pub fn apply_t(&self, tape: &mut Tape, g: usize, x: NodeId) -> Result<NodeId> {
        self.check_element(g)?;
        self.check_image(tape.value(x).shape())?;
        Ok(tape.apply_map(x, Arc::new(TransformMap { group: *self, g })))
    }

    /// Worst relative norm change over a set of smooth probe images. Exact
    /// permutations give 0; bilinear rotations give the interpolation loss.
    /// Probes for rotation groups are supported on the inscribed disk, which
    /// is the domain the masked transform is meant to preserve. Norms are
    /// accumulated in sorted order so that permutations measure exactly zero
    /// rather than summation round-off.
    pub fn unitarity_defect(&self, g: usize) -> f64 {
        let sorted_norm = |t: &Tensor| -> f64 {
            let mut sq: Vec<f64> = t.data().iter().map(|v| v * v).collect();
            sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sq.iter().sum::<f64>().sqrt()
        };
        let (h, w) = (self.height, self.width);
        let mut worst: f64 = 0.0;
        for probe_idx in 0..4u64 {
            let x = smooth_probe(h, w, probe_idx, self.kind == GroupKind::Rotate);
            let tx = self.apply(g, &x).expect("probe shapes match group");
            let (nx, ntx) = (sorted_norm(&x), sorted_norm(&tx));
            if nx > 0.0 {
                worst = worst.max((ntx - nx).abs() / nx);
            }
        }
        worst
    }
}

/// k quarter turns counter-clockwise on a square plane; pure permutation.
/// Matches the bilinear convention at the same angles: one turn sends
/// (y, x) <- (n-1-x, y).
fn rot90_exact(src: &[f64], n: usize, k: usize, dst: &mut [f64]) {
    match k % 4 {
        0 => dst.copy_from_slice(src),
        1 => {
            for y in 0..n {
                for x in 0..n {
                    dst[y * n + x] = src[(n - 1 - x) * n + y];
                }
            }
        }
        2 => {
            for (i, v) in src.iter().rev().enumerate() {
                dst[i] = *v;
            }
        }
        _ => {
            for y in 0..n {
                for x in 0..n {
                    dst[y * n + x] = src[x * n + (n - 1 - y)];
                }
            }
        }
    }
}

/// Deterministic smooth test image: a handful of Gaussian bumps.
fn smooth_probe(h: usize, w: usize, salt: u64, disk: bool) -> Tensor {
    let mut state = 0x9E37_79B9u64.wrapping_add(salt.wrapping_mul(0x1234_5677));
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                next() * h as f64,
                next() * w as f64,
                1.5 + 4.0 * next(),
                0.3 + next(),
            )
        })
        .collect();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r_max = (h.min(w) as f64 - 1.0) / 2.0;
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        if disk && (y - cy).powi(2) + (x - cx).powi(2) > r_max * r_max {
            return 0.0;
        }
        bumps
            .iter()
            .map(|(by, bx, s, a)| a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    })
}

struct TransformMap {
    group: TransformGroup,
    g: usize,
}

impl LinearMap for TransformMap {
    fn out_shape(&self, in_shape: &[usize]) -> Vec<usize> {
        in_shape.to_vec()
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.group.apply(self.g, x).expect("validated at recording")
    }

    fn adjoint(&self, grad: &Tensor) -> Tensor {
        match self.group.kind {
            // Permutations: the adjoint is the inverse permutation.
            GroupKind::Shift2d => self
                .group
                .apply(self.group.inverse(self.g), grad)
                .expect("validated"),
            GroupKind::Rotate => {
                if self.group.quarter_turns(self.g).is_some() {
                    self.group
                        .apply(self.group.inverse(self.g), grad)
                        .expect("validated")
                } else {
                    let (c, h, w) = self.group.check_image(grad.shape()).expect("validated");
                    let plane = h * w;
                    let angle = self.group.angle_of(self.g);
                    let mut out = vec![0.0; grad.numel()];
                    for ci in 0..c {
                        kernels::rotate_bilinear_adjoint(
                            &grad.data()[ci * plane..(ci + 1) * plane],
                            h,
                            w,
                            angle,
                            true,
                            &mut out[ci * plane..(ci + 1) * plane],
                        );
                    }
                    Tensor::from_vec(grad.shape().to_vec(), out).unwrap()
                }
            }
        }
    }

    fn label(&self) -> &'static str {
        "transform"
    }
}
