//! Accelerated MRI: A = S_omega composed with a unitary 2-d DFT.
//!
//! Complex images travel as two real channels (0 = real, 1 = imaginary).
//! The DFT carries 1/sqrt(hw) in both directions, so the sampled rows of A
//! have unit norm and the backprojection A-dagger = F^H S_omega is the exact
//! adjoint of A.

use std::sync::Arc;

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha12Rng;

use crate::error::{ReiError, Result};
use crate::operators::ForwardOperator;
use crate::tape::{LinearMap, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MriOp {
    h: usize,
    w: usize,
    /// Sampled k-space rows (true = measured). Row frequency 0 is DC.
    rows: Vec<bool>,
    acceleration: f64,
    center_fraction: f64,
}

impl MriOp {
    /// Cartesian row-subsampling: a fully sampled low-frequency block of
    /// ceil(center_fraction * h) rows around DC, remaining rows drawn
    /// uniformly without replacement until ceil(h / acceleration) rows are
    /// sampled in total.
    pub fn random(
        h: usize,
        w: usize,
        acceleration: f64,
        center_fraction: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if !(acceleration >= 1.0) {
            return Err(ReiError::config(format!(
                "acceleration must be >= 1, got {acceleration}"
            )));
        }
        if !(0.0..=1.0).contains(&center_fraction) {
            return Err(ReiError::config(format!(
                "center_fraction must lie in [0, 1], got {center_fraction}"
            )));
        }
        let total = (h as f64 / acceleration).ceil() as usize;
        let ncenter = (center_fraction * h as f64).ceil() as usize;
        let mut rows = vec![false; h];
        // Low frequencies wrap around DC at row 0: 0, 1, h-1, 2, h-2, ...
        let mut taken = 0;
        for k in low_frequency_order(h) {
            if taken == ncenter.min(h) {
                break;
            }
            rows[k] = true;
            taken += 1;
        }
        if total > taken {
            let free: Vec<usize> = (0..h).filter(|&k| !rows[k]).collect();
            for idx in index_sample(rng, free.len(), total - taken) {
                rows[free[idx]] = true;
            }
        }
        Ok(MriOp {
            h,
            w,
            rows,
            acceleration,
            center_fraction,
        })
    }

    /// Fully sampled k-space (acceleration 1).
    pub fn full(h: usize, w: usize) -> Self {
        MriOp {
            h,
            w,
            rows: vec![true; h],
            acceleration: 1.0,
            center_fraction: 1.0,
        }
    }

    pub fn from_rows(h: usize, w: usize, rows: Vec<bool>) -> Result<Self> {
        if rows.len() != h {
            return Err(ReiError::shape("row mask length must equal h"));
        }
        let sampled = rows.iter().filter(|&&r| r).count().max(1);
        Ok(MriOp {
            h,
            w,
            rows,
            acceleration: h as f64 / sampled as f64,
            center_fraction: 0.0,
        })
    }

    pub fn sampled_rows(&self) -> usize {
        self.rows.iter().filter(|&&r| r).count()
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    /// The [h, w] 0/1 sampling pattern, for export and inspection.
    pub fn mask_image(&self) -> Tensor {
        let w = self.w;
        let rows = self.rows.clone();
        Tensor::from_fn(&[self.h, w], |i| if rows[i / w] { 1.0 } else { 0.0 })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [2, self.h, self.w] {
            return Err(ReiError::shape(format!(
                "mri expects [2, {}, {}] (real and imaginary channels), got {:?}",
                self.h,
                self.w,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Unitary 2-d DFT (inverse when `inverse`), then row masking if `mask`.
    fn transform(&self, x: &Tensor, inverse: bool, mask: bool) -> Result<Tensor> {
        self.check(x)?;
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let mut re: Vec<f64> = x.data()[..plane].to_vec();
        let mut im: Vec<f64> = x.data()[plane..].to_vec();
        dft_lines(&mut re, &mut im, h, w, true, inverse); // rows
        dft_lines(&mut re, &mut im, h, w, false, inverse); // columns
        if mask {
            for k in 0..h {
                if !self.rows[k] {
                    re[k * w..(k + 1) * w].fill(0.0);
                    im[k * w..(k + 1) * w].fill(0.0);
                }
            }
        }
        let mut data = re;
        data.extend_from_slice(&im);
        Ok(Tensor::from_vec(vec![2, h, w], data).unwrap())
    }

    fn apply_raw(&self, x: &Tensor) -> Result<Tensor> {
        self.transform(x, false, true)
    }

    fn pinv_raw(&self, y: &Tensor) -> Result<Tensor> {
        // Mask first so A-dagger = F^H S_omega holds even for unmasked input
        // (noise on unsampled coordinates never reaches the image).
        self.check(y)?;
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let mut re: Vec<f64> = y.data()[..plane].to_vec();
        let mut im: Vec<f64> = y.data()[plane..].to_vec();
        for k in 0..h {
            if !self.rows[k] {
                re[k * w..(k + 1) * w].fill(0.0);
                im[k * w..(k + 1) * w].fill(0.0);
            }
        }
        dft_lines(&mut re, &mut im, h, w, true, true);
        dft_lines(&mut re, &mut im, h, w, false, true);
        let mut data = re;
        data.extend_from_slice(&im);
        Ok(Tensor::from_vec(vec![2, h, w], data).unwrap())
    }
}

/// Frequencies ordered by distance from DC with wrap-around: 0, 1, h-1, 2, ...
fn low_frequency_order(h: usize) -> Vec<usize> {
    let mut order = vec![0usize];
    for d in 1..=h / 2 {
        order.push(d);
        if h - d != d {
            order.push(h - d);
        }
    }
    order
}

/// In-place unitary DFT along rows (`along_rows`) or columns, forward or
/// inverse. Direct O(len^2) evaluation with precomputed twiddles; image sides
/// here are small enough that this is both fast and exactly reproducible.
fn dft_lines(re: &mut [f64], im: &mut [f64], h: usize, w: usize, along_rows: bool, inverse: bool) {
    let len = if along_rows { w } else { h };
    let lines = if along_rows { h } else { w };
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = 1.0 / (len as f64).sqrt();
    let twiddle: Vec<(f64, f64)> = (0..len)
        .map(|t| {
            let a = sign * 2.0 * std::f64::consts::PI * t as f64 / len as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mut bre = vec![0.0; len];
    let mut bim = vec![0.0; len];
    for line in 0..lines {
        let at = |t: usize| -> usize {
            if along_rows {
                line * w + t
            } else {
                t * w + line
            }
        };
        for k in 0..len {
            let (mut ar, mut ai) = (0.0, 0.0);
            for t in 0..len {
                let (c, s) = twiddle[(k * t) % len];
                let (xr, xi) = (re[at(t)], im[at(t)]);
                ar += xr * c - xi * s;
                ai += xr * s + xi * c;
            }
            bre[k] = scale * ar;
            bim[k] = scale * ai;
        }
        for k in 0..len {
            re[at(k)] = bre[k];
            im[at(k)] = bim[k];
        }
    }
}

struct MriApplyMap(MriOp);

impl LinearMap for MriApplyMap {
    fn out_shape(&self, in_shape: &[usize]) -> Vec<usize> {
        in_shape.to_vec()
    }
    fn forward(&self, x: &Tensor) -> Tensor {
        self.0.apply_raw(x).expect("validated at recording")
    }
    fn adjoint(&self, grad: &Tensor) -> Tensor {
        // (S F)^T = F^H S = A-dagger for a unitary F and real diagonal S.
        self.0.pinv_raw(grad).expect("validated at recording")
    }
    fn label(&self) -> &'static str {
        "mri-apply"
    }
}

struct MriPinvMap(MriOp);

impl LinearMap for MriPinvMap {
    fn out_shape(&self, in_shape: &[usize]) -> Vec<usize> {
        in_shape.to_vec()
    }
    fn forward(&self, y: &Tensor) -> Tensor {
        self.0.pinv_raw(y).expect("validated at recording")
    }
    fn adjoint(&self, grad: &Tensor) -> Tensor {
        self.0.apply_raw(grad).expect("validated at recording")
    }
    fn label(&self) -> &'static str {
        "mri-pinv"
    }
}

impl ForwardOperator for MriOp {
    fn image_shape(&self) -> Vec<usize> {
        vec![2, self.h, self.w]
    }
    fn measurement_shape(&self) -> Vec<usize> {
        vec![2, self.h, self.w]
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_raw(x)
    }
    fn pinv(&self, y: &Tensor) -> Result<Tensor> {
        self.pinv_raw(y)
    }
    fn apply_t(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.check(tape.value(x))?;
        Ok(tape.apply_map(x, Arc::new(MriApplyMap(self.clone()))))
    }
    fn pinv_t(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        self.check(tape.value(y))?;
        Ok(tape.apply_map(y, Arc::new(MriPinvMap(self.clone()))))
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn adjoint(&self, y: &Tensor) -> Option<Tensor> {
        self.pinv_raw(y).ok()
    }
    fn label(&self) -> &'static str {
        "mri"
    }
    fn sampling_pattern(&self) -> Option<Tensor> {
        Some(self.mask_image())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::op_selfcheck;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(&[2, h, w], |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn full_mask_roundtrip_is_unitary() {
        let op = MriOp::full(8, 8);
        let x = random_image(8, 8, 1);
        let y = op.apply(&x).unwrap();
        let back = op.pinv(&y).unwrap();
        assert!(back.sub(&x).unwrap().max_abs() < 1e-10);
        // Parseval.
        assert!((y.norm_sq() - x.norm_sq()).abs() < 1e-10);
    }

    #[test]
    fn impulse_spectrum_is_flat() {
        let (h, w) = (8, 8);
        let op = MriOp::full(h, w);
        let x = Tensor::from_fn(&[2, h, w], |i| if i == 0 { 1.0 } else { 0.0 });
        let y = op.apply(&x).unwrap();
        let expect = 1.0 / ((h * w) as f64).sqrt();
        for i in 0..h * w {
            assert!((y.data()[i] - expect).abs() < 1e-12, "re[{i}]");
            assert!(y.data()[h * w + i].abs() < 1e-12, "im[{i}]");
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let op = MriOp::full(8, 8);
        assert!(op.apply(&Tensor::zeros(&[1, 8, 8])).is_err());
    }

    #[test]
    fn matches_dense_dft_matrix_oracle() {
        // Compare A against an explicit O(n^2) DFT-matrix multiply on the
        // complex 8x8 grid with a random row mask.
        let (h, w) = (8, 8);
        let mut r = rng(4);
        let rows: Vec<bool> = (0..h).map(|_| r.gen::<bool>()).collect();
        let op = MriOp::from_rows(h, w, rows.clone()).unwrap();
        let x = random_image(h, w, 5);
        let got = op.apply(&x).unwrap();

        let n = h * w;
        let plane = n;
        let mut want_re = vec![0.0; n];
        let mut want_im = vec![0.0; n];
        let scale = 1.0 / (n as f64).sqrt();
        for ky in 0..h {
            for kx in 0..w {
                if !rows[ky] {
                    continue;
                }
                let (mut ar, mut ai) = (0.0, 0.0);
                for ty in 0..h {
                    for tx in 0..w {
                        let ang = -2.0 * std::f64::consts::PI
                            * (ky as f64 * ty as f64 / h as f64
                                + kx as f64 * tx as f64 / w as f64);
                        let (c, s) = (ang.cos(), ang.sin());
                        let (xr, xi) = (x.data()[ty * w + tx], x.data()[plane + ty * w + tx]);
                        ar += xr * c - xi * s;
                        ai += xr * s + xi * c;
                    }
                }
                want_re[ky * w + kx] = scale * ar;
                want_im[ky * w + kx] = scale * ai;
            }
        }
        for i in 0..n {
            assert!((got.data()[i] - want_re[i]).abs() < 1e-10);
            assert!((got.data()[plane + i] - want_im[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn pinv_consistency_and_adjoint() {
        let op = MriOp::random(16, 16, 4.0, 0.08, &mut rng(6)).unwrap();
        let report = op_selfcheck(&op, 3);
        assert!(report.max_residual() < 1e-10, "{report}");
        // A A-dagger acts as the identity on sampled frequencies.
        let x = random_image(16, 16, 7);
        let y = op.apply(&x).unwrap();
        let again = op.apply(&op.pinv(&y).unwrap()).unwrap();
        assert!(again.sub(&y).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn sampled_line_count_matches_acceleration() {
        for (h, acc) in [(32usize, 4.0f64), (16, 2.0), (64, 8.0)] {
            let op = MriOp::random(h, h, acc, 0.08, &mut rng(8)).unwrap();
            assert_eq!(op.sampled_rows(), (h as f64 / acc).ceil() as usize);
        }
    }

    #[test]
    fn center_block_is_fully_sampled() {
        let op = MriOp::random(32, 32, 4.0, 0.08, &mut rng(9)).unwrap();
        // ceil(0.08 * 32) = 3 rows nearest DC: 0, 1, 31.
        assert!(op.rows[0] && op.rows[1] && op.rows[31]);
    }
}
