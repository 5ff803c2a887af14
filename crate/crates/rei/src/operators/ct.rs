//! Nonlinear sparse-view CT: A(x) = I0 * exp(-radon(x)).
//!
//! The backprojection runs filtered backprojection on the log-transformed
//! counts, log(I0 / y). Mixed Poisson-Gaussian noise can push raw counts to
//! zero or below; the pipeline backprojection clamps counts at one before the
//! log, while the strict `ct_backproject` operation reports a domain error
//! instead, leaving the clamping decision to its caller.

use std::sync::Arc;

use crate::error::{ReiError, Result};
use crate::operators::radon::{as_plane, iradon_fbp, radon, IradonMap, RadonMap};
use crate::operators::{CheckEntry, CheckOutcome, ForwardOperator};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::RadonSpec;

#[derive(Clone, Debug)]
pub struct CtOp {
    pub radon: RadonSpec,
    /// X-ray source intensity in counts.
    pub i0: f64,
}

/// Counts below this are clamped before the log in the pipeline
/// backprojection.
const MIN_COUNT: f64 = 1.0;

impl CtOp {
    pub fn new(radon: RadonSpec, i0: f64) -> Result<Self> {
        if !(i0 > 0.0) {
            return Err(ReiError::config(format!("source intensity must be positive, got {i0}")));
        }
        Ok(CtOp { radon, i0 })
    }

    /// Strict measurement model; x must be nonnegative.
    pub fn ct_apply(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(bad) = x.data().iter().find(|v| **v < 0.0) {
            return Err(ReiError::domain(format!(
                "ct_apply expects a nonnegative image, found {bad}"
            )));
        }
        self.apply_unchecked(x)
    }

    fn apply_unchecked(&self, x: &Tensor) -> Result<Tensor> {
        let plane = as_plane(x, self.radon.side)?;
        Ok(radon(&self.radon, &plane)?.map(|v| self.i0 * (-v).exp()))
    }

    /// Strict backprojection; errors on nonpositive counts (noise drove the
    /// measurement out of the model's domain and the caller must decide).
    pub fn ct_backproject(&self, y: &Tensor) -> Result<Tensor> {
        if let Some(bad) = y.data().iter().find(|v| **v <= 0.0) {
            return Err(ReiError::domain(format!(
                "ct_backproject expects positive counts, found {bad}"
            )));
        }
        // ln(I0) - ln(y) rather than ln(I0 / y): bitwise identical to the
        // tape path, and y = I0 maps exactly to zero either way.
        let li0 = self.i0.ln();
        let logs = y.map(|v| li0 - v.ln());
        iradon_fbp(&self.radon, &logs)
    }

    fn image3(&self) -> Vec<usize> {
        vec![1, self.radon.side, self.radon.side]
    }
}

impl ForwardOperator for CtOp {
    fn image_shape(&self) -> Vec<usize> {
        self.image3()
    }
    fn measurement_shape(&self) -> Vec<usize> {
        vec![self.radon.views, self.radon.side]
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        // The pipeline path tolerates negative excursions of a reconstruction;
        // exp keeps the counts positive either way.
        self.apply_unchecked(x)
    }
    fn pinv(&self, y: &Tensor) -> Result<Tensor> {
        let clamped = y.map(|v| v.max(MIN_COUNT));
        Ok(self.ct_backproject(&clamped)?.reshaped(self.image3())?)
    }
    fn apply_t(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        as_plane(tape.value(x), self.radon.side)?;
        let n = self.radon.side;
        let plane = tape.reshape(x, vec![n, n]);
        let sino = tape.apply_map(plane, Arc::new(RadonMap(self.radon)));
        let neg = tape.scale(sino, -1.0);
        let atten = tape.exp(neg);
        Ok(tape.scale(atten, self.i0))
    }
    fn pinv_t(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        if tape.value(y).shape() != self.measurement_shape().as_slice() {
            return Err(ReiError::shape(format!(
                "ct pinv expects {:?}, got {:?}",
                self.measurement_shape(),
                tape.value(y).shape()
            )));
        }
        // log(I0 / y) = ln(I0) - ln(max(y, 1))
        let clamped = tape.clamp_min(y, MIN_COUNT);
        let logy = tape.ln(clamped);
        let neg = tape.scale(logy, -1.0);
        let logs = tape.offset(neg, self.i0.ln());
        let img = tape.apply_map(logs, Arc::new(IradonMap(self.radon)));
        let n = self.radon.side;
        Ok(tape.reshape(img, vec![1, n, n]))
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn adjoint(&self, _y: &Tensor) -> Option<Tensor> {
        None
    }
    fn label(&self) -> &'static str {
        "ct"
    }
    fn extra_checks(&self, _seed: u64) -> Vec<CheckEntry> {
        // exp/log cancellation: backproject(apply(x)) == fbp(radon(x)) for
        // images whose counts stay above the clamp.
        let n = self.radon.side;
        let x = Tensor::from_fn(&[n, n], |i| {
            let (y, xx) = ((i / n) as f64, (i % n) as f64);
            let c = (n as f64 - 1.0) / 2.0;
            let r2 = (y - c).powi(2) + (xx - c).powi(2);
            if r2 < (c * 0.6).powi(2) {
                0.02
            } else {
                0.0
            }
        });
        let counts = self.ct_apply(&x).expect("nonnegative phantom");
        let via_ct = self
            .ct_backproject(&counts)
            .expect("counts positive for a small phantom");
        let direct = iradon_fbp(&self.radon, &radon(&self.radon, &x).unwrap()).unwrap();
        let res = via_ct.sub(&direct).unwrap().norm() / direct.norm().max(1e-30);
        vec![CheckEntry {
            name: "exp/log cancellation".into(),
            outcome: CheckOutcome::Residual(res),
        }]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::op_selfcheck;

    fn op() -> CtOp {
        CtOp::new(RadonSpec::new(12, 16).unwrap(), 1e5).unwrap()
    }

    #[test]
    fn zero_image_measures_full_intensity() {
        let ct = op();
        let y = ct.ct_apply(&Tensor::zeros(&[16, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 1e5));
    }

    #[test]
    fn full_intensity_backprojects_to_zero() {
        let ct = op();
        let x = ct.ct_backproject(&Tensor::full(&[12, 16], 1e5)).unwrap();
        assert!(x.max_abs() < 1e-12);
    }

    #[test]
    fn negative_image_rejected_by_strict_apply() {
        let ct = op();
        let x = Tensor::from_fn(&[16, 16], |i| if i == 5 { -0.1 } else { 0.0 });
        assert!(ct.ct_apply(&x).is_err());
    }

    #[test]
    fn nonpositive_counts_rejected_by_strict_backprojection() {
        let ct = op();
        let y = Tensor::from_fn(&[12, 16], |i| if i == 3 { 0.0 } else { 10.0 });
        assert!(ct.ct_backproject(&y).is_err());
        // The pipeline backprojection clamps instead.
        assert!(ct.pinv(&y).is_ok());
    }

    #[test]
    fn exp_log_cancellation_matches_plain_fbp() {
        let ct = op();
        let n = 16;
        let x = Tensor::from_fn(&[n, n], |i| {
            let (y, xx) = ((i / n) as f64, (i % n) as f64);
            if (y - 7.5).abs() < 4.0 && (xx - 7.5).abs() < 3.0 {
                0.05
            } else {
                0.0
            }
        });
        let via_ct = ct
            .ct_backproject(&ct.ct_apply(&x).unwrap())
            .unwrap();
        let direct = iradon_fbp(&ct.radon, &radon(&ct.radon, &x).unwrap()).unwrap();
        assert!(via_ct.sub(&direct).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn monotone_decreasing_in_attenuation() {
        // Adding a nonnegative image never increases any measurement.
        let ct = op();
        let x = Tensor::from_fn(&[16, 16], |i| ((i * 7) % 5) as f64 * 0.01);
        let bump = Tensor::from_fn(&[16, 16], |i| ((i * 3) % 4) as f64 * 0.02);
        let y0 = ct.ct_apply(&x).unwrap();
        let y1 = ct.ct_apply(&x.add(&bump).unwrap()).unwrap();
        assert!(y1.data().iter().zip(y0.data()).all(|(a, b)| a <= b));
    }

    #[test]
    fn selfcheck_marks_adjoint_skipped() {
        let ct = op();
        let report = op_selfcheck(&ct, 5);
        let skipped = report
            .entries
            .iter()
            .filter(|e| matches!(e.outcome, CheckOutcome::Skipped("nonlinear")))
            .count();
        assert_eq!(skipped, 2, "{report}");
        // exp/log cancellation residual present and essentially zero.
        assert!(report.max_residual() < 1e-10, "{report}");
    }

    #[test]
    fn tape_paths_match_value_paths() {
        let ct = op();
        let x = Tensor::from_fn(&[1, 16, 16], |i| ((i * 11) % 7) as f64 * 0.01);
        let mut tape = crate::tape::Tape::new();
        let xid = tape.input(x.clone());
        let yid = ct.apply_t(&mut tape, xid).unwrap();
        let y_tape = tape.value(yid).clone();
        let y_val = ct.apply(&x).unwrap();
        assert!(y_tape.bits_eq(&y_val));

        let back = ct.pinv_t(&mut tape, yid).unwrap();
        let b_tape = tape.value(back).clone();
        let b_val = ct.pinv(&y_val).unwrap();
        assert!(b_tape.bits_eq(&b_val));
    }
}
