//! Reconstruction quality metrics.

use crate::error::{ReiError, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB: 10 log10(peak^2 / MSE). Two-channel
/// inputs are compared as magnitude images (complex data travels as separate
/// real and imaginary channels). A perfect match reports +infinity.
pub fn psnr(x_hat: &Tensor, x_ref: &Tensor, peak: f64) -> Result<f64> {
    if x_hat.shape() != x_ref.shape() {
        return Err(ReiError::shape(format!(
            "psnr: {:?} vs {:?}",
            x_hat.shape(),
            x_ref.shape()
        )));
    }
    let (a, b) = if x_hat.shape().len() == 3 && x_hat.shape()[0] == 2 {
        (magnitude(x_hat), magnitude(x_ref))
    } else {
        (x_hat.clone(), x_ref.clone())
    };
    let mse = a.sub(&b)?.norm_sq() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// sqrt(re^2 + im^2) of a [2, h, w] tensor, as [h, w].
pub fn magnitude(x: &Tensor) -> Tensor {
    let plane = x.numel() / 2;
    let d = x.data();
    Tensor::from_fn(&x.shape()[1..], |i| (d[i] * d[i] + d[plane + i] * d[plane + i]).sqrt())
}
