//! Gradient integrity: backward() against central finite differences on
//! every loss variant, with all randomness frozen.
//!
//! The probes are always explicit tensors, so they freeze for free. The
//! robust-equivariance noise needs care: additive Gaussian noise freezes as a
//! fixed tensor added to the differentiable re-measurement, while Poisson and
//! mixed draws are frozen as the corrupted measurement itself (exactly the
//! constant the backward pass sees). Instances whose kink ops (relu, clamp)
//! come within 1e-4 of a kink are re-sampled, since finite differences
//! straddle kinks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::losses::{
    variant_loss, BatchItem, LossConfig, ModelReconstructor, ProbeSet, ReqDraw, StepDraws, Variant,
};
use crate::model::{ModelSpec, ReconModel};
use crate::noise::{
    sample_gaussian, sample_mpg, sample_poisson, NoiseKind, NoiseParams, Purpose, RngStream,
    StreamKey,
};
use crate::operators::{ForwardOperator, InpaintOp};
use crate::tape::{finite_diff_grad, max_rel_err, Tape};
use crate::tensor::Tensor;
use crate::transforms::TransformGroup;

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub variant: Variant,
    pub noise: NoiseKind,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<10} {:>8?} x{:<3} max rel err {:.3e} {}",
            self.variant.name(),
            self.noise,
            self.instances,
            self.max_rel_err,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub const GRADCHECK_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-4;

fn noise_for(kind: NoiseKind) -> NoiseParams {
    match kind {
        NoiseKind::Gaussian => NoiseParams::gaussian(0.1).unwrap(),
        NoiseKind::Poisson => NoiseParams::poisson(0.1).unwrap(),
        NoiseKind::Mpg => NoiseParams::mpg(0.5, 0.2).unwrap(),
    }
}

/// Frozen per-instance randomness: group element, probes, and the
/// robust-equivariance corruption in a parameter-independent form.
struct FrozenDraws {
    g: usize,
    probes: ProbeSet,
    req_additive: Option<Tensor>,
    req_measurement: Option<Tensor>,
}

impl FrozenDraws {
    fn step_draws(&self) -> StepDraws<'_> {
        let req = match (&self.req_additive, &self.req_measurement) {
            (Some(t), _) => ReqDraw::FrozenAdditive(t),
            (None, Some(t)) => ReqDraw::FrozenMeasurement(t),
            (None, None) => unreachable!("freeze_req always fixes one form"),
        };
        StepDraws {
            g: self.g,
            probes: self.probes.clone(),
            req,
        }
    }
}

/// One gradcheck cell: a tiny model on a small inpainting problem.
#[allow(clippy::too_many_arguments)]
fn check_instance(
    variant: Variant,
    noise: &NoiseParams,
    op: &InpaintOp,
    group: &TransformGroup,
    spec: &ModelSpec,
    theta: &Tensor,
    item: &BatchItem,
    frozen: &FrozenDraws,
) -> Result<(f64, f64)> {
    let cfg = LossConfig {
        variant,
        alpha: 0.7,
        tau: 1e-2,
        sure_scale: 1.0,
    };
    let eval = |params: &Tensor, want_grad: bool| -> Result<(f64, Option<Tensor>, f64)> {
        let mut tape = Tape::new();
        let pid = tape.input(params.clone());
        let f = ModelReconstructor {
            spec,
            params: pid,
            op,
        };
        let draws = frozen.step_draws();
        let (l, _) = variant_loss(&mut tape, &cfg, item, &f, op, group, noise, &draws)?;
        let value = tape.value(l).item();
        let margin = tape.kink_margin();
        if want_grad {
            let grads = tape.backward(l)?;
            Ok((value, Some(grads.wrt(&tape, pid)), margin))
        } else {
            Ok((value, None, margin))
        }
    };

    let (_, grad, margin) = eval(theta, true)?;
    let grad = grad.unwrap();
    let fd = finite_diff_grad(&mut |p| eval(p, false).unwrap().0, theta, FD_STEP);
    Ok((max_rel_err(&grad, &fd), margin))
}

/// Runs `instances` independent random instances for one (variant, noise)
/// cell and reports the worst relative disagreement.
pub fn gradcheck_cell(
    variant: Variant,
    kind: NoiseKind,
    instances: usize,
    seed: u64,
) -> Result<GradCheckResult> {
    let noise = noise_for(kind);
    let spec = ModelSpec::new(1, 2, 0).unwrap();
    let group = TransformGroup::shift2d(6, 6).unwrap();
    let stream = RngStream::new(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0usize;
    let mut attempt = 0u64;
    while done < instances {
        attempt += 1;
        if attempt > 20 * instances as u64 {
            break; // pathological; report what we have
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (attempt * 0x9e37) ^ variant as u64);
        let op = InpaintOp::random(1, 6, 6, 0.7, &mut rng)?;
        let theta = Tensor::from_fn(&[spec.param_count()], |_| rng.gen_range(-0.4..0.4));
        let x = Tensor::from_fn(&[1, 6, 6], |_| rng.gen_range(0.05..0.95));
        let u = op.apply(&x)?;
        let mut ry = stream.rng(StreamKey::new(Purpose::MeasNoise, attempt, 0));
        let y = crate::noise::sample_noise(&noise, &u, &mut ry)?;
        let item = BatchItem {
            y: &y,
            x: Some(&x),
            u: Some(&u),
        };

        // Freeze the step randomness.
        let mut rg = stream.rng(StreamKey::new(Purpose::GroupElem, attempt, 0));
        let g = group.sample(&mut rg);
        let probes = ProbeSet::draw(&noise, &op.measurement_shape(), &stream, attempt, 0);
        let (req_additive, req_measurement) = freeze_req(
            &noise, &op, &group, g, &spec, &theta, &y, &stream, attempt,
        )?;
        let frozen = FrozenDraws {
            g,
            probes,
            req_additive,
            req_measurement,
        };

        let (rel, margin) = check_instance(
            variant, &noise, &op, &group, &spec, &theta, &item, &frozen,
        )?;
        if margin < KINK_MARGIN {
            continue; // too close to a relu/clamp kink for finite differences
        }
        worst = worst.max(rel);
        done += 1;
    }
    Ok(GradCheckResult {
        variant,
        noise: kind,
        instances: done,
        max_rel_err: worst,
        pass: done >= instances && worst < GRADCHECK_TOL,
    })
}

/// Computes the frozen robust-equivariance corruption at the unperturbed
/// parameters: additive for Gaussian, the whole measurement otherwise.
#[allow(clippy::too_many_arguments)]
fn freeze_req(
    noise: &NoiseParams,
    op: &InpaintOp,
    group: &TransformGroup,
    g: usize,
    spec: &ModelSpec,
    theta: &Tensor,
    y: &Tensor,
    stream: &RngStream,
    attempt: u64,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let mut rng = stream.rng(StreamKey::new(Purpose::ReqNoise, attempt, 0));
    match noise.kind {
        NoiseKind::Gaussian => {
            let eps = sample_gaussian(&Tensor::zeros(&op.measurement_shape()), 1.0, &mut rng);
            Ok((Some(eps.scale(noise.sigma)), None))
        }
        _ => {
            // Re-measure the transformed estimate at theta and draw once.
            let model = ReconModel::with_params(spec.clone(), theta.clone())?;
            let x1 = model.apply(&op.pinv(y)?)?;
            let x2 = group.apply(g, &x1)?;
            let u2 = op.apply(&x2)?.map(|v| v.max(0.0));
            let ytil = match noise.kind {
                NoiseKind::Poisson => sample_poisson(&u2, noise.gamma, &mut rng)?,
                NoiseKind::Mpg => sample_mpg(&u2, noise.gamma, noise.sigma, &mut rng)?,
                NoiseKind::Gaussian => unreachable!(),
            };
            Ok((None, Some(ytil)))
        }
    }
}

/// The full grid: noise-sensitive variants under all three models, the
/// noise-free ones once.
pub fn gradcheck_all(instances: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    for variant in Variant::ALL {
        let kinds: &[NoiseKind] = match variant {
            Variant::Mc | Variant::Ei | Variant::EiOracle | Variant::Sup => {
                &[NoiseKind::Gaussian]
            }
            _ => &[NoiseKind::Gaussian, NoiseKind::Poisson, NoiseKind::Mpg],
        };
        for &kind in kinds {
            results.push(gradcheck_cell(variant, kind, instances, seed)?);
        }
    }
    Ok(results)
}
