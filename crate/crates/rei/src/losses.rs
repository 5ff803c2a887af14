//! Training objectives.
//!
//! The measurement-consistency family: plain consistency, its oracle variant
//! with clean measurements, and three unbiased risk estimators (Gaussian,
//! Poisson, mixed Poisson-Gaussian) that estimate the clean consistency loss
//! from noisy measurements alone. Divergence terms use single-probe
//! finite differences: one extra forward evaluation per probe, with the probe
//! shared across the evaluations inside one loss.
//!
//! The equivariance family: the noiseless system-equivariance loss and its
//! robust counterpart, where the re-measured transformed estimate is
//! corrupted by freshly sampled noise before re-reconstruction. With zero
//! Gaussian noise the robust loss runs the exact same code path as the plain
//! one.
//!
//! Normalisation note: the per-measurement factors follow the forms that make
//! the estimators dimensionally unbiased, i.e. 1/m on the quadratic term,
//! gamma/m on the linear count term, and 1/(m tau) (resp. 1/(m tau^2)) on the
//! first (resp. second) order probe terms. The unit tests enforce the
//! unbiasedness identity directly.

use serde::{Deserialize, Serialize};

use crate::error::{ReiError, Result};
use crate::model::ModelSpec;
use crate::noise::{
    bernoulli_probe, gaussian_probe, sample_mpg, sample_poisson, NoiseKind, NoiseParams, Purpose,
    RngStream, StreamKey,
};
use crate::operators::ForwardOperator;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::transforms::TransformGroup;

// ---- Variants and configuration ---------------------------------------------

/// The nine trainable objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Measurement consistency alone.
    #[serde(rename = "MC")]
    Mc,
    /// Unbiased risk estimate alone.
    #[serde(rename = "SURE")]
    Sure,
    /// Consistency + equivariance.
    #[serde(rename = "EI")]
    Ei,
    /// Consistency + robust equivariance.
    #[serde(rename = "EI1")]
    Ei1,
    /// Risk estimate + equivariance.
    #[serde(rename = "EI2")]
    Ei2,
    /// Oracle consistency + equivariance.
    #[serde(rename = "EI_oracle")]
    EiOracle,
    /// Oracle consistency + robust equivariance.
    #[serde(rename = "REI_oracle")]
    ReiOracle,
    /// Risk estimate + robust equivariance.
    #[serde(rename = "REI")]
    Rei,
    /// Supervised squared error against ground truth.
    #[serde(rename = "Sup")]
    Sup,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Mc,
        Variant::Sure,
        Variant::Ei,
        Variant::Ei1,
        Variant::Ei2,
        Variant::EiOracle,
        Variant::ReiOracle,
        Variant::Rei,
        Variant::Sup,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Mc => "MC",
            Variant::Sure => "SURE",
            Variant::Ei => "EI",
            Variant::Ei1 => "EI1",
            Variant::Ei2 => "EI2",
            Variant::EiOracle => "EI_oracle",
            Variant::ReiOracle => "REI_oracle",
            Variant::Rei => "REI",
            Variant::Sup => "Sup",
        }
    }

    pub fn needs_ground_truth(&self) -> bool {
        matches!(self, Variant::Sup)
    }

    pub fn needs_clean_measurements(&self) -> bool {
        matches!(self, Variant::EiOracle | Variant::ReiOracle)
    }

    fn uses_equivariance(&self) -> bool {
        !matches!(self, Variant::Mc | Variant::Sure | Variant::Sup)
    }

    fn uses_robust_equivariance(&self) -> bool {
        matches!(self, Variant::Ei1 | Variant::ReiOracle | Variant::Rei)
    }
}

impl std::str::FromStr for Variant {
    type Err = ReiError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ReiError::config(format!("unknown loss variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: Variant,
    /// Equivariance weight; ignored by MC, SURE and Sup.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Probe step for the divergence estimates.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Multiplier on the risk-estimate term (1 except for CT, where the
    /// exponential measurement scale calls for a small value).
    #[serde(default = "default_sure_scale")]
    pub sure_scale: f64,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    1e-2
}
fn default_sure_scale() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(variant: Variant) -> Self {
        LossConfig {
            variant,
            alpha: default_alpha(),
            tau: default_tau(),
            sure_scale: default_sure_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(ReiError::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(ReiError::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.sure_scale > 0.0) {
            return Err(ReiError::config(format!(
                "sure_scale must be > 0, got {}",
                self.sure_scale
            )));
        }
        Ok(())
    }
}

// ---- Reconstructors ----------------------------------------------------------

/// Anything that maps measurements to images on the tape. The trainable model
/// composed with the backprojection is the production case; tests plug in
/// identity, zero and fixed linear functions.
pub trait Reconstructor {
    fn reconstruct(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId>;
}

/// f(y) = G_theta(A-dagger(y)) with the parameters held as a tape leaf.
pub struct ModelReconstructor<'a> {
    pub spec: &'a ModelSpec,
    pub params: NodeId,
    pub op: &'a dyn ForwardOperator,
}

impl Reconstructor for ModelReconstructor<'_> {
    fn reconstruct(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        let lifted = self.op.pinv_t(tape, y)?;
        self.spec.apply_t(tape, self.params, lifted)
    }
}

/// Wraps a closure; test scaffolding.
pub struct FnReconstructor<F>(pub F);

impl<F> Reconstructor for FnReconstructor<F>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    fn reconstruct(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        (self.0)(tape, y)
    }
}

// ---- Probes and per-step draws ----------------------------------------------

/// Divergence probes for one loss evaluation, drawn fresh per step.
/// The first-order probe is standard normal under Gaussian noise and
/// Rademacher (entries -1/+1) under Poisson and mixed noise; the
/// second-difference probe is always Rademacher.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub b: Tensor,
    pub c: Option<Tensor>,
}

impl ProbeSet {
    pub fn draw(
        noise: &NoiseParams,
        meas_shape: &[usize],
        stream: &RngStream,
        epoch: u64,
        item: u64,
    ) -> ProbeSet {
        let mut rb = stream.rng(StreamKey::new(Purpose::ProbeB, epoch, item));
        match noise.kind {
            NoiseKind::Gaussian => ProbeSet {
                b: gaussian_probe(meas_shape, &mut rb),
                c: None,
            },
            NoiseKind::Poisson => ProbeSet {
                b: bernoulli_probe(meas_shape, &mut rb),
                c: None,
            },
            NoiseKind::Mpg => {
                let mut rc = stream.rng(StreamKey::new(Purpose::ProbeC, epoch, item));
                ProbeSet {
                    b: bernoulli_probe(meas_shape, &mut rb),
                    c: Some(bernoulli_probe(meas_shape, &mut rc)),
                }
            }
        }
    }
}

/// Where the robust-equivariance noise comes from. Training samples from the
/// keyed stream; gradient checks freeze the randomness so the loss is a
/// deterministic function of the parameters.
pub enum ReqDraw<'a> {
    Stream { stream: &'a RngStream, key: StreamKey },
    /// Additive Gaussian noise tensor (already scaled by sigma), held fixed.
    FrozenAdditive(&'a Tensor),
    /// The corrupted re-measurement itself, held fixed (Poisson and mixed
    /// noise admit no additive reparameterisation).
    FrozenMeasurement(&'a Tensor),
}

/// All randomness consumed by one variant-loss evaluation.
pub struct StepDraws<'a> {
    pub g: usize,
    pub probes: ProbeSet,
    pub req: ReqDraw<'a>,
}

impl<'a> StepDraws<'a> {
    /// The training-time draw: group element, probes and robust-equivariance
    /// noise all come from purpose-tagged streams keyed by (epoch, item).
    pub fn sample(
        noise: &NoiseParams,
        op: &dyn ForwardOperator,
        group: &TransformGroup,
        stream: &'a RngStream,
        epoch: u64,
        item: u64,
    ) -> StepDraws<'a> {
        let mut rg = stream.rng(StreamKey::new(Purpose::GroupElem, epoch, item));
        StepDraws {
            g: group.sample(&mut rg),
            probes: ProbeSet::draw(noise, &op.measurement_shape(), stream, epoch, item),
            req: ReqDraw::Stream {
                stream,
                key: StreamKey::new(Purpose::ReqNoise, epoch, item),
            },
        }
    }
}

// ---- Consistency-family losses ----------------------------------------------

fn mc_from(tape: &mut Tape, op: &dyn ForwardOperator, y: NodeId, afy: NodeId) -> NodeId {
    let m = op.measurement_len() as f64;
    let r = tape.sub(y, afy);
    let ss = tape.sum_sq(r);
    tape.scale(ss, 1.0 / m)
}

/// (1/m) |y - A(f(y))|^2
pub fn mc_loss(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
) -> Result<NodeId> {
    let x1 = f.reconstruct(tape, y)?;
    let afy = op.apply_t(tape, x1)?;
    Ok(mc_from(tape, op, y, afy))
}

/// (1/m) |u - A(f(y))|^2 with clean measurements u (oracle access).
pub fn oracle_mc_loss(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    u: NodeId,
) -> Result<NodeId> {
    let x1 = f.reconstruct(tape, y)?;
    let afy = op.apply_t(tape, x1)?;
    Ok(mc_from(tape, op, u, afy))
}

/// (1/n) |x - f(y)|^2 with ground-truth images x.
pub fn sup_loss(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    y: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let n = tape.value(x).numel() as f64;
    let x1 = f.reconstruct(tape, y)?;
    let d = tape.sub(x, x1);
    let ss = tape.sum_sq(d);
    Ok(tape.scale(ss, 1.0 / n))
}

/// Single-probe Monte-Carlo divergence of a measurement-to-measurement map:
/// (1/tau) b' (h(y + tau b) - h(y)). Value-level; the tape losses inline the
/// same construction.
pub fn mc_divergence(
    h: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    y: &Tensor,
    b: &Tensor,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(ReiError::domain(format!("tau must be positive, got {tau}")));
    }
    let shifted = y.add(&b.scale(tau))?;
    let diff = h(&shifted)?.sub(&h(y)?)?;
    Ok(b.dot(&diff)? / tau)
}

fn sure_gaussian_from(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    afy: NodeId,
    sigma: f64,
    tau: f64,
    b: &Tensor,
) -> Result<NodeId> {
    let m = op.measurement_len() as f64;
    let mc = mc_from(tape, op, y, afy);
    if sigma == 0.0 {
        // All sigma^2 terms vanish; the estimator degenerates to plain
        // consistency, node for node.
        return Ok(mc);
    }
    let t1 = tape.offset(mc, -sigma * sigma);
    let bid = tape.input(b.clone());
    let tb = tape.scale(bid, tau);
    let yp = tape.add(y, tb);
    let x1p = f.reconstruct(tape, yp)?;
    let afyp = op.apply_t(tape, x1p)?;
    let diff = tape.sub(afyp, afy);
    let probe = tape.dot(bid, diff);
    let term = tape.scale(probe, 2.0 * sigma * sigma / (m * tau));
    Ok(tape.add(t1, term))
}

/// Gaussian-noise unbiased risk estimate of the clean consistency loss:
/// (1/m)|y - A f(y)|^2 - sigma^2
///   + (2 sigma^2 / (m tau)) b' (A f(y + tau b) - A f(y)),  b ~ N(0, I).
pub fn sure_gaussian(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    sigma: f64,
    tau: f64,
    b: &Tensor,
) -> Result<NodeId> {
    let x1 = f.reconstruct(tape, y)?;
    let afy = op.apply_t(tape, x1)?;
    sure_gaussian_from(tape, f, op, y, afy, sigma, tau, b)
}

fn sure_poisson_from(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    afy: NodeId,
    gamma: f64,
    tau: f64,
    b: &Tensor,
) -> Result<NodeId> {
    if !(gamma > 0.0) {
        return Err(ReiError::domain(format!("poisson gain must be positive, got {gamma}")));
    }
    let m = op.measurement_len() as f64;
    let mc = mc_from(tape, op, y, afy);
    let sy = tape.sum(y);
    let count_term = tape.scale(sy, -gamma / m);
    let t1 = tape.add(mc, count_term);
    let bid = tape.input(b.clone());
    let tb = tape.scale(bid, tau);
    let yp = tape.add(y, tb);
    let x1p = f.reconstruct(tape, yp)?;
    let afyp = op.apply_t(tape, x1p)?;
    let diff = tape.sub(afyp, afy);
    let by = tape.mul(bid, y);
    let probe = tape.dot(by, diff);
    let term = tape.scale(probe, 2.0 * gamma / (m * tau));
    Ok(tape.add(t1, term))
}

/// Poisson-noise unbiased risk estimate:
/// (1/m)|y - A f(y)|^2 - (gamma/m) 1'y
///   + (2 gamma / (m tau)) (b o y)' (A f(y + tau b) - A f(y)),
/// with Rademacher b.
pub fn sure_poisson(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    gamma: f64,
    tau: f64,
    b: &Tensor,
) -> Result<NodeId> {
    let x1 = f.reconstruct(tape, y)?;
    let afy = op.apply_t(tape, x1)?;
    sure_poisson_from(tape, f, op, y, afy, gamma, tau, b)
}

#[allow(clippy::too_many_arguments)]
fn sure_mpg_from(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    afy: NodeId,
    gamma: f64,
    sigma: f64,
    tau: f64,
    b: &Tensor,
    c: &Tensor,
) -> Result<NodeId> {
    if !(gamma > 0.0) {
        return Err(ReiError::domain(format!("mpg gain must be positive, got {gamma}")));
    }
    let m = op.measurement_len() as f64;
    let sig2 = sigma * sigma;
    let mc = mc_from(tape, op, y, afy);
    let sy = tape.sum(y);
    let count_term = tape.scale(sy, -gamma / m);
    let mut total = tape.add(mc, count_term);
    if sig2 > 0.0 {
        total = tape.offset(total, -sig2);
    }

    // First-order probe: (2/(m tau)) (b o (gamma y + sigma^2 1))' delta.
    let bid = tape.input(b.clone());
    let tb = tape.scale(bid, tau);
    let yp = tape.add(y, tb);
    let x1p = f.reconstruct(tape, yp)?;
    let afyp = op.apply_t(tape, x1p)?;
    let diff = tape.sub(afyp, afy);
    let gy = tape.scale(y, gamma);
    let weights = if sig2 > 0.0 {
        let w = tape.offset(gy, sig2);
        tape.mul(bid, w)
    } else {
        tape.mul(bid, gy)
    };
    let probe1 = tape.dot(weights, diff);
    let term1 = tape.scale(probe1, 2.0 / (m * tau));
    total = tape.add(total, term1);

    // Second-difference probe: (2 gamma sigma^2 / (m tau^2)) c' delta2, a
    // second-order finite difference that is exactly zero for linear maps.
    if sig2 > 0.0 {
        let cid = tape.input(c.clone());
        let tc = tape.scale(cid, tau);
        let ypc = tape.add(y, tc);
        let ymc = tape.sub(y, tc);
        let xpc = f.reconstruct(tape, ypc)?;
        let afypc = op.apply_t(tape, xpc)?;
        let xmc = f.reconstruct(tape, ymc)?;
        let afymc = op.apply_t(tape, xmc)?;
        let s = tape.add(afypc, afymc);
        let two_afy = tape.scale(afy, 2.0);
        let d2 = tape.sub(s, two_afy);
        let probe2 = tape.dot(cid, d2);
        let term2 = tape.scale(probe2, 2.0 * gamma * sig2 / (m * tau * tau));
        total = tape.add(total, term2);
    }
    Ok(total)
}

/// Mixed Poisson-Gaussian unbiased risk estimate:
/// (1/m)|y - A f(y)|^2 - (gamma/m) 1'y - sigma^2
///   + (2/(m tau)) (b o (gamma y + sigma^2 1))' (A f(y+tau b) - A f(y))
///   + (2 gamma sigma^2/(m tau^2)) c' (A f(y+tau c) + A f(y-tau c) - 2 A f(y)),
/// with Rademacher b and c.
#[allow(clippy::too_many_arguments)]
pub fn sure_mpg(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    gamma: f64,
    sigma: f64,
    tau: f64,
    b: &Tensor,
    c: &Tensor,
) -> Result<NodeId> {
    let x1 = f.reconstruct(tape, y)?;
    let afy = op.apply_t(tape, x1)?;
    sure_mpg_from(tape, f, op, y, afy, gamma, sigma, tau, b, c)
}

/// Dispatches to the estimator matching the noise model, sharing the given
/// A(f(y)) node.
#[allow(clippy::too_many_arguments)]
fn sure_from(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    y: NodeId,
    afy: NodeId,
    noise: &NoiseParams,
    tau: f64,
    probes: &ProbeSet,
) -> Result<NodeId> {
    match noise.kind {
        NoiseKind::Gaussian => sure_gaussian_from(tape, f, op, y, afy, noise.sigma, tau, &probes.b),
        NoiseKind::Poisson => sure_poisson_from(tape, f, op, y, afy, noise.gamma, tau, &probes.b),
        NoiseKind::Mpg => {
            let c = probes
                .c
                .as_ref()
                .ok_or_else(|| ReiError::config("mpg risk estimate needs the c probe"))?;
            sure_mpg_from(tape, f, op, y, afy, noise.gamma, noise.sigma, tau, &probes.b, c)
        }
    }
}

// ---- Equivariance-family losses ----------------------------------------------

/// Common pipeline: x2 = T_g(x1), re-measure, corrupt, re-reconstruct,
/// compare. `corrupt` turns the clean re-measurement node into the input of
/// the second reconstruction.
fn eq_core(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    group: &TransformGroup,
    g: usize,
    x1: NodeId,
    corrupt: &mut dyn FnMut(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let n = op.image_len() as f64;
    let x2 = group.apply_t(tape, g, x1)?;
    let u2 = op.apply_t(tape, x2)?;
    let ytil = corrupt(tape, u2)?;
    let x3 = f.reconstruct(tape, ytil)?;
    let d = tape.sub(x2, x3);
    let ss = tape.sum_sq(d);
    Ok(tape.scale(ss, 1.0 / n))
}

/// System equivariance: (1/n) |T_g f(y) - f(A(T_g f(y)))|^2.
pub fn eq_loss(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    group: &TransformGroup,
    g: usize,
    y: NodeId,
) -> Result<NodeId> {
    let x1 = f.reconstruct(tape, y)?;
    eq_core(tape, f, op, group, g, x1, &mut |_t, u2| Ok(u2))
}

fn req_corrupt(
    tape: &mut Tape,
    u2: NodeId,
    noise: &NoiseParams,
    draw: &ReqDraw,
) -> Result<NodeId> {
    match draw {
        ReqDraw::FrozenMeasurement(t) => Ok(tape.input((*t).clone())),
        ReqDraw::FrozenAdditive(t) => {
            let nid = tape.input((*t).clone());
            Ok(tape.add(u2, nid))
        }
        ReqDraw::Stream { stream, key } => match noise.kind {
            NoiseKind::Gaussian => {
                if noise.sigma == 0.0 {
                    // Noiseless: same node, same code path as plain
                    // equivariance.
                    return Ok(u2);
                }
                let mut rng = stream.rng(*key);
                let eps = gaussian_probe(tape.value(u2).shape(), &mut rng);
                let nid = tape.input(eps.scale(noise.sigma));
                // Additive reparameterisation: the gradient flows through the
                // re-measurement, the draw itself is a constant.
                Ok(tape.add(u2, nid))
            }
            NoiseKind::Poisson => {
                let mut rng = stream.rng(*key);
                let u2val = tape.value(u2).map(|v| v.max(0.0));
                let ytil = sample_poisson(&u2val, noise.gamma, &mut rng)?;
                // Discrete draw: enters the tape as data, no gradient path.
                Ok(tape.input(ytil))
            }
            NoiseKind::Mpg => {
                let mut rng = stream.rng(*key);
                let u2val = tape.value(u2).map(|v| v.max(0.0));
                let ytil = sample_mpg(&u2val, noise.gamma, noise.sigma, &mut rng)?;
                Ok(tape.input(ytil))
            }
        },
    }
}

/// Robust equivariance: like `eq_loss`, but the re-measurement of the
/// transformed estimate is corrupted by the task's noise model before the
/// second reconstruction. Noiseless Gaussian reduces to `eq_loss` exactly.
#[allow(clippy::too_many_arguments)]
pub fn req_loss(
    tape: &mut Tape,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    group: &TransformGroup,
    g: usize,
    y: NodeId,
    noise: &NoiseParams,
    draw: &ReqDraw,
) -> Result<NodeId> {
    let x1 = f.reconstruct(tape, y)?;
    eq_core(tape, f, op, group, g, x1, &mut |t, u2| {
        req_corrupt(t, u2, noise, draw)
    })
}

// ---- The assembled objective ---------------------------------------------------

/// One training example as seen by the loss: the measurement, plus optional
/// ground truth for the supervised and oracle variants.
#[derive(Clone, Copy)]
pub struct BatchItem<'a> {
    pub y: &'a Tensor,
    pub x: Option<&'a Tensor>,
    pub u: Option<&'a Tensor>,
}

/// Raw term values for logging, before any alpha / scale weighting.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermBreakdown {
    /// MC, SURE, oracle-MC or supervised term.
    pub consistency: f64,
    /// EQ or REQ term; zero when the variant has none.
    pub equivariance: f64,
}

/// Assembles the configured variant on the tape and returns the scalar loss
/// node together with the raw per-term values.
#[allow(clippy::too_many_arguments)]
pub fn variant_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    item: &BatchItem,
    f: &dyn Reconstructor,
    op: &dyn ForwardOperator,
    group: &TransformGroup,
    noise: &NoiseParams,
    draws: &StepDraws,
) -> Result<(NodeId, TermBreakdown)> {
    cfg.validate()?;
    noise.validate()?;
    let y = tape.input(item.y.clone());

    // Supervised: no shared pieces with the rest.
    if cfg.variant == Variant::Sup {
        let x = item.x.ok_or_else(|| {
            ReiError::config("supervised training needs ground-truth images")
        })?;
        let xid = tape.input(x.clone());
        let l = sup_loss(tape, f, y, xid)?;
        let breakdown = TermBreakdown {
            consistency: tape.value(l).item(),
            equivariance: 0.0,
        };
        return Ok((l, breakdown));
    }

    // Shared estimate and re-measurement.
    let x1 = f.reconstruct(tape, y)?;
    let afy = op.apply_t(tape, x1)?;

    let consistency = match cfg.variant {
        Variant::Mc | Variant::Ei | Variant::Ei1 => mc_from(tape, op, y, afy),
        Variant::Sure | Variant::Ei2 | Variant::Rei => {
            sure_from(tape, f, op, y, afy, noise, cfg.tau, &draws.probes)?
        }
        Variant::EiOracle | Variant::ReiOracle => {
            let u = item.u.ok_or_else(|| {
                ReiError::config("oracle variants need clean measurements")
            })?;
            let uid = tape.input(u.clone());
            mc_from(tape, op, uid, afy)
        }
        Variant::Sup => unreachable!(),
    };
    let mut breakdown = TermBreakdown {
        consistency: tape.value(consistency).item(),
        equivariance: 0.0,
    };

    let scaled_consistency = if cfg.variant == Variant::Rei && cfg.sure_scale != 1.0 {
        tape.scale(consistency, cfg.sure_scale)
    } else {
        consistency
    };

    if !cfg.variant.uses_equivariance() || cfg.alpha == 0.0 {
        return Ok((scaled_consistency, breakdown));
    }

    let eq_term = if cfg.variant.uses_robust_equivariance() {
        eq_core(tape, f, op, group, draws.g, x1, &mut |t, u2| {
            req_corrupt(t, u2, noise, &draws.req)
        })?
    } else {
        eq_core(tape, f, op, group, draws.g, x1, &mut |_t, u2| Ok(u2))?
    };
    breakdown.equivariance = tape.value(eq_term).item();

    let weighted = if cfg.alpha != 1.0 {
        tape.scale(eq_term, cfg.alpha)
    } else {
        eq_term
    };
    Ok((tape.add(scaled_consistency, weighted), breakdown))
}
