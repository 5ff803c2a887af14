//! Adam optimisation, the epoch loop, and deterministic checkpointing.
//!
//! Determinism contract: (seed, config, dataset) fully determines every
//! logged number. All randomness flows through purpose-tagged streams keyed
//! by (epoch, item), so resuming from a checkpoint replays the exact same
//! draws as an uninterrupted run; Adam state is part of the checkpoint.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ReiError, Result};
use crate::losses::{variant_loss, BatchItem, LossConfig, ModelReconstructor, StepDraws, Variant};
use crate::model::{ModelSpec, ReconModel};
use crate::noise::{NoiseParams, RngStream};
use crate::operators::ForwardOperator;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transforms::TransformGroup;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mri,
    Inpaint,
    Ct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Decay the rate by `decay_factor` after every multiple of this epoch
    /// count has passed.
    #[serde(default)]
    pub decay_every: Option<usize>,
    /// Explicit epochs after which the rate decays (combined with
    /// `decay_every`).
    #[serde(default)]
    pub decay_points: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Optional global-norm gradient clip; nonlinear CT can spike early.
    #[serde(default)]
    pub clip_grad: Option<f64>,
}

fn default_decay_factor() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Task presets; epochs/batch/rate/schedule per task, standard otherwise.
    pub fn preset(task: TaskKind, loss: LossConfig, seed: u64) -> Self {
        let (lr0, batch_size, epochs, decay_every, decay_points) = match task {
            TaskKind::Mri => (5e-4, 2, 500, None, vec![300]),
            TaskKind::Inpaint => (1e-4, 1, 500, Some(100), vec![]),
            TaskKind::Ct => (5e-4, 2, 3000, Some(1000), vec![]),
        };
        TrainConfig {
            epochs,
            batch_size,
            lr0,
            decay_every,
            decay_points,
            decay_factor: 0.1,
            weight_decay: 1e-8,
            seed,
            loss,
            checkpoint_every: None,
            clip_grad: None,
        }
    }

    /// lr(epoch) = lr0 * factor^(number of decay points passed), exact.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let mut passed = self
            .decay_points
            .iter()
            .filter(|&&p| p > 0 && epoch > p)
            .count();
        if let Some(every) = self.decay_every {
            if every > 0 && epoch > every {
                passed += (epoch - 1) / every;
            }
        }
        self.lr0 * self.decay_factor.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ReiError::config("epochs and batch_size must be positive"));
        }
        if !(self.lr0 >= 0.0) {
            return Err(ReiError::config(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }
}

/// Standard bias-corrected Adam; weight decay is added to the gradient
/// (coupled L2, not the decoupled form).
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(ReiError::shape(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// One training example: the measurement, plus ground truth where available
/// (evaluation, supervised and oracle variants).
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub y: Tensor,
    pub x: Option<Tensor>,
    pub u: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    /// Mean raw consistency-family term.
    pub consistency: f64,
    /// Mean raw equivariance-family term.
    pub equivariance: f64,
    /// Test-split reconstruction quality when an evaluation hook is set.
    pub psnr: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ReconModel,
    pub state: AdamState,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub op: &'a dyn ForwardOperator,
    pub group: &'a TransformGroup,
    pub noise: &'a NoiseParams,
    /// Written at the configured interval and on non-finite aborts.
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after each epoch, typically test-split quality.
    pub eval_hook: Option<&'a dyn Fn(&ReconModel) -> f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &'a TrainConfig,
        op: &'a dyn ForwardOperator,
        group: &'a TransformGroup,
        noise: &'a NoiseParams,
    ) -> Self {
        Trainer {
            config,
            op,
            group,
            noise,
            checkpoint_dir: None,
            eval_hook: None,
        }
    }

    /// Full run from a fresh optimizer.
    pub fn run(&self, items: &[TrainItem], model: ReconModel) -> Result<TrainOutcome> {
        let state = AdamState::new(model.params.numel());
        self.fit(items, model, state, 1, Vec::new())
    }

    /// Continue from epoch `start_epoch` (the first epoch still to run).
    pub fn resume(
        &self,
        items: &[TrainItem],
        model: ReconModel,
        state: AdamState,
        start_epoch: usize,
    ) -> Result<TrainOutcome> {
        self.fit(items, model, state, start_epoch, Vec::new())
    }

    fn fit(
        &self,
        items: &[TrainItem],
        model: ReconModel,
        mut state: AdamState,
        start_epoch: usize,
        mut history: Vec<EpochRecord>,
    ) -> Result<TrainOutcome> {
        self.config.validate()?;
        self.noise.validate()?;
        if items.is_empty() {
            return Err(ReiError::Dataset("training set is empty".into()));
        }
        let cfg = self.config;
        let stream = RngStream::new(cfg.seed);
        let spec = model.spec.clone();
        let mut params: Vec<f64> = model.params.data().to_vec();

        for epoch in start_epoch..=cfg.epochs {
            let lr = cfg.learning_rate(epoch);
            let mut sums = (0.0f64, 0.0f64, 0.0f64);
            let mut steps = 0usize;

            for (chunk_idx, chunk) in items.chunks(cfg.batch_size).enumerate() {
                let mut tape = Tape::new();
                let pid = tape.input(Tensor::from_vec(vec![params.len()], params.clone())?);
                let f = ModelReconstructor {
                    spec: &spec,
                    params: pid,
                    op: self.op,
                };
                let mut total = None;
                let mut terms_acc = (0.0, 0.0);
                for (offset, item) in chunk.iter().enumerate() {
                    let item_idx = (chunk_idx * cfg.batch_size + offset) as u64;
                    let draws = StepDraws::sample(
                        self.noise,
                        self.op,
                        self.group,
                        &stream,
                        epoch as u64,
                        item_idx,
                    );
                    let batch_item = BatchItem {
                        y: &item.y,
                        x: item.x.as_ref(),
                        u: item.u.as_ref(),
                    };
                    let (l, terms) = variant_loss(
                        &mut tape,
                        &cfg.loss,
                        &batch_item,
                        &f,
                        self.op,
                        self.group,
                        self.noise,
                        &draws,
                    )?;
                    terms_acc.0 += terms.consistency;
                    terms_acc.1 += terms.equivariance;
                    total = Some(match total {
                        None => l,
                        Some(acc) => tape.add(acc, l),
                    });
                }
                let total = total.expect("non-empty chunk");
                let loss_node = if chunk.len() > 1 {
                    tape.scale(total, 1.0 / chunk.len() as f64)
                } else {
                    total
                };
                let loss_val = tape.value(loss_node).item();
                if !loss_val.is_finite() {
                    self.diagnostic_snapshot(&spec, &params, &state, epoch)?;
                    return Err(ReiError::NonFinite(format!(
                        "loss {loss_val} at epoch {epoch}, step {chunk_idx}"
                    )));
                }
                let grads = tape.backward(loss_node)?;
                let grad = grads.wrt(&tape, pid);
                if !grad.all_finite() {
                    self.diagnostic_snapshot(&spec, &params, &state, epoch)?;
                    return Err(ReiError::NonFinite(format!(
                        "gradient at epoch {epoch}, step {chunk_idx}"
                    )));
                }
                let mut g = grad.data().to_vec();
                if let Some(max_norm) = cfg.clip_grad {
                    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > max_norm {
                        let s = max_norm / norm;
                        for v in g.iter_mut() {
                            *v *= s;
                        }
                    }
                }
                adam_step(&mut state, &mut params, &g, lr, cfg.weight_decay)?;

                sums.0 += loss_val;
                sums.1 += terms_acc.0 / chunk.len() as f64;
                sums.2 += terms_acc.1 / chunk.len() as f64;
                steps += 1;
            }

            let snapshot = ReconModel::with_params(
                spec.clone(),
                Tensor::from_vec(vec![params.len()], params.clone())?,
            )?;
            let psnr = self.eval_hook.map(|hook| hook(&snapshot));
            history.push(EpochRecord {
                epoch,
                lr,
                loss: sums.0 / steps as f64,
                consistency: sums.1 / steps as f64,
                equivariance: sums.2 / steps as f64,
                psnr,
            });

            if let (Some(dir), Some(every)) = (&self.checkpoint_dir, cfg.checkpoint_every) {
                if every > 0 && epoch % every == 0 && epoch < cfg.epochs {
                    let path = dir.join(format!("epoch_{epoch:05}.ckpt"));
                    save_checkpoint(&path, &snapshot, &state, cfg, epoch)?;
                }
            }
        }

        let model = ReconModel::with_params(spec, Tensor::from_vec(vec![params.len()], params)?)?;
        Ok(TrainOutcome {
            model,
            state,
            history,
        })
    }

    fn diagnostic_snapshot(
        &self,
        spec: &ModelSpec,
        params: &[f64],
        state: &AdamState,
        epoch: usize,
    ) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            let model = ReconModel::with_params(
                spec.clone(),
                Tensor::from_vec(vec![params.len()], params.to_vec())?,
            )?;
            let path = dir.join("diagnostic.ckpt");
            save_checkpoint(&path, &model, state, self.config, epoch)?;
        }
        Ok(())
    }
}

// ---- Checkpoint format -------------------------------------------------------
//
// magic "REIC" | version u32 le | header length u32 le | UTF-8 JSON header |
// little-endian f64 payload: params, then first and second Adam moments.

const MAGIC: &[u8; 4] = b"REIC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelSpec,
    param_len: usize,
    adam_t: u64,
    epoch: usize,
    seed: u64,
    config: TrainConfig,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ReconModel,
    pub state: AdamState,
    pub config: TrainConfig,
    /// Last completed epoch.
    pub epoch: usize,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ReconModel,
    state: &AdamState,
    config: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.spec.clone(),
        param_len: model.params.numel(),
        adam_t: state.t,
        epoch,
        seed: config.seed,
        config: config.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = Vec::with_capacity(12 + header_json.len() + 24 * model.params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for section in [model.params.data(), &state.m[..], &state.v[..]] {
        for v in section {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(ReiError::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ReiError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(ReiError::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    let n = header.param_len;
    let payload = &bytes[12 + hlen..];
    if payload.len() != 3 * n * 8 {
        return Err(ReiError::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            3 * n * 8
        )));
    }
    let read_section = |k: usize| -> Vec<f64> {
        payload[k * n * 8..(k + 1) * n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let params = Tensor::from_vec(vec![n], read_section(0))?;
    if header.model.param_count() != n {
        return Err(ReiError::Format("parameter count disagrees with layer spec".into()));
    }
    Ok(Checkpoint {
        model: ReconModel::with_params(header.model, params)?,
        state: AdamState {
            m: read_section(1),
            v: read_section(2),
            t: header.adam_t,
        },
        config: header.config,
        epoch: header.epoch,
    })
}

/// Writes the per-epoch history as CSV: epoch, lr, loss terms, psnr.
pub fn write_metrics_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::from("epoch,lr,loss,consistency,equivariance,psnr\n");
    for r in history {
        let psnr = match r.psnr {
            Some(p) if p.is_infinite() => "inf".to_string(),
            Some(p) => format!("{p:.17e}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            r.epoch, r.lr, r.loss, r.consistency, r.equivariance, psnr
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Convenience: the default loss configuration for a task, with the
/// equivariance weight, probe step and consistency scaling the task calls
/// for (CT re-scales its estimator because of the exponential measurement
/// magnitudes).
pub fn default_loss_for(task: TaskKind, variant: Variant) -> LossConfig {
    let mut cfg = LossConfig::new(variant);
    match task {
        TaskKind::Mri | TaskKind::Inpaint => {
            cfg.alpha = 1.0;
            cfg.tau = 1e-2;
        }
        TaskKind::Ct => {
            cfg.alpha = 1000.0;
            cfg.tau = 10.0;
            cfg.sure_scale = 1e-5;
        }
    }
    cfg
}
