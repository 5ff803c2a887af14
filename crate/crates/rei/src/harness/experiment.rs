//! Experiment configuration, the training/evaluation driver, and reports.
//!
//! A JSON config names the task, operator, noise, group, loss variants and
//! training schedule; unspecified fields fall back to the task preset. Each
//! requested variant trains a fresh model on the measurement-only training
//! split and is scored by test-split PSNR of f(y) against the baseline
//! backprojection. Independent variant cells may run in parallel threads
//! (capped by REI_THREADS); each cell is internally deterministic, so the
//! report does not depend on the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ReiError, Result};
use crate::harness::dataset::{
    load_dataset, synthetic_dataset, write_pgm, Dataset,
};
use crate::harness::metrics::{magnitude, psnr};
use crate::losses::{LossConfig, Variant};
use crate::model::{ModelSpec, ReconModel};
use crate::noise::{NoiseParams, Purpose, RngStream, StreamKey};
use crate::operators::{CtOp, ForwardOperator, InpaintOp, MriOp, RadonSpec};
use crate::trainer::{
    default_loss_for, save_checkpoint, write_metrics_csv, EpochRecord, TaskKind, TrainConfig,
    TrainItem, Trainer,
};
use crate::transforms::{GroupKind, TransformGroup};

// ---- Config sections ---------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DataSection {
    /// "synthetic" (default) or a directory of images.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub side: Option<usize>,
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OperatorSection {
    #[serde(default)]
    pub kept_fraction: Option<f64>,
    #[serde(default)]
    pub acceleration: Option<f64>,
    #[serde(default)]
    pub center_fraction: Option<f64>,
    #[serde(default)]
    pub views: Option<usize>,
    #[serde(default)]
    pub i0: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GroupSection {
    #[serde(default)]
    pub kind: Option<GroupKind>,
    #[serde(default)]
    pub order: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossSection {
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub sure_scale: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lr0: Option<f64>,
    #[serde(default)]
    pub decay_every: Option<usize>,
    #[serde(default)]
    pub decay_points: Option<Vec<usize>>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub clip_grad: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub depth: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub noise: NoiseParams,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub operator: OperatorSection,
    #[serde(default)]
    pub group: GroupSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Collects every validation failure instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.noise.validate() {
            problems.push(e.to_string());
        }
        let side = self.data.side.unwrap_or(default_side(self.task));
        let depth = self.model.depth.unwrap_or(1);
        if side % (1 << depth) != 0 {
            problems.push(format!("side {side} not divisible by 2^{depth}"));
        }
        if let Some(w) = self.model.width {
            if w == 0 || w > 32 {
                problems.push(format!("model width {w} outside 1..=32"));
            }
        }
        if let Some(f) = self.operator.kept_fraction {
            if !(f > 0.0 && f <= 1.0) {
                problems.push(format!("kept_fraction {f} outside (0, 1]"));
            }
        }
        if let Some(a) = self.operator.acceleration {
            if !(a >= 1.0) {
                problems.push(format!("acceleration {a} must be >= 1"));
            }
        }
        if let Some(every) = self.train.decay_every {
            if every == 0 {
                problems.push("decay_every must be positive".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ReiError::config(problems.join("; ")))
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        if self.loss.variants.is_empty() {
            vec![Variant::Rei]
        } else {
            self.loss.variants.clone()
        }
    }

    pub fn side(&self) -> usize {
        self.data.side.unwrap_or(default_side(self.task))
    }

    pub fn loss_config(&self, variant: Variant) -> LossConfig {
        let mut cfg = default_loss_for(self.task, variant);
        if let Some(a) = self.loss.alpha {
            cfg.alpha = a;
        }
        if let Some(t) = self.loss.tau {
            cfg.tau = t;
        }
        if let Some(s) = self.loss.sure_scale {
            cfg.sure_scale = s;
        }
        cfg
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig::preset(self.task, self.loss_config(variant), self.seed);
        if let Some(e) = self.train.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.train.batch_size {
            cfg.batch_size = b;
        }
        if let Some(l) = self.train.lr0 {
            cfg.lr0 = l;
        }
        if self.train.decay_every.is_some() {
            cfg.decay_every = self.train.decay_every;
            cfg.decay_points = Vec::new();
        }
        if let Some(p) = &self.train.decay_points {
            cfg.decay_points = p.clone();
            if self.train.decay_every.is_none() {
                cfg.decay_every = None;
            }
        }
        if let Some(w) = self.train.weight_decay {
            cfg.weight_decay = w;
        }
        cfg.checkpoint_every = self.train.checkpoint_every;
        cfg.clip_grad = self.train.clip_grad;
        cfg
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let channels = match self.task {
            TaskKind::Mri => 2,
            _ => 1,
        };
        ModelSpec::new(
            channels,
            self.model.width.unwrap_or(8),
            self.model.depth.unwrap_or(1),
        )
    }

    pub fn build_operator(&self) -> Result<Box<dyn ForwardOperator>> {
        let side = self.side();
        let stream = RngStream::new(self.seed);
        let mut rng = stream.rng(StreamKey::new(Purpose::Mask, 0, 0));
        Ok(match self.task {
            TaskKind::Inpaint => Box::new(InpaintOp::random(
                1,
                side,
                side,
                self.operator.kept_fraction.unwrap_or(0.7),
                &mut rng,
            )?),
            TaskKind::Mri => Box::new(MriOp::random(
                side,
                side,
                self.operator.acceleration.unwrap_or(4.0),
                self.operator.center_fraction.unwrap_or(0.08),
                &mut rng,
            )?),
            TaskKind::Ct => Box::new(CtOp::new(
                RadonSpec::new(self.operator.views.unwrap_or(50), side)?,
                self.operator.i0.unwrap_or(1e5),
            )?),
        })
    }

    pub fn build_group(&self) -> Result<TransformGroup> {
        let side = self.side();
        let kind = self.group.kind.unwrap_or(match self.task {
            TaskKind::Inpaint => GroupKind::Shift2d,
            _ => GroupKind::Rotate,
        });
        match kind {
            GroupKind::Shift2d => TransformGroup::shift2d(side, side),
            GroupKind::Rotate => TransformGroup::rotate(side, self.group.order.unwrap_or(360)),
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let side = self.side();
        let train = self.data.train.unwrap_or(50);
        let test = self.data.test.unwrap_or(10);
        let images = match self.data.source.as_deref() {
            None | Some("synthetic") => {
                synthetic_dataset(train + test, side, self.seed ^ 0xda7a).images
            }
            Some(dir) => load_dataset(Path::new(dir), side)?,
        };
        Dataset::split(images, train, test)
    }
}

fn default_side(task: TaskKind) -> usize {
    match task {
        TaskKind::Inpaint => 32,
        TaskKind::Mri => 32,
        TaskKind::Ct => 64,
    }
}

// ---- Reports -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub runtime_s: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub task: TaskKind,
    pub noise: NoiseParams,
    pub baseline_per_image: Vec<f64>,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub variants: Vec<VariantResult>,
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.iter().any(|v| v.is_infinite()) {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1.0);
    (mean, var.sqrt())
}

fn thread_cap() -> usize {
    std::env::var("REI_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

// ---- Running -------------------------------------------------------------------

/// Trains every requested variant and scores the test split. When `out_dir`
/// is set, writes per-variant metrics CSVs, the report CSV, reconstruction
/// images, the sampling mask and final checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dataset = cfg.build_dataset()?;
    let op = cfg.build_operator()?;
    let group = cfg.build_group()?;
    let spec = cfg.model_spec()?;
    let noise = cfg.noise;

    let train_items = dataset.materialize(cfg.task, &dataset.train_idx, op.as_ref(), &noise, cfg.seed)?;
    let test_items = dataset.materialize(
        cfg.task,
        &dataset.test_idx,
        op.as_ref(),
        &noise,
        cfg.seed ^ 0x7e57,
    )?;

    // Baseline: plain backprojection of the noisy measurements.
    let mut baseline_per_image = Vec::with_capacity(test_items.len());
    for item in &test_items {
        let recon = op.pinv(&item.y)?;
        baseline_per_image.push(psnr(&recon, item.x.as_ref().unwrap(), 1.0)?);
    }
    let (baseline_mean, baseline_std) = mean_std(&baseline_per_image);

    let variants = cfg.variants();
    let cap = thread_cap().max(1);
    let mut slots: Vec<Option<Result<VariantResult>>> = (0..variants.len()).map(|_| None).collect();

    for (chunk_idx, batch) in variants.chunks(cap).enumerate() {
        let offset = chunk_idx * cap;
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (k, &variant) in batch.iter().enumerate() {
                let train_items = &train_items;
                let test_items = &test_items;
                let op = op.as_ref();
                let group = &group;
                let spec = &spec;
                handles.push((
                    offset + k,
                    scope.spawn(move || {
                        run_variant(cfg, variant, spec, op, group, train_items, test_items, out_dir)
                    }),
                ));
            }
            for (idx, handle) in handles {
                slots[idx] = Some(handle.join().expect("variant thread panicked"));
            }
        });
    }

    let mut results = Vec::with_capacity(slots.len());
    for slot in slots {
        results.push(slot.expect("every variant scheduled")?);
    }

    let report = ExperimentReport {
        task: cfg.task,
        noise,
        baseline_per_image,
        baseline_mean,
        baseline_std,
        variants: results,
    };

    if let Some(dir) = out_dir {
        write_report_files(cfg, &report, op.as_ref(), &test_items, dir)?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    spec: &ModelSpec,
    op: &dyn ForwardOperator,
    group: &TransformGroup,
    train_items: &[TrainItem],
    test_items: &[TrainItem],
    out_dir: Option<&Path>,
) -> Result<VariantResult> {
    let started = Instant::now();
    let train_cfg = cfg.train_config(variant);
    // Every variant starts from the same initial weights: comparisons are
    // between objectives, not initialisations.
    let stream = RngStream::new(cfg.seed);
    let mut init_rng = stream.rng(StreamKey::new(Purpose::Init, 0, 0));
    let model = ReconModel::init(spec.clone(), &mut init_rng);

    let eval = |m: &ReconModel| -> f64 {
        let mut acc = 0.0;
        for item in test_items {
            let recon = op
                .pinv(&item.y)
                .and_then(|b| m.apply(&b))
                .expect("evaluation shapes are fixed");
            acc += psnr(&recon, item.x.as_ref().unwrap(), 1.0).expect("shapes match");
        }
        acc / test_items.len() as f64
    };

    let mut trainer = Trainer::new(&train_cfg, op, group, &cfg.noise);
    trainer.eval_hook = Some(&eval);
    let ckpt_dir = out_dir.map(|d| d.join(format!("checkpoints_{}", variant.name())));
    trainer.checkpoint_dir = ckpt_dir.clone();
    let outcome = trainer.run(train_items, model)?;

    let mut per_image = Vec::with_capacity(test_items.len());
    for item in test_items {
        let recon = outcome.model.apply(&op.pinv(&item.y)?)?;
        per_image.push(psnr(&recon, item.x.as_ref().unwrap(), 1.0)?);
    }
    let (mean, std) = mean_std(&per_image);

    if let Some(dir) = out_dir {
        write_metrics_csv(
            &dir.join(format!("metrics_{}.csv", variant.name())),
            &outcome.history,
        )?;
        save_checkpoint(
            &dir.join(format!("final_{}.ckpt", variant.name())),
            &outcome.model,
            &outcome.state,
            &train_cfg,
            train_cfg.epochs,
        )?;
        for (k, item) in test_items.iter().take(4).enumerate() {
            let recon = outcome.model.apply(&op.pinv(&item.y)?)?;
            let img = to_display(&recon);
            write_pgm(&dir.join(format!("recon_{}_{k:02}.pgm", variant.name())), &img)?;
        }
    }

    Ok(VariantResult {
        variant,
        per_image,
        mean,
        std,
        runtime_s: started.elapsed().as_secs_f64(),
        history: outcome.history,
    })
}

fn to_display(x: &crate::tensor::Tensor) -> crate::tensor::Tensor {
    match x.shape() {
        [2, _, _] => magnitude(x),
        [1, h, w] => x.reshaped(vec![*h, *w]).unwrap(),
        _ => x.clone(),
    }
}

fn write_report_files(
    cfg: &ExperimentConfig,
    report: &ExperimentReport,
    op: &dyn ForwardOperator,
    test_items: &[TrainItem],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut rows = String::from("variant,n_test,psnr_mean,psnr_std,runtime_s\n");
    rows.push_str(&format!(
        "pinv,{},{},{},0\n",
        report.baseline_per_image.len(),
        fmt(report.baseline_mean),
        fmt(report.baseline_std)
    ));
    for v in &report.variants {
        rows.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            v.variant.name(),
            v.per_image.len(),
            fmt(v.mean),
            fmt(v.std),
            v.runtime_s
        ));
    }
    fs::write(dir.join("report.csv"), rows)?;

    let mut per_image = String::from("variant,item,psnr\n");
    for (i, p) in report.baseline_per_image.iter().enumerate() {
        per_image.push_str(&format!("pinv,{i},{}\n", fmt(*p)));
    }
    for v in &report.variants {
        for (i, p) in v.per_image.iter().enumerate() {
            per_image.push_str(&format!("{},{i},{}\n", v.variant.name(), fmt(*p)));
        }
    }
    fs::write(dir.join("per_image.csv"), per_image)?;

    // Sampling pattern and baseline reconstructions for inspection.
    if let Some(mask) = op.sampling_pattern() {
        write_pgm(&dir.join("mask.pgm"), &mask)?;
    }
    for (k, item) in test_items.iter().take(4).enumerate() {
        let b = op.pinv(&item.y)?;
        write_pgm(&dir.join(format!("recon_pinv_{k:02}.pgm")), &to_display(&b))?;
        write_pgm(
            &dir.join(format!("truth_{k:02}.pgm")),
            &to_display(item.x.as_ref().unwrap()),
        )?;
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.17e}")
    }
}

// ---- Figure data ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct FigureRow {
    pub method: String,
    pub noise_level: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

/// Tidy CSV of quality-versus-noise-level curves: one row per (method,
/// level), sorted, ready for any plotting tool.
pub fn emit_figure_data(path: &Path, rows: &[FigureRow]) -> Result<()> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.noise_level.partial_cmp(&b.noise_level).unwrap())
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::from("method,noise_level,psnr_mean,psnr_std\n");
    for r in &sorted {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.method,
            fmt(r.noise_level),
            fmt(r.psnr_mean),
            fmt(r.psnr_std)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a figure CSV back; round-trip partner of `emit_figure_data`.
pub fn read_figure_data(path: &Path) -> Result<Vec<FigureRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(ReiError::Format(format!("bad figure row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            if s == "inf" {
                Ok(f64::INFINITY)
            } else {
                s.parse::<f64>()
                    .map_err(|e| ReiError::Format(format!("{s}: {e}")))
            }
        };
        rows.push(FigureRow {
            method: parts[0].to_string(),
            noise_level: parse(parts[1])?,
            psnr_mean: parse(parts[2])?,
            psnr_std: parse(parts[3])?,
        });
    }
    Ok(rows)
}

/// Runs the experiment once per value of the swept noise parameter and
/// collects figure rows for every method plus the backprojection baseline.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[f64],
    out_dir: Option<&Path>,
) -> Result<Vec<FigureRow>> {
    let mut rows = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        match param {
            "sigma" => c.noise.sigma = v,
            "gamma" => c.noise.gamma = v,
            other => {
                return Err(ReiError::config(format!(
                    "unknown sweep parameter '{other}' (expected sigma or gamma)"
                )))
            }
        }
        c.noise.validate()?;
        let sub_dir = out_dir.map(|d| d.join(format!("{param}_{v}")));
        let report = run_experiment(&c, sub_dir.as_deref())?;
        rows.push(FigureRow {
            method: "pinv".into(),
            noise_level: v,
            psnr_mean: report.baseline_mean,
            psnr_std: report.baseline_std,
        });
        for res in &report.variants {
            rows.push(FigureRow {
                method: res.variant.name().into(),
                noise_level: v,
                psnr_mean: res.mean,
                psnr_std: res.std,
            });
        }
    }
    if let Some(dir) = out_dir {
        emit_figure_data(&dir.join("figure.csv"), &rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            task: TaskKind::Inpaint,
            seed: 5,
            noise: NoiseParams::poisson(0.05).unwrap(),
            data: DataSection {
                source: None,
                side: Some(16),
                train: Some(4),
                test: Some(2),
                out_dir: None,
            },
            operator: OperatorSection::default(),
            group: GroupSection::default(),
            loss: LossSection {
                variants: vec![Variant::Mc],
                ..Default::default()
            },
            train: TrainSection {
                epochs: Some(2),
                batch_size: Some(2),
                ..Default::default()
            },
            model: ModelSection {
                width: Some(2),
                depth: Some(1),
            },
        }
    }

    #[test]
    fn tiny_experiment_round_trips_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let report = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert_eq!(report.variants.len(), 1);
        assert_eq!(report.variants[0].per_image.len(), 2);
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("per_image.csv").exists());
        assert!(dir.path().join("mask.pgm").exists());
        assert!(dir.path().join("metrics_MC.csv").exists());
        assert!(dir.path().join("final_MC.ckpt").exists());
    }

    #[test]
    fn experiments_are_reproducible() {
        let cfg = tiny_cfg();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.baseline_per_image, b.baseline_per_image);
        assert_eq!(a.variants[0].per_image, b.variants[0].per_image);
        for (ra, rb) in a.variants[0].history.iter().zip(&b.variants[0].history) {
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn figure_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            FigureRow {
                method: "REI".into(),
                noise_level: 0.1,
                psnr_mean: 21.25,
                psnr_std: 1.5,
            },
            FigureRow {
                method: "EI".into(),
                noise_level: 0.01,
                psnr_mean: 25.0,
                psnr_std: f64::INFINITY,
            },
            FigureRow {
                method: "REI".into(),
                noise_level: 0.01,
                psnr_mean: 30.0,
                psnr_std: 0.25,
            },
        ];
        let path = dir.path().join("figure.csv");
        emit_figure_data(&path, &rows).unwrap();
        let parsed = read_figure_data(&path).unwrap();
        // Sorted by (method, level).
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[0].method, "EI");
        assert_eq!(parsed[1], rows[2]);
        assert_eq!(parsed[2], rows[0]);
    }

    #[test]
    fn noiseless_full_mask_baseline_is_perfect() {
        // Full-mask inpainting without noise: the backprojection equals the
        // truth and the baseline hits the +infinity sentinel.
        let mut cfg = tiny_cfg();
        cfg.noise = NoiseParams::gaussian(0.0).unwrap();
        cfg.operator.kept_fraction = Some(1.0);
        cfg.loss.variants = vec![Variant::Mc];
        cfg.train.epochs = Some(1);
        let report = run_experiment(&cfg, None).unwrap();
        assert!(report
            .baseline_per_image
            .iter()
            .all(|p| p.is_infinite() && *p > 0.0));
        assert!(report.baseline_mean.is_infinite());
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let mut cfg = tiny_cfg();
        cfg.data.side = Some(15); // not divisible by 2
        cfg.operator.kept_fraction = Some(1.5);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("15"), "{err}");
        assert!(err.contains("1.5"), "{err}");
    }
}
