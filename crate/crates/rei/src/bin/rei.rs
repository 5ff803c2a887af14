//! Command-line driver: training, evaluation, and the verification suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rei::harness::experiment::{run_experiment, sweep, ExperimentConfig};
use rei::harness::gradcheck::gradcheck_all;
use rei::harness::metrics::psnr;
use rei::harness::sure_check::{standard_noise, sure_check, DenoiserSpec};
use rei::noise::NoiseKind;
use rei::operators::op_selfcheck;
use rei::trainer::{load_checkpoint, TaskKind};

#[derive(Parser)]
#[command(name = "rei", about = "Unsupervised image reconstruction from noisy partial measurements", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Poisson,
    Mpg,
}

impl From<NoiseArg> for NoiseKind {
    fn from(v: NoiseArg) -> Self {
        match v {
            NoiseArg::Gaussian => NoiseKind::Gaussian,
            NoiseArg::Poisson => NoiseKind::Poisson,
            NoiseArg::Mpg => NoiseKind::Mpg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Mri,
    Inpaint,
    Ct,
}

impl From<TaskArg> for TaskKind {
    fn from(v: TaskArg) -> Self {
        match v {
            TaskArg::Mri => TaskKind::Mri,
            TaskArg::Inpaint => TaskKind::Inpaint,
            TaskArg::Ct => TaskKind::Ct,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the variants requested in the config and write reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's data.out_dir or ./rei_out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the config's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo unbiasedness check of the risk estimators.
    SureCheck {
        #[arg(long, value_enum)]
        noise: NoiseArg,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adjoint/pseudo-inverse self-checks of a task's operator.
    OpCheck {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Backward pass against finite differences on all loss variants.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the experiment once per noise level and emit figure data.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// sigma or gamma.
        #[arg(long)]
        param: String,
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(failures) if failures == 0 => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{failures} check(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> rei::Result<usize> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out_dir = out
                .or_else(|| cfg.data.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("rei_out"));
            let report = run_experiment(&cfg, Some(&out_dir))?;
            println!(
                "baseline pinv: {:.2} +- {:.2} dB over {} test images",
                report.baseline_mean,
                report.baseline_std,
                report.baseline_per_image.len()
            );
            for v in &report.variants {
                println!(
                    "{:<10} {:.2} +- {:.2} dB ({:.1} s)",
                    v.variant.name(),
                    v.mean,
                    v.std,
                    v.runtime_s
                );
            }
            println!("report written to {}", out_dir.display());
            Ok(0)
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let dataset = cfg.build_dataset()?;
            let op = cfg.build_operator()?;
            let test = dataset.materialize(
                cfg.task,
                &dataset.test_idx,
                op.as_ref(),
                &cfg.noise,
                cfg.seed ^ 0x7e57,
            )?;
            let mut rows = String::from("item,psnr,psnr_pinv\n");
            let mut acc = (0.0, 0.0);
            for (i, item) in test.iter().enumerate() {
                let lifted = op.pinv(&item.y)?;
                let recon = ckpt.model.apply(&lifted)?;
                let p = psnr(&recon, item.x.as_ref().unwrap(), 1.0)?;
                let pb = psnr(&lifted, item.x.as_ref().unwrap(), 1.0)?;
                rows.push_str(&format!("{i},{p},{pb}\n"));
                acc = (acc.0 + p, acc.1 + pb);
                println!("item {i:>3}: {p:.2} dB (pinv {pb:.2} dB)");
            }
            let n = test.len() as f64;
            println!("mean: {:.2} dB (pinv {:.2} dB)", acc.0 / n, acc.1 / n);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("eval.csv"), rows)?;
            }
            Ok(0)
        }
        Command::SureCheck { noise, draws, seed } => {
            let params = standard_noise(noise.into());
            let mut failures = 0;
            for denoiser in DenoiserSpec::ALL {
                let report = sure_check(&params, denoiser, draws, seed + 1)?;
                println!("{report}");
                if !report.pass {
                    failures += 1;
                }
            }
            Ok(failures)
        }
        Command::OpCheck { task, side, seed } => {
            let cfg = ExperimentConfig {
                task: task.into(),
                seed,
                noise: standard_noise(NoiseKind::Gaussian),
                data: rei::harness::experiment::DataSection {
                    side: Some(side),
                    ..Default::default()
                },
                operator: Default::default(),
                group: Default::default(),
                loss: Default::default(),
                train: Default::default(),
                model: Default::default(),
            };
            let op = cfg.build_operator()?;
            let report = op_selfcheck(op.as_ref(), seed);
            print!("{report}");
            Ok(usize::from(report.max_residual() > 1e-8))
        }
        Command::Gradcheck { instances, seed } => {
            let results = gradcheck_all(instances, seed)?;
            let mut failures = 0;
            for r in &results {
                println!("{r}");
                if !r.pass {
                    failures += 1;
                }
            }
            Ok(failures)
        }
        Command::Sweep { config, param, values, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out_dir = out
                .or_else(|| cfg.data.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("rei_sweep"));
            let rows = sweep(&cfg, &param, &values, Some(&out_dir))?;
            for r in &rows {
                println!(
                    "{:<10} {}: {:.2} +- {:.2} dB",
                    r.method, r.noise_level, r.psnr_mean, r.psnr_std
                );
            }
            println!("figure data written to {}", out_dir.display());
            Ok(0)
        }
    }
}
