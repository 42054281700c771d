//! Command-line front end: dataset generation, training, evaluation,
//! ablation, plotting, gradient checks and dataset verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atrial_ecg::mesh::{gen_synthetic_atrium, save_mesh};
use atrial_ecg::pipeline::{
    self, checkpoint_experiment, eval_csv, evaluate, generate_dataset, load_checkpoint, load_dataset, prepare,
    run_ablation, run_training, tiny_model_config, tiny_sample, verify_dataset, write_plots, write_run, Dtype,
    ExperimentConfig,
};
use atrial_ecg::training::{grad_check, LogRow, Model, TrainSchedule};
use atrial_ecg::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "atrial-ecg",
    version,
    about = "Atrial voltage maps to Lead II ECG: data, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Split whole meshes instead of individual samples.
    #[arg(long)]
    split_by_mesh: bool,
    /// Store checkpoints as 64-bit floats.
    #[arg(long)]
    f64: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic atrium mesh (seed overrides the first mesh seed).
    GenMesh {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic dataset (seed overrides the first mesh seed).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write the best checkpoint and the log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-trace and aggregate metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the JSON and CSV reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain with each encoder component disabled and tabulate the metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG and CSV overlays of ground truth and prediction for one split.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter group on a tiny model.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Check every dataset blob against its checksum.
    Verify {
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<Option<ExperimentConfig>> {
    common.config.as_ref().map(ExperimentConfig::load).transpose()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_row(prefix: &str, r: &LogRow) {
    println!(
        "{prefix}epoch {:>3}  huber {:.5}  spec_entropy {:.5}  omega {:.4}  lr {:.2e}  val_r2 {:.4}",
        r.epoch, r.huber, r.spec_entropy, r.omega, r.lr, r.val_r2
    );
}

/// Configuration for commands that read a dataset: the dataset's own unless
/// `--config` is given, with `--seed` replacing the training seed.
fn experiment_for(common: &Common, data: &Path) -> Result<(ExperimentConfig, pipeline::Dataset)> {
    let dataset = load_dataset(data)?;
    let mut cfg = load_config(common)?.unwrap_or_else(|| dataset.manifest.config.clone());
    if let Some(seed) = common.seed {
        cfg.schedule.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, dataset))
}

fn checkpoint_split(checkpoint: &Path, data: &Path, split: &str) -> Result<(Model, pipeline::Prepared, f64, String)> {
    let (model, ck) = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let cfg = checkpoint_experiment(&dataset.manifest, &ck)?;
    let prepared = prepare(&dataset, &cfg, ck.split_by_mesh, Some(ck.norm))?;
    prepared.get(split)?;
    Ok((model, prepared, cfg.simulation.frame_dt, split.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMesh { common, out } => {
            let cfg = load_config(&common)?.unwrap_or_default();
            let seed = common.seed.unwrap_or(cfg.geometry.first_seed);
            let mesh = gen_synthetic_atrium(&cfg.geometry.atrium, seed)?;
            save_mesh(&mesh, &out)?;
            println!(
                "mesh seed {seed}: {} vertices, {} faces, diameter {:.1} mm -> {}",
                mesh.n_vertices(),
                mesh.n_faces(),
                mesh.bounding_diameter(),
                out.display()
            );
        }
        Command::GenData { common, out } => {
            let mut cfg = load_config(&common)?.unwrap_or_default();
            if let Some(seed) = common.seed {
                cfg.geometry.first_seed = seed;
            }
            let manifest = generate_dataset(&cfg, &out)?;
            for f in &manifest.failures {
                eprintln!("failed: mesh {} node {:?}: {}", f.mesh_index, f.pacing_node, f.reason);
            }
            let warned = manifest.samples.iter().filter(|s| s.warning.is_some()).count();
            println!(
                "{} samples written to {} ({} failed, {warned} with warnings), config hash {}",
                manifest.samples.len(),
                out.display(),
                manifest.failures.len(),
                &manifest.config_hash[..12]
            );
        }
        Command::Train {
            common,
            flags,
            data,
            out,
        } => {
            let (cfg, dataset) = experiment_for(&common, &data)?;
            let run = run_training(&cfg, &dataset, flags.split_by_mesh, |r| print_row("", r))?;
            for d in &run.outcome.diagnostics {
                eprintln!("{d}");
            }
            let dtype = if flags.f64 { Dtype::F64 } else { Dtype::F32 };
            write_run(&out, &cfg, &run, flags.split_by_mesh, dtype)?;
            println!(
                "best epoch {} (val R2 {:.4}); checkpoint and log in {}",
                run.outcome.best_epoch,
                run.outcome.best_val_r2,
                out.display()
            );
            if !run.prepared.test.is_empty() {
                println!(
                    "{}",
                    evaluate(&run.model, &run.prepared.test, &run.prepared.norm.ecg, "test")?.summary()
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let (model, prepared, _, split) = checkpoint_split(&checkpoint, &data, &split)?;
            let report = evaluate(&model, prepared.get(&split)?, &prepared.norm.ecg, &split)?;
            for t in &report.traces {
                match t.r2 {
                    Some(r2) => println!("{:<10} R2 {r2:>8.4}  MAE {:.3e} mV", t.id, t.mae),
                    None => println!("{:<10} R2      n/a  MAE {:.3e} mV (constant trace)", t.id, t.mae),
                }
            }
            println!("{}", report.summary());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                write_text(&dir.join(format!("eval_{split}.json")), &json)?;
                write_text(&dir.join(format!("eval_{split}.csv")), &eval_csv(&report))?;
            }
        }
        Command::Ablate {
            common,
            flags,
            data,
            out,
        } => {
            let (cfg, dataset) = experiment_for(&common, &data)?;
            let dtype = if flags.f64 { Dtype::F64 } else { Dtype::F32 };
            let rows = run_ablation(&cfg, &dataset, flags.split_by_mesh, dtype, &out, |name, r| {
                print_row(&format!("[{name}] "), r)
            })?;
            println!(
                "{:<18} {:>8} {:>8} {:>10} {:>10}",
                "variant", "R2", "±", "dR2", "MAE mV"
            );
            for r in &rows {
                println!(
                    "{:<18} {:>8.4} {:>8.4} {:>+10.4} {:>10.3e}",
                    r.name, r.report.r2_mean, r.report.r2_std, r.delta_r2, r.report.mae_mean
                );
            }
            println!("table written to {}", out.join("ablation.csv").display());
        }
        Command::Plot {
            checkpoint,
            data,
            split,
            out,
        } => {
            let (model, prepared, frame_dt, split) = checkpoint_split(&checkpoint, &data, &split)?;
            let n = write_plots(&model, prepared.get(&split)?, &prepared.norm.ecg, frame_dt, &out)?;
            println!("{n} traces plotted to {}", out.display());
        }
        Command::GradCheck { common } => {
            let cfg = load_config(&common)?;
            let model_cfg = cfg.as_ref().map_or_else(tiny_model_config, |c| c.model.clone());
            let sched = cfg.map_or_else(TrainSchedule::default, |c| c.schedule);
            let seed = common.seed.unwrap_or(0);
            let model = Model::new(model_cfg, Default::default(), seed)?;
            let sample = tiny_sample(&model.cfg, 6, seed)?;
            let report = grad_check(&model, &sample, 0, &sched, 1e-5, 1e-4)?;
            for g in &report.groups {
                let status = if g.skipped {
                    "skipped"
                } else if g.rel_error <= report.tolerance {
                    "ok"
                } else if g.passed(report.tolerance) {
                    "ok (below rounding floor)"
                } else {
                    "FAIL"
                };
                println!(
                    "{:<22} rel {:.2e}  |g| {:.3e}  {status}",
                    g.name, g.rel_error, g.analytic_norm
                );
            }
            let failures = report.failures();
            if !failures.is_empty() {
                let names: Vec<&str> = failures.iter().map(|g| g.name.as_str()).collect();
                return Err(Error::Param(format!("gradient check failed for {}", names.join(", "))));
            }
            println!("all {} groups within {:e}", report.groups.len(), report.tolerance);
        }
        Command::Verify { data } => {
            let n = verify_dataset(&data)?;
            println!("{n} samples verified");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
