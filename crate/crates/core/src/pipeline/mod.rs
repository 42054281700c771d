//! Orchestration: experiment configuration, dataset persistence, training
//! runs, checkpoints, evaluation, ablation and plotting.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod report;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    check_tiling, load_checkpoint, save_checkpoint, CheckpointManifest, CheckpointMeta, Dtype, TensorEntry,
    CHECKPOINT_BLOB, CHECKPOINT_MANIFEST,
};
pub use config::{ExperimentConfig, GeometryConfig, SimulationConfig, SplitConfig};
pub use dataset::{
    generate_dataset, load_dataset, pacing_sites, read_manifest, sample_id, sha256_hex, simulate_sample, split_samples,
    verify_dataset, Dataset, DatasetManifest, FailedSample, SampleData, SampleEntry, Split, MANIFEST_FILE,
};
pub use report::{
    ablation_csv, eval_csv, evaluate, predict_mv, trace_csv, trace_svg, write_plots, AblationRow, EvalReport,
    TraceMetrics,
};

use crate::error::{Error, Result};
use crate::mesh::{build_operators, compute_uac, planar_grid};
use crate::model::{Ablation, MeshContext, ModelConfig};
use crate::training::{log_csv, train_loop, LogRow, Model, NormStats, TrainOutcome, TrainSample, ZScore};

pub const TRAIN_LOG: &str = "train_log.csv";

/// Refuses a dataset generated from different data settings than `cfg`.
pub fn check_compatible(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<()> {
    let hash = cfg.data_hash();
    if hash != manifest.config_hash {
        return Err(Error::Integrity(format!(
            "config hash {} does not match dataset hash {}",
            &hash[..12],
            &manifest.config_hash[..manifest.config_hash.len().min(12)]
        )));
    }
    Ok(())
}

/// Z-scores of all voltages and all trace samples of the given samples.
pub fn fit_norm(dataset: &Dataset, indices: &[usize]) -> Result<NormStats> {
    let volts: Vec<f64> = indices
        .iter()
        .flat_map(|&i| dataset.samples[i].frames.iter().copied())
        .collect();
    let ecg: Vec<f64> = indices
        .iter()
        .flat_map(|&i| dataset.samples[i].trace.iter().copied())
        .collect();
    Ok(NormStats {
        voltage: ZScore::fit(&volts)?,
        ecg: ZScore::fit(&ecg)?,
    })
}

/// Encoder context for every mesh that has samples.
pub fn mesh_contexts(dataset: &Dataset, cfg: &ModelConfig) -> Result<Vec<Option<Arc<MeshContext>>>> {
    let mut out = vec![None; dataset.meshes.len()];
    for entry in &dataset.manifest.samples {
        let slot = &mut out[entry.mesh_index];
        if slot.is_none() {
            let mesh = &dataset.meshes[entry.mesh_index];
            let ops = build_operators(mesh, cfg.k)?;
            *slot = Some(Arc::new(MeshContext::new(mesh, &ops, cfg.k, cfg.l_f)?));
        }
    }
    Ok(out)
}

pub fn to_samples(
    dataset: &Dataset,
    contexts: &[Option<Arc<MeshContext>>],
    indices: &[usize],
    norm: &NormStats,
) -> Vec<TrainSample> {
    indices
        .iter()
        .map(|&i| {
            let entry = &dataset.manifest.samples[i];
            let data = &dataset.samples[i];
            TrainSample {
                id: entry.id.clone(),
                ctx: contexts[entry.mesh_index]
                    .clone()
                    .expect("context for every sampled mesh"),
                frames: norm.voltage.apply_all(&data.frames),
                n_frames: entry.n_frames,
                target: norm.ecg.apply_all(&data.trace),
            }
        })
        .collect()
}

/// Normalized splits ready for training or evaluation.
pub struct Prepared {
    pub split: Split,
    pub norm: NormStats,
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
}

impl Prepared {
    pub fn get(&self, name: &str) -> Result<&[TrainSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Param(format!("unknown split `{name}` (train, val or test)"))),
        }
    }
}

/// Splits the dataset and normalizes it with statistics fitted on the
/// training split, unless `norm` is given.
pub fn prepare(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    split_by_mesh: bool,
    norm: Option<NormStats>,
) -> Result<Prepared> {
    let split = split_samples(&dataset.manifest, &cfg.split, cfg.schedule.seed, split_by_mesh)?;
    if split.train.is_empty() {
        return Err(Error::Param("training split is empty".into()));
    }
    let norm = match norm {
        Some(n) => n,
        None => fit_norm(dataset, &split.train)?,
    };
    let contexts = mesh_contexts(dataset, &cfg.model)?;
    Ok(Prepared {
        train: to_samples(dataset, &contexts, &split.train, &norm),
        val: to_samples(dataset, &contexts, &split.val, &norm),
        test: to_samples(dataset, &contexts, &split.test, &norm),
        split,
        norm,
    })
}

/// The experiment a checkpoint was trained under, on the dataset it came from.
pub fn checkpoint_experiment(manifest: &DatasetManifest, ck: &CheckpointManifest) -> Result<ExperimentConfig> {
    if ck.config_hash != manifest.config_hash {
        return Err(Error::Integrity(format!(
            "checkpoint was trained on data {}, dataset is {}",
            &ck.config_hash[..ck.config_hash.len().min(12)],
            &manifest.config_hash[..manifest.config_hash.len().min(12)]
        )));
    }
    let mut cfg = manifest.config.clone();
    cfg.model = ck.model.clone();
    cfg.ablation = ck.ablation.clone();
    cfg.split = ck.split.clone();
    cfg.schedule.seed = ck.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// A finished training run; `model` holds the best-validation parameters.
pub struct TrainRun {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub prepared: Prepared,
}

pub fn run_training(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split_by_mesh: bool,
    on_epoch: impl FnMut(&LogRow),
) -> Result<TrainRun> {
    cfg.validate()?;
    check_compatible(cfg, &dataset.manifest)?;
    let prepared = prepare(dataset, cfg, split_by_mesh, None)?;
    let mut model = Model::new(cfg.model.clone(), cfg.ablation.clone(), cfg.schedule.seed)?;
    let outcome = train_loop(
        &mut model,
        &prepared.train,
        &prepared.val,
        &prepared.norm.ecg,
        &cfg.schedule,
        on_epoch,
    )?;
    model.params = outcome.best.clone();
    Ok(TrainRun {
        model,
        outcome,
        prepared,
    })
}

/// Writes the best checkpoint and the training log into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    run: &TrainRun,
    split_by_mesh: bool,
    dtype: Dtype,
) -> Result<CheckpointManifest> {
    let meta = CheckpointMeta {
        norm: run.prepared.norm,
        seed: cfg.schedule.seed,
        epoch: run.outcome.best_epoch,
        val_r2: run.outcome.best_val_r2,
        config_hash: cfg.data_hash(),
        split: cfg.split.clone(),
        split_by_mesh,
    };
    let manifest = save_checkpoint(dir, &run.model, &meta, dtype)?;
    let log_path = dir.join(TRAIN_LOG);
    std::fs::write(&log_path, log_csv(&run.outcome.log)).map_err(|e| Error::io(&log_path, e))?;
    Ok(manifest)
}

/// The baseline followed by each flag switched on individually; flags that
/// are already set or would disable every stream are left out.
pub fn ablation_variants(base: &Ablation) -> Vec<(String, Ablation)> {
    let mut out = vec![("baseline".to_string(), base.clone())];
    let flags: [(&str, fn(&mut Ablation) -> &mut bool); 5] = [
        ("disable_local", |a| &mut a.disable_local),
        ("disable_spec", |a| &mut a.disable_spec),
        ("disable_voltage", |a| &mut a.disable_voltage),
        ("disable_stats", |a| &mut a.disable_stats),
        ("disable_attention", |a| &mut a.disable_attention),
    ];
    for (name, flag) in flags {
        let mut a = base.clone();
        let f = flag(&mut a);
        if *f {
            continue;
        }
        *f = true;
        if a.validate().is_ok() {
            out.push((name.to_string(), a));
        }
    }
    out
}

/// Retrains once per variant; each variant's checkpoint and log go to
/// `out/<variant>/`. Rows report test-split metrics.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split_by_mesh: bool,
    dtype: Dtype,
    out: &Path,
    mut on_variant: impl FnMut(&str, &LogRow),
) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for (name, ablation) in ablation_variants(&cfg.ablation) {
        let variant = ExperimentConfig {
            ablation,
            ..cfg.clone()
        };
        let run = run_training(&variant, dataset, split_by_mesh, |row| on_variant(&name, row))?;
        let dir = out.join(&name);
        let manifest = write_run(&dir, &variant, &run, split_by_mesh, dtype)?;
        let report = evaluate(&run.model, &run.prepared.test, &run.prepared.norm.ecg, "test")?;
        let (base_r2, base_mae) = rows.first().map_or((report.r2_mean, report.mae_mean), |b| {
            (b.report.r2_mean, b.report.mae_mean)
        });
        rows.push(AblationRow {
            delta_r2: report.r2_mean - base_r2,
            delta_mae: report.mae_mean - base_mae,
            name,
            report,
            best_epoch: run.outcome.best_epoch,
            best_val_r2: run.outcome.best_val_r2,
            checkpoint_sha256: manifest.blob_sha256,
        });
    }
    let table = out.join("ablation.csv");
    std::fs::write(&table, ablation_csv(&rows)).map_err(|e| Error::io(&table, e))?;
    Ok(rows)
}

/// Small widths used by the gradient check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_z: 4,
        d_h: 4,
        d_e: 4,
        d_a: 4,
        d_hid: 4,
        d_head: 4,
        gate_hidden: 4,
        score_hidden: 4,
        k: 8,
        l_f: 2,
        diffusion_blocks: 2,
        ..ModelConfig::default()
    }
}

/// A 20-node planar patch with random normalized frames and target.
pub fn tiny_sample(cfg: &ModelConfig, n_frames: usize, seed: u64) -> Result<TrainSample> {
    let mut mesh = planar_grid(4, 3, 4.0, 3.0, 0.3, seed);
    compute_uac(&mut mesh)?;
    let ops = build_operators(&mesh, cfg.k)?;
    let ctx = Arc::new(MeshContext::new(&mesh, &ops, cfg.k, cfg.l_f)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..n_frames * ctx.n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let target = (0..n_frames).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Ok(TrainSample {
        id: "tiny".into(),
        ctx,
        frames,
        n_frames,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_cover_each_flag_once() {
        let v = ablation_variants(&Ablation::default());
        assert_eq!(v.len(), 6);
        assert_eq!(v[0].1, Ablation::default());
        assert!(v[1..].iter().all(|(_, a)| a != &Ablation::default()));
        let pre = Ablation {
            disable_local: true,
            disable_spec: true,
            ..Ablation::default()
        };
        let names: Vec<String> = ablation_variants(&pre).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["baseline", "disable_stats", "disable_attention"]);
    }

    #[test]
    fn tiny_sample_shape() {
        let s = tiny_sample(&tiny_model_config(), 6, 1).unwrap();
        assert_eq!(s.ctx.n, 20);
        assert_eq!(s.frames.len(), 120);
    }
}
