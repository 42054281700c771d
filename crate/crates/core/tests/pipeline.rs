use std::collections::BTreeMap;
use std::path::Path;

use atrial_ecg::model::ModelConfig;
use atrial_ecg::pipeline::{
    check_compatible, evaluate, generate_dataset, load_checkpoint, load_dataset, prepare, read_manifest,
    save_checkpoint, verify_dataset, write_plots, CheckpointMeta, Dtype, ExperimentConfig, CHECKPOINT_BLOB,
    CHECKPOINT_MANIFEST,
};
use atrial_ecg::training::Model;
use atrial_ecg::Error;

fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.geometry.n_meshes = 2;
    cfg.simulation.pacing_sites = 2;
    cfg.model = ModelConfig {
        d_z: 4,
        d_h: 4,
        d_e: 4,
        d_a: 4,
        d_hid: 4,
        d_head: 4,
        k: 16,
        ..ModelConfig::default()
    };
    cfg
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_counts_and_is_byte_identical_on_rerun() {
    let cfg = small_experiment();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&cfg, a.path()).unwrap();
    assert_eq!(manifest.samples.len(), 4);
    assert!(manifest.failures.is_empty());
    assert_eq!(manifest.config_hash, cfg.data_hash());
    generate_dataset(&cfg, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 1 + 2 + 4);
    assert_eq!(ta, tb);

    let ds = load_dataset(a.path()).unwrap();
    for (entry, data) in ds.manifest.samples.iter().zip(&ds.samples) {
        assert_eq!(data.trace.len(), entry.n_frames);
        assert_eq!(data.frames.len(), entry.n_frames * entry.n_nodes);
        assert_eq!(entry.n_frames, 40);
        assert!(entry.warning.is_none(), "{:?}", entry.warning);
    }
    // distinct pacing sites give distinct traces
    assert_ne!(ds.samples[0].trace, ds.samples[1].trace);
    assert_eq!(verify_dataset(a.path()).unwrap(), 4);
}

#[test]
fn tampering_is_detected_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small_experiment(), dir.path()).unwrap();
    let victim = &manifest.samples[2];
    let path = dir.path().join(&victim.blob);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    match verify_dataset(dir.path()) {
        Err(Error::Integrity(msg)) => {
            assert!(msg.contains(&victim.id), "{msg}");
            assert!(!msg.contains(&manifest.samples[0].id));
        }
        other => panic!("expected an integrity failure, got {other:?}"),
    }
    assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));

    std::fs::remove_file(&path).unwrap();
    assert!(matches!(verify_dataset(dir.path()), Err(Error::Integrity(m)) if m.contains("missing")));
}

#[test]
fn mismatched_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment();
    generate_dataset(&cfg, dir.path()).unwrap();
    let manifest = read_manifest(dir.path()).unwrap();
    check_compatible(&cfg, &manifest).unwrap();
    let mut other = cfg.clone();
    other.simulation.aniso = 3.0;
    assert!(matches!(check_compatible(&other, &manifest), Err(Error::Integrity(_))));
    let mut retrained = cfg;
    retrained.schedule.epochs = 3;
    check_compatible(&retrained, &manifest).unwrap();
    assert!(read_manifest(&dir.path().join("nowhere")).unwrap_err().is_io());
}

#[test]
fn checkpoints_round_trip_and_tile_their_blob() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment();
    generate_dataset(&cfg, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let prepared = prepare(&ds, &cfg, false, None).unwrap();
    let model = Model::new(cfg.model.clone(), cfg.ablation.clone(), 11).unwrap();
    let meta = CheckpointMeta {
        norm: prepared.norm,
        seed: 11,
        epoch: 4,
        val_r2: 0.5,
        config_hash: cfg.data_hash(),
        split: cfg.split.clone(),
        split_by_mesh: false,
    };

    let f64_dir = dir.path().join("ck64");
    let manifest = save_checkpoint(&f64_dir, &model, &meta, Dtype::F64).unwrap();
    let (loaded, back) = load_checkpoint(&f64_dir).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(back, manifest);
    let blob_len = std::fs::metadata(f64_dir.join(CHECKPOINT_BLOB)).unwrap().len() as usize;
    let mut cursor = 0;
    for t in &manifest.tensors {
        assert_eq!(t.offset, cursor);
        cursor += t.nbytes;
    }
    assert_eq!(cursor, blob_len);
    assert_eq!(blob_len, 8 * model.params.n_scalars());

    let f32_dir = dir.path().join("ck32");
    save_checkpoint(&f32_dir, &model, &meta, Dtype::F32).unwrap();
    let (narrow, _) = load_checkpoint(&f32_dir).unwrap();
    for (a, b) in narrow.params.tensors().iter().zip(model.params.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    // shrink one tensor's byte count: the table no longer tiles the blob
    let path = f64_dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let nbytes = doc["tensors"][0]["nbytes"].as_u64().unwrap();
    doc["tensors"][0]["nbytes"] = (nbytes - 8).into();
    std::fs::write(&path, doc.to_string()).unwrap();
    assert!(matches!(load_checkpoint(&f64_dir), Err(Error::Integrity(_))));
}

#[test]
fn plots_cover_each_trace_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment();
    generate_dataset(&cfg, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let prepared = prepare(&ds, &cfg, false, None).unwrap();
    let model = Model::new(cfg.model.clone(), cfg.ablation.clone(), 0).unwrap();
    let samples = &prepared.train;
    let out_a = dir.path().join("plots_a");
    let out_b = dir.path().join("plots_b");
    let n = write_plots(&model, samples, &prepared.norm.ecg, cfg.simulation.frame_dt, &out_a).unwrap();
    write_plots(&model, samples, &prepared.norm.ecg, cfg.simulation.frame_dt, &out_b).unwrap();
    assert_eq!(n, samples.len());
    let (ta, tb) = (read_tree(&out_a), read_tree(&out_b));
    assert_eq!(ta.len(), 2 * samples.len());
    assert_eq!(ta, tb);
    for s in samples {
        let csv = String::from_utf8(ta[&format!("{}.csv", s.id)].clone()).unwrap();
        assert_eq!(csv.lines().count(), s.n_frames + 1);
        let svg = String::from_utf8(ta[&format!("{}.svg", s.id)].clone()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    let report = evaluate(&model, samples, &prepared.norm.ecg, "train").unwrap();
    assert_eq!(report.traces.len(), samples.len());
    assert!(report.mae_mean > 0.0);
}

#[test]
fn normalization_is_fitted_on_the_training_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment();
    generate_dataset(&cfg, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let prepared = prepare(&ds, &cfg, false, None).unwrap();
    assert_eq!(
        prepared.split.train.len() + prepared.split.val.len() + prepared.split.test.len(),
        4
    );
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let train_targets: Vec<f64> = prepared.train.iter().flat_map(|s| s.target.clone()).collect();
    assert!(mean(train_targets).abs() < 1e-9);
    let volts: Vec<f64> = prepared.train.iter().flat_map(|s| s.frames.clone()).collect();
    assert!(mean(volts).abs() < 1e-9);
}
