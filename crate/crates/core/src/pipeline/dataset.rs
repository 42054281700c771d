//! On-disk datasets: meshes as JSON, one little-endian `f32` blob per sample
//! (frames `T × N` followed by the `T`-sample trace) and a manifest carrying
//! SHA-256 checksums of every blob.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SplitConfig};
use crate::activation::{activation_times, gen_voltage_sequence};
use crate::error::{Error, Result};
use crate::mesh::{build_operators, gen_synthetic_atrium, load_mesh, save_mesh, SurfaceMesh};
use crate::oracle::forward_ecg;

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Share of samples allowed to fail before generation is abandoned.
const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub mesh_index: usize,
    pub pacing_node: usize,
    pub n_frames: usize,
    pub n_nodes: usize,
    /// ms
    pub frame_dt: f64,
    /// Path of the blob relative to the dataset root.
    pub blob: String,
    pub sha256: String,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedSample {
    pub mesh_index: usize,
    pub pacing_node: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Mesh files relative to the dataset root, by mesh index; `None` where
    /// generation failed.
    pub meshes: Vec<Option<String>>,
    pub samples: Vec<SampleEntry>,
    pub failures: Vec<FailedSample>,
}

/// Voltages (mV) and the Lead II trace (mV) sampled at the frame times.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleData {
    pub frames: Vec<f64>,
    pub trace: Vec<f64>,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub meshes: Vec<SurfaceMesh>,
    pub samples: Vec<SampleData>,
}

pub fn sample_id(mesh_index: usize, site: usize) -> String {
    format!("m{mesh_index:03}_p{site:02}")
}

fn encode_blob(frames: &[f64], trace: &[f64]) -> Vec<u8> {
    frames
        .iter()
        .chain(trace)
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

fn decode_blob(bytes: &[u8], entry: &SampleEntry) -> Result<SampleData> {
    let n_frames_values = entry.n_frames * entry.n_nodes;
    let expected = 4 * (n_frames_values + entry.n_frames);
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "sample {}: blob has {} bytes, expected {expected}",
            entry.id,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(SampleData {
        frames: values[..n_frames_values].to_vec(),
        trace: values[n_frames_values..].to_vec(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Distinct pacing vertices for mesh seed `seed`.
pub fn pacing_sites(n_vertices: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > n_vertices {
        return Err(Error::Param(format!(
            "{count} pacing sites requested on a mesh with {n_vertices} vertices"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6369_6e67);
    Ok(sample_indices(&mut rng, n_vertices, count).into_vec())
}

/// Simulates one sample: activation, voltage frames, filtered ECG decimated
/// to the frame times.
pub fn simulate_sample(
    mesh: &SurfaceMesh,
    ops: &crate::mesh::GeometricOperators,
    pacing_node: usize,
    cfg: &ExperimentConfig,
) -> Result<(SampleData, Option<String>)> {
    let sim = &cfg.simulation;
    let act = activation_times(mesh, pacing_node, sim.cv_long, sim.aniso)?;
    let (seq, warning) = gen_voltage_sequence(&act, &sim.template, sim.frame_dt, sim.duration)?;
    let ecg = forward_ecg(mesh, ops, &seq, &cfg.oracle)?;
    let per_frame = sim.frame_dt * cfg.oracle.fs / 1000.0;
    let trace = (0..seq.n_frames)
        .map(|t| {
            let k = (t as f64 * per_frame).round() as usize;
            ecg.samples[k.min(ecg.samples.len() - 1)]
        })
        .collect();
    Ok((
        SampleData {
            frames: seq.frames,
            trace,
        },
        warning,
    ))
}

/// Generates every mesh and sample of `cfg` under `root`.
pub fn generate_dataset(cfg: &ExperimentConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    create_dir(&root.join("meshes"))?;
    create_dir(&root.join("samples"))?;
    let mut meshes = Vec::new();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let total = cfg.geometry.n_meshes * cfg.simulation.pacing_sites;
    for m in 0..cfg.geometry.n_meshes {
        let seed = cfg.geometry.first_seed + m as u64;
        let built = gen_synthetic_atrium(&cfg.geometry.atrium, seed)
            .and_then(|mesh| build_operators(&mesh, 1).map(|ops| (mesh, ops)));
        let (mesh, ops) = match built {
            Ok(x) => x,
            Err(e) => {
                failures.push(FailedSample {
                    mesh_index: m,
                    pacing_node: None,
                    reason: e.to_string(),
                });
                meshes.push(None);
                continue;
            }
        };
        let mesh_file = format!("meshes/mesh_{m:03}.json");
        save_mesh(&mesh, root.join(&mesh_file))?;
        meshes.push(Some(mesh_file));
        for (site, node) in pacing_sites(mesh.n_vertices(), cfg.simulation.pacing_sites, seed)?
            .into_iter()
            .enumerate()
        {
            let id = sample_id(m, site);
            match simulate_sample(&mesh, &ops, node, cfg) {
                Ok((data, warning)) => {
                    let bytes = encode_blob(&data.frames, &data.trace);
                    let blob = format!("samples/{id}.bin");
                    write_file(&root.join(&blob), &bytes)?;
                    samples.push(SampleEntry {
                        id,
                        mesh_index: m,
                        pacing_node: node,
                        n_frames: data.trace.len(),
                        n_nodes: mesh.n_vertices(),
                        frame_dt: cfg.simulation.frame_dt,
                        blob,
                        sha256: sha256_hex(&bytes),
                        warning,
                    });
                }
                Err(e) => failures.push(FailedSample {
                    mesh_index: m,
                    pacing_node: Some(node),
                    reason: e.to_string(),
                }),
            }
        }
    }
    let failed = total - samples.len();
    if failed as f64 > MAX_FAILURE_RATE * total as f64 {
        let first = failures.first().map(|f| f.reason.clone()).unwrap_or_default();
        return Err(Error::Param(format!(
            "{failed} of {total} samples failed (first: {first})"
        )));
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        config_hash: cfg.data_hash(),
        config: cfg.clone(),
        meshes,
        samples,
        failures,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&root.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Malformed(format!(
            "dataset version {} unsupported (expected {DATASET_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a dataset, checking every blob against its checksum.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut meshes = Vec::with_capacity(manifest.meshes.len());
    for file in &manifest.meshes {
        meshes.push(match file {
            Some(file) => load_mesh(root.join(file))?,
            None => SurfaceMesh::new(Vec::new(), Vec::new()),
        });
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = root.join(&entry.blob);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Integrity(format!("sample {}: checksum mismatch", entry.id)));
        }
        let mesh = meshes
            .get(entry.mesh_index)
            .ok_or_else(|| Error::Integrity(format!("sample {}: mesh index {} missing", entry.id, entry.mesh_index)))?;
        if mesh.n_vertices() != entry.n_nodes {
            return Err(Error::Integrity(format!(
                "sample {}: {} nodes, mesh has {}",
                entry.id,
                entry.n_nodes,
                mesh.n_vertices()
            )));
        }
        samples.push(decode_blob(&bytes, entry)?);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        meshes,
        samples,
    })
}

/// Checks every blob against the manifest. Returns the number of verified
/// samples, or an integrity error naming each mismatching sample.
pub fn verify_dataset(root: &Path) -> Result<usize> {
    let manifest = read_manifest(root)?;
    let mut bad = Vec::new();
    for entry in &manifest.samples {
        let path = root.join(&entry.blob);
        match std::fs::read(&path) {
            Ok(bytes) if sha256_hex(&bytes) == entry.sha256 => {}
            Ok(_) => bad.push(format!("{} (checksum mismatch)", entry.id)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => bad.push(format!("{} (missing blob)", entry.id)),
            Err(e) => return Err(Error::io(&path, e)),
        }
    }
    if bad.is_empty() {
        Ok(manifest.samples.len())
    } else {
        Err(Error::Integrity(bad.join(", ")))
    }
}

/// Sample indices of the three splits, each in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Param(format!("unknown split `{name}` (train, val or test)"))),
        }
    }
}

fn rank_key(key: &str, seed: u64) -> [u8; 32] {
    Sha256::digest(format!("{key}#{seed}").as_bytes()).into()
}

/// Exact-count split of `n` units ranked by a seeded hash; validation and
/// test keep at least one unit each when `n >= 3`.
fn split_counts(n: usize, fractions: &SplitConfig) -> (usize, usize) {
    let mut n_val = (n as f64 * fractions.val).round() as usize;
    let mut n_test = (n as f64 * fractions.test).round() as usize;
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    n_val = n_val.min(n);
    n_test = n_test.min(n - n_val);
    (n_val, n_test)
}

/// Deterministic split of the samples by id, or of whole meshes when
/// `by_mesh` is set.
pub fn split_samples(manifest: &DatasetManifest, fractions: &SplitConfig, seed: u64, by_mesh: bool) -> Result<Split> {
    let mut units: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        let key = if by_mesh {
            format!("mesh{:03}", s.mesh_index)
        } else {
            s.id.clone()
        };
        units.entry(key).or_default().push(i);
    }
    let mut ranked: Vec<(&String, &Vec<usize>)> = units.iter().collect();
    ranked.sort_by_key(|(k, _)| (rank_key(k, seed), (*k).clone()));
    let (n_val, n_test) = split_counts(ranked.len(), fractions);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (rank, (_, members)) in ranked.into_iter().enumerate() {
        let dest = if rank < n_val {
            &mut split.val
        } else if rank < n_val + n_test {
            &mut split.test
        } else {
            &mut split.train
        };
        dest.extend(members);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
