//! The surrogate network: a per-frame surface encoder and an autoregressive
//! attention decoder, both written against the [`autodiff`](crate::autodiff) tape.

mod decoder;
mod encoder;

pub use decoder::*;
pub use encoder::*;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{GeometricOperators, SurfaceMesh};
use crate::sparse::CsrMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Latent width.
    pub d_z: usize,
    /// Encoder feature width.
    pub d_h: usize,
    /// Time-embedding width (even).
    pub d_e: usize,
    /// Attention width.
    pub d_a: usize,
    /// Recurrent hidden width.
    pub d_hid: usize,
    /// Output head hidden width.
    pub d_head: usize,
    pub gate_hidden: usize,
    pub score_hidden: usize,
    /// Eigenpairs used by the encoder.
    pub k: usize,
    /// Fourier levels of the UAC embedding.
    pub l_f: usize,
    pub diffusion_blocks: usize,
    pub s_init: f64,
    pub b_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_z: 64,
            d_h: 32,
            d_e: 32,
            d_a: 32,
            d_hid: 64,
            d_head: 32,
            gate_hidden: 16,
            score_hidden: 16,
            k: 64,
            l_f: 4,
            diffusion_blocks: 2,
            s_init: 0.1,
            b_init: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.d_z,
            self.d_h,
            self.d_e,
            self.d_a,
            self.d_hid,
            self.d_head,
            self.gate_hidden,
            self.score_hidden,
            self.k,
            self.l_f,
        ];
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Param("model widths must be positive".into()));
        }
        if self.d_e % 2 != 0 {
            return Err(Error::Param(format!("time embedding width {} must be even", self.d_e)));
        }
        if !self.s_init.is_finite() || !self.b_init.is_finite() {
            return Err(Error::Param("spectral response init must be finite".into()));
        }
        Ok(())
    }
}

/// Encoder streams and decoder components that can be switched off.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub disable_local: bool,
    pub disable_spec: bool,
    pub disable_voltage: bool,
    pub disable_stats: bool,
    pub disable_attention: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.disable_local && self.disable_spec && self.disable_voltage {
            return Err(Error::Param("at least one encoder stream must stay enabled".into()));
        }
        Ok(())
    }

    /// Active gates in (local, spectral, voltage) order.
    pub fn gate_mask(&self) -> [bool; 3] {
        [!self.disable_local, !self.disable_spec, !self.disable_voltage]
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Creates one tape leaf per tensor.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { store: self, vars }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters as leaves of a particular tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.store.position(name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Weights `U(−1/√fan_in, 1/√fan_in)`, zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store
            .insert(&format!("{name}.w"), Mat::from_vec(fan_in, fan_out, w));
        self.store.insert(&format!("{name}.b"), Mat::zeros(1, fan_out));
    }

    fn uniform(&mut self, name: &str, rows: usize, cols: usize, lo: f64, hi: f64) {
        let w = (0..rows * cols).map(|_| self.rng.gen_range(lo..hi)).collect();
        self.store.insert(name, Mat::from_vec(rows, cols, w));
    }

    fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.store.insert(name, Mat::from_vec(rows, cols, vec![v; rows * cols]));
    }
}

/// Fresh encoder + decoder parameters, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = cfg.d_h;
    init.linear("enc.lift", 4, d);
    for b in 0..cfg.diffusion_blocks {
        // diffusion times log-uniform over [1, 100] mm²
        init.uniform(&format!("enc.block{b}.log_t"), 1, d, 0.0, 100f64.ln());
        let bound = 1.0 / (d as f64).sqrt();
        init.uniform(&format!("enc.block{b}.mix"), d, d, -bound, bound);
        init.linear(&format!("enc.block{b}.mlp0"), 3 * d, d);
        init.linear(&format!("enc.block{b}.mlp1"), d, d);
    }
    init.constant("enc.spec.s", 1, 1, cfg.s_init);
    init.constant("enc.spec.b", 1, 1, cfg.b_init);
    init.linear("enc.volt0", 1, d);
    init.linear("enc.volt1", d, d);
    init.linear("enc.gate0", 3 * d, cfg.gate_hidden);
    init.linear("enc.gate1", cfg.gate_hidden, 3);
    init.linear("enc.score0", 4 * cfg.l_f, cfg.score_hidden);
    init.linear("enc.score1", cfg.score_hidden, 1);
    init.linear("enc.proj", d + 4, cfg.d_z);

    let bound = 1.0 / (cfg.d_hid as f64).sqrt();
    init.uniform("dec.att.w", cfg.d_hid, cfg.d_a, -bound, bound);
    let bound = 1.0 / ((cfg.d_z + cfg.d_e) as f64).sqrt();
    init.uniform("dec.att.u", cfg.d_z + cfg.d_e, cfg.d_a, -bound, bound);
    let bound = 1.0 / (cfg.d_a as f64).sqrt();
    init.uniform("dec.att.v", cfg.d_a, 1, -bound, bound);
    let input = 3 * cfg.d_z + cfg.d_e;
    let bound = 1.0 / ((input + cfg.d_hid) as f64).sqrt();
    init.uniform("dec.lstm.wx", input, 4 * cfg.d_hid, -bound, bound);
    init.uniform("dec.lstm.wh", cfg.d_hid, 4 * cfg.d_hid, -bound, bound);
    init.constant("dec.lstm.b", 1, 4 * cfg.d_hid, 0.0);
    init.linear("dec.head0", cfg.d_hid + 1, cfg.d_head);
    init.linear("dec.head1", cfg.d_head, cfg.d_head);
    init.linear("dec.head2", cfg.d_head, 1);
    Ok(store)
}

/// Geometry-dependent constants of one mesh, shared by every frame.
#[derive(Clone, Debug)]
pub struct MeshContext {
    pub n: usize,
    pub k: usize,
    /// `N × K` eigenfunctions.
    pub psi: Arc<Mat>,
    /// `K × N`, `Ψᵀ M`.
    pub psi_t_mass: Arc<Mat>,
    /// `K × 1`, `−λ`.
    pub neg_lambda: Mat,
    /// Per-face tangent gradient components scaled by the mesh RMS radius, `F × N` each.
    pub grad: [Arc<CsrMatrix>; 3],
    pub grad_t: [Arc<CsrMatrix>; 3],
    /// Area-weighted face-to-node averaging, `N × F`.
    pub face_to_node: Arc<CsrMatrix>,
    pub face_to_node_t: Arc<CsrMatrix>,
    /// Zero-mean, unit-RMS vertex coordinates, `N × 3`.
    pub coords: Mat,
    /// UAC Fourier features, `N × 4·L_f`.
    pub gamma: Mat,
    /// `N × 1`, `ln m_i`.
    pub log_mass: Mat,
    pub mass: Vec<f64>,
}

impl MeshContext {
    pub fn new(mesh: &SurfaceMesh, ops: &GeometricOperators, k: usize, l_f: usize) -> Result<Self> {
        let n = mesh.n_vertices();
        if ops.n != n {
            return Err(Error::Shape(format!("operators for {} nodes, mesh has {n}", ops.n)));
        }
        if k > ops.k {
            return Err(Error::Param(format!("{k} eigenpairs requested, {} available", ops.k)));
        }
        if mesh.uac.len() != n {
            return Err(Error::Param("encoder needs UAC coordinates".into()));
        }
        let mut psi = Mat::zeros(n, k);
        let mut psi_t_mass = Mat::zeros(k, n);
        for i in 0..n {
            for j in 0..k {
                let v = ops.psi(i, j);
                psi.data[i * k + j] = v;
                psi_t_mass.data[j * n + i] = v * ops.mass[i];
            }
        }
        let neg_lambda = Mat::col_vector(ops.eigenvalues[..k].iter().map(|l| -l).collect());

        let centre = mesh.vertex_centroid();
        let rms = (mesh
            .vertices
            .iter()
            .map(|p| crate::geom::dot(crate::geom::sub(*p, centre), crate::geom::sub(*p, centre)))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        let coords = Mat::from_vec(
            n,
            3,
            mesh.vertices
                .iter()
                .flat_map(|p| (0..3).map(move |c| (p[c] - centre[c]) / rms))
                .collect(),
        );

        let nf = mesh.n_faces();
        let grad: [Arc<CsrMatrix>; 3] = std::array::from_fn(|c| {
            let mut trip = Vec::with_capacity(3 * nf);
            for (f, tri) in mesh.faces.iter().enumerate() {
                for k in 0..3 {
                    trip.push((f, tri[k], ops.grad[f][k][c] * rms));
                }
            }
            Arc::new(CsrMatrix::from_triplets(nf, n, &trip))
        });
        let grad_t = std::array::from_fn(|c| Arc::new(grad[c].transpose()));
        let mut area_sum = vec![0.0; n];
        for (f, tri) in mesh.faces.iter().enumerate() {
            for &v in tri {
                area_sum[v] += ops.face_areas[f];
            }
        }
        let trip: Vec<(usize, usize, f64)> = mesh
            .faces
            .iter()
            .enumerate()
            .flat_map(|(f, tri)| tri.iter().map(move |&v| (v, f)))
            .map(|(v, f)| (v, f, ops.face_areas[f] / area_sum[v]))
            .collect();
        let face_to_node = CsrMatrix::from_triplets(n, nf, &trip);

        let alpha: Vec<f64> = mesh.uac.iter().map(|u| u[0]).collect();
        let beta: Vec<f64> = mesh.uac.iter().map(|u| u[1]).collect();
        Ok(Self {
            n,
            k,
            psi: Arc::new(psi),
            psi_t_mass: Arc::new(psi_t_mass),
            neg_lambda,
            grad,
            grad_t,
            face_to_node_t: Arc::new(face_to_node.transpose()),
            face_to_node: Arc::new(face_to_node),
            coords,
            gamma: uac_fourier(&alpha, &beta, l_f)?,
            log_mass: Mat::col_vector(ops.mass.iter().map(|m| m.ln()).collect()),
            mass: ops.mass.clone(),
        })
    }
}

/// `x · W + b` with the parameters `{name}.w`, `{name}.b`.
pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Var {
    let xw = tape.matmul(x, p.var(&format!("{name}.w")));
    tape.add(xw, p.var(&format!("{name}.b")))
}
