//! Physics ground truth: Lead II from surface voltages in an infinite,
//! homogeneous volume conductor.
//!
//! Each face contributes a current dipole `A_f σ_f ∇V_m` at its centroid; the
//! potential at an electrode is the dipole kernel sum scaled by the monolayer
//! thickness over `4π σ_b`. Everything is converted to SI before evaluation.

mod filter;

pub use filter::{bessel2_cutoff_factor, BesselBandpass, Biquad};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation::VoltageSequence;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::mesh::{face_gradient, GeometricOperators, SurfaceMesh};

pub mod units {
    pub const MM_TO_M: f64 = 1e-3;
    pub const MM2_TO_M2: f64 = 1e-6;
    /// mV/mm has the same numeric value in V/m.
    pub const MV_PER_MM_TO_V_PER_M: f64 = 1.0;
    pub const V_TO_MV: f64 = 1e3;
}

/// Minimum electrode distance from any face centroid (mm).
pub const MIN_ELECTRODE_DISTANCE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Electrodes {
    /// Right arm position (mm).
    pub ra: Vec3,
    /// Left leg position (mm).
    pub ll: Vec3,
    /// Positions are offsets from the mesh vertex centroid.
    pub relative_to_centroid: bool,
}

impl Default for Electrodes {
    fn default() -> Self {
        Self {
            ra: [200.0, 300.0, 0.0],
            ll: [-200.0, -300.0, 0.0],
            relative_to_centroid: true,
        }
    }
}

impl Electrodes {
    /// Absolute (RA, LL) positions for a mesh.
    pub fn resolve(&self, mesh: &SurfaceMesh) -> (Vec3, Vec3) {
        if self.relative_to_centroid {
            let c = mesh.vertex_centroid();
            (geom::add(c, self.ra), geom::add(c, self.ll))
        } else {
            (self.ra, self.ll)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Bulk conductivity (S/m).
    pub sigma_b: f64,
    /// Monolayer surface-to-volume thickness (mm).
    pub thickness: f64,
    /// Intracellular conductivity along / across the fibre (S/m).
    pub sigma_l: f64,
    pub sigma_t: f64,
    pub electrodes: Electrodes,
    /// Oracle sampling rate (Hz).
    pub fs: f64,
    /// Band-pass edges (Hz).
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            sigma_b: 0.24,
            thickness: 1.4,
            sigma_l: 0.4,
            sigma_t: 0.025,
            electrodes: Electrodes::default(),
            fs: 1000.0,
            f_lo: 0.05,
            f_hi: 60.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_b > 0.0) || !(self.thickness > 0.0) {
            return Err(Error::Param("sigma_b and thickness must be positive".into()));
        }
        if !(self.sigma_t > 0.0 && self.sigma_l >= self.sigma_t) {
            return Err(Error::Param("need sigma_l >= sigma_t > 0".into()));
        }
        if !(self.f_lo > 0.0 && self.f_lo < self.f_hi && self.f_hi < self.fs / 2.0) {
            return Err(Error::Param(format!(
                "need 0 < f_lo < f_hi < fs/2, got {} / {} / {}",
                self.f_lo, self.f_hi, self.fs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcgTrace {
    /// mV
    pub samples: Vec<f64>,
    /// Hz
    pub fs: f64,
    pub filtered: bool,
}

impl EcgTrace {
    pub fn new(samples: Vec<f64>, fs: f64, filtered: bool) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Shape("trace needs at least two samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trace sample".into()));
        }
        Ok(Self { samples, fs, filtered })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("t_ms,v_mV\n");
        for (i, v) in self.samples.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i as f64 * 1000.0 / self.fs, v));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// `σ = σ_t I + (σ_l − σ_t) f fᵀ`
pub fn conductivity_tensor(fibre: Vec3, sigma_l: f64, sigma_t: f64) -> Result<[[f64; 3]; 3]> {
    let len = geom::norm(fibre);
    if !((len - 1.0).abs() <= 1e-6) {
        return Err(Error::Param(format!("fibre must be unit length, got norm {len}")));
    }
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = (sigma_l - sigma_t) * fibre[i] * fibre[j];
        }
        s[i][i] += sigma_t;
    }
    Ok(s)
}

fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [geom::dot(m[0], v), geom::dot(m[1], v), geom::dot(m[2], v)]
}

fn check_inputs(mesh: &SurfaceMesh, ops: &GeometricOperators, cfg: &OracleConfig) -> Result<()> {
    cfg.validate()?;
    if mesh.fibres.len() != mesh.n_faces() {
        return Err(Error::Param("oracle requires per-face fibres".into()));
    }
    if ops.n != mesh.n_vertices() || ops.n_faces() != mesh.n_faces() {
        return Err(Error::Shape("operators do not match the mesh".into()));
    }
    Ok(())
}

fn check_electrode(mesh: &SurfaceMesh, x: Vec3) -> Result<()> {
    for f in 0..mesh.n_faces() {
        let d = geom::norm(geom::sub(x, mesh.face_centroid(f)));
        if d < MIN_ELECTRODE_DISTANCE {
            return Err(Error::ElectrodeTooClose { face: f, distance: d });
        }
    }
    Ok(())
}

const INV_4PI: f64 = 1.0 / (4.0 * std::f64::consts::PI);

/// Extracellular potential (mV) at `x` (mm) for one voltage frame (mV).
pub fn ecg_potential(
    mesh: &SurfaceMesh,
    ops: &GeometricOperators,
    frame: &[f64],
    cfg: &OracleConfig,
    x: Vec3,
) -> Result<f64> {
    check_inputs(mesh, ops, cfg)?;
    check_electrode(mesh, x)?;
    let grads = face_gradient(ops, frame)?;
    let mut sum = 0.0;
    for f in 0..mesh.n_faces() {
        let sigma = conductivity_tensor(mesh.fibres[f], cfg.sigma_l, cfg.sigma_t)?;
        let grad_si = geom::scale(grads[f], units::MV_PER_MM_TO_V_PER_M);
        let current = mat_vec(&sigma, grad_si);
        let r = geom::scale(geom::sub(x, mesh.face_centroid(f)), units::MM_TO_M);
        let rn = geom::norm(r);
        let area = ops.face_areas[f] * units::MM2_TO_M2;
        sum += area * geom::dot(current, r) / (rn * rn * rn);
    }
    let pre = cfg.thickness * units::MM_TO_M * INV_4PI / cfg.sigma_b;
    Ok(pre * sum * units::V_TO_MV)
}

/// Per-node weights `w` with `φ(x) = w · V` (mV per mV), the lead field of
/// [`ecg_potential`] collapsed onto the nodes. The weights sum to zero.
pub fn lead_field(mesh: &SurfaceMesh, ops: &GeometricOperators, cfg: &OracleConfig, x: Vec3) -> Result<Vec<f64>> {
    check_inputs(mesh, ops, cfg)?;
    check_electrode(mesh, x)?;
    let pre = cfg.thickness * units::MM_TO_M * INV_4PI / cfg.sigma_b * units::V_TO_MV;
    let mut w = vec![0.0; mesh.n_vertices()];
    for (f, tri) in mesh.faces.iter().enumerate() {
        let sigma = conductivity_tensor(mesh.fibres[f], cfg.sigma_l, cfg.sigma_t)?;
        let r = geom::scale(geom::sub(x, mesh.face_centroid(f)), units::MM_TO_M);
        let rn = geom::norm(r);
        // σ symmetric: (σ g)·r = g·(σ r)
        let kernel = geom::scale(mat_vec(&sigma, r), 1.0 / (rn * rn * rn));
        let area = ops.face_areas[f] * units::MM2_TO_M2;
        for k in 0..3 {
            let g = geom::scale(ops.grad[f][k], units::MV_PER_MM_TO_V_PER_M);
            w[tri[k]] += pre * area * geom::dot(g, kernel);
        }
    }
    Ok(w)
}

pub fn lead_ii(phi_ra: f64, phi_ll: f64) -> f64 {
    phi_ll - phi_ra
}

/// Unfiltered Lead II, one value per frame (mV).
pub fn lead_ii_per_frame(
    mesh: &SurfaceMesh,
    ops: &GeometricOperators,
    seq: &VoltageSequence,
    cfg: &OracleConfig,
) -> Result<Vec<f64>> {
    if seq.n_nodes != mesh.n_vertices() {
        return Err(Error::Shape(format!(
            "sequence has {} nodes, mesh {}",
            seq.n_nodes,
            mesh.n_vertices()
        )));
    }
    let (ra, ll) = cfg.electrodes.resolve(mesh);
    let w_ra = lead_field(mesh, ops, cfg, ra)?;
    let w_ll = lead_field(mesh, ops, cfg, ll)?;
    Ok((0..seq.n_frames)
        .map(|t| {
            let frame = seq.frame(t);
            // weights sum to zero; referencing to one node keeps constant frames exactly silent
            let base = frame[0];
            let dot = |w: &[f64]| w.iter().zip(frame).map(|(a, b)| a * (b - base)).sum::<f64>();
            lead_ii(dot(&w_ra), dot(&w_ll))
        })
        .collect())
}

/// Linear interpolation of samples spaced `dt_ms` onto a grid at `fs` Hz
/// covering the same time span.
pub fn resample_linear(values: &[f64], dt_ms: f64, fs: f64) -> Vec<f64> {
    let out_dt = 1000.0 / fs;
    if (dt_ms - out_dt).abs() <= 1e-12 * out_dt {
        return values.to_vec();
    }
    let span = dt_ms * (values.len() - 1) as f64;
    let n_out = (span / out_dt + 1e-9).floor() as usize + 1;
    (0..n_out)
        .map(|j| {
            let pos = j as f64 * out_dt / dt_ms;
            let i = (pos.floor() as usize).min(values.len() - 2);
            let frac = pos - i as f64;
            values[i] * (1.0 - frac) + values[i + 1] * frac
        })
        .collect()
}

pub fn bessel_bandpass(trace: &EcgTrace, cfg: &OracleConfig) -> Result<EcgTrace> {
    if trace.filtered {
        return Err(Error::Param("trace is already filtered".into()));
    }
    if (trace.fs - cfg.fs).abs() > 1e-9 * cfg.fs {
        return Err(Error::Param(format!(
            "trace sampled at {} Hz, filter designed for {} Hz",
            trace.fs, cfg.fs
        )));
    }
    let bp = BesselBandpass::new(cfg.f_lo, cfg.f_hi, cfg.fs)?;
    EcgTrace::new(bp.process(&trace.samples), trace.fs, true)
}

/// Unfiltered Lead II resampled to the oracle rate.
pub fn forward_ecg_unfiltered(
    mesh: &SurfaceMesh,
    ops: &GeometricOperators,
    seq: &VoltageSequence,
    cfg: &OracleConfig,
) -> Result<EcgTrace> {
    let per_frame = lead_ii_per_frame(mesh, ops, seq, cfg)?;
    EcgTrace::new(resample_linear(&per_frame, seq.frame_dt, cfg.fs), cfg.fs, false)
}

pub fn forward_ecg(
    mesh: &SurfaceMesh,
    ops: &GeometricOperators,
    seq: &VoltageSequence,
    cfg: &OracleConfig,
) -> Result<EcgTrace> {
    let raw = forward_ecg_unfiltered(mesh, ops, seq, cfg)?;
    bessel_bandpass(&raw, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_forms() {
        let s = conductivity_tensor([0.6, 0.8, 0.0], 0.3, 0.3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 0.3 } else { 0.0 };
                assert!((s[i][j] - e).abs() < 1e-15);
            }
        }
        let s = conductivity_tensor([1.0, 0.0, 0.0], 0.4, 0.025).unwrap();
        assert_eq!(s, [[0.4, 0.0, 0.0], [0.0, 0.025, 0.0], [0.0, 0.0, 0.025]]);
        assert!(conductivity_tensor([1.0, 1.0, 0.0], 0.4, 0.025).is_err());
    }

    #[test]
    fn lead_definition() {
        assert!((lead_ii(0.1, 0.3) - 0.2).abs() < 1e-15);
        assert_eq!(lead_ii(0.7, 0.7), 0.0);
        assert_eq!(lead_ii(0.3, 0.1), -lead_ii(0.1, 0.3));
    }

    #[test]
    fn resample_identity_and_upsampling() {
        let v = vec![0.0, 1.0, 0.0];
        assert_eq!(resample_linear(&v, 1.0, 1000.0), v);
        let up = resample_linear(&v, 4.0, 1000.0);
        assert_eq!(up.len(), 9);
        assert!((up[2] - 0.5).abs() < 1e-15 && (up[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = OracleConfig::default();
        c.validate().unwrap();
        c.f_hi = 600.0;
        assert!(c.validate().is_err());
        let c = OracleConfig {
            sigma_t: 0.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
