//! Procedural meshes: the synthetic atrium plus a few analytic test shapes.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::uac::compute_uac;
use super::{Landmarks, SurfaceMesh};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// Parameters of the synthetic left-atrium-like shell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtriumParams {
    /// Grid cells per side of the parameter square.
    pub resolution: usize,
    /// Semi-axes (mm) before the per-seed jitter.
    pub radii: [f64; 3],
    /// Number of vein-like openings punched into the shell.
    pub holes: usize,
    /// Polar extent of the shell; the remainder is the valve-like opening.
    pub cap_angle: f64,
    /// Relative amplitude of the smooth random surface perturbation.
    pub perturbation: f64,
}

impl Default for AtriumParams {
    fn default() -> Self {
        Self {
            resolution: 16,
            radii: [25.0, 20.0, 18.0],
            holes: 2,
            cap_angle: 0.8 * std::f64::consts::PI,
            perturbation: 0.08,
        }
    }
}

/// Open ellipsoidal shell with four landmark arcs on its rim, UAC and fibres.
///
/// The shell is the image of a square grid: the square is mapped onto the unit
/// disk, the disk onto a polar cap of an ellipsoid, and the cap is perturbed
/// by a smooth random radial field drawn from `seed`. The square's sides become
/// the landmark arcs (`alpha0`/`alpha1` left/right, `beta0`/`beta1`
/// bottom/top without corners). Fibres follow the tangential gradient of beta.
pub fn gen_synthetic_atrium(params: &AtriumParams, seed: u64) -> Result<SurfaceMesh> {
    let n = params.resolution;
    if n < 4 || (n + 1) * (n + 1) < 200 + 2 * params.holes {
        return Err(Error::Param(format!("resolution {n} yields fewer than 200 vertices")));
    }
    if params.radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Param("radii must be positive".into()));
    }
    if !(params.cap_angle > 0.0 && params.cap_angle < std::f64::consts::PI) {
        return Err(Error::Param("cap angle must lie in (0, π)".into()));
    }
    if !(0.0..0.5).contains(&params.perturbation) {
        return Err(Error::Param("perturbation must lie in [0, 0.5)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii: Vec<f64> = params
        .radii
        .iter()
        .map(|r| r * (1.0 + 0.1 * rng.gen_range(-1.0..1.0)))
        .collect();
    let coeffs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bump = |d: Vec3| -> f64 {
        1.0 + params.perturbation
            * (coeffs[0] * d[0]
                + coeffs[1] * d[1] * d[2]
                + coeffs[2] * (d[0] * d[0] - d[1] * d[1])
                + coeffs[3] * (2.0 * d[2]).sin()
                + coeffs[4] * d[0] * d[1]
                + coeffs[5] * (3.0 * d[1]).cos())
            / 3.0
    };

    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            let u = -1.0 + 2.0 * i as f64 / n as f64;
            let v = -1.0 + 2.0 * j as f64 / n as f64;
            // square -> disk (elliptical grid mapping)
            let x = u * (1.0 - 0.5 * v * v).sqrt();
            let y = v * (1.0 - 0.5 * u * u).sqrt();
            let rho = (x * x + y * y).sqrt().min(1.0);
            let phi = y.atan2(x);
            let theta = rho * params.cap_angle;
            let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            let s = bump(d);
            vertices.push([radii[0] * d[0] * s, radii[1] * d[1] * s, radii[2] * d[2] * s]);
        }
    }

    // 2×2 blocks of removed cells, away from the rim and from each other
    let mut removed = vec![false; n * n];
    let mut centres: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0;
    while centres.len() < params.holes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Param(format!(
                "cannot place {} holes at resolution {n}",
                params.holes
            )));
        }
        let ci = rng.gen_range(3..n - 2);
        let cj = rng.gen_range(3..n - 2);
        if centres.iter().any(|&(a, b)| a.abs_diff(ci) < 5 && b.abs_diff(cj) < 5) {
            continue;
        }
        centres.push((ci, cj));
        for dj in 0..2 {
            for di in 0..2 {
                removed[(cj - 1 + dj) * n + (ci - 1 + di)] = true;
            }
        }
    }

    let mut faces = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            if removed[j * n + i] {
                continue;
            }
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            let uc = -1.0 + (2.0 * i as f64 + 1.0) / n as f64;
            let vc = -1.0 + (2.0 * j as f64 + 1.0) / n as f64;
            if uc * vc > 0.0 {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, c, d]);
            }
        }
    }

    let mut landmarks = Landmarks::default();
    for j in 0..=n {
        landmarks.alpha0.push(idx(0, j));
        landmarks.alpha1.push(idx(n, j));
    }
    for i in 1..n {
        landmarks.beta0.push(idx(i, 0));
        landmarks.beta1.push(idx(i, n));
    }

    let mut mesh = compact(SurfaceMesh {
        vertices,
        faces,
        fibres: Vec::new(),
        uac: Vec::new(),
        landmarks,
    });
    mesh.validate_geometry()?;
    compute_uac(&mut mesh)?;
    let alpha: Vec<f64> = mesh.uac.iter().map(|p| p[0]).collect();
    let beta: Vec<f64> = mesh.uac.iter().map(|p| p[1]).collect();
    mesh.fibres = mesh.fibres_from_fields(&beta, &alpha)?;
    mesh.validate()?;
    Ok(mesh)
}

/// Drop vertices no face references, renumbering in original order.
fn compact(mesh: SurfaceMesh) -> SurfaceMesh {
    let mut used = vec![false; mesh.n_vertices()];
    for tri in &mesh.faces {
        for &v in tri {
            used[v] = true;
        }
    }
    let mut map = vec![usize::MAX; mesh.n_vertices()];
    let mut vertices = Vec::new();
    for (v, &u) in used.iter().enumerate() {
        if u {
            map[v] = vertices.len();
            vertices.push(mesh.vertices[v]);
        }
    }
    let remap = |s: &Vec<usize>| -> Vec<usize> { s.iter().filter(|&&v| used[v]).map(|&v| map[v]).collect() };
    SurfaceMesh {
        vertices,
        faces: mesh.faces.iter().map(|t| [map[t[0]], map[t[1]], map[t[2]]]).collect(),
        fibres: mesh.fibres,
        uac: Vec::new(),
        landmarks: Landmarks {
            alpha0: remap(&mesh.landmarks.alpha0),
            alpha1: remap(&mesh.landmarks.alpha1),
            beta0: remap(&mesh.landmarks.beta0),
            beta1: remap(&mesh.landmarks.beta1),
        },
    }
}

/// Geodesic sphere from `levels` midpoint refinements of an icosahedron.
///
/// `levels = 4` gives 2562 vertices.
pub fn icosphere(levels: usize, radius: f64) -> SurfaceMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&p| geom::normalize(p))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..levels {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(geom::normalize(geom::scale(geom::add(verts[a], verts[b]), 0.5)));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    for v in vertices.iter_mut() {
        *v = geom::scale(*v, radius);
    }
    SurfaceMesh::new(vertices, faces)
}

/// Flat `width × height` grid in the xy-plane with `nx × ny` cells.
///
/// Interior vertices are jittered by up to `jitter` of a cell; rim vertices
/// stay on the rectangle. Landmarks: `alpha0`/`alpha1` the left/right columns
/// (corners included), `beta0`/`beta1` bottom/top rows without corners.
pub fn planar_grid(nx: usize, ny: usize, width: f64, height: f64, jitter: f64, seed: u64) -> SurfaceMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hx, hy) = (width / nx as f64, height / ny as f64);
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let mut p = [i as f64 * hx, j as f64 * hy, 0.0];
            if i > 0 && i < nx && j > 0 && j < ny {
                p[0] += jitter * hx * rng.gen_range(-0.5..0.5);
                p[1] += jitter * hy * rng.gen_range(-0.5..0.5);
            }
            vertices.push(p);
        }
    }
    let mut faces = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            if (i + j) % 2 == 0 {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, c, d]);
            }
        }
    }
    let mut mesh = SurfaceMesh::new(vertices, faces);
    mesh.landmarks = Landmarks {
        alpha0: (0..=ny).map(|j| idx(0, j)).collect(),
        alpha1: (0..=ny).map(|j| idx(nx, j)).collect(),
        beta0: (1..nx).map(|i| idx(i, 0)).collect(),
        beta1: (1..nx).map(|i| idx(i, ny)).collect(),
    };
    mesh
}

/// Two-row triangle strip along x with `n` nodes per row spaced `spacing`
/// mm, row separation `width`; fibres point along +x.
///
/// Bottom-row node `i` has index `i`; top-row node `i` has index `n + i`.
pub fn strip_chain(n: usize, spacing: f64, width: f64) -> SurfaceMesh {
    let mut vertices = Vec::with_capacity(2 * n);
    for i in 0..n {
        vertices.push([i as f64 * spacing, 0.0, 0.0]);
    }
    for i in 0..n {
        vertices.push([i as f64 * spacing, width, 0.0]);
    }
    let mut faces = Vec::new();
    for i in 0..n - 1 {
        faces.push([i, i + 1, n + i + 1]);
        faces.push([i, n + i + 1, n + i]);
    }
    let mut mesh = SurfaceMesh::new(vertices, faces);
    mesh.fibres = vec![[1.0, 0.0, 0.0]; mesh.n_faces()];
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        let m = icosphere(4, 1.0);
        assert_eq!(m.n_vertices(), 2562);
        assert_eq!(m.n_faces(), 5120);
        m.validate_geometry().unwrap();
    }

    #[test]
    fn default_atrium_is_valid_and_deterministic() {
        let p = AtriumParams::default();
        let a = gen_synthetic_atrium(&p, 3).unwrap();
        a.validate().unwrap();
        assert!(a.n_vertices() >= 200);
        assert_eq!(a.fibres.len(), a.n_faces());
        assert_eq!(a.uac.len(), a.n_vertices());
        let b = gen_synthetic_atrium(&p, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_perturb_vertices() {
        let p = AtriumParams::default();
        let a = gen_synthetic_atrium(&p, 0).unwrap();
        let b = gen_synthetic_atrium(&p, 1).unwrap();
        let differ = a
            .vertices
            .iter()
            .zip(&b.vertices)
            .any(|(u, v)| geom::norm(geom::sub(*u, *v)) > 1e-3);
        assert!(differ);
    }

    #[test]
    fn too_coarse_rejected() {
        let p = AtriumParams {
            resolution: 10,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic_atrium(&p, 0), Err(Error::Param(_))));
    }

    #[test]
    fn holes_add_boundary_loops() {
        let p = AtriumParams {
            holes: 0,
            ..Default::default()
        };
        let solid = gen_synthetic_atrium(&p, 5).unwrap();
        let holed = gen_synthetic_atrium(&AtriumParams::default(), 5).unwrap();
        assert_eq!(solid.n_faces() - holed.n_faces(), 2 * 8);
        assert_eq!(solid.n_vertices() - holed.n_vertices(), 2);
    }
}
