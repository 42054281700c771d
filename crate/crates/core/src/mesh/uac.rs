//! Universal atrial coordinates as harmonic fields between landmark arcs.

use std::collections::VecDeque;

use super::operators::cotangent_laplacian;
use super::SurfaceMesh;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

const CG_TOL: f64 = 1e-14;

/// Solve `L u = 0` on free vertices with `u = 0` on `zero` and `u = 1` on `one`.
pub fn harmonic_field(laplacian: &CsrMatrix, zero: &[usize], one: &[usize]) -> Result<Vec<f64>> {
    let n = laplacian.rows;
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for &v in zero {
        fixed[v] = Some(0.0);
    }
    for &v in one {
        fixed[v] = Some(1.0);
    }
    // each free component must touch a Dirichlet vertex
    let mut reach = vec![false; n];
    let mut q: VecDeque<usize> = (0..n).filter(|&v| fixed[v].is_some()).collect();
    for &v in &q {
        reach[v] = true;
    }
    while let Some(v) = q.pop_front() {
        for (w, _) in laplacian.row(v) {
            if !reach[w] {
                reach[w] = true;
                q.push_back(w);
            }
        }
    }
    if let Some(v) = reach.iter().position(|r| !r) {
        return Err(Error::Singular(format!(
            "vertex {v} lies in a patch without Dirichlet vertices"
        )));
    }

    let free: Vec<usize> = (0..n).filter(|&v| fixed[v].is_none()).collect();
    let mut slot = vec![usize::MAX; n];
    for (k, &v) in free.iter().enumerate() {
        slot[v] = k;
    }
    let m = free.len();
    let mut u: Vec<f64> = fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
    if m == 0 {
        return Ok(u);
    }
    // rhs = -L_fd u_d
    let mut rhs = vec![0.0; m];
    let mut diag = vec![0.0; m];
    for (k, &v) in free.iter().enumerate() {
        for (w, val) in laplacian.row(v) {
            if let Some(d) = fixed[w] {
                rhs[k] -= val * d;
            } else if w == v {
                diag[k] = val;
            }
        }
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for (k, &v) in free.iter().enumerate() {
            let mut s = 0.0;
            for (w, val) in laplacian.row(v) {
                if slot[w] != usize::MAX {
                    s += val * x[slot[w]];
                }
            }
            out[k] = s;
        }
    };
    // Jacobi-preconditioned conjugate gradients
    let mut x = vec![0.0; m];
    let mut r = rhs.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let rhs_norm = rhs.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
    let mut ap = vec![0.0; m];
    for _ in 0..10 * m + 100 {
        let rnorm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        if rnorm <= CG_TOL * rhs_norm {
            break;
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::Singular("reduced Laplacian not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..m {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
    }
    for (k, &v) in free.iter().enumerate() {
        u[v] = x[k];
    }
    Ok(u)
}

/// Fill `mesh.uac` with harmonic `(alpha, beta)`, clamped to `[0, 1]`.
pub fn compute_uac(mesh: &mut SurfaceMesh) -> Result<()> {
    for (name, set) in mesh.landmarks.named() {
        if set.is_empty() {
            return Err(Error::MissingLandmark(name));
        }
    }
    let (lap, _) = cotangent_laplacian(mesh);
    let alpha = harmonic_field(&lap, &mesh.landmarks.alpha0, &mesh.landmarks.alpha1)?;
    let beta = harmonic_field(&lap, &mesh.landmarks.beta0, &mesh.landmarks.beta1)?;
    mesh.uac = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| [a.clamp(0.0, 1.0), b.clamp(0.0, 1.0)])
        .collect();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::planar_grid;

    #[test]
    fn unit_square_alpha_is_x() {
        let mut mesh = planar_grid(12, 10, 1.0, 1.0, 0.4, 11);
        compute_uac(&mut mesh).unwrap();
        for (v, p) in mesh.vertices.iter().zip(&mesh.uac) {
            assert!((p[0] - v[0]).abs() < 1e-6, "alpha {} vs x {}", p[0], v[0]);
        }
    }

    #[test]
    fn dirichlet_values_and_maximum_principle() {
        let mut mesh = planar_grid(9, 7, 2.0, 1.0, 0.5, 2);
        compute_uac(&mut mesh).unwrap();
        for &v in &mesh.landmarks.alpha0 {
            assert_eq!(mesh.uac[v][0], 0.0);
        }
        for &v in &mesh.landmarks.alpha1 {
            assert_eq!(mesh.uac[v][0], 1.0);
        }
        for &v in &mesh.landmarks.beta1 {
            assert_eq!(mesh.uac[v][1], 1.0);
        }
        let lm: Vec<usize> = mesh
            .landmarks
            .alpha0
            .iter()
            .chain(&mesh.landmarks.alpha1)
            .copied()
            .collect();
        let (lo, hi) = lm.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(mesh.uac[v][0]), hi.max(mesh.uac[v][0]))
        });
        assert!(mesh.uac.iter().all(|p| p[0] >= lo && p[0] <= hi));
    }

    #[test]
    fn empty_landmark_is_an_error() {
        let mut mesh = planar_grid(4, 4, 1.0, 1.0, 0.0, 0);
        mesh.landmarks.beta0.clear();
        assert!(matches!(compute_uac(&mut mesh), Err(Error::MissingLandmark("beta0"))));
    }
}
