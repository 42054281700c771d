use super::eigen::{dense_eigenpairs, subspace_eigenpairs, DENSE_EIGEN_LIMIT};
use super::SurfaceMesh;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::sparse::CsrMatrix;

/// Precomputed operators of one surface.
///
/// `laplacian` is the positive semidefinite cotangent Laplacian (1, unitless
/// weights), `mass` the lumped barycentric areas (mm²), `grad` maps the three
/// nodal values of a face to its tangent gradient (1/mm), and the eigenpairs
/// solve `L ψ = λ M ψ` with `Ψᵀ M Ψ = I`.
#[derive(Clone, Debug)]
pub struct GeometricOperators {
    pub n: usize,
    pub laplacian: CsrMatrix,
    pub mass: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
    pub face_areas: Vec<f64>,
    /// Per face, per local vertex: gradient of that vertex's hat function.
    pub grad: Vec<[Vec3; 3]>,
    pub eigenvalues: Vec<f64>,
    /// Row-major `n × k`.
    pub eigenfunctions: Vec<f64>,
    pub k: usize,
}

impl GeometricOperators {
    pub fn psi(&self, i: usize, k: usize) -> f64 {
        self.eigenfunctions[i * self.k + k]
    }

    pub fn eigenfunction(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.psi(i, k)).collect()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// Cotangent Laplacian and lumped mass of a mesh.
pub fn cotangent_laplacian(mesh: &SurfaceMesh) -> (CsrMatrix, Vec<f64>) {
    let n = mesh.n_vertices();
    let mut trip = Vec::with_capacity(mesh.n_faces() * 12);
    let mut mass = vec![0.0; n];
    for (f, tri) in mesh.faces.iter().enumerate() {
        let p = mesh.face_points(f);
        let area = mesh.face_area(f);
        for k in 0..3 {
            mass[tri[k]] += area / 3.0;
            // edge (i, j) opposite vertex o
            let (i, j, o) = (k, (k + 1) % 3, (k + 2) % 3);
            let w = 0.5 * geom::cot(geom::sub(p[i], p[o]), geom::sub(p[j], p[o]));
            let (vi, vj) = (tri[i], tri[j]);
            trip.push((vi, vj, -w));
            trip.push((vj, vi, -w));
            trip.push((vi, vi, w));
            trip.push((vj, vj, w));
        }
    }
    let mut lap = CsrMatrix::from_triplets(n, n, &trip);
    // pin symmetry bit-exactly: each off-diagonal pair is summed in the same
    // face order, but make it explicit
    for r in 0..n {
        let span = lap.indptr[r]..lap.indptr[r + 1];
        for idx in span {
            let c = lap.indices[idx];
            if c < r {
                let mirrored = lap.get(c, r);
                lap.values[idx] = mirrored;
            }
        }
    }
    // rows sum to zero: recompute the diagonal from the off-diagonals
    for r in 0..n {
        let off: f64 = lap.row(r).filter(|&(c, _)| c != r).map(|(_, v)| v).sum();
        let span = lap.indptr[r]..lap.indptr[r + 1];
        for idx in span {
            if lap.indices[idx] == r {
                lap.values[idx] = -off;
            }
        }
    }
    (lap, mass)
}

pub(crate) fn hat_gradients(mesh: &SurfaceMesh) -> Vec<[Vec3; 3]> {
    (0..mesh.n_faces())
        .map(|f| {
            let p = mesh.face_points(f);
            let n = geom::cross(geom::sub(p[1], p[0]), geom::sub(p[2], p[0]));
            let twice_area = geom::norm(n);
            let nhat = geom::scale(n, 1.0 / twice_area);
            let mut g = [[0.0; 3]; 3];
            for (k, gk) in g.iter_mut().enumerate() {
                // edge opposite vertex k, counter-clockwise
                let e = geom::sub(p[(k + 2) % 3], p[(k + 1) % 3]);
                *gk = geom::scale(geom::cross(nhat, e), 1.0 / twice_area);
            }
            g
        })
        .collect()
}

pub(crate) fn face_gradient_raw(mesh: &SurfaceMesh, field: &[f64]) -> Result<Vec<Vec3>> {
    if field.len() != mesh.n_vertices() {
        return Err(Error::Shape(format!(
            "field has {} values for {} vertices",
            field.len(),
            mesh.n_vertices()
        )));
    }
    let grads = hat_gradients(mesh);
    Ok(apply_gradient(&mesh.faces, &grads, field))
}

fn apply_gradient(faces: &[[usize; 3]], grads: &[[Vec3; 3]], field: &[f64]) -> Vec<Vec3> {
    faces
        .iter()
        .zip(grads)
        .map(|(tri, g)| {
            // hat gradients sum to zero, so constants vanish exactly in this form
            let base = field[tri[0]];
            geom::add(
                geom::scale(g[1], field[tri[1]] - base),
                geom::scale(g[2], field[tri[2]] - base),
            )
        })
        .collect()
}

pub fn build_operators(mesh: &SurfaceMesh, k: usize) -> Result<GeometricOperators> {
    mesh.validate_geometry()?;
    let n = mesh.n_vertices();
    if k == 0 || k > n {
        return Err(Error::Param(format!("K = {k} must be in 1..={n}")));
    }
    let (laplacian, mass) = cotangent_laplacian(mesh);
    let eig = if n <= DENSE_EIGEN_LIMIT {
        dense_eigenpairs(&laplacian, &mass, k)?
    } else {
        subspace_eigenpairs(&laplacian, &mass, k)?
    };
    Ok(GeometricOperators {
        n,
        laplacian,
        mass,
        faces: mesh.faces.clone(),
        face_areas: (0..mesh.n_faces()).map(|f| mesh.face_area(f)).collect(),
        grad: hat_gradients(mesh),
        eigenvalues: eig.values,
        eigenfunctions: eig.vectors,
        k: eig.k,
    })
}

/// Tangent gradient (1/mm) of the piecewise-linear interpolant of `field`, per face.
pub fn face_gradient(ops: &GeometricOperators, field: &[f64]) -> Result<Vec<Vec3>> {
    if field.len() != ops.n {
        return Err(Error::Shape(format!(
            "field has {} values for {} vertices",
            field.len(),
            ops.n
        )));
    }
    Ok(apply_gradient(&ops.faces, &ops.grad, field))
}
