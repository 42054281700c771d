//! Triangulated atrial surfaces and the geometric objects derived from them.
//!
//! Lengths are millimetres throughout. A [`SurfaceMesh`] carries the
//! geometry plus per-face fibre directions, per-vertex universal atrial
//! coordinates `(alpha, beta)` and four boundary landmark sets that anchor
//! those coordinates.

mod eigen;
mod generate;
mod io;
mod operators;
mod subdivide;
mod uac;

pub use eigen::{dense_eigenpairs, subspace_eigenpairs, Eigenpairs, DENSE_EIGEN_LIMIT};
pub use generate::{gen_synthetic_atrium, icosphere, planar_grid, strip_chain, AtriumParams};
pub use io::{import_off, load_mesh, mesh_from_json, mesh_to_json, save_mesh};
pub use operators::{build_operators, face_gradient, GeometricOperators};
pub use subdivide::subdivide;
pub use uac::{compute_uac, harmonic_field};

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// Smallest admissible face area in mm².
pub const MIN_FACE_AREA: f64 = 1e-9;
const FIBRE_TOL: f64 = 1e-6;

/// The four named boundary vertex sets that pin the UAC fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub alpha0: Vec<usize>,
    pub alpha1: Vec<usize>,
    pub beta0: Vec<usize>,
    pub beta1: Vec<usize>,
}

impl Landmarks {
    pub fn named(&self) -> [(&'static str, &Vec<usize>); 4] {
        [
            ("alpha0", &self.alpha0),
            ("alpha1", &self.alpha1),
            ("beta0", &self.beta0),
            ("beta1", &self.beta1),
        ]
    }

    pub fn named_mut(&mut self) -> [&mut Vec<usize>; 4] {
        [&mut self.alpha0, &mut self.alpha1, &mut self.beta0, &mut self.beta1]
    }

    pub fn is_empty(&self) -> bool {
        self.named().iter().all(|(_, s)| s.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-face unit fibre direction; empty when the mesh carries no fibres.
    pub fibres: Vec<Vec3>,
    /// Per-vertex `(alpha, beta)`; empty until computed.
    pub uac: Vec<[f64; 2]>,
    pub landmarks: Landmarks,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            faces,
            fibres: Vec::new(),
            uac: Vec::new(),
            landmarks: Landmarks::default(),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn face_points(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [p0, p1, p2] = self.face_points(f);
        geom::triangle_area(p0, p1, p2)
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [p0, p1, p2] = self.face_points(f);
        geom::normalize(geom::cross(geom::sub(p1, p0), geom::sub(p2, p0)))
    }

    pub fn face_centroid(&self, f: usize) -> Vec3 {
        let [p0, p1, p2] = self.face_points(f);
        geom::centroid(p0, p1, p2)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_faces()).map(|f| self.face_area(f)).sum()
    }

    /// Undirected edges `(lo, hi)` mapped to their incident faces, in sorted order.
    pub fn edge_faces(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut edges: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (f, tri) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push(f);
            }
        }
        edges
    }

    pub fn n_edges(&self) -> usize {
        self.edge_faces().len()
    }

    pub fn vertex_neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for &(a, b) in self.edge_faces().keys() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Vertices on edges with exactly one incident face.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut on = vec![false; self.n_vertices()];
        for (&(a, b), fs) in self.edge_faces().iter() {
            if fs.len() == 1 {
                on[a] = true;
                on[b] = true;
            }
        }
        on
    }

    pub fn bounding_diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        geom::norm(geom::sub(hi, lo))
    }

    pub fn vertex_centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for v in &self.vertices {
            c = geom::add(c, *v);
        }
        geom::scale(c, 1.0 / self.n_vertices() as f64)
    }

    /// Checks face indices, face areas, edge-manifoldness and connectivity.
    pub fn validate_geometry(&self) -> Result<()> {
        let n = self.n_vertices();
        if n < 3 || self.faces.is_empty() {
            return Err(Error::Malformed("mesh needs at least one face".into()));
        }
        if let Some(i) = self.vertices.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("vertex {i}")));
        }
        for (f, tri) in self.faces.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::FaceIndex { face: f, index, n });
            }
        }
        for f in 0..self.n_faces() {
            let area = self.face_area(f);
            if !(area > MIN_FACE_AREA) {
                return Err(Error::DegenerateFace { face: f, area });
            }
        }
        let edges = self.edge_faces();
        for (&(a, b), fs) in &edges {
            if fs.len() > 2 {
                return Err(Error::NonManifold(a, b, fs[2]));
            }
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges.keys() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(Error::Disconnected(v));
        }
        Ok(())
    }

    /// Full invariant check, including fibres, UAC range and landmarks.
    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        self.validate_fibres()?;
        if !self.uac.is_empty() {
            if self.uac.len() != self.n_vertices() {
                return Err(Error::Shape(format!(
                    "uac has {} entries for {} vertices",
                    self.uac.len(),
                    self.n_vertices()
                )));
            }
            if let Some(i) = self
                .uac
                .iter()
                .position(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
            {
                return Err(Error::UacRange(i));
            }
        }
        // a mesh without any landmarks is geometry-only
        if self.landmarks.is_empty() {
            return Ok(());
        }
        self.validate_landmarks()
    }

    pub fn validate_fibres(&self) -> Result<()> {
        if self.fibres.is_empty() {
            return Ok(());
        }
        if self.fibres.len() != self.n_faces() {
            return Err(Error::Shape(format!(
                "{} fibres for {} faces",
                self.fibres.len(),
                self.n_faces()
            )));
        }
        for (f, fib) in self.fibres.iter().enumerate() {
            let len = geom::norm(*fib);
            if !((len - 1.0).abs() <= FIBRE_TOL) {
                return Err(Error::Fibre {
                    face: f,
                    reason: format!("norm {len}"),
                });
            }
            let off_plane = geom::dot(*fib, self.face_normal(f));
            if off_plane.abs() > FIBRE_TOL {
                return Err(Error::Fibre {
                    face: f,
                    reason: format!("out of face plane by {off_plane:e}"),
                });
            }
        }
        Ok(())
    }

    pub fn validate_landmarks(&self) -> Result<()> {
        let mut owner: HashMap<usize, usize> = HashMap::new();
        for (k, (name, set)) in self.landmarks.named().into_iter().enumerate() {
            if set.is_empty() {
                return Err(Error::MissingLandmark(name));
            }
            for &v in set.iter() {
                if v >= self.n_vertices() {
                    return Err(Error::Malformed(format!(
                        "landmark `{name}` references vertex {v} of {}",
                        self.n_vertices()
                    )));
                }
                if let Some(&other) = owner.get(&v) {
                    if other != k {
                        return Err(Error::LandmarkOverlap(v));
                    }
                }
                owner.insert(v, k);
            }
        }
        Ok(())
    }

    /// Relabel vertices so that old vertex `i` becomes `perm[i]`.
    ///
    /// Faces keep their order; per-vertex data moves with its vertex.
    pub fn permuted(&self, perm: &[usize]) -> SurfaceMesh {
        let n = self.n_vertices();
        assert_eq!(perm.len(), n);
        let mut vertices = vec![[0.0; 3]; n];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
        }
        let uac = if self.uac.is_empty() {
            Vec::new()
        } else {
            let mut u = vec![[0.0; 2]; n];
            for (old, &new) in perm.iter().enumerate() {
                u[new] = self.uac[old];
            }
            u
        };
        let map_set = |s: &Vec<usize>| s.iter().map(|&v| perm[v]).collect::<Vec<_>>();
        SurfaceMesh {
            vertices,
            faces: self
                .faces
                .iter()
                .map(|t| [perm[t[0]], perm[t[1]], perm[t[2]]])
                .collect(),
            fibres: self.fibres.clone(),
            uac,
            landmarks: Landmarks {
                alpha0: map_set(&self.landmarks.alpha0),
                alpha1: map_set(&self.landmarks.alpha1),
                beta0: map_set(&self.landmarks.beta0),
                beta1: map_set(&self.landmarks.beta1),
            },
        }
    }

    /// Per-face fibres from the tangential gradient of a nodal field, falling
    /// back to a second field where the first is flat.
    pub fn fibres_from_fields(&self, primary: &[f64], fallback: &[f64]) -> Result<Vec<Vec3>> {
        let g1 = operators::face_gradient_raw(self, primary)?;
        let g2 = operators::face_gradient_raw(self, fallback)?;
        let mut out = Vec::with_capacity(self.n_faces());
        for f in 0..self.n_faces() {
            let g = if geom::norm(g1[f]) >= 1e-8 { g1[f] } else { g2[f] };
            let len = geom::norm(g);
            if len < 1e-8 {
                // both fields flat: any in-plane unit vector will do
                let [p0, p1, _] = self.face_points(f);
                out.push(geom::normalize(geom::sub(p1, p0)));
            } else {
                out.push(geom::scale(g, 1.0 / len));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn single_triangle() -> SurfaceMesh {
        let mut m = SurfaceMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]);
        m.landmarks = Landmarks {
            alpha0: vec![0],
            alpha1: vec![1],
            beta0: vec![2],
            beta1: vec![],
        };
        m
    }

    #[test]
    fn out_of_range_face_is_named() {
        let mut m = single_triangle();
        m.faces[0] = [0, 1, 3];
        match m.validate_geometry() {
            Err(Error::FaceIndex { face: 0, index: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_face_rejected() {
        let m = SurfaceMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]);
        assert!(matches!(
            m.validate_geometry(),
            Err(Error::DegenerateFace { face: 0, .. })
        ));
    }

    #[test]
    fn non_manifold_edge_rejected() {
        let m = SurfaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]],
        );
        assert!(matches!(m.validate_geometry(), Err(Error::NonManifold(0, 1, 2))));
    }

    #[test]
    fn disconnected_mesh_rejected() {
        let m = SurfaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [5.0, 0.0, 0.0],
                [6.0, 0.0, 0.0],
                [5.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        assert!(matches!(m.validate_geometry(), Err(Error::Disconnected(3))));
    }

    #[test]
    fn missing_landmark_reported() {
        let m = single_triangle();
        assert!(matches!(m.validate(), Err(Error::MissingLandmark("beta1"))));
    }

    #[test]
    fn overlapping_landmarks_rejected() {
        let mut m = single_triangle();
        m.landmarks.beta1 = vec![0];
        assert!(matches!(m.validate(), Err(Error::LandmarkOverlap(0))));
    }

    #[test]
    fn out_of_plane_fibre_rejected() {
        let mut m = single_triangle();
        m.landmarks.beta1 = vec![];
        m.fibres = vec![[0.0, 0.0, 1.0]];
        assert!(matches!(m.validate_fibres(), Err(Error::Fibre { face: 0, .. })));
        m.fibres = vec![[2.0, 0.0, 0.0]];
        assert!(matches!(m.validate_fibres(), Err(Error::Fibre { face: 0, .. })));
        m.fibres = vec![[1.0, 0.0, 0.0]];
        assert!(m.validate_fibres().is_ok());
    }
}
