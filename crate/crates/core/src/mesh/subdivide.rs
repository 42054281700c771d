use std::collections::BTreeMap;

use super::SurfaceMesh;
use crate::error::Result;
use crate::geom;

/// 1-to-4 midpoint refinement.
///
/// New vertices are appended after the originals in sorted edge order. A
/// midpoint joins a landmark set when its edge lies on the boundary with both
/// endpoints in that set; UAC values are averaged along the edge and each
/// child face inherits its parent's fibre.
pub fn subdivide(mesh: &SurfaceMesh) -> Result<SurfaceMesh> {
    mesh.validate()?;
    let n = mesh.n_vertices();
    let edges = mesh.edge_faces();
    let mut mid: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut vertices = mesh.vertices.clone();
    let mut uac = mesh.uac.clone();
    for &(a, b) in edges.keys() {
        mid.insert((a, b), vertices.len());
        vertices.push(geom::scale(geom::add(mesh.vertices[a], mesh.vertices[b]), 0.5));
        if !mesh.uac.is_empty() {
            let (ua, ub) = (mesh.uac[a], mesh.uac[b]);
            uac.push([0.5 * (ua[0] + ub[0]), 0.5 * (ua[1] + ub[1])]);
        }
    }
    let m = |a: usize, b: usize| mid[&(a.min(b), a.max(b))];
    let mut faces = Vec::with_capacity(4 * mesh.n_faces());
    let mut fibres = Vec::new();
    for (f, &[a, b, c]) in mesh.faces.iter().enumerate() {
        let (ab, bc, ca) = (m(a, b), m(b, c), m(c, a));
        faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        if !mesh.fibres.is_empty() {
            fibres.extend([mesh.fibres[f]; 4]);
        }
    }
    let mut landmarks = mesh.landmarks.clone();
    if !landmarks.is_empty() {
        let mut owner = vec![usize::MAX; n];
        for (k, (_, set)) in mesh.landmarks.named().iter().enumerate() {
            for &v in set.iter() {
                owner[v] = k;
            }
        }
        let sets = landmarks.named_mut();
        let mut sets: Vec<&mut Vec<usize>> = sets.into_iter().collect();
        for (&(a, b), fs) in &edges {
            if fs.len() == 1 && owner[a] != usize::MAX && owner[a] == owner[b] {
                sets[owner[a]].push(mid[&(a, b)]);
            }
        }
    }
    let out = SurfaceMesh {
        vertices,
        faces,
        fibres,
        uac,
        landmarks,
    };
    out.validate()?;
    Ok(out)
}
