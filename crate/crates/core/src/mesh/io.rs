//! Mesh persistence: the versioned JSON document and plain ASCII OFF import.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Landmarks, SurfaceMesh};
use crate::error::{Error, Result};

const MESH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MeshDoc {
    version: u32,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    fibres: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    uac: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    landmarks: Option<LandmarkDoc>,
}

#[derive(Serialize, Deserialize)]
struct LandmarkDoc {
    alpha0: Option<Vec<usize>>,
    alpha1: Option<Vec<usize>>,
    beta0: Option<Vec<usize>>,
    beta1: Option<Vec<usize>>,
}

pub fn mesh_from_json(text: &str) -> Result<SurfaceMesh> {
    let doc: MeshDoc = serde_json::from_str(text).map_err(|e| Error::Malformed(format!("mesh json: {e}")))?;
    if doc.version != MESH_VERSION {
        return Err(Error::Malformed(format!("unsupported mesh version {}", doc.version)));
    }
    let landmarks = match doc.landmarks {
        None => Landmarks::default(),
        Some(l) => Landmarks {
            alpha0: l.alpha0.ok_or(Error::MissingLandmark("alpha0"))?,
            alpha1: l.alpha1.ok_or(Error::MissingLandmark("alpha1"))?,
            beta0: l.beta0.ok_or(Error::MissingLandmark("beta0"))?,
            beta1: l.beta1.ok_or(Error::MissingLandmark("beta1"))?,
        },
    };
    let mesh = SurfaceMesh {
        vertices: doc.vertices,
        faces: doc.faces,
        fibres: doc.fibres,
        uac: doc.uac,
        landmarks,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn mesh_to_json(mesh: &SurfaceMesh) -> String {
    let landmarks = if mesh.landmarks.is_empty() {
        None
    } else {
        Some(LandmarkDoc {
            alpha0: Some(mesh.landmarks.alpha0.clone()),
            alpha1: Some(mesh.landmarks.alpha1.clone()),
            beta0: Some(mesh.landmarks.beta0.clone()),
            beta1: Some(mesh.landmarks.beta1.clone()),
        })
    };
    let doc = MeshDoc {
        version: MESH_VERSION,
        vertices: mesh.vertices.clone(),
        faces: mesh.faces.clone(),
        fibres: mesh.fibres.clone(),
        uac: mesh.uac.clone(),
        landmarks,
    };
    serde_json::to_string(&doc).expect("mesh document serializes")
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<SurfaceMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    mesh_from_json(&text)
}

pub fn save_mesh(mesh: &SurfaceMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mesh_to_json(mesh)).map_err(|e| Error::io(path, e))
}

/// Geometry-only import of an ASCII OFF file (triangles only).
pub fn import_off(text: &str) -> Result<SurfaceMesh> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let header = tokens.next().ok_or_else(|| Error::Malformed("empty OFF".into()))?;
    if header != "OFF" {
        return Err(Error::Malformed(format!("expected OFF header, got `{header}`")));
    }
    let mut next_num = |what: &str| -> Result<f64> {
        let t = tokens
            .next()
            .ok_or_else(|| Error::Malformed(format!("OFF truncated reading {what}")))?;
        t.parse::<f64>()
            .map_err(|_| Error::Malformed(format!("OFF: bad number `{t}` in {what}")))
    };
    let nv = next_num("counts")? as usize;
    let nf = next_num("counts")? as usize;
    let _ne = next_num("counts")?;
    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let what = format!("vertex {i}");
        vertices.push([next_num(&what)?, next_num(&what)?, next_num(&what)?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for f in 0..nf {
        let what = format!("face {f}");
        let k = next_num(&what)? as usize;
        if k != 3 {
            return Err(Error::Malformed(format!(
                "face {f} has {k} vertices; only triangles supported"
            )));
        }
        let mut tri = [0usize; 3];
        for t in tri.iter_mut() {
            let v = next_num(&what)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Malformed(format!("face {f}: bad index {v}")));
            }
            *t = v as usize;
        }
        faces.push(tri);
    }
    let mesh = SurfaceMesh::new(vertices, faces);
    mesh.validate_geometry()?;
    Ok(mesh)
}
