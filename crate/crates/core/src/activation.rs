//! Activation-time and transmembrane-voltage synthesis on atrial surfaces.
//!
//! Propagation is modelled as first arrival over the mesh edge graph under an
//! anisotropic edge metric, and each node then replays a fixed action
//! potential template shifted by its activation time.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::mesh::SurfaceMesh;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationField {
    /// Activation time per node (ms).
    pub times: Vec<f64>,
    pub pacing_node: usize,
    /// Longitudinal conduction velocity (m/s, numerically mm/ms).
    pub cv_long: f64,
    /// Longitudinal-to-transverse speed ratio.
    pub aniso: f64,
}

impl ActivationField {
    pub fn max_time(&self) -> f64 {
        self.times.iter().copied().fold(0.0, f64::max)
    }
}

/// Speed along a direction at angle θ to the fibre, given `cos²θ`.
#[inline]
pub fn directional_speed(cv_long: f64, aniso: f64, cos2: f64) -> f64 {
    let sin2 = (1.0 - cos2).max(0.0);
    cv_long * (cos2 + sin2 / (aniso * aniso)).sqrt()
}

/// Per-edge traversal times (ms) for the anisotropic metric.
///
/// The fibre of an edge is the sign-aligned mean of its incident faces' fibres.
pub fn edge_costs(mesh: &SurfaceMesh, cv_long: f64, aniso: f64) -> Result<Vec<((usize, usize), f64)>> {
    if mesh.fibres.len() != mesh.n_faces() {
        return Err(Error::Param("activation requires per-face fibres".into()));
    }
    let mut out = Vec::new();
    for ((a, b), faces) in mesh.edge_faces() {
        let mut fibre = mesh.fibres[faces[0]];
        for &f in &faces[1..] {
            let g = mesh.fibres[f];
            let g = if geom::dot(fibre, g) < 0.0 {
                geom::scale(g, -1.0)
            } else {
                g
            };
            fibre = geom::add(fibre, g);
        }
        let e = geom::sub(mesh.vertices[b], mesh.vertices[a]);
        let len = geom::norm(e);
        let cos = geom::dot(e, fibre) / (len * geom::norm(fibre));
        let speed = directional_speed(cv_long, aniso, (cos * cos).min(1.0));
        out.push(((a, b), len / speed));
    }
    Ok(out)
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    time: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, node)
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// First-arrival times from `pacing_node` by label-setting shortest paths.
pub fn activation_times(mesh: &SurfaceMesh, pacing_node: usize, cv_long: f64, aniso: f64) -> Result<ActivationField> {
    let n = mesh.n_vertices();
    if pacing_node >= n {
        return Err(Error::Param(format!(
            "pacing node {pacing_node} out of range (N = {n})"
        )));
    }
    if !(cv_long > 0.0) || !cv_long.is_finite() {
        return Err(Error::Param(format!("cv_long must be positive, got {cv_long}")));
    }
    if !(aniso >= 1.0) || !aniso.is_finite() {
        return Err(Error::Param(format!("anisotropy ratio must be >= 1, got {aniso}")));
    }
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for ((a, b), cost) in edge_costs(mesh, cv_long, aniso)? {
        adj[a].push((b, cost));
        adj[b].push((a, cost));
    }
    let mut times = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    times[pacing_node] = 0.0;
    let mut heap = BinaryHeap::from([Frontier {
        time: 0.0,
        node: pacing_node,
    }]);
    while let Some(Frontier { time, node }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        for &(next, cost) in &adj[node] {
            let t = time + cost;
            if t < times[next] {
                times[next] = t;
                heap.push(Frontier { time: t, node: next });
            }
        }
    }
    if let Some(v) = times.iter().position(|t| !t.is_finite()) {
        return Err(Error::Unreachable(v));
    }
    Ok(ActivationField {
        times,
        pacing_node,
        cv_long,
        aniso,
    })
}

/// Action potential shape: linear upstroke then cosine repolarization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApTemplate {
    pub v_rest: f64,
    pub v_peak: f64,
    pub upstroke_ms: f64,
    pub apd_ms: f64,
}

impl Default for ApTemplate {
    fn default() -> Self {
        Self {
            v_rest: -81.0,
            v_peak: 20.0,
            upstroke_ms: 2.0,
            apd_ms: 200.0,
        }
    }
}

impl ApTemplate {
    pub fn validate(&self) -> Result<()> {
        if !(self.upstroke_ms > 0.0) {
            return Err(Error::Param("upstroke_ms must be positive".into()));
        }
        if !(self.apd_ms > self.upstroke_ms) {
            return Err(Error::Param("apd_ms must exceed upstroke_ms".into()));
        }
        if !(self.v_peak > self.v_rest) {
            return Err(Error::Param("v_peak must exceed v_rest".into()));
        }
        Ok(())
    }

    /// Voltage (mV) at `t_rel` ms after activation.
    pub fn eval(&self, t_rel: f64) -> f64 {
        let amp = self.v_peak - self.v_rest;
        if t_rel <= 0.0 {
            self.v_rest
        } else if t_rel <= self.upstroke_ms {
            self.v_rest + amp * t_rel / self.upstroke_ms
        } else if t_rel < self.apd_ms {
            let phase = (t_rel - self.upstroke_ms) / (self.apd_ms - self.upstroke_ms);
            self.v_rest + amp * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
        } else {
            self.v_rest
        }
    }
}

pub fn ap_template(t_rel: f64, params: &ApTemplate) -> Result<f64> {
    params.validate()?;
    Ok(params.eval(t_rel))
}

/// Voltage frames on the surface, `frames[t * n_nodes + i]` in mV.
#[derive(Clone, Debug, PartialEq)]
pub struct VoltageSequence {
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub n_nodes: usize,
    pub frame_dt: f64,
    pub t0: f64,
}

impl VoltageSequence {
    pub fn new(frames: Vec<f64>, n_frames: usize, n_nodes: usize, frame_dt: f64, t0: f64) -> Result<Self> {
        if frames.len() != n_frames * n_nodes {
            return Err(Error::Shape(format!(
                "{} values for {n_frames} frames of {n_nodes} nodes",
                frames.len()
            )));
        }
        if n_frames < 2 || !(frame_dt > 0.0) {
            return Err(Error::Param("need at least two frames and frame_dt > 0".into()));
        }
        Ok(Self {
            frames,
            n_frames,
            n_nodes,
            frame_dt,
            t0,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn time_of(&self, t: usize) -> f64 {
        self.t0 + t as f64 * self.frame_dt
    }

    pub fn scaled(&self, factor: f64) -> VoltageSequence {
        VoltageSequence {
            frames: self.frames.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Replays the template at every node. Returns the sequence plus a warning
/// when `duration` ends before the latest node has repolarized.
pub fn gen_voltage_sequence(
    act: &ActivationField,
    params: &ApTemplate,
    frame_dt: f64,
    duration: f64,
) -> Result<(VoltageSequence, Option<String>)> {
    params.validate()?;
    if !(frame_dt > 0.0) || !(duration >= frame_dt) {
        return Err(Error::Param(format!(
            "frame_dt {frame_dt} and duration {duration} must satisfy 0 < frame_dt <= duration"
        )));
    }
    let n = act.times.len();
    let n_frames = (duration / frame_dt).floor() as usize + 1;
    let mut frames = Vec::with_capacity(n_frames * n);
    for t in 0..n_frames {
        let time = t as f64 * frame_dt;
        frames.extend(act.times.iter().map(|&ti| params.eval(time - ti)));
    }
    let needed = act.max_time() + params.apd_ms;
    let warning = (duration < needed)
        .then(|| format!("duration {duration} ms shorter than max activation + APD ({needed:.1} ms)"));
    Ok((VoltageSequence::new(frames, n_frames, n, frame_dt, 0.0)?, warning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::strip_chain;

    #[test]
    fn template_landmarks() {
        let p = ApTemplate::default();
        assert_eq!(p.eval(-5.0), p.v_rest);
        assert_eq!(p.eval(p.upstroke_ms), p.v_peak);
        let mid = p.upstroke_ms + (p.apd_ms - p.upstroke_ms) / 2.0;
        assert!((p.eval(mid) - (p.v_rest + p.v_peak) / 2.0).abs() < 1e-12);
        assert_eq!(p.eval(p.apd_ms + 1.0), p.v_rest);
        // continuity at the joins
        for t in [0.0, p.upstroke_ms, p.apd_ms] {
            assert!((p.eval(t - 1e-9) - p.eval(t + 1e-9)).abs() < 1e-6);
        }
        let bad = ApTemplate {
            apd_ms: 1.0,
            ..Default::default()
        };
        assert!(ap_template(0.0, &bad).is_err());
    }

    #[test]
    fn chain_along_fibre_advances_one_ms_per_node() {
        let mesh = strip_chain(12, 0.7, 2.0);
        let act = activation_times(&mesh, 0, 0.7, 4.0).unwrap();
        assert_eq!(act.times[0], 0.0);
        for i in 1..12 {
            assert!((act.times[i] - act.times[i - 1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_inputs() {
        let mesh = strip_chain(4, 1.0, 1.0);
        assert!(activation_times(&mesh, 8, 0.7, 4.0).is_err());
        assert!(activation_times(&mesh, 0, 0.0, 4.0).is_err());
        assert!(activation_times(&mesh, 0, 0.7, 0.5).is_err());
    }

    #[test]
    fn first_and_last_frames() {
        let mesh = strip_chain(10, 1.0, 1.0);
        let act = activation_times(&mesh, 3, 0.7, 4.0).unwrap();
        let p = ApTemplate::default();
        let duration = act.max_time() + p.apd_ms + 5.0;
        let (seq, warn) = gen_voltage_sequence(&act, &p, 1.0, duration).unwrap();
        assert!(warn.is_none());
        assert!(seq.frame(0).iter().all(|&v| v == p.v_rest));
        let last = seq.frame(seq.n_frames - 1);
        assert!(last.iter().all(|&v| (v - p.v_rest).abs() < 1e-6));
        let (_, warn) = gen_voltage_sequence(&act, &p, 1.0, 50.0).unwrap();
        assert!(warn.is_some());
    }
}
