//! Frame encoder: local diffusion features, spectral propagation and a
//! per-node voltage stream, fused by learned gates and pooled with
//! UAC-guided, mass-aware quadrature weights.
//!
//! Frames are stacked row-wise, so every stage works on `(T·N) × d` tensors.

use std::sync::Arc;

use super::{linear, Ablation, Bound, MeshContext, ModelConfig};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Smoothing inside the gradient-magnitude square root.
const GRAD_EPS: f64 = 1e-6;

/// `concat_k [sin(2^k π α), cos(2^k π α), sin(2^k π β), cos(2^k π β)]` per node.
pub fn uac_fourier(alpha: &[f64], beta: &[f64], l_f: usize) -> Result<Mat> {
    if alpha.len() != beta.len() || alpha.is_empty() {
        return Err(Error::Param(
            "uac_fourier needs matching, non-empty alpha and beta".into(),
        ));
    }
    let n = alpha.len();
    let mut out = Mat::zeros(n, 4 * l_f);
    for i in 0..n {
        for k in 0..l_f {
            let w = (1u64 << k) as f64 * std::f64::consts::PI;
            let row = &mut out.data[i * 4 * l_f + 4 * k..i * 4 * l_f + 4 * k + 4];
            row.copy_from_slice(&[
                (w * alpha[i]).sin(),
                (w * alpha[i]).cos(),
                (w * beta[i]).sin(),
                (w * beta[i]).cos(),
            ]);
        }
    }
    Ok(out)
}

/// Per-channel heat diffusion in the truncated eigenbasis:
/// `Ψ diag(exp(−λ t_c)) Ψᵀ M H[:, c]` with `t_c = exp(log_t[c])`.
pub fn diffusion_stage(tape: &mut Tape, ctx: &MeshContext, h: Var, log_t: Var) -> Var {
    let t = tape.exp(log_t);
    let neg_lambda = tape.leaf(ctx.neg_lambda.clone());
    let lt = tape.matmul(neg_lambda, t);
    let decay = tape.exp(lt);
    let coeff = tape.block_left(ctx.psi_t_mass.clone(), h);
    let damped = tape.mul(coeff, decay);
    tape.block_left(ctx.psi.clone(), damped)
}

/// Same as [`diffusion_stage`] with explicit (non-negative) times.
pub fn diffuse(ctx: &MeshContext, h: &Mat, times: &[f64]) -> Mat {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let log_t = tape.leaf(Mat::row_vector(times.iter().map(|t| t.ln()).collect()));
    let out = diffusion_stage(&mut tape, ctx, hv, log_t);
    tape.value(out).clone()
}

/// Node-averaged tangent-gradient magnitude of every channel.
pub fn gradient_magnitudes(tape: &mut Tape, ctx: &MeshContext, h: Var) -> Var {
    let mut sq = None;
    for c in 0..3 {
        let g = tape.sparse_left(ctx.grad[c].clone(), ctx.grad_t[c].clone(), h);
        let g2 = tape.mul(g, g);
        sq = Some(match sq {
            None => g2,
            Some(acc) => tape.add(acc, g2),
        });
    }
    let mag = tape.sqrt_eps(sq.expect("three components"), GRAD_EPS);
    tape.sparse_left(ctx.face_to_node.clone(), ctx.face_to_node_t.clone(), mag)
}

/// Diffusion, gradient features with learned mixing, and a residual MLP.
pub fn diffusion_block(tape: &mut Tape, p: &Bound, ctx: &MeshContext, block: usize, h: Var) -> Var {
    let diffused = diffusion_stage(tape, ctx, h, p.var(&format!("enc.block{block}.log_t")));
    let mags = gradient_magnitudes(tape, ctx, diffused);
    let mixed = tape.matmul(mags, p.var(&format!("enc.block{block}.mix")));
    let cat = tape.concat_cols(&[h, diffused, mixed]);
    let a = linear(tape, p, &format!("enc.block{block}.mlp0"), cat);
    let a = tape.tanh(a);
    let b = linear(tape, p, &format!("enc.block{block}.mlp1"), a);
    tape.add(h, b)
}

/// `Ψ g(Λ) Ψᵀ M H` with `g(λ) = exp(−sλ) + b`.
pub fn spectral_propagate(tape: &mut Tape, ctx: &MeshContext, h: Var, s: Var, b: Var) -> Var {
    let neg_lambda = tape.leaf(ctx.neg_lambda.clone());
    let ls = tape.matmul(neg_lambda, s);
    let e = tape.exp(ls);
    let g = tape.add(e, b);
    let coeff = tape.block_left(ctx.psi_t_mass.clone(), h);
    let scaled = tape.mul(coeff, g);
    tape.block_left(ctx.psi.clone(), scaled)
}

/// Shared per-node MLP on the normalized voltage.
pub fn voltage_stream(tape: &mut Tape, p: &Bound, v: Var) -> Var {
    let a = linear(tape, p, "enc.volt0", v);
    let a = tape.tanh(a);
    linear(tape, p, "enc.volt1", a)
}

/// Returns `(fused, gates)`; gates are `(T·N) × 3` in (local, spectral,
/// voltage) order, zero where masked out.
pub fn gate_fuse(tape: &mut Tape, p: &Bound, streams: [Var; 3], mask: [bool; 3]) -> (Var, Var) {
    let cat = tape.concat_cols(&streams);
    let a = linear(tape, p, "enc.gate0", cat);
    let a = tape.tanh(a);
    let logits = linear(tape, p, "enc.gate1", a);
    gate_combine(tape, logits, streams, mask)
}

/// Masked softmax of `logits` and the gate-weighted sum of the streams.
pub fn gate_combine(tape: &mut Tape, logits: Var, streams: [Var; 3], mask: [bool; 3]) -> (Var, Var) {
    let gates = tape.softmax_rows(logits, Arc::new(mask.to_vec()));
    let mut fused = None;
    for (j, &h) in streams.iter().enumerate() {
        if !mask[j] {
            continue;
        }
        let g = tape.slice_cols(gates, j, 1);
        let term = tape.mul(h, g);
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    (fused.expect("at least one stream"), gates)
}

/// Quadrature weights `w_i ∝ exp(s_i)·m_i` from the score network on γ; `N × 1`.
pub fn quadrature_weights(tape: &mut Tape, p: &Bound, ctx: &MeshContext) -> Var {
    let gamma = tape.leaf(ctx.gamma.clone());
    let a = linear(tape, p, "enc.score0", gamma);
    let a = tape.tanh(a);
    let s = linear(tape, p, "enc.score1", a);
    let log_mass = tape.leaf(ctx.log_mass.clone());
    pool_weights(tape, s, log_mass)
}

/// `softmax(s + ln m)` over nodes, as an `N × 1` column.
pub fn pool_weights(tape: &mut Tape, scores: Var, log_mass: Var) -> Var {
    let logits = tape.add(scores, log_mass);
    let row = tape.transpose(logits);
    let n = tape.value(row).cols;
    let w = tape.softmax_rows(row, Arc::new(vec![true; n]));
    tape.transpose(w)
}

/// `[median, MAD, mass-weighted mean, mass-weighted std]`.
pub fn voltage_stats(v: &[f64], mass: &[f64]) -> [f64; 4] {
    let median = |xs: &mut Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        }
    };
    let med = median(&mut v.to_vec());
    let mad = median(&mut v.iter().map(|x| (x - med).abs()).collect());
    let total: f64 = mass.iter().sum();
    let mean = v.iter().zip(mass).map(|(x, m)| x * m).sum::<f64>() / total;
    let var = v.iter().zip(mass).map(|(x, m)| m * (x - mean).powi(2)).sum::<f64>() / total;
    [med, mad, mean, var.sqrt()]
}

/// Intermediate tensors of one encoder pass, kept for inspection.
pub struct EncoderTrace {
    pub local: Var,
    pub spec: Var,
    pub voltage: Var,
    pub gates: Var,
    pub fused: Var,
    pub weights: Var,
    pub pooled: Var,
    pub z: Var,
}

/// Encodes `frames` (`T × N`, normalized) into a `T × d_z` latent.
pub fn encode_frames(
    tape: &mut Tape,
    p: &Bound,
    ctx: &MeshContext,
    frames: &[f64],
    n_frames: usize,
    cfg: &ModelConfig,
    ablation: &Ablation,
) -> Result<EncoderTrace> {
    let n = ctx.n;
    if frames.len() != n_frames * n {
        return Err(Error::Shape(format!(
            "{} voltages for {n_frames} frames of {n} nodes",
            frames.len()
        )));
    }
    if cfg.k != ctx.k {
        return Err(Error::Shape(format!("model K = {}, mesh context K = {}", cfg.k, ctx.k)));
    }
    let mut x0 = Mat::zeros(n_frames * n, 4);
    for t in 0..n_frames {
        for i in 0..n {
            let r = t * n + i;
            x0.data[4 * r] = frames[r];
            x0.data[4 * r + 1..4 * r + 4].copy_from_slice(ctx.coords.row(i));
        }
    }
    let v = tape.leaf(Mat::col_vector(frames.to_vec()));
    let x0 = tape.leaf(x0);
    let mut h = linear(tape, p, "enc.lift", x0);
    for b in 0..cfg.diffusion_blocks {
        h = diffusion_block(tape, p, ctx, b, h);
    }
    let local = h;
    let spec = spectral_propagate(tape, ctx, local, p.var("enc.spec.s"), p.var("enc.spec.b"));
    let voltage = voltage_stream(tape, p, v);
    let (fused, gates) = gate_fuse(tape, p, [local, spec, voltage], ablation.gate_mask());
    let weights = quadrature_weights(tape, p, ctx);
    let pooled = tape.block_weighted_sum(weights, fused);

    let mut stats = Mat::zeros(n_frames, 4);
    if !ablation.disable_stats {
        for t in 0..n_frames {
            stats.data[4 * t..4 * t + 4].copy_from_slice(&voltage_stats(&frames[t * n..(t + 1) * n], &ctx.mass));
        }
    }
    let stats = tape.leaf(stats);
    let cat = tape.concat_cols(&[pooled, stats]);
    let z = linear(tape, p, "enc.proj", cat);
    Ok(EncoderTrace {
        local,
        spec,
        voltage,
        gates,
        fused,
        weights,
        pooled,
        z,
    })
}
