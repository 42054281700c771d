use std::sync::Arc;

use atrial_ecg::activation::{activation_times, gen_voltage_sequence, ApTemplate};
use atrial_ecg::autodiff::{Mat, Tape};
use atrial_ecg::mesh::{build_operators, compute_uac, gen_synthetic_atrium, planar_grid, AtriumParams, SurfaceMesh};
use atrial_ecg::model::{
    diffuse, encode_frames, gate_combine, init_params, pool_weights, spectral_propagate, uac_fourier, voltage_stats,
    Ablation, MeshContext, ModelConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn atrium_context(seed: u64, k: usize) -> (SurfaceMesh, MeshContext) {
    let mesh = gen_synthetic_atrium(&AtriumParams::default(), seed).unwrap();
    let ops = build_operators(&mesh, k).unwrap();
    let ctx = MeshContext::new(&mesh, &ops, k, 4).unwrap();
    (mesh, ctx)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_z: 8,
        d_h: 8,
        d_e: 8,
        d_a: 8,
        d_hid: 8,
        d_head: 8,
        k: 32,
        ..ModelConfig::default()
    }
}

fn propagate(ctx: &MeshContext, h: Mat, s: f64, b: f64) -> Mat {
    let mut tape = Tape::new();
    let hv = tape.leaf(h);
    let sv = tape.leaf(Mat::scalar(s));
    let bv = tape.leaf(Mat::scalar(b));
    let out = spectral_propagate(&mut tape, ctx, hv, sv, bv);
    tape.value(out).clone()
}

#[test]
fn eigenfunctions_are_scaled_by_the_response() {
    let (_, ctx) = atrium_context(2, 64);
    let (s, b) = (0.1, 1.0);
    for j in 0..64 {
        let psi: Vec<f64> = (0..ctx.n).map(|i| ctx.psi.get(i, j)).collect();
        let out = propagate(&ctx, Mat::col_vector(psi.clone()), s, b);
        let g = (s * ctx.neg_lambda.data[j]).exp() + b;
        let err = out
            .data
            .iter()
            .zip(&psi)
            .map(|(o, p)| (o - g * p).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "eigenfunction {j}: error {err:e}");
    }
}

#[test]
fn constant_input_is_doubled() {
    let (_, ctx) = atrium_context(5, 64);
    let out = propagate(&ctx, Mat::col_vector(vec![3.0; ctx.n]), 0.1, 1.0);
    for v in &out.data {
        assert!((v - 6.0).abs() < 1e-8, "{v}");
    }
}

#[test]
fn long_diffusion_reaches_the_mass_weighted_mean() {
    let (mesh, ctx) = atrium_context(1, 32);
    let h: Vec<f64> = mesh.vertices.iter().map(|p| p[0] + 0.5 * p[2]).collect();
    let mean = h.iter().zip(&ctx.mass).map(|(x, m)| x * m).sum::<f64>() / ctx.mass.iter().sum::<f64>();
    let out = diffuse(&ctx, &Mat::col_vector(h.clone()), &[1e6]);
    for v in &out.data {
        assert!((v - mean).abs() < 1e-8 * mean.abs().max(1.0), "{v} vs {mean}");
    }
    let unchanged = diffuse(&ctx, &Mat::col_vector(vec![1.5; ctx.n]), &[0.3]);
    assert!(unchanged.data.iter().all(|v| (v - 1.5).abs() < 1e-10));
}

fn gates_for(logits: [f64; 3], mask: [bool; 3], streams: [[f64; 2]; 3]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let l = tape.leaf(Mat::row_vector(logits.to_vec()));
    let s = streams.map(|v| tape.leaf(Mat::row_vector(v.to_vec())));
    let (fused, gates) = gate_combine(&mut tape, l, s, mask);
    (tape.value(fused).data.clone(), tape.value(gates).data.clone())
}

#[test]
fn gate_hand_values() {
    let streams = [[1.0, 2.0], [4.0, -1.0], [7.0, 0.0]];
    let (fused, gates) = gates_for([0.3, 0.3, 0.3], [true; 3], streams);
    for g in &gates {
        assert!((g - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((fused[0] - 4.0).abs() < 1e-12 && (fused[1] - 1.0 / 3.0).abs() < 1e-12);

    let (fused, gates) = gates_for([40.0, 0.0, 0.0], [true; 3], streams);
    assert!((gates[0] - 1.0).abs() < 1e-15);
    assert!((fused[0] - 1.0).abs() < 1e-15 && (fused[1] - 2.0).abs() < 1e-15);

    let (fused, gates) = gates_for([5.0, 0.0, 0.0], [false, true, true], streams);
    assert_eq!(gates[0], 0.0);
    assert!((gates[1] - 0.5).abs() < 1e-15 && (gates[2] - 0.5).abs() < 1e-15);
    assert!((fused[0] - 5.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn fused_features_are_convex_combinations(
        logits in prop::array::uniform3(-10.0f64..10.0),
        streams in prop::array::uniform3(prop::array::uniform2(-5.0f64..5.0)),
        off in 0usize..4,
    ) {
        let mut mask = [true; 3];
        if off < 3 {
            mask[off] = false;
        }
        let (fused, gates) = gates_for(logits, mask, streams);
        prop_assert!((gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..2 {
            let active = (0..3).filter(|&j| mask[j]).map(|j| streams[j][c]);
            let lo = active.clone().fold(f64::INFINITY, f64::min);
            let hi = active.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fused[c] >= lo - 1e-12 && fused[c] <= hi + 1e-12);
        }
    }
}

#[test]
fn uac_fourier_hand_values() {
    let g = uac_fourier(&[0.25], &[0.5], 2).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let expected = [h, h, 1.0, 0.0, 1.0, 0.0, 0.0, -1.0];
    for (a, b) in g.data.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    assert!(uac_fourier(&[0.1], &[], 2).is_err());
}

fn pooled(scores: Vec<f64>, mass: &[f64], h: Mat) -> Vec<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(Mat::col_vector(scores));
    let lm = tape.leaf(Mat::col_vector(mass.iter().map(|m| m.ln()).collect()));
    let w = pool_weights(&mut tape, s, lm);
    let h = tape.leaf(h);
    let out = tape.block_weighted_sum(w, h);
    tape.value(out).data.clone()
}

#[test]
fn pooling_is_invariant_to_splitting_a_node() {
    let mass = [1.0, 2.0, 0.5, 3.0];
    let scores = vec![0.2, -0.4, 1.1, 0.0];
    let h = Mat::from_vec(4, 2, vec![1.0, -1.0, 2.0, 0.5, -3.0, 4.0, 0.25, 2.0]);
    let base = pooled(scores.clone(), &mass, h.clone());

    // node 1 becomes two nodes with half its mass each
    let split_mass = [1.0, 1.0, 1.0, 0.5, 3.0];
    let mut split_scores = scores.clone();
    split_scores.insert(1, scores[1]);
    let mut data = h.data.clone();
    data.splice(2..2, [2.0, 0.5]);
    let split = pooled(split_scores, &split_mass, Mat::from_vec(5, 2, data));
    for (a, b) in base.iter().zip(&split) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    let uniform = pooled(vec![0.0; 4], &mass, h);
    let expected: f64 = (0..4).map(|i| mass[i] * [1.0, 2.0, -3.0, 0.25][i]).sum::<f64>() / 6.5;
    assert!((uniform[0] - expected).abs() < 1e-12);
}

#[test]
fn voltage_stats_hand_values() {
    let s = voltage_stats(&[0.0, 10.0], &[1.0, 3.0]);
    assert_eq!(s[0], 5.0);
    assert_eq!(s[1], 5.0);
    assert!((s[2] - 7.5).abs() < 1e-12);
    assert!((s[3] - 18.75f64.sqrt()).abs() < 1e-12);
    let odd = voltage_stats(&[3.0, -1.0, 8.0], &[1.0; 3]);
    assert_eq!((odd[0], odd[1]), (3.0, 4.0));
}

fn encode(ctx: &MeshContext, frames: &[f64], n_frames: usize, cfg: &ModelConfig, seed: u64) -> Mat {
    let params = init_params(cfg, seed).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let enc = encode_frames(&mut tape, &p, ctx, frames, n_frames, cfg, &Ablation::default()).unwrap();
    tape.value(enc.z).clone()
}

#[test]
fn latent_is_invariant_to_node_relabeling() {
    let cfg = small_config();
    for mesh_seed in 0..3 {
        let mesh = gen_synthetic_atrium(&AtriumParams::default(), mesh_seed).unwrap();
        let n = mesh.n_vertices();
        let act = activation_times(&mesh, 7, 0.7, 4.0).unwrap();
        let (seq, _) = gen_voltage_sequence(&act, &ApTemplate::default(), 25.0, 150.0).unwrap();
        let frames: Vec<f64> = seq.frames.iter().map(|v| (v + 40.0) / 45.0).collect();
        let ops = build_operators(&mesh, cfg.k).unwrap();
        let z = encode(
            &MeshContext::new(&mesh, &ops, cfg.k, cfg.l_f).unwrap(),
            &frames,
            seq.n_frames,
            &cfg,
            9,
        );
        let scale = z.data.iter().map(|v| v * v).sum::<f64>().sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(100 + mesh_seed);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let pmesh = mesh.permuted(&perm);
            let mut pframes = vec![0.0; frames.len()];
            for t in 0..seq.n_frames {
                for (old, &new) in perm.iter().enumerate() {
                    pframes[t * n + new] = frames[t * n + old];
                }
            }
            let pops = build_operators(&pmesh, cfg.k).unwrap();
            let pctx = MeshContext::new(&pmesh, &pops, cfg.k, cfg.l_f).unwrap();
            let pz = encode(&pctx, &pframes, seq.n_frames, &cfg, 9);
            let diff = z
                .data
                .iter()
                .zip(&pz.data)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                diff <= 1e-5 * scale,
                "mesh {mesh_seed}: relative change {:e}",
                diff / scale
            );
        }
    }
}

#[test]
fn encoder_parameter_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        d_z: 3,
        d_h: 3,
        d_e: 2,
        d_a: 2,
        d_hid: 2,
        d_head: 2,
        gate_hidden: 3,
        score_hidden: 3,
        k: 8,
        l_f: 2,
        ..ModelConfig::default()
    };
    let mut mesh = planar_grid(4, 3, 4.0, 3.0, 0.3, 4);
    compute_uac(&mut mesh).unwrap();
    let ops = build_operators(&mesh, cfg.k).unwrap();
    let ctx = Arc::new(MeshContext::new(&mesh, &ops, cfg.k, cfg.l_f).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n_frames = 3;
    let frames: Vec<f64> = (0..n_frames * ctx.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut params = init_params(&cfg, 3).unwrap();

    let objective = |params: &atrial_ecg::model::ParamStore, want_grads: bool| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let enc = encode_frames(&mut tape, &p, &ctx, &frames, n_frames, &cfg, &Ablation::default()).unwrap();
        let sq = tape.mul(enc.z, enc.z);
        let loss = tape.sum(sq);
        let value = tape.value(loss).item();
        let grads = want_grads.then(|| {
            let mut g = tape.backward(loss);
            p.vars()
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| g.take(v).unwrap_or_else(|| Mat::zeros(t.rows, t.cols)))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic = objective(&params, true).1.unwrap();
    let step = 1e-5;
    let names = params.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        if !name.starts_with("enc.") {
            continue;
        }
        let mut numeric = Vec::new();
        for j in 0..params.tensors()[k].data.len() {
            let orig = params.tensors()[k].data[j];
            params.tensors_mut()[k].data[j] = orig + step;
            let plus = objective(&params, false).0;
            params.tensors_mut()[k].data[j] = orig - step;
            let minus = objective(&params, false).0;
            params.tensors_mut()[k].data[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let a = &analytic[k].data;
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        if name == "enc.score1.b" {
            // a uniform shift of every pooling score leaves the softmax unchanged
            assert!(scale < 1e-12, "{name}: {scale:e}");
            continue;
        }
        assert!(scale > 1e-12, "{name}: no gradient signal");
        assert!(
            norm(&diff) / scale < 1e-4,
            "{name}: relative error {:e}",
            norm(&diff) / scale
        );
    }
}
