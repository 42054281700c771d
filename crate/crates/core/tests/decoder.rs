use atrial_ecg::autodiff::{Mat, Tape, Var};
use atrial_ecg::model::{
    attention, attention_keys, decode_sequence, decode_step, init_params, latent_difference, recurrent_step,
    time_embedding, time_embeddings, Ablation, DecodeMode, DecoderInputs, DecoderState, ModelConfig, ParamStore,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_z: 4,
        d_e: 4,
        d_a: 3,
        d_hid: 5,
        d_head: 3,
        ..ModelConfig::default()
    }
}

fn random_latent(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

#[test]
fn embedding_hand_values() {
    let e = time_embedding(1, 4).unwrap();
    let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in e.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    let probe = time_embedding(0, 6).unwrap();
    assert_eq!(probe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(time_embedding(3, 5).is_err());
    let all = time_embeddings(3, 4).unwrap();
    assert_eq!(all.row(2), time_embedding(3, 4).unwrap().as_slice());
}

#[test]
fn latent_difference_conventions() {
    let z = Mat::from_vec(3, 2, vec![1.0, 2.0, 4.0, 2.0, 0.0, 5.0]);
    assert_eq!(latent_difference(&z).data, vec![0.0, 0.0, 3.0, 0.0, -4.0, 3.0]);
    let flat = Mat::from_vec(4, 2, vec![0.7; 8]);
    assert!(latent_difference(&flat).data.iter().all(|&v| v == 0.0));
}

fn attend(params: &ParamStore, z: &Mat, hidden: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cfg = tiny();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let e = tape.leaf(time_embeddings(z.rows, cfg.d_e).unwrap());
    let keys = attention_keys(&mut tape, &p, zv, e);
    let h = tape.leaf(Mat::row_vector(hidden.to_vec()));
    let (a, c) = attention(&mut tape, &p, h, keys, zv);
    (tape.value(a).data.clone(), tape.value(c).data.clone())
}

#[test]
fn zero_score_vector_gives_uniform_attention() {
    let mut params = init_params(&tiny(), 2).unwrap();
    params.get_mut("dec.att.v").data.iter_mut().for_each(|v| *v = 0.0);
    let z = random_latent(7, 4, 1);
    let (a, c) = attend(&params, &z, &[0.3, -0.2, 0.1, 0.9, -0.5]);
    assert!(a.iter().all(|w| (w - 1.0 / 7.0).abs() < 1e-15));
    for col in 0..4 {
        let mean = (0..7).map(|r| z.get(r, col)).sum::<f64>() / 7.0;
        assert!((c[col] - mean).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn attention_is_a_convex_combination(seed in 0u64..1000, rows in 1usize..9) {
        let params = init_params(&tiny(), seed).unwrap();
        let z = random_latent(rows, 4, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let hidden: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, c) = attend(&params, &z, &hidden);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&w| w >= 0.0));
        for col in 0..4 {
            let column = (0..rows).map(|r| z.get(r, col));
            let lo = column.clone().fold(f64::INFINITY, f64::min);
            let hi = column.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c[col] >= lo - 1e-12 && c[col] <= hi + 1e-12);
        }
    }
}

fn lstm_params(forget_bias: f64) -> ParamStore {
    let mut params = init_params(&tiny(), 0).unwrap();
    for name in ["dec.lstm.wx", "dec.lstm.wh", "dec.lstm.b"] {
        params.get_mut(name).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let d = tiny().d_hid;
    params.get_mut("dec.lstm.b").data[d..2 * d]
        .iter_mut()
        .for_each(|v| *v = forget_bias);
    params
}

fn run_lstm(params: &ParamStore, cell0: Vec<f64>, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let cfg = tiny();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let mut state = DecoderState::initial(&mut tape, cfg.d_hid);
    state.cell = tape.leaf(Mat::row_vector(cell0));
    let width = 3 * cfg.d_z + cfg.d_e;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..steps {
        let x = tape.leaf(Mat::row_vector((0..width).map(|_| rng.gen_range(-3.0..3.0)).collect()));
        state = recurrent_step(&mut tape, &p, state, x);
    }
    (
        tape.value(state.hidden).data.clone(),
        tape.value(state.cell).data.clone(),
    )
}

#[test]
fn zero_parameters_keep_the_hidden_state_at_zero() {
    let (h, c) = run_lstm(&lstm_params(0.0), vec![0.0; 5], 6);
    assert!(h.iter().chain(&c).all(|&v| v == 0.0));
}

#[test]
fn saturated_forget_gate_preserves_the_cell() {
    let cell0 = vec![0.5, -1.0, 2.0, 0.0, 0.25];
    let (_, c) = run_lstm(&lstm_params(40.0), cell0.clone(), 5);
    for (a, b) in c.iter().zip(&cell0) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn decode(params: &ParamStore, z: &Mat, ablation: &Ablation, mode: DecodeMode) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let trace = decode_sequence(&mut tape, &p, zv, &tiny(), ablation, mode).unwrap();
    let att = trace.attention.iter().map(|&a| tape.value(a).data.clone()).collect();
    (tape.value(trace.outputs).data.clone(), att)
}

#[test]
fn first_step_agrees_across_modes_and_shapes_hold() {
    let params = init_params(&tiny(), 4).unwrap();
    let z = random_latent(6, 4, 8);
    let truth = [0.5, -1.0, 2.0, 0.3, 0.0, 1.0];
    let (tf, att) = decode(&params, &z, &Ablation::default(), DecodeMode::TeacherForced(&truth));
    let (fr, _) = decode(&params, &z, &Ablation::default(), DecodeMode::FreeRunning);
    assert_eq!(tf.len(), 6);
    assert_eq!(tf[0], fr[0]);
    assert_ne!(tf[1], fr[1]);
    assert_eq!(att.len(), 6);
    for a in &att {
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let (again, _) = decode(&params, &z, &Ablation::default(), DecodeMode::TeacherForced(&truth));
    assert_eq!(tf, again);

    let single = Mat::from_vec(1, 4, z.row(0).to_vec());
    assert_eq!(
        decode(&params, &single, &Ablation::default(), DecodeMode::FreeRunning)
            .0
            .len(),
        1
    );

    let no_att = Ablation {
        disable_attention: true,
        ..Ablation::default()
    };
    let (out, att) = decode(&params, &z, &no_att, DecodeMode::FreeRunning);
    assert_eq!(out.len(), 6);
    assert!(att.is_empty());
}

#[test]
fn teacher_signal_length_is_checked() {
    let params = init_params(&tiny(), 4).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let z = tape.leaf(random_latent(4, 4, 1));
    let short = [0.0; 3];
    assert!(decode_sequence(
        &mut tape,
        &p,
        z,
        &tiny(),
        &Ablation::default(),
        DecodeMode::TeacherForced(&short)
    )
    .is_err());
    let inputs = DecoderInputs::new(&mut tape, &p, z, &tiny(), &Ablation::default()).unwrap();
    let mut state = DecoderState::initial(&mut tape, tiny().d_hid);
    state.t = 5;
    assert!(decode_step(&mut tape, &p, &inputs, state).is_err());
}

/// Teacher-forced squared output plus an entropy-gap term, with gradients
/// for every decoder tensor and for the latent.
fn objective(params: &ParamStore, z: &Mat, truth: &[f64], grads: bool) -> (f64, Option<Vec<Mat>>) {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let trace = decode_sequence(
        &mut tape,
        &p,
        zv,
        &tiny(),
        &Ablation::default(),
        DecodeMode::TeacherForced(truth),
    )
    .unwrap();
    let sq = tape.mul(trace.outputs, trace.outputs);
    let fit = tape.sum(sq);
    let gap = tape.entropy_gap(trace.outputs, 1.0);
    let total = tape.add(fit, gap);
    let value = tape.value(total).item();
    let grads = grads.then(|| {
        let mut g = tape.backward(total);
        let mut vars: Vec<(Var, (usize, usize))> = p
            .vars()
            .iter()
            .copied()
            .zip(params.tensors().iter().map(Mat::shape))
            .collect();
        vars.push((zv, z.shape()));
        vars.into_iter()
            .map(|(v, (r, c))| g.take(v).unwrap_or_else(|| Mat::zeros(r, c)))
            .collect()
    });
    (value, grads)
}

/// Tensor `k` is a parameter, or the latent when `k` is past the last one.
fn perturb(params: &mut ParamStore, z: &mut Mat, k: usize, j: usize, delta: f64) {
    if k < params.len() {
        params.tensors_mut()[k].data[j] += delta;
    } else {
        z.data[j] += delta;
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let mut params = init_params(&tiny(), 6).unwrap();
    let mut z = random_latent(6, 4, 3);
    let truth = [0.4, -0.8, 1.2, 0.1, -0.3, 0.7];
    let analytic = objective(&params, &z, &truth, true).1.unwrap();
    let step = 1e-5;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut names: Vec<String> = params.names().to_vec();
    names.push("latent".into());
    for (k, name) in names.iter().enumerate() {
        if !(name.starts_with("dec.") || name == "latent") {
            continue;
        }
        let len = analytic[k].data.len();
        let mut numeric = Vec::with_capacity(len);
        for j in 0..len {
            perturb(&mut params, &mut z, k, j, step);
            let plus = objective(&params, &z, &truth, false).0;
            perturb(&mut params, &mut z, k, j, -2.0 * step);
            let minus = objective(&params, &z, &truth, false).0;
            perturb(&mut params, &mut z, k, j, step);
            numeric.push((plus - minus) / (2.0 * step));
        }
        let a = &analytic[k].data;
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        assert!(scale > 1e-12, "{name}: no gradient signal");
        assert!(
            norm(&diff) / scale < 1e-4,
            "{name}: relative error {:e}",
            norm(&diff) / scale
        );
    }
}
