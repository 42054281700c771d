//! Autoregressive decoder: additive attention over the latent sequence, an
//! LSTM core fed with context, latent, latent difference and time embedding,
//! and a small head that also sees the previous ECG sample.

use std::sync::Arc;

use super::{linear, Ablation, Bound, ModelConfig};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// `e[2i] = sin(t / 10000^{2i/d_e})`, `e[2i+1] = cos(…)`.
pub fn time_embedding(t: usize, d_e: usize) -> Result<Vec<f64>> {
    if d_e % 2 != 0 {
        return Err(Error::Param(format!("embedding width {d_e} must be even")));
    }
    Ok((0..d_e / 2)
        .flat_map(|i| {
            let arg = t as f64 / 10000f64.powf(2.0 * i as f64 / d_e as f64);
            [arg.sin(), arg.cos()]
        })
        .collect())
}

/// Embeddings of steps `1..=T` as rows.
pub fn time_embeddings(n_steps: usize, d_e: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(n_steps * d_e);
    for t in 1..=n_steps {
        data.extend(time_embedding(t, d_e)?);
    }
    Ok(Mat::from_vec(n_steps, d_e, data))
}

/// Row `t` is `z_t − z_{t−1}`; the first row is zero.
pub fn latent_difference(z: &Mat) -> Mat {
    let mut out = Mat::zeros(z.rows, z.cols);
    for t in 1..z.rows {
        for c in 0..z.cols {
            out.data[t * z.cols + c] = z.get(t, c) - z.get(t - 1, c);
        }
    }
    out
}

/// `T × T` backward-difference operator matching [`latent_difference`].
fn difference_operator(n: usize) -> Mat {
    let mut d = Mat::zeros(n, n);
    for t in 1..n {
        d.data[t * n + t] = 1.0;
        d.data[t * n + t - 1] = -1.0;
    }
    d
}

#[derive(Copy, Clone, Debug)]
pub struct DecoderState {
    /// `1 × d_hid`
    pub hidden: Var,
    /// `1 × d_hid`
    pub cell: Var,
    /// `1 × 1`, previous output in normalized units.
    pub prev: Var,
    /// Index of the next step, starting at 1.
    pub t: usize,
}

impl DecoderState {
    pub fn initial(tape: &mut Tape, d_hid: usize) -> Self {
        Self {
            hidden: tape.leaf(Mat::zeros(1, d_hid)),
            cell: tape.leaf(Mat::zeros(1, d_hid)),
            prev: tape.leaf(Mat::zeros(1, 1)),
            t: 1,
        }
    }
}

/// Projected keys `U_a [z_τ ∥ e_τ]` for every τ; `T × d_a`.
pub fn attention_keys(tape: &mut Tape, p: &Bound, z: Var, e: Var) -> Var {
    let ze = tape.concat_cols(&[z, e]);
    tape.matmul(ze, p.var("dec.att.u"))
}

/// Returns `(a_t, c_t)` as `1 × T` and `1 × d_z`.
pub fn attention(tape: &mut Tape, p: &Bound, hidden: Var, keys: Var, z: Var) -> (Var, Var) {
    let wh = tape.matmul(hidden, p.var("dec.att.w"));
    let pre = tape.add(keys, wh);
    let act = tape.tanh(pre);
    let scores = tape.matmul(act, p.var("dec.att.v"));
    let row = tape.transpose(scores);
    let n = tape.value(row).cols;
    let a = tape.softmax_rows(row, Arc::new(vec![true; n]));
    let c = tape.matmul(a, z);
    (a, c)
}

/// Four-gate LSTM cell; gate blocks are packed as (input, forget, candidate, output).
pub fn recurrent_step(tape: &mut Tape, p: &Bound, state: DecoderState, x: Var) -> DecoderState {
    let d = tape.value(state.hidden).cols;
    let xw = tape.matmul(x, p.var("dec.lstm.wx"));
    let hw = tape.matmul(state.hidden, p.var("dec.lstm.wh"));
    let pre = tape.add(xw, hw);
    let pre = tape.add(pre, p.var("dec.lstm.b"));
    let block = |tape: &mut Tape, k: usize| tape.slice_cols(pre, k * d, d);
    let i = block(tape, 0);
    let i = tape.sigmoid(i);
    let f = block(tape, 1);
    let f = tape.sigmoid(f);
    let g = block(tape, 2);
    let g = tape.tanh(g);
    let o = block(tape, 3);
    let o = tape.sigmoid(o);
    let kept = tape.mul(f, state.cell);
    let written = tape.mul(i, g);
    let cell = tape.add(kept, written);
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(o, squashed);
    DecoderState {
        hidden,
        cell,
        prev: state.prev,
        t: state.t + 1,
    }
}

/// Head on `[hidden ∥ prev]`: two tanh layers and a linear readout.
pub fn output_head(tape: &mut Tape, p: &Bound, hidden: Var, prev: Var) -> Var {
    let x = tape.concat_cols(&[hidden, prev]);
    let a = linear(tape, p, "dec.head0", x);
    let a = tape.tanh(a);
    let b = linear(tape, p, "dec.head1", a);
    let b = tape.tanh(b);
    linear(tape, p, "dec.head2", b)
}

#[derive(Copy, Clone, Debug)]
pub enum DecodeMode<'a> {
    /// Previous output is the ground truth (normalized units).
    TeacherForced(&'a [f64]),
    FreeRunning,
}

/// Tensors needed by one decoding step, shared across steps.
pub struct DecoderInputs {
    pub z: Var,
    pub dz: Var,
    pub e: Var,
    pub keys: Option<Var>,
    pub n_steps: usize,
}

impl DecoderInputs {
    pub fn new(tape: &mut Tape, p: &Bound, z: Var, cfg: &ModelConfig, ablation: &Ablation) -> Result<Self> {
        let (n_steps, d_z) = tape.value(z).shape();
        if d_z != cfg.d_z || n_steps == 0 {
            return Err(Error::Shape(format!(
                "latent is {n_steps}x{d_z}, model expects d_z = {}",
                cfg.d_z
            )));
        }
        let e = tape.leaf(time_embeddings(n_steps, cfg.d_e)?);
        let dz = tape.block_left(Arc::new(difference_operator(n_steps)), z);
        let keys = (!ablation.disable_attention).then(|| attention_keys(tape, p, z, e));
        Ok(Self {
            z,
            dz,
            e,
            keys,
            n_steps,
        })
    }
}

/// One step: attention on the pre-update hidden state, recurrence, head.
/// Returns the prediction `ŷ_t` (`1 × 1`), the attention row if enabled, and
/// the next state (whose `prev` is not yet set).
pub fn decode_step(
    tape: &mut Tape,
    p: &Bound,
    inputs: &DecoderInputs,
    state: DecoderState,
) -> Result<(Var, Option<Var>, DecoderState)> {
    let t = state.t;
    if t == 0 || t > inputs.n_steps {
        return Err(Error::Param(format!("step {t} outside 1..={}", inputs.n_steps)));
    }
    let (a, c) = match inputs.keys {
        Some(keys) => {
            let (a, c) = attention(tape, p, state.hidden, keys, inputs.z);
            (Some(a), c)
        }
        None => {
            let d_z = tape.value(inputs.z).cols;
            (None, tape.leaf(Mat::zeros(1, d_z)))
        }
    };
    let zt = tape.slice_rows(inputs.z, t - 1, 1);
    let dzt = tape.slice_rows(inputs.dz, t - 1, 1);
    let et = tape.slice_rows(inputs.e, t - 1, 1);
    let x = tape.concat_cols(&[c, zt, dzt, et]);
    let next = recurrent_step(tape, p, state, x);
    let y = output_head(tape, p, next.hidden, state.prev);
    Ok((y, a, next))
}

pub struct DecodeTrace {
    /// `T × 1` normalized predictions.
    pub outputs: Var,
    pub attention: Vec<Var>,
}

pub fn decode_sequence(
    tape: &mut Tape,
    p: &Bound,
    z: Var,
    cfg: &ModelConfig,
    ablation: &Ablation,
    mode: DecodeMode,
) -> Result<DecodeTrace> {
    let inputs = DecoderInputs::new(tape, p, z, cfg, ablation)?;
    if let DecodeMode::TeacherForced(y) = mode {
        if y.len() != inputs.n_steps {
            return Err(Error::Shape(format!(
                "teacher signal has {} samples for {} steps",
                y.len(),
                inputs.n_steps
            )));
        }
    }
    let mut state = DecoderState::initial(tape, cfg.d_hid);
    let mut outputs = Vec::with_capacity(inputs.n_steps);
    let mut attention = Vec::new();
    for t in 1..=inputs.n_steps {
        let (y, a, mut next) = decode_step(tape, p, &inputs, state)?;
        next.prev = match mode {
            DecodeMode::TeacherForced(truth) => tape.leaf(Mat::scalar(truth[t - 1])),
            DecodeMode::FreeRunning => y,
        };
        outputs.push(y);
        attention.extend(a);
        state = next;
    }
    let outputs = tape.concat_rows(&outputs);
    Ok(DecodeTrace { outputs, attention })
}
