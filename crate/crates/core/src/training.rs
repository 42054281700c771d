//! Normalization, losses, schedules, Adam, metrics and the training loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Mat, Tape};
use crate::error::{Error, Result};
use crate::model::{decode_sequence, encode_frames, Ablation, DecodeMode, MeshContext, ModelConfig, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    /// Population mean and standard deviation.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Param("cannot fit normalization on no data".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::Param("constant data: standard deviation is zero".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn invert_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.invert(x)).collect()
    }
}

/// Normalization fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub voltage: ZScore,
    pub ecg: ZScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr0: f64,
    pub halving_period: usize,
    pub huber_delta: f64,
    pub omega0: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr0: 1e-3,
            halving_period: 3,
            huber_delta: 1.0,
            omega0: 0.1,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.halving_period == 0 {
            return Err(Error::Param(
                "epochs, batch size and halving period must be positive".into(),
            ));
        }
        if self.halving_period > self.epochs {
            return Err(Error::Param("halving period exceeds the epoch count".into()));
        }
        if !(self.lr0 > 0.0) || !(self.huber_delta > 0.0) || !(self.omega0 >= 0.0) {
            return Err(Error::Param(
                "lr0 and huber_delta must be positive, omega0 non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} samples, target {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn huber_loss(pred: &[f64], truth: &[f64], delta: f64) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(autodiff::huber_value(pred, truth, delta))
}

/// `(H(pred) − H(true))²` of the normalized one-sided power spectra. The
/// entropy does not depend on the sampling rate, which is only validated.
pub fn spectral_entropy_loss(pred: &[f64], truth: &[f64], fs: f64) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.len() < 8 {
        return Err(Error::Shape(format!(
            "spectral entropy needs ≥ 8 samples, got {}",
            pred.len()
        )));
    }
    if !(fs > 0.0) {
        return Err(Error::Param("sampling rate must be positive".into()));
    }
    let hp = autodiff::spectral_entropy(pred).entropy;
    let ht = autodiff::spectral_entropy(truth).entropy;
    Ok((hp - ht).powi(2))
}

/// `ω(n) = ω₀ · ½ (1 + cos(π n / N))`.
pub fn omega_schedule(n: usize, n_total: usize, omega0: f64) -> Result<f64> {
    if n > n_total || n_total == 0 {
        return Err(Error::Param(format!("epoch {n} outside 0..={n_total}")));
    }
    Ok(omega0 * 0.5 * (1.0 + (std::f64::consts::PI * n as f64 / n_total as f64).cos()))
}

pub fn total_loss(pred: &[f64], truth: &[f64], n: usize, sched: &TrainSchedule) -> Result<f64> {
    let huber = huber_loss(pred, truth, sched.huber_delta)?;
    let omega = omega_schedule(n, sched.epochs, sched.omega0)?;
    if omega == 0.0 {
        return Ok(huber);
    }
    Ok(huber + omega * spectral_entropy_loss(pred, truth, 1.0)?)
}

/// `lr0 · 0.5^⌊e / period⌋`.
pub fn lr_schedule(epoch: usize, sched: &TrainSchedule) -> f64 {
    sched.lr0 * 0.5f64.powi((epoch / sched.halving_period) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Parameters are left untouched when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape("gradient count differs from parameter count".into()));
        }
        for (name, g) in params.names().iter().zip(grads) {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            for (j, (w, &gj)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Coefficient of determination of one trace.
pub fn r2_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::Param("R² undefined for a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// One training or evaluation example in normalized units.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub ctx: Arc<MeshContext>,
    /// `T × N` normalized voltages.
    pub frames: Vec<f64>,
    pub n_frames: usize,
    /// `T` normalized ECG samples.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        ablation.validate()?;
        let params = crate::model::init_params(&cfg, seed)?;
        Ok(Self { cfg, ablation, params })
    }

    /// Free-running prediction in normalized units.
    pub fn predict(&self, sample: &TrainSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let enc = encode_frames(
            &mut tape,
            &p,
            &sample.ctx,
            &sample.frames,
            sample.n_frames,
            &self.cfg,
            &self.ablation,
        )?;
        let dec = decode_sequence(&mut tape, &p, enc.z, &self.cfg, &self.ablation, DecodeMode::FreeRunning)?;
        Ok(tape.value(dec.outputs).data.clone())
    }
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub huber: f64,
    pub spec_entropy: f64,
    pub total: f64,
}

/// Teacher-forced loss at epoch `n` and its gradient for every parameter.
pub fn loss_and_grads(
    model: &Model,
    sample: &TrainSample,
    n: usize,
    sched: &TrainSchedule,
) -> Result<(LossTerms, Vec<Mat>)> {
    if sample.target.len() != sample.n_frames {
        return Err(Error::Shape("target length differs from frame count".into()));
    }
    let omega = omega_schedule(n, sched.epochs, sched.omega0)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let enc = encode_frames(
        &mut tape,
        &p,
        &sample.ctx,
        &sample.frames,
        sample.n_frames,
        &model.cfg,
        &model.ablation,
    )?;
    let dec = decode_sequence(
        &mut tape,
        &p,
        enc.z,
        &model.cfg,
        &model.ablation,
        DecodeMode::TeacherForced(&sample.target),
    )?;
    let target = Arc::new(sample.target.clone());
    let huber = tape.huber(dec.outputs, target, sched.huber_delta);
    let h_true = autodiff::spectral_entropy(&sample.target).entropy;
    let gap = tape.entropy_gap(dec.outputs, h_true);
    let weighted = tape.scale(gap, omega);
    let total = tape.add(huber, weighted);
    let terms = LossTerms {
        huber: tape.value(huber).item(),
        spec_entropy: tape.value(gap).item(),
        total: tape.value(total).item(),
    };
    let mut grads = tape.backward(total);
    let out = p
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Mat::zeros(t.rows, t.cols)))
        .collect();
    Ok((terms, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub huber: f64,
    pub spec_entropy: f64,
    pub omega: f64,
    pub lr: f64,
    pub val_r2: f64,
}

pub const LOG_HEADER: &str = "epoch,huber,spec_entropy,omega,lr,val_r2";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.epoch, r.huber, r.spec_entropy, r.omega, r.lr, r.val_r2
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation R².
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_r2: f64,
    pub log: Vec<LogRow>,
    /// Per-epoch diagnostics (skipped batches, aborts).
    pub diagnostics: Vec<String>,
}

/// Mean per-trace R² on denormalized free-running predictions; constant
/// targets are skipped.
pub fn mean_r2(model: &Model, samples: &[TrainSample], ecg: &ZScore) -> Result<f64> {
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = ecg.invert_all(&model.predict(s)?);
        let truth = ecg.invert_all(&s.target);
        if let Ok(r2) = r2_metric(&pred, &truth) {
            scores.push(r2);
        }
    }
    if scores.is_empty() {
        return Err(Error::Param("no scorable traces".into()));
    }
    Ok(mean_std(&scores).0)
}

/// Trains `model` in place and returns the best-validation parameters.
pub fn train_loop(
    model: &mut Model,
    train: &[TrainSample],
    val: &[TrainSample],
    ecg: &ZScore,
    sched: &TrainSchedule,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    sched.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Param("training and validation splits must be non-empty".into()));
    }
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(ParamStore, usize, f64)> = None;
    let mut log = Vec::with_capacity(sched.epochs);
    let mut diagnostics = Vec::new();
    'epochs: for epoch in 0..sched.epochs {
        let lr = lr_schedule(epoch, sched);
        let omega = omega_schedule(epoch, sched.epochs, sched.omega0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut huber_sum, mut se_sum, mut count) = (0.0, 0.0, 0usize);
        for batch in order.chunks(sched.batch_size) {
            let mut idx = batch.to_vec();
            idx.sort_unstable();
            let mut acc: Vec<Mat> = model
                .params
                .tensors()
                .iter()
                .map(|t| Mat::zeros(t.rows, t.cols))
                .collect();
            for &i in &idx {
                let (terms, grads) = loss_and_grads(model, &train[i], epoch, sched)?;
                if !terms.total.is_finite() {
                    diagnostics.push(format!(
                        "epoch {epoch}: non-finite loss on sample {}; training stopped",
                        train[i].id
                    ));
                    break 'epochs;
                }
                huber_sum += terms.huber;
                se_sum += terms.spec_entropy;
                count += 1;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / idx.len() as f64;
            acc.iter_mut().for_each(|a| a.data.iter_mut().for_each(|x| *x *= inv));
            if let Err(e) = adam.step(&mut model.params, &acc, lr) {
                diagnostics.push(format!("epoch {epoch}: {e}; remaining batches skipped"));
                break;
            }
        }
        let val_r2 = mean_r2(model, val, ecg)?;
        let row = LogRow {
            epoch,
            huber: huber_sum / count.max(1) as f64,
            spec_entropy: se_sum / count.max(1) as f64,
            omega,
            lr,
            val_r2,
        };
        on_epoch(&row);
        log.push(row);
        if best.as_ref().map_or(true, |b| val_r2 > b.2) {
            best = Some((model.params.clone(), epoch, val_r2));
        }
    }
    let (best, best_epoch, best_val_r2) =
        best.ok_or_else(|| Error::NonFinite("training diverged in the first epoch".into()))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_r2,
        log,
        diagnostics,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
    pub abs_error: f64,
    /// Rounding error of central differences at this loss magnitude.
    pub noise_floor: f64,
    pub skipped: bool,
}

impl GroupCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.skipped || self.rel_error <= tolerance || self.abs_error <= self.noise_floor
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| !g.passed(self.tolerance)).collect()
    }

    pub fn skipped(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.skipped)
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Central differences of the teacher-forced total loss against the tape
/// gradient, per parameter tensor.
pub fn grad_check(
    model: &Model,
    sample: &TrainSample,
    n: usize,
    sched: &TrainSchedule,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (terms, analytic) = loss_and_grads(model, sample, n, sched)?;
    let per_entry = 4.0 * f64::EPSILON * terms.total.abs().max(1.0) / step;
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(model.params.len());
    for (k, name) in model.params.names().iter().enumerate() {
        let an = &analytic[k].data;
        let mut numeric = vec![0.0; an.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params.tensors()[k].data[j];
            probe.params.tensors_mut()[k].data[j] = orig + step;
            let plus = loss_and_grads(&probe, sample, n, sched)?.0.total;
            probe.params.tensors_mut()[k].data[j] = orig - step;
            let minus = loss_and_grads(&probe, sample, n, sched)?.0.total;
            probe.params.tensors_mut()[k].data[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = an.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let (a_norm, n_norm) = (norm(an), norm(&numeric));
        let skipped = a_norm < 1e-12 && n_norm < 1e-12;
        let abs_error = norm(&diff);
        groups.push(GroupCheck {
            name: name.clone(),
            analytic_norm: a_norm,
            numeric_norm: n_norm,
            rel_error: if skipped { 0.0 } else { abs_error / a_norm.max(n_norm) },
            abs_error,
            noise_floor: per_entry * (an.len() as f64).sqrt(),
            skipped,
        });
    }
    Ok(GradCheckReport { groups, tolerance })
}
