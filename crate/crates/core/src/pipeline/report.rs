//! Metric reports, ablation tables and trace plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{mae_metric, mean_std, r2_metric, Model, TrainSample, ZScore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub id: String,
    /// `None` for a constant ground-truth trace.
    pub r2: Option<f64>,
    /// mV
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub traces: Vec<TraceMetrics>,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let scored = self.traces.iter().filter(|t| t.r2.is_some()).count();
        format!(
            "{}: R2 {:.4} ± {:.4} ({scored} of {} traces), MAE {:.3e} ± {:.3e} mV",
            self.split,
            self.r2_mean,
            self.r2_std,
            self.traces.len(),
            self.mae_mean,
            self.mae_std
        )
    }
}

/// Denormalized free-running prediction and ground truth, both in mV.
pub fn predict_mv(model: &Model, sample: &TrainSample, ecg: &ZScore) -> Result<(Vec<f64>, Vec<f64>)> {
    let pred = ecg.invert_all(&model.predict(sample)?);
    Ok((pred, ecg.invert_all(&sample.target)))
}

pub fn evaluate(model: &Model, samples: &[TrainSample], ecg: &ZScore, split: &str) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Param(format!("split `{split}` is empty")));
    }
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        let (pred, truth) = predict_mv(model, s, ecg)?;
        traces.push(TraceMetrics {
            id: s.id.clone(),
            r2: r2_metric(&pred, &truth).ok(),
            mae: mae_metric(&pred, &truth)?,
        });
    }
    let r2: Vec<f64> = traces.iter().filter_map(|t| t.r2).collect();
    let mae: Vec<f64> = traces.iter().map(|t| t.mae).collect();
    let (r2_mean, r2_std) = if r2.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_std(&r2)
    };
    let (mae_mean, mae_std) = mean_std(&mae);
    Ok(EvalReport {
        split: split.to_string(),
        traces,
        r2_mean,
        r2_std,
        mae_mean,
        mae_std,
    })
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("id,r2,mae_mV\n");
    for t in &report.traces {
        let r2 = t.r2.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{r2},{}", t.id, t.mae);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub best_val_r2: f64,
    /// R² change relative to the first (baseline) row.
    pub delta_r2: f64,
    pub delta_mae: f64,
    pub checkpoint_sha256: String,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,r2_mean,r2_std,mae_mean_mV,mae_std_mV,delta_r2,delta_mae_mV,best_epoch,best_val_r2,checkpoint_sha256\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.report.r2_mean,
            r.report.r2_std,
            r.report.mae_mean,
            r.report.mae_std,
            r.delta_r2,
            r.delta_mae,
            r.best_epoch,
            r.best_val_r2,
            r.checkpoint_sha256
        );
    }
    out
}

pub fn trace_csv(frame_dt: f64, truth: &[f64], pred: &[f64]) -> String {
    let mut out = String::from("t_ms,true_mV,pred_mV\n");
    for (t, (y, p)) in truth.iter().zip(pred).enumerate() {
        let _ = writeln!(out, "{},{y},{p}", t as f64 * frame_dt);
    }
    out
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

/// Ground truth (black) and prediction (red) against time.
pub fn trace_svg(title: &str, frame_dt: f64, truth: &[f64], pred: &[f64]) -> String {
    let n = truth.len().max(2);
    let t_max = (n - 1) as f64 * frame_dt;
    let (mut lo, mut hi) = truth
        .iter()
        .chain(pred)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let x = |t: f64| MARGIN_L + plot_w * t / t_max;
    let y = |v: f64| MARGIN_T + plot_h * (hi - v) / (hi - lo);
    let polyline = |values: &[f64], colour: &str| {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i as f64 * frame_dt), y(v)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        SVG_W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN_L, MARGIN_T + plot_h, MARGIN_L + plot_w, MARGIN_T);
    let _ = writeln!(
        svg,
        "<path d=\"M{x0},{y1} L{x0},{y0} L{x1},{y0}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for k in 0..=4 {
        let t = t_max * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{t:.0}</text>",
            x(t),
            y0 + 16.0
        );
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{v:.3e}</text>",
            x0 - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">time (ms)</text>",
        MARGIN_L + plot_w / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {0})\">Lead II (mV)</text>",
        MARGIN_T + plot_h / 2.0
    );
    svg.push_str(&polyline(truth, "black"));
    svg.push_str(&polyline(pred, "red"));
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<id>.svg` and `<id>.csv` per sample into `out`.
pub fn write_plots(model: &Model, samples: &[TrainSample], ecg: &ZScore, frame_dt: f64, out: &Path) -> Result<usize> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for s in samples {
        let (pred, truth) = predict_mv(model, s, ecg)?;
        let svg_path = out.join(format!("{}.svg", s.id));
        std::fs::write(&svg_path, trace_svg(&s.id, frame_dt, &truth, &pred)).map_err(|e| Error::io(&svg_path, e))?;
        let csv_path = out.join(format!("{}.csv", s.id));
        std::fs::write(&csv_path, trace_csv(frame_dt, &truth, &pred)).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(samples.len())
}
