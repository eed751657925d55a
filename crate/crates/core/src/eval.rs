//! ROC analysis, disruptivity traces and latency measurement.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, Tensor};
use crate::model::CcnnModel;
use crate::shots::{Label, Shot};

/// False-positive budget used to pick the reported alarm threshold.
pub const DEFAULT_MAX_FPR: f64 = 0.051;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Shots scoring at or above this are flagged. The first point uses
    /// `+inf` (serialized as `null`).
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ordered by decreasing threshold, from (0, 0) to (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve over the distinct scores. Equal scores form a single threshold
/// step, so the area equals the probability that a random positive
/// outscores a random negative, with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the number of correctly ordered pairs, ties counting one.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    let auc = area2 as f64 / (2 * u128::from(n_pos) * u128::from(n_neg)) as f64;
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub max_fpr: f64,
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Highest-recall point whose false-positive rate stays within `max_fpr`.
/// Ties prefer lower fpr, then higher threshold. Falls back to the
/// `(inf, 0, 0)` start of the curve.
pub fn operating_point(roc: &RocCurve, max_fpr: f64) -> OperatingPoint {
    let mut best = RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    };
    for p in &roc.points {
        if p.fpr > max_fpr {
            continue;
        }
        let better = p.tpr > best.tpr
            || (p.tpr == best.tpr && p.fpr < best.fpr)
            || (p.tpr == best.tpr && p.fpr == best.fpr && p.threshold > best.threshold);
        if better {
            best = *p;
        }
    }
    OperatingPoint {
        max_fpr,
        threshold: best.threshold,
        fpr: best.fpr,
        tpr: best.tpr,
    }
}

pub fn write_roc_csv<W: Write>(writer: W, roc: &RocCurve) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(["threshold", "fpr", "tpr"])?;
    for p in &roc.points {
        wtr.write_record([
            p.threshold.to_string(),
            p.fpr.to_string(),
            p.tpr.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    /// Counts with `score >= threshold` flagged as disruptive.
    pub fn at(scores: &[ShotScore], threshold: f64) -> Self {
        let mut c = Self::default();
        for s in scores {
            match (s.score >= threshold, s.label.is_disruptive()) {
                (true, true) => c.true_positive += 1,
                (true, false) => c.false_positive += 1,
                (false, false) => c.true_negative += 1,
                (false, true) => c.false_negative += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotScore {
    pub id: String,
    pub label: Label,
    /// Disruptivity of the whole shot.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub iterations: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub n_shots: usize,
    pub n_disruptive: usize,
    pub operating_points: Vec<OperatingPoint>,
    /// Alarm threshold from the first operating point.
    pub threshold: f64,
    pub confusion: Confusion,
    pub scores: Vec<ShotScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

/// Disruptivity of every shot, in input order.
pub fn score_shots(model: &CcnnModel, shots: &[Shot]) -> Result<Vec<ShotScore>> {
    shots
        .par_iter()
        .map(|s| {
            Ok(ShotScore {
                id: s.id.clone(),
                label: s.label,
                score: sigmoid(model.forward_label(&s.channels)?),
            })
        })
        .collect()
}

/// AUC of the model on `shots`.
pub fn auc_of(model: &CcnnModel, shots: &[Shot]) -> Result<f64> {
    let scores = score_shots(model, shots)?;
    auc_of_scores(&scores)
}

pub fn auc_of_scores(scores: &[ShotScore]) -> Result<f64> {
    let (s, l) = split_scores(scores);
    Ok(roc_auc(&s, &l)?.auc)
}

fn split_scores(scores: &[ShotScore]) -> (Vec<f64>, Vec<bool>) {
    scores
        .iter()
        .map(|s| (s.score, s.label.is_disruptive()))
        .unzip()
}

/// Scores `shots` and summarizes the ROC at each false-positive budget.
/// The confusion matrix uses the threshold chosen for `max_fprs[0]`
/// ([`DEFAULT_MAX_FPR`] if empty).
pub fn evaluate(
    model: &CcnnModel,
    shots: &[Shot],
    max_fprs: &[f64],
) -> Result<(EvalReport, RocCurve)> {
    let scores = score_shots(model, shots)?;
    let (s, l) = split_scores(&scores);
    let roc = roc_auc(&s, &l)?;
    let budgets = if max_fprs.is_empty() {
        vec![DEFAULT_MAX_FPR]
    } else {
        max_fprs.to_vec()
    };
    let operating_points: Vec<OperatingPoint> =
        budgets.iter().map(|&f| operating_point(&roc, f)).collect();
    let threshold = operating_points[0].threshold;
    let report = EvalReport {
        auc: roc.auc,
        n_shots: scores.len(),
        n_disruptive: l.iter().filter(|&&d| d).count(),
        operating_points,
        threshold,
        confusion: Confusion::at(&scores, threshold),
        scores,
        latency: None,
    };
    Ok((report, roc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub shot_id: String,
    pub label: Label,
    /// Milliseconds relative to the last sample (0).
    pub t_ms: f64,
    pub disruptivity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceExport {
    pub rows: Vec<TraceRow>,
    /// Shots shorter than the window, exported in full.
    pub short_shots: Vec<String>,
}

/// Disruptivity over the final `window_ms` of each shot.
pub fn export_traces(model: &CcnnModel, shots: &[Shot], window_ms: f64) -> Result<TraceExport> {
    if !(window_ms.is_finite() && window_ms >= 0.0) {
        return Err(Error::Config(format!(
            "invalid trace window {window_ms} ms"
        )));
    }
    let traces: Vec<Vec<f64>> = shots
        .par_iter()
        .map(|s| model.forward_trace(&s.channels))
        .collect::<Result<_>>()?;
    let mut out = TraceExport::default();
    for (shot, trace) in shots.iter().zip(traces) {
        let step_ms = shot.step_s * 1000.0;
        let want = (window_ms / step_ms).round() as usize + 1;
        if want > trace.len() {
            log::debug!("shot {} is shorter than the {window_ms} ms window", shot.id);
            out.short_shots.push(shot.id.clone());
        }
        let n = want.min(trace.len());
        let last = trace.len() - 1;
        for t in trace.len() - n..trace.len() {
            out.rows.push(TraceRow {
                shot_id: shot.id.clone(),
                label: shot.label,
                t_ms: -((last - t) as f64) * step_ms,
                disruptivity: trace[t],
            });
        }
    }
    if !out.short_shots.is_empty() {
        log::warn!(
            "{} shots are shorter than the {window_ms} ms window and were exported in full",
            out.short_shots.len()
        );
    }
    Ok(out)
}

pub fn write_traces_csv<W: Write>(writer: W, rows: &[TraceRow]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(["shot_id", "label", "t_ms", "disruptivity"])?;
    for r in rows {
        wtr.write_record([
            r.shot_id.clone(),
            r.label.as_str().to_string(),
            r.t_ms.to_string(),
            r.disruptivity.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Times [`CcnnModel::forward_label`] on `x` after `warmups` untimed calls.
pub fn bench_latency(
    model: &CcnnModel,
    x: &Tensor,
    warmups: usize,
    iterations: usize,
) -> Result<LatencyStats> {
    if iterations == 0 {
        return Err(Error::Config(
            "benchmark needs at least one iteration".into(),
        ));
    }
    for _ in 0..warmups {
        std::hint::black_box(model.forward_label(x)?);
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        std::hint::black_box(model.forward_label(std::hint::black_box(x))?);
        times.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        samples: x.shape().get(1).copied().unwrap_or(0),
        iterations,
        median_ms: quantile(&times, 0.5),
        p95_ms: quantile(&times, 0.95),
    })
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
