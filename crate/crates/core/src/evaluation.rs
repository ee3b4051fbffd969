//! Error metrics, the historical-average baseline and the test-time walk.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{build_od_matrix, OdMatrix, TransactionEvent};
use crate::matrix::Matrix;
use crate::model::{clamp_predictions, Model};
use crate::training::{Phase, PreparedStream};

pub const DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllPairs,
    /// Cells whose true demand exceeds the mean truth of the evaluated sequence.
    AboveAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub scope: Scope,
    /// `None` when the scope holds no cells.
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// `None` when either side has zero variance (or the scope is empty).
    pub pcc: Option<f64>,
    pub pcc_degenerate: bool,
    pub windows: usize,
    pub cells: usize,
    /// Demand threshold applied for `above_average`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl MetricReport {
    pub fn is_empty(&self) -> bool {
        self.cells == 0
    }
}

fn check_pairs(preds: &[OdMatrix], truths: &[OdMatrix]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: truths.len() });
    }
    for (p, t) in preds.iter().zip(truths) {
        if p.values().shape() != t.values().shape() {
            return Err(Error::DimensionMismatch {
                context: "metrics",
                expected: format!("{:?}", t.values().shape()),
                actual: format!("{:?}", p.values().shape()),
            });
        }
    }
    Ok(())
}

/// Mean of every truth cell in the sequence.
pub fn truth_mean(truths: &[OdMatrix]) -> f64 {
    let (sum, count) = truths.iter().fold((0.0, 0usize), |(s, c), t| (s + t.total(), c + t.values().len()));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn compute_metrics(preds: &[OdMatrix], truths: &[OdMatrix], scope: Scope) -> Result<MetricReport> {
    check_pairs(preds, truths)?;
    let threshold = match scope {
        Scope::AllPairs => None,
        Scope::AboveAverage => Some(truth_mean(truths)),
    };
    Ok(metrics_over(preds, truths, scope, threshold))
}

/// `above_average` with an explicit threshold instead of the sequence mean.
pub fn compute_metrics_above(preds: &[OdMatrix], truths: &[OdMatrix], threshold: f64) -> Result<MetricReport> {
    check_pairs(preds, truths)?;
    Ok(metrics_over(preds, truths, Scope::AboveAverage, Some(threshold)))
}

fn metrics_over(preds: &[OdMatrix], truths: &[OdMatrix], scope: Scope, threshold: Option<f64>) -> MetricReport {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        for (&yhat, &y) in p.values().as_slice().iter().zip(t.values().as_slice()) {
            if threshold.map_or(true, |th| y > th) {
                xs.push(yhat);
                ys.push(y);
            }
        }
    }
    let cells = xs.len();
    let (mae, rmse, pcc) = if cells == 0 {
        (None, None, None)
    } else {
        let n = cells as f64;
        let abs: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b).abs()).sum();
        let sq: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum();
        (Some(abs / n), Some((sq / n).sqrt()), pearson(&xs, &ys))
    };
    MetricReport {
        scope,
        mae,
        rmse,
        pcc,
        pcc_degenerate: cells > 0 && pcc.is_none(),
        windows: preds.len(),
        cells,
        threshold,
    }
}

/// Pearson correlation; `None` if either vector is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Time-of-day slot of a window: `(start mod 86400)` quantized by `tau`.
pub fn slot_of(window_start: f64, tau: f64) -> usize {
    (window_start.rem_euclid(DAY) / tau).floor() as usize
}

/// Historical average: per-slot mean of training windows.
#[derive(Debug, Clone)]
pub struct HaBaseline {
    pub tau: f64,
    slots: BTreeMap<usize, (Matrix, usize)>,
    global: Matrix,
}

impl HaBaseline {
    /// `windows` pairs each window start with its observed matrix.
    pub fn fit(windows: &[(f64, OdMatrix)], tau: f64) -> Result<Self> {
        let Some((_, first)) = windows.first() else {
            return Err(Error::EmptyTrainSplit);
        };
        let n = first.n();
        let mut slots: BTreeMap<usize, (Matrix, usize)> = BTreeMap::new();
        let mut global = Matrix::zeros(n, n);
        for (start, y) in windows {
            if y.n() != n {
                return Err(Error::DimensionMismatch {
                    context: "historical average",
                    expected: n.to_string(),
                    actual: y.n().to_string(),
                });
            }
            let entry = slots.entry(slot_of(*start, tau)).or_insert_with(|| (Matrix::zeros(n, n), 0));
            entry.0.axpy(1.0, y.values());
            entry.1 += 1;
            global.axpy(1.0, y.values());
        }
        for (sum, count) in slots.values_mut() {
            sum.scale_in_place(1.0 / *count as f64);
        }
        global.scale_in_place(1.0 / windows.len() as f64);
        Ok(Self { tau, slots, global })
    }

    /// Slot mean for the window starting at `window_start`, or an `UnseenSlot` error.
    pub fn predict_strict(&self, window_start: f64) -> Result<OdMatrix> {
        let slot = slot_of(window_start, self.tau);
        self.slots.get(&slot).map(|(m, _)| OdMatrix(m.clone())).ok_or(Error::UnseenSlot { slot })
    }

    /// Slot mean, falling back to the global mean; the flag is set on fallback.
    pub fn predict(&self, window_start: f64) -> (OdMatrix, bool) {
        match self.predict_strict(window_start) {
            Ok(m) => (m, false),
            Err(_) => (OdMatrix(self.global.clone()), true),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}

/// One reported prediction: the window it targets and the clamped matrix.
#[derive(Debug, Clone)]
pub struct WindowPrediction {
    pub window_start: f64,
    pub window_end: f64,
    pub predicted: OdMatrix,
    pub actual: Option<OdMatrix>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub all_pairs: MetricReport,
    pub above_average: MetricReport,
}

impl EvaluationReport {
    pub fn from_predictions(preds: &[WindowPrediction]) -> Result<Self> {
        let p: Vec<OdMatrix> = preds.iter().map(|w| w.predicted.clone()).collect();
        let t: Vec<OdMatrix> = preds
            .iter()
            .map(|w| w.actual.clone().ok_or_else(|| Error::InvalidConfig("prediction without ground truth".into())))
            .collect::<Result<_>>()?;
        Ok(Self { all_pairs: compute_metrics(&p, &t, Scope::AllPairs)?, above_average: compute_metrics(&p, &t, Scope::AboveAverage)? })
    }
}

/// Walks the stream from a fresh bank and returns a prediction for every target in
/// `phase` (all targets when `phase` is `None`). Memories carry over across phases.
pub fn predict_stream(model: &Model, stream: &PreparedStream, phase: Option<Phase>) -> Result<Vec<WindowPrediction>> {
    let Some(first) = stream.batches.first() else {
        return Ok(Vec::new());
    };
    let horizon = match phase {
        Some(p) => stream.horizon(p),
        None => stream.batches.len(),
    };
    let mut bank = model.fresh_bank(first.window_start);
    let mut out = Vec::new();
    for (batch, target) in stream.batches.iter().zip(&stream.targets).take(horizon) {
        let fwd = model.forward(&bank, batch)?;
        let wanted = match (phase, target) {
            (None, _) => true,
            (Some(p), Some((q, _))) => p == *q,
            (Some(_), None) => false,
        };
        if wanted {
            out.push(WindowPrediction {
                window_start: batch.window_end,
                window_end: batch.window_end + stream.tau,
                predicted: clamp_predictions(&fwd.raw),
                actual: target.as_ref().map(|(_, t)| t.clone()),
            });
        }
        bank = fwd.bank;
    }
    Ok(out)
}

/// Test-phase walk with both metric scopes.
pub fn evaluate(model: &Model, stream: &PreparedStream) -> Result<(EvaluationReport, Vec<WindowPrediction>)> {
    let preds = predict_stream(model, stream, Some(Phase::Test))?;
    Ok((EvaluationReport::from_predictions(&preds)?, preds))
}

/// Historical-average predictions for the test targets of `stream`, fitted on every
/// `tau`-aligned window inside the training span. Returns the predictions and the number
/// of windows that fell back to the global mean.
pub fn ha_predictions(
    events: &[TransactionEvent],
    stream: &PreparedStream,
    t0: f64,
    train_end: f64,
) -> Result<(Vec<WindowPrediction>, usize)> {
    let tau = stream.tau;
    let mut train = Vec::new();
    let mut k = 0usize;
    loop {
        let start = t0 + k as f64 * tau;
        if start + tau > train_end {
            break;
        }
        train.push((start, build_od_matrix(events, start, tau, stream.n)));
        k += 1;
    }
    let ha = HaBaseline::fit(&train, tau)?;
    let mut unseen = 0;
    let mut out = Vec::new();
    for (batch, target) in stream.batches.iter().zip(&stream.targets) {
        if let Some((Phase::Test, truth)) = target {
            let (pred, fallback) = ha.predict(batch.window_end);
            unseen += usize::from(fallback);
            out.push(WindowPrediction {
                window_start: batch.window_end,
                window_end: batch.window_end + tau,
                predicted: pred,
                actual: Some(truth.clone()),
            });
        }
    }
    Ok((out, unseen))
}

/// CSV `origin,destination,window_start,window_end,predicted,actual`.
pub fn write_predictions<W: Write>(preds: &[WindowPrediction], names: &dyn Fn(usize) -> String, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["origin", "destination", "window_start", "window_end", "predicted", "actual"])?;
    for p in preds {
        let n = p.predicted.n();
        for i in 0..n {
            for j in 0..n {
                w.write_record([
                    names(i),
                    names(j),
                    format!("{:?}", p.window_start),
                    format!("{:?}", p.window_end),
                    format!("{:?}", p.predicted.get(i, j)),
                    p.actual.as_ref().map_or_else(String::new, |a| format!("{:?}", a.get(i, j))),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

/// Writes `timestamp,node,dim,value` rows of `r_i` after every batch for `nodes`.
pub fn export_representations<W: Write>(
    model: &Model,
    stream: &PreparedStream,
    nodes: &[usize],
    out: W,
) -> Result<usize> {
    for &i in nodes {
        if i >= model.dims.n {
            return Err(Error::InvalidConfig(format!("node {i} is out of range for {} nodes", model.dims.n)));
        }
    }
    let Some(first) = stream.batches.first() else {
        return Ok(0);
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "node", "dim", "value"])?;
    let mut bank = model.fresh_bank(first.window_start);
    let mut rows = 0;
    for batch in &stream.batches {
        bank = model.forward(&bank, batch)?.bank;
        let reps = bank.representations()?;
        for &i in nodes {
            for (k, v) in reps.row(i).iter().enumerate() {
                w.write_record([format!("{:?}", batch.window_end), i.to_string(), k.to_string(), format!("{v:?}")])?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<representations>", e))?;
    Ok(rows)
}

/// Writes station-cluster attention weights `timestamp,view,head,station,cluster,weight`.
/// View `message` holds the weights that carry station messages up to clusters (each
/// cluster's column sums to one over stations); view `fusion` holds the weights a station
/// reads clusters with (each station's row sums to one over clusters). Only the last
/// batch is written unless `every_batch` is set.
pub fn export_relations<W: Write>(model: &Model, stream: &PreparedStream, every_batch: bool, out: W) -> Result<usize> {
    if model.hyper.ablation.no_multilevel {
        return Err(Error::InvalidConfig("relations do not exist without the multi-level structure".into()));
    }
    let Some(first) = stream.batches.first() else {
        return Ok(0);
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "view", "head", "station", "cluster", "weight"])?;
    let mut bank = model.fresh_bank(first.window_start);
    let mut rows = 0;
    let last = stream.batches.len() - 1;
    for (b, batch) in stream.batches.iter().enumerate() {
        let fwd = model.forward(&bank, batch)?;
        if every_batch || b == last {
            let rel = fwd.trace.relations.as_ref().expect("multi-level step records relations");
            for (view, mats) in [("message", &rel.acm), ("fusion", &rel.ace)] {
                for (h, m) in mats.iter().enumerate() {
                    for i in 0..m.rows() {
                        for c in 0..m.cols() {
                            w.write_record([
                                format!("{:?}", batch.window_end),
                                view.to_string(),
                                h.to_string(),
                                i.to_string(),
                                c.to_string(),
                                format!("{:?}", m.get(i, c)),
                            ])?;
                            rows += 1;
                        }
                    }
                }
            }
        }
        bank = fwd.bank;
    }
    w.flush().map_err(|e| Error::io("<relations>", e))?;
    Ok(rows)
}
