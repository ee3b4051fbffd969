//! Chronological training with Adam and early stopping, plus checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, Scope};
use crate::ingest::{batch_by_cap, batch_by_window, build_od_matrix, EventBatch, NodeCatalog, OdMatrix, TransactionEvent};
use crate::matrix::Matrix;
use crate::model::{clamp_predictions, HyperParams, Model, ModelDims, ModelParams};

/// Chronological split boundaries in seconds: `t0 <= train < train_end <= val < val_end <= test < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub t0: f64,
    pub train_end: f64,
    pub val_end: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Validation,
    Test,
}

impl Splits {
    pub fn by_days(t0: f64, day: f64, train_days: u32, val_days: u32, test_days: u32) -> Self {
        let train_end = t0 + day * f64::from(train_days);
        let val_end = train_end + day * f64::from(val_days);
        Self { t0, train_end, val_end, end: val_end + day * f64::from(test_days) }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.t0 < self.train_end && self.train_end <= self.val_end && self.val_end <= self.end;
        if !ordered || !self.end.is_finite() || !self.t0.is_finite() {
            return Err(Error::InvalidConfig(format!("splits are not chronological: {self:?}")));
        }
        Ok(())
    }

    /// Phase whose span contains all of `[start, end)`.
    pub fn phase_of(&self, start: f64, end: f64) -> Option<Phase> {
        if start >= self.t0 && end <= self.train_end {
            Some(Phase::Train)
        } else if start >= self.train_end && end <= self.val_end {
            Some(Phase::Validation)
        } else if start >= self.val_end && end <= self.end {
            Some(Phase::Test)
        } else {
            None
        }
    }
}

/// One update per batch, each paired with the demand of the window that follows it.
#[derive(Debug, Clone)]
pub struct PreparedStream {
    pub batches: Vec<EventBatch>,
    /// Phase and truth of `[window_end, window_end + tau)` for every batch.
    pub targets: Vec<Option<(Phase, OdMatrix)>>,
    pub n: usize,
    pub tau: f64,
}

impl PreparedStream {
    /// Batches the events inside `[t0, end)` and builds the target of every batch.
    pub fn new(events: &[TransactionEvent], n: usize, hyper: &HyperParams, splits: &Splits) -> Result<Self> {
        splits.validate()?;
        let lo = events.partition_point(|e| e.timestamp < splits.t0);
        let hi = events.partition_point(|e| e.timestamp < splits.end);
        let events = &events[lo..hi];
        let batches = match hyper.cap {
            Some(cap) => batch_by_cap(events, splits.t0, hyper.tau, cap, Some(splits.end))?,
            None => batch_by_window(events, splits.t0, hyper.tau, Some(splits.end))?,
        };
        let targets = batches
            .iter()
            .map(|b| {
                let (s, e) = (b.window_end, b.window_end + hyper.tau);
                splits.phase_of(s, e).map(|p| (p, build_od_matrix(events, s, hyper.tau, n)))
            })
            .collect();
        Ok(Self { batches, targets, n, tau: hyper.tau })
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.targets.iter().filter(|t| matches!(t, Some((p, _)) if *p == phase)).count()
    }

    /// Number of leading batches needed to reach every target of `phase`.
    pub fn horizon(&self, phase: Phase) -> usize {
        self.targets.iter().rposition(|t| matches!(t, Some((p, _)) if *p == phase)).map_or(0, |i| i + 1)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Matrix> = shapes.into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn for_params(params: &ModelParams, lr: f64) -> Self {
        Self::new(lr, params.arrays().iter().map(|m| m.shape()))
    }

    pub fn settings(&self) -> AdamSettings {
        AdamSettings { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, t: self.t }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeError {
                op: "adam_step",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::ShapeError {
                    op: "adam_step",
                    detail: format!("array {i}: param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), self.m[i].shape()),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (k, (theta, &gk)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, patience: 10, lr: 1e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs and patience must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_pcc: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// The row without its wall-clock column, compared bit for bit across runs.
    pub fn reproducible_fields(&self) -> (usize, u64, u64, u64, Option<u64>) {
        (
            self.epoch,
            self.train_loss.to_bits(),
            self.val_mae.to_bits(),
            self.val_rmse.to_bits(),
            self.val_pcc.map(f64::to_bits),
        )
    }
}

pub fn write_history<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_mae", "val_rmse", "val_pcc", "seconds"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.train_loss),
            format!("{:?}", r.val_mae),
            format!("{:?}", r.val_rmse),
            r.val_pcc.map_or_else(String::new, |p| format!("{p:?}")),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Validation metrics of one pass over the stream with fixed parameters.
fn validation_pass(model: &Model, stream: &PreparedStream) -> Result<(f64, f64, Option<f64>)> {
    let mut bank = model.fresh_bank(stream.batches[0].window_start);
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for (batch, target) in stream.batches.iter().zip(&stream.targets).take(stream.horizon(Phase::Validation)) {
        let out = model.forward(&bank, batch)?;
        if let Some((Phase::Validation, truth)) = target {
            preds.push(clamp_predictions(&out.raw));
            truths.push(truth.clone());
        }
        bank = out.bank;
    }
    metrics_triplet(&preds, &truths)
}

fn metrics_triplet(preds: &[OdMatrix], truths: &[OdMatrix]) -> Result<(f64, f64, Option<f64>)> {
    let r = compute_metrics(preds, truths, Scope::AllPairs)?;
    Ok((r.mae.unwrap_or(f64::NAN), r.rmse.unwrap_or(f64::NAN), r.pcc))
}

/// Trains from scratch: each epoch replays the training windows from a fresh bank with one
/// Adam step per target, then scores the validation targets without updates.
pub fn train(
    events: &[TransactionEvent],
    catalog: &NodeCatalog,
    hyper: &HyperParams,
    tc: &TrainConfig,
    splits: &Splits,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let model = Model::new(hyper.clone(), catalog.features().clone(), tc.seed)?;
    let stream = PreparedStream::new(events, catalog.len(), hyper, splits)?;
    train_prepared(model, &stream, tc)
}

/// [`train`] on an already prepared stream, starting from `model`'s parameters.
pub fn train_prepared(mut model: Model, stream: &PreparedStream, tc: &TrainConfig) -> Result<TrainOutcome> {
    if stream.count(Phase::Train) == 0 {
        return Err(Error::EmptyTrainSplit);
    }
    let validate = stream.count(Phase::Validation) > 0;
    let mut opt = Adam::for_params(&model.params, tc.lr);
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();

    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        let mut bank = model.fresh_bank(stream.batches[0].window_start);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for (batch, target) in stream.batches.iter().zip(&stream.targets).take(stream.horizon(Phase::Train)) {
            match target {
                Some((Phase::Train, truth)) => {
                    let (next, loss, grads) = model.loss_and_gradients(&bank, batch, truth)?;
                    opt.step(model.params.arrays_mut(), &grads)?;
                    loss_sum += loss;
                    steps += 1;
                    bank = next;
                }
                _ => bank = model.forward(&bank, batch)?.bank,
            }
        }
        let train_loss = loss_sum / steps as f64;
        // Without validation windows the training loss drives early stopping.
        // Validation replays the stream from a fresh bank with the epoch's final
        // parameters, so the score belongs to the parameters alone.
        let (val_mae, val_rmse, val_pcc) =
            if validate { validation_pass(&model, stream)? } else { (train_loss, train_loss.sqrt(), None) };
        let record =
            EpochRecord { epoch, train_loss, val_mae, val_rmse, val_pcc, seconds: started.elapsed().as_secs_f64() };
        log::info!(
            "epoch {epoch}: train_loss={train_loss:.6} val_mae={val_mae:.6} val_rmse={val_rmse:.6} ({:.1}s)",
            record.seconds
        );
        history.push(record);
        match stopper.observe(epoch, val_mae) {
            Verdict::Improved => best = model.params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    model.params = best;
    let best_epoch = stopper.best_epoch.unwrap_or(1);
    Ok(TrainOutcome { model, optimizer: opt, history, best_epoch })
}

/// Validation MAE of `model` on `stream`, as recorded during training.
pub fn validation_mae(model: &Model, stream: &PreparedStream) -> Result<f64> {
    Ok(validation_pass(model, stream)?.0)
}

const MAGIC: &[u8; 8] = b"CMODCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a model and resume its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: HyperParams,
    pub dims: ModelDims,
    pub params: ModelParams,
    pub features: Matrix,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    hyper: HyperParams,
    dims: ModelDims,
    optimizer: Option<AdamSettings>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&Adam>) -> Self {
        Self {
            hyper: model.hyper.clone(),
            dims: model.dims,
            params: model.params.clone(),
            features: model.features.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::with_params(self.hyper, self.features, self.params)
    }

    fn arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.params.named();
        out.push(("features".into(), &self.features));
        if let Some(opt) = &self.optimizer {
            let names = self.params.names();
            for (name, m) in names.iter().zip(&opt.m) {
                out.push((format!("adam.m.{name}"), m));
            }
            for (name, v) in names.iter().zip(&opt.v) {
                out.push((format!("adam.v.{name}"), v));
            }
        }
        out
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Metadata {
        hyper: ckpt.hyper.clone(),
        dims: ckpt.dims,
        optimizer: ckpt.optimizer.as_ref().map(Adam::settings),
    };
    let meta = serde_json::to_vec(&meta)?;
    let arrays = ckpt.arrays();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, m) in &arrays {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    }
    for (_, m) in &arrays {
        for x in m.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::ChecksumMismatch)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::ChecksumMismatch)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::ChecksumMismatch);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut cur = Cursor { bytes: body, pos: 12 };
    let meta_len = cur.usize()?;
    let meta: Metadata = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = cur.usize()?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.usize()?;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::InvalidConfig("checkpoint array name is not UTF-8".into()))?;
        let rows = cur.usize()?;
        let cols = cur.usize()?;
        manifest.push((name, rows, cols));
    }
    let mut arrays = std::collections::HashMap::with_capacity(count);
    for (name, rows, cols) in manifest {
        let n = rows.checked_mul(cols).ok_or(Error::ChecksumMismatch)?;
        let raw = cur.take(n.checked_mul(8).ok_or(Error::ChecksumMismatch)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.insert(name, Matrix::from_vec(rows, cols, data));
    }

    let template = crate::model::init_params(&meta.dims, 0);
    let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
        let m = arrays
            .remove(name)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint is missing array `{name}`")))?;
        if m.shape() != shape {
            return Err(Error::ShapeMismatch { name: name.to_string(), found: m.shape(), expected: shape });
        }
        Ok(m)
    };
    let names = template.names();
    let mut values = Vec::with_capacity(names.len());
    for (name, m) in template.named() {
        values.push(take(&name, m.shape())?);
    }
    let params = template.with_arrays(&values)?;
    let features = take("features", (meta.dims.n, meta.dims.d_f))?;
    let optimizer = match meta.optimizer {
        Some(s) => {
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (name, p) in template.named() {
                m.push(take(&format!("adam.m.{name}"), p.shape())?);
            }
            for (name, p) in template.named() {
                v.push(take(&format!("adam.v.{name}"), p.shape())?);
            }
            Some(Adam { lr: s.lr, beta1: s.beta1, beta2: s.beta2, eps: s.eps, t: s.t, m, v })
        }
        None => None,
    };
    Ok(Checkpoint { hyper: meta.hyper, dims: meta.dims, params, features, optimizer })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against the dimensions the caller expects.
pub fn load_checkpoint_for(path: &Path, expected: &ModelDims) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let template = crate::model::init_params(expected, 0);
    for ((name, got), (_, want)) in ckpt.params.named().into_iter().zip(template.named()) {
        if got.shape() != want.shape() {
            return Err(Error::ShapeMismatch { name, found: got.shape(), expected: want.shape() });
        }
    }
    Ok(ckpt)
}
