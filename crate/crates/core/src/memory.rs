//! Station-level exponential-decay memories.
//!
//! Each station keeps a pair of accumulators: `a` (decay-weighted sum of what the station
//! has seen) and `b` (decay-weighted count). Its representation is `a / b`. Between two
//! updates both accumulators shrink by the same factor, so an idle station's representation
//! never changes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EventBatch, TransactionEvent};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    /// Decay rate in 1/seconds.
    pub lambda: f64,
    /// Memory dimension.
    pub d: usize,
    /// When false every decay factor and message weight is 1 (plain sums).
    pub weighted: bool,
}

impl DecayConfig {
    /// One-hour half-life.
    pub const DEFAULT_LAMBDA: f64 = std::f64::consts::LN_2 / 3600.0;

    pub fn new(lambda: f64, d: usize) -> Self {
        Self { lambda, d, weighted: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) || self.d == 0 {
            return Err(Error::InvalidConfig(format!("need lambda > 0 and d >= 1, got {} / {}", self.lambda, self.d)));
        }
        Ok(())
    }

    /// Weight `exp(-lambda * dt)`.
    #[inline]
    pub fn decay(&self, dt: f64) -> f64 {
        if self.weighted {
            (-self.lambda * dt).exp()
        } else {
            1.0
        }
    }
}

/// Smallest normalizer a decayed station keeps. Below it the station's history weighs
/// less than 1e-200 against any new message, so stopping the decay there leaves `a / b`
/// unchanged and only stops `b` from underflowing to zero after long idle spells.
pub const MIN_NORMALIZER: f64 = 1e-200;

/// Decay factor for one station with normalizer `b`: `k`, unless that would push `b`
/// below [`MIN_NORMALIZER`].
pub fn station_decay(k: f64, b: f64) -> f64 {
    if k * b >= MIN_NORMALIZER {
        k
    } else {
        (MIN_NORMALIZER / b).min(1.0)
    }
}

/// What goes into an event representation besides the partner's representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageLayout {
    pub features: bool,
    pub role_flag: bool,
}

impl MessageLayout {
    pub const FULL: MessageLayout = MessageLayout { features: true, role_flag: true };
    pub const REPRESENTATION_ONLY: MessageLayout = MessageLayout { features: false, role_flag: false };

    pub fn width(&self, d: usize, feature_dim: usize) -> usize {
        d + if self.features { feature_dim } else { 0 } + usize::from(self.role_flag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationMemory {
    pub a: Vec<f64>,
    pub b: f64,
    pub last_update: f64,
}

impl StationMemory {
    pub fn new(d: usize, t: f64) -> Self {
        Self { a: vec![0.0; d], b: 1.0, last_update: t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationMessage {
    pub p: Vec<f64>,
    pub q: f64,
}

/// Messages for all stations of one batch: row `i` of `p` and `q[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Messages {
    pub p: Matrix,
    pub q: Vec<f64>,
}

impl Messages {
    pub fn message(&self, i: usize) -> StationMessage {
        StationMessage { p: self.p.row(i).to_vec(), q: self.q[i] }
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.q[i] > 0.0
    }

    /// Row `i` is `p_i / q_i`, or zeros when station `i` received nothing.
    pub fn normalized(&self) -> Matrix {
        let mut out = self.p.clone();
        for (i, &q) in self.q.iter().enumerate() {
            let row = out.row_mut(i);
            if q > 0.0 {
                row.iter_mut().for_each(|x| *x /= q);
            } else {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        out
    }
}

/// `[r_other ; F_other ; role]` for the endpoint `for_node` of `event`.
///
/// `role` is `+1` when `for_node` is the origin and `-1` when it is the destination;
/// a self-loop counts as an origin.
pub fn event_representation(
    event: &TransactionEvent,
    for_node: usize,
    reps: &Matrix,
    features: &Matrix,
    layout: MessageLayout,
) -> Result<Vec<f64>> {
    let (other, role) = if event.origin == for_node {
        (event.destination, 1.0)
    } else if event.destination == for_node {
        (event.origin, -1.0)
    } else {
        return Err(Error::NodeNotEndpoint { node: for_node, origin: event.origin, destination: event.destination });
    };
    let mut s = Vec::with_capacity(layout.width(reps.cols(), features.cols()));
    s.extend_from_slice(reps.row(other));
    if layout.features {
        s.extend_from_slice(features.row(other));
    }
    if layout.role_flag {
        s.push(role);
    }
    Ok(s)
}

/// Decay-weighted message sums for every station, weights taken relative to `batch.window_end`.
pub fn aggregate_messages(
    batch: &EventBatch,
    reps: &Matrix,
    features: &Matrix,
    layout: MessageLayout,
    cfg: &DecayConfig,
) -> Messages {
    let n = reps.rows();
    let d = reps.cols();
    let width = layout.width(d, features.cols());
    let mut p = Matrix::zeros(n, width);
    let mut q = vec![0.0; n];
    let t = batch.window_end;
    for e in &batch.events {
        let w = cfg.decay(t - e.timestamp);
        let endpoints: &[(usize, usize, f64)] = if e.origin == e.destination {
            &[(e.origin, e.destination, 1.0)][..]
        } else {
            &[(e.origin, e.destination, 1.0), (e.destination, e.origin, -1.0)][..]
        };
        for &(node, other, role) in endpoints {
            q[node] += w;
            let row = p.row_mut(node);
            for (x, r) in row[..d].iter_mut().zip(reps.row(other)) {
                *x += w * r;
            }
            let mut off = d;
            if layout.features {
                let fd = features.cols();
                for (x, f) in row[off..off + fd].iter_mut().zip(features.row(other)) {
                    *x += w * f;
                }
                off += fd;
            }
            if layout.role_flag {
                row[off] += w * role;
            }
        }
    }
    Messages { p, q }
}

/// Advances one station to time `t`. `mlp` maps the message sum to a memory increment
/// and is not called when the station received nothing (`q == 0`).
pub fn update_station_memory(
    mem: &StationMemory,
    msg: &StationMessage,
    t: f64,
    mlp: impl FnOnce(&[f64]) -> Vec<f64>,
    cfg: &DecayConfig,
) -> Result<StationMemory> {
    if t < mem.last_update {
        return Err(Error::TimeRegression { t, last: mem.last_update });
    }
    let k = station_decay(cfg.decay(t - mem.last_update), mem.b);
    let mut a: Vec<f64> = mem.a.iter().map(|x| k * x).collect();
    if msg.q > 0.0 {
        let inc = mlp(&msg.p);
        assert_eq!(inc.len(), a.len(), "update map returned the wrong width");
        a.iter_mut().zip(inc).for_each(|(x, y)| *x += y);
    }
    Ok(StationMemory { a, b: k * mem.b + msg.q, last_update: t })
}

pub fn read_representation(mem: &StationMemory) -> Result<Vec<f64>> {
    if !(mem.b > 0.0) {
        return Err(Error::DegenerateNormalizer { node: 0, value: mem.b });
    }
    Ok(mem.a.iter().map(|x| x / mem.b).collect())
}

/// Closed-form representation of `node` at time `t` from its full history, with
/// neighbour representations held at `frozen_reps`.
///
/// `birth` adds the initial state `(a = 0, b = 1)` at that time as a zero-valued pseudo
/// event, which is what the online accumulators start from. Without it (and without
/// history) the result is the zero vector.
pub fn oracle_representation(
    node: usize,
    events: &[TransactionEvent],
    t: f64,
    frozen_reps: &Matrix,
    cfg: &DecayConfig,
    birth: Option<f64>,
) -> Vec<f64> {
    let d = frozen_reps.cols();
    let mut num = vec![0.0; d];
    let mut den = birth.map_or(0.0, |tb| cfg.decay(t - tb));
    for e in events.iter().filter(|e| e.timestamp <= t) {
        let partners: &[usize] = if e.origin == e.destination {
            if e.origin == node { &[e.origin][..] } else { &[][..] }
        } else if e.origin == node {
            &[e.destination][..]
        } else if e.destination == node {
            &[e.origin][..]
        } else {
            &[][..]
        };
        for &j in partners {
            let w = cfg.decay(t - e.timestamp);
            den += w;
            for (x, r) in num.iter_mut().zip(frozen_reps.row(j)) {
                *x += w * r;
            }
        }
    }
    if den > 0.0 {
        num.iter_mut().for_each(|x| *x /= den);
    }
    num
}

/// All-station accumulators with an identity update map and fixed neighbour
/// representations: the linear model the closed form describes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMemoryBank {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub last_update: f64,
}

impl LinearMemoryBank {
    pub fn new(n: usize, d: usize, t: f64) -> Self {
        Self { a: Matrix::zeros(n, d), b: vec![1.0; n], last_update: t }
    }

    pub fn apply(&mut self, batch: &EventBatch, frozen_reps: &Matrix, cfg: &DecayConfig) -> Result<()> {
        let t = batch.window_end;
        if t < self.last_update {
            return Err(Error::TimeRegression { t, last: self.last_update });
        }
        let no_features = Matrix::zeros(frozen_reps.rows(), 0);
        let msgs = aggregate_messages(batch, frozen_reps, &no_features, MessageLayout::REPRESENTATION_ONLY, cfg);
        let k = cfg.decay(t - self.last_update);
        for i in 0..self.b.len() {
            let k = station_decay(k, self.b[i]);
            for (x, p) in self.a.row_mut(i).iter_mut().zip(msgs.p.row(i)) {
                *x = k * *x + p;
            }
            self.b[i] = k * self.b[i] + msgs.q[i];
        }
        self.last_update = t;
        Ok(())
    }

    pub fn representation(&self, i: usize) -> Vec<f64> {
        self.a.row(i).iter().map(|x| x / self.b[i]).collect()
    }
}

/// Max-norm relative difference `|x - y|∞ / |y|∞` (zero when both vanish).
pub fn max_rel_diff(x: &[f64], y: &[f64]) -> f64 {
    let num = x.iter().zip(y).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let den = y.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
    if num == 0.0 {
        0.0
    } else {
        num / den.max(f64::MIN_POSITIVE)
    }
}
