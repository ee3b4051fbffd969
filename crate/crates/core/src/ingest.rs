//! Transaction streams: CSV parsing, window batching and ground-truth OD matrices.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One trip: `origin -> destination` at `timestamp` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransactionEvent {
    pub origin: usize,
    pub destination: usize,
    pub timestamp: f64,
}

impl TransactionEvent {
    pub fn new(origin: usize, destination: usize, timestamp: f64) -> Self {
        Self { origin, destination, timestamp }
    }

    pub fn touches(&self, node: usize) -> bool {
        self.origin == node || self.destination == node
    }
}

/// Events observed between the previous memory update (`window_start`) and the
/// reference time of this update (`window_end`).
#[derive(Debug, Clone, PartialEq)]
pub struct EventBatch {
    pub events: Vec<TransactionEvent>,
    pub window_start: f64,
    pub window_end: f64,
}

impl EventBatch {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }
}

/// Node identifiers and per-node input features.
#[derive(Debug, Clone)]
pub struct NodeCatalog {
    names: Option<Vec<String>>,
    index: HashMap<String, usize>,
    features: Matrix,
}

impl NodeCatalog {
    /// Nodes are addressed by their integer index; one-hot features.
    pub fn indexed(n: usize) -> Self {
        Self { names: None, index: HashMap::new(), features: Matrix::identity(n) }
    }

    /// Named nodes, `names[i]` is node `i`; one-hot features.
    pub fn named(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let n = names.len();
        Self { names: Some(names), index, features: Matrix::identity(n) }
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        if features.rows() != self.len() || features.cols() == 0 {
            return Err(Error::DimensionMismatch {
                context: "node features",
                expected: format!("{} rows, >= 1 column", self.len()),
                actual: format!("{}x{}", features.rows(), features.cols()),
            });
        }
        self.features = features;
        Ok(self)
    }

    /// Reads a `name,index` CSV. Indices must cover `0..n` exactly once.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(file);
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 2 {
                return Err(Error::MalformedRow { line, reason: format!("expected 2 fields, found {}", rec.len()) });
            }
            let idx: usize = rec[1]
                .parse()
                .map_err(|_| Error::MalformedRow { line, reason: format!("bad index `{}`", &rec[1]) })?;
            pairs.push((rec[0].to_string(), idx, line));
        }
        let n = pairs.len();
        let mut names = vec![None; n];
        for (name, idx, line) in pairs {
            if idx >= n || names[idx].is_some() {
                return Err(Error::MalformedRow { line, reason: format!("index {idx} out of range or repeated") });
            }
            names[idx] = Some(name);
        }
        Ok(Self::named(names.into_iter().map(Option::unwrap).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "index"])?;
        for i in 0..self.len() {
            w.write_record([self.name(i), i.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn name(&self, i: usize) -> String {
        match &self.names {
            Some(names) => names[i].clone(),
            None => i.to_string(),
        }
    }

    pub fn resolve(&self, name: &str) -> Option<usize> {
        match &self.names {
            Some(_) => self.index.get(name).copied(),
            None => name.parse::<usize>().ok().filter(|&i| i < self.len()),
        }
    }
}

/// Parses `origin,destination,timestamp` rows. Line numbers in errors count the header as line 1.
pub fn parse_events<R: Read>(source: R, catalog: &NodeCatalog) -> Result<Vec<TransactionEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let header = rdr.headers()?.clone();
    let expected = ["origin", "destination", "timestamp"];
    if header.len() != 3 || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header `origin,destination,timestamp`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut events = Vec::new();
    let mut previous: Option<f64> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(Error::MalformedRow { line, reason: format!("expected 3 fields, found {}", rec.len()) });
        }
        let resolve = |name: &str| {
            catalog.resolve(name).ok_or_else(|| Error::UnknownNode { line, name: name.to_string() })
        };
        let origin = resolve(&rec[0])?;
        let destination = resolve(&rec[1])?;
        let timestamp: f64 = rec[2]
            .parse()
            .map_err(|_| Error::MalformedRow { line, reason: format!("bad timestamp `{}`", &rec[2]) })?;
        if !timestamp.is_finite() {
            return Err(Error::MalformedRow { line, reason: "timestamp is not finite".into() });
        }
        if let Some(prev) = previous {
            if timestamp < prev {
                return Err(Error::NonMonotonicTimestamp { line, timestamp, previous: prev });
            }
        }
        previous = Some(timestamp);
        events.push(TransactionEvent { origin, destination, timestamp });
    }
    Ok(events)
}

pub fn read_events(path: &Path, catalog: &NodeCatalog) -> Result<Vec<TransactionEvent>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(std::io::BufReader::new(file), catalog)
}

pub fn write_events(path: &Path, events: &[TransactionEvent], catalog: &NodeCatalog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["origin", "destination", "timestamp"])?;
    for e in events {
        w.write_record([catalog.name(e.origin), catalog.name(e.destination), format_time(e.timestamp)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Shortest decimal that round-trips, so written streams parse back bit-exactly.
pub(crate) fn format_time(t: f64) -> String {
    format!("{t:?}")
}

/// First event's timestamp floored to a multiple of `tau`; `0` for an empty stream.
pub fn default_t0(events: &[TransactionEvent], tau: f64) -> f64 {
    events.first().map_or(0.0, |e| (e.timestamp / tau).floor() * tau)
}

#[inline]
fn boundary(t0: f64, tau: f64, k: usize) -> f64 {
    t0 + k as f64 * tau
}

/// Window index of `t` using exactly the boundaries `t0 + k * tau` the batches report.
fn window_index(t: f64, t0: f64, tau: f64) -> usize {
    let mut k = ((t - t0) / tau).floor().max(0.0) as usize;
    while k > 0 && t < boundary(t0, tau, k) {
        k -= 1;
    }
    while t >= boundary(t0, tau, k + 1) {
        k += 1;
    }
    k
}

fn check_window_args(events: &[TransactionEvent], t0: f64, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    if let Some(first) = events.first() {
        if first.timestamp < t0 {
            return Err(Error::InvalidConfig(format!(
                "first event at {} precedes t0 = {t0}",
                first.timestamp
            )));
        }
    }
    Ok(())
}

/// Number of windows needed to cover every event and, if given, the span up to `end`.
fn window_count(events: &[TransactionEvent], t0: f64, tau: f64, end: Option<f64>) -> usize {
    let by_events = events.last().map_or(0, |e| window_index(e.timestamp, t0, tau) + 1);
    let by_end = end.map_or(0, |end| {
        let mut k = ((end - t0) / tau).ceil().max(0.0) as usize;
        while k > 0 && boundary(t0, tau, k - 1) >= end {
            k -= 1;
        }
        while boundary(t0, tau, k) < end {
            k += 1;
        }
        k
    });
    by_events.max(by_end)
}

/// Splits a time-ordered stream into consecutive `[t0 + k*tau, t0 + (k+1)*tau)` windows.
///
/// Empty windows are kept. When `end` is given the batches cover at least `[t0, end)`.
pub fn batch_by_window(
    events: &[TransactionEvent],
    t0: f64,
    tau: f64,
    end: Option<f64>,
) -> Result<Vec<EventBatch>> {
    check_window_args(events, t0, tau)?;
    let count = window_count(events, t0, tau, end);
    let mut batches: Vec<EventBatch> = (0..count)
        .map(|k| EventBatch {
            events: Vec::new(),
            window_start: boundary(t0, tau, k),
            window_end: boundary(t0, tau, k + 1),
        })
        .collect();
    for e in events {
        batches[window_index(e.timestamp, t0, tau)].events.push(*e);
    }
    Ok(batches)
}

/// Like [`batch_by_window`], but windows holding more than `cap` events are cut into
/// consecutive sub-batches of at most `cap` events. A sub-batch ends at its last event's
/// timestamp, except the last one of each window which ends at the window boundary.
pub fn batch_by_cap(
    events: &[TransactionEvent],
    t0: f64,
    tau: f64,
    cap: usize,
    end: Option<f64>,
) -> Result<Vec<EventBatch>> {
    if cap == 0 {
        return Err(Error::InvalidConfig("batch cap must be at least 1".into()));
    }
    let windows = batch_by_window(events, t0, tau, end)?;
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        if w.events.len() <= cap {
            out.push(w);
            continue;
        }
        let mut start = w.window_start;
        let chunks: Vec<&[TransactionEvent]> = w.events.chunks(cap).collect();
        let last = chunks.len() - 1;
        for (i, chunk) in chunks.into_iter().enumerate() {
            let end = if i == last { w.window_end } else { chunk[chunk.len() - 1].timestamp };
            out.push(EventBatch { events: chunk.to_vec(), window_start: start, window_end: end });
            start = end;
        }
    }
    Ok(out)
}

/// Ground-truth OD demand: entry `(i, j)` counts trips `i -> j` with `t <= t_k < t + tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdMatrix(pub Matrix);

impl OdMatrix {
    pub fn zeros(n: usize) -> Self {
        OdMatrix(Matrix::zeros(n, n))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }
}

/// Counts the window `[t, t + tau)`. `events` must be sorted by timestamp.
pub fn build_od_matrix(events: &[TransactionEvent], t: f64, tau: f64, n: usize) -> OdMatrix {
    let lo = events.partition_point(|e| e.timestamp < t);
    let hi = events.partition_point(|e| e.timestamp < t + tau);
    let mut y = Matrix::zeros(n, n);
    for e in &events[lo..hi.max(lo)] {
        let v = y.get(e.origin, e.destination);
        y.set(e.origin, e.destination, v + 1.0);
    }
    OdMatrix(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab_catalog() -> NodeCatalog {
        NodeCatalog::named(vec!["A".into(), "B".into()])
    }

    fn ev(o: usize, d: usize, t: f64) -> TransactionEvent {
        TransactionEvent::new(o, d, t)
    }

    #[test]
    fn parses_named_rows() {
        let src = "origin,destination,timestamp\nA,B,10.0\nA,B,20.0\n";
        let events = parse_events(src.as_bytes(), &ab_catalog()).unwrap();
        assert_eq!(events, vec![ev(0, 1, 10.0), ev(0, 1, 20.0)]);
    }

    #[test]
    fn header_only_is_empty() {
        let events = parse_events("origin,destination,timestamp\n".as_bytes(), &ab_catalog()).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn crlf_is_tolerated() {
        let src = "origin,destination,timestamp\r\nB,A,1.5\r\n";
        assert_eq!(parse_events(src.as_bytes(), &ab_catalog()).unwrap(), vec![ev(1, 0, 1.5)]);
    }

    #[test]
    fn decreasing_timestamp_reports_line() {
        let src = "origin,destination,timestamp\nA,B,20.0\nA,B,10.0\n";
        match parse_events(src.as_bytes(), &ab_catalog()) {
            Err(Error::NonMonotonicTimestamp { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_node_and_bad_rows() {
        let src = "origin,destination,timestamp\nA,C,1\n";
        assert!(matches!(parse_events(src.as_bytes(), &ab_catalog()), Err(Error::UnknownNode { line: 2, .. })));
        let src = "origin,destination,timestamp\nA,B\n";
        assert!(matches!(parse_events(src.as_bytes(), &ab_catalog()), Err(Error::MalformedRow { line: 2, .. })));
        let src = "origin,destination,timestamp\nA,B,soon\n";
        assert!(matches!(parse_events(src.as_bytes(), &ab_catalog()), Err(Error::MalformedRow { line: 2, .. })));
        let src = "origin,destination,timestamp\nA,B,inf\n";
        assert!(matches!(parse_events(src.as_bytes(), &ab_catalog()), Err(Error::MalformedRow { .. })));
    }

    #[test]
    fn indexed_catalog_resolves_integers() {
        let cat = NodeCatalog::indexed(3);
        let src = "origin,destination,timestamp\n2,0,4\n";
        assert_eq!(parse_events(src.as_bytes(), &cat).unwrap(), vec![ev(2, 0, 4.0)]);
        let src = "origin,destination,timestamp\n3,0,4\n";
        assert!(matches!(parse_events(src.as_bytes(), &cat), Err(Error::UnknownNode { .. })));
    }

    #[test]
    fn window_batching() {
        let events = vec![ev(0, 1, 5.0), ev(0, 1, 35.0), ev(1, 0, 65.0)];
        let b = batch_by_window(&events, 0.0, 30.0, None).unwrap();
        assert_eq!(b.len(), 3);
        for (k, batch) in b.iter().enumerate() {
            assert_eq!(batch.len(), 1);
            assert_eq!(batch.window_start, 30.0 * k as f64);
            assert_eq!(batch.window_end, 30.0 * (k + 1) as f64);
        }

        let b = batch_by_window(&[], 0.0, 30.0, Some(90.0)).unwrap();
        let bounds: Vec<_> = b.iter().map(|x| (x.window_start, x.window_end, x.len())).collect();
        assert_eq!(bounds, vec![(0.0, 30.0, 0), (30.0, 60.0, 0), (60.0, 90.0, 0)]);

        let b = batch_by_window(&[ev(0, 0, 5.0), ev(1, 1, 10.0)], 0.0, 30.0, None).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 2);
    }

    #[test]
    fn boundary_event_goes_to_next_window() {
        let b = batch_by_window(&[ev(0, 1, 30.0)], 0.0, 30.0, None).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b[0].is_empty());
        assert_eq!(b[1].len(), 1);
    }

    #[test]
    fn cap_splits_window() {
        let events: Vec<_> = (0..5).map(|i| ev(0, 1, 1.0 + i as f64)).collect();
        let b = batch_by_cap(&events, 0.0, 30.0, 2, None).unwrap();
        let sizes: Vec<_> = b.iter().map(EventBatch::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!((b[0].window_start, b[0].window_end), (0.0, 2.0));
        assert_eq!((b[1].window_start, b[1].window_end), (2.0, 4.0));
        assert_eq!((b[2].window_start, b[2].window_end), (4.0, 30.0));

        let three = &events[..3];
        assert_eq!(
            batch_by_cap(three, 0.0, 30.0, 200_000, None).unwrap(),
            batch_by_window(three, 0.0, 30.0, None).unwrap()
        );

        let b = batch_by_cap(&[], 0.0, 30.0, 3, Some(30.0)).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b[0].is_empty());
        assert!(batch_by_cap(&events, 0.0, 30.0, 0, None).is_err());
    }

    #[test]
    fn od_matrix_counts_half_open_window() {
        let events = vec![ev(0, 1, 10.0), ev(0, 1, 20.0), ev(1, 0, 40.0)];
        let y = build_od_matrix(&events, 0.0, 30.0, 2);
        assert_eq!(y.0, Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]));
        assert_eq!(build_od_matrix(&[], 0.0, 30.0, 2), OdMatrix::zeros(2));
        assert_eq!(build_od_matrix(&[ev(1, 1, 30.0)], 0.0, 30.0, 2).total(), 0.0);
    }

    #[test]
    fn default_t0_floors_to_tau() {
        assert_eq!(default_t0(&[ev(0, 1, 3700.0)], 1800.0), 3600.0);
        assert_eq!(default_t0(&[], 1800.0), 0.0);
    }
}
