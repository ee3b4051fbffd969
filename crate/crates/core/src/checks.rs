//! Self-check suites run by `cmod oracle-check` and `cmod grad-check`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{fd_check, FdOptions, FdReport};
use crate::error::Result;
use crate::ingest::{batch_by_cap, batch_by_window, build_od_matrix, EventBatch, OdMatrix, TransactionEvent};
use crate::matrix::Matrix;
use crate::memory::{max_rel_diff, oracle_representation, DecayConfig, LinearMemoryBank};
use crate::model::{HyperParams, MemoryBank, Model};

/// `count` events between uniformly random pairs at uniformly random times in
/// `[0, horizon)`, sorted.
pub fn random_stream(rng: &mut impl Rng, count: usize, nodes: usize, horizon: f64) -> Vec<TransactionEvent> {
    let mut events: Vec<TransactionEvent> = (0..count)
        .map(|_| {
            TransactionEvent::new(rng.random_range(0..nodes), rng.random_range(0..nodes), rng.random_range(0.0..horizon))
        })
        .collect();
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    events
}

#[derive(Debug, Clone)]
pub struct OracleCheckOptions {
    pub events: usize,
    pub nodes: usize,
    pub d: usize,
    pub horizon: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Split windows into sub-batches of at most this many events.
    pub cap: Option<usize>,
    pub tol: f64,
    pub seed: u64,
}

impl Default for OracleCheckOptions {
    fn default() -> Self {
        Self {
            events: 10_000,
            nodes: 20,
            d: 8,
            horizon: 2.0 * 86_400.0,
            tau: 1800.0,
            lambda: DecayConfig::DEFAULT_LAMBDA,
            cap: None,
            tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheckReport {
    pub events: usize,
    pub nodes: usize,
    pub batches: usize,
    pub comparisons: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub seconds: f64,
    pub passed: bool,
}

/// Runs the online accumulators (identity update, frozen neighbour representations, no
/// features or role flag) batch by batch and compares every station against the closed
/// form over its full history after every batch.
pub fn oracle_check(opts: &OracleCheckOptions) -> Result<OracleCheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let events = random_stream(&mut rng, opts.events, opts.nodes, opts.horizon);
    let frozen = Matrix::from_fn(opts.nodes, opts.d, |_, _| rng.random_range(-1.0..1.0));
    let cfg = DecayConfig::new(opts.lambda, opts.d);
    cfg.validate()?;
    let batches = match opts.cap {
        Some(cap) => batch_by_cap(&events, 0.0, opts.tau, cap, Some(opts.horizon))?,
        None => batch_by_window(&events, 0.0, opts.tau, Some(opts.horizon))?,
    };
    let mut bank = LinearMemoryBank::new(opts.nodes, opts.d, 0.0);
    let mut seen = 0;
    let mut worst: f64 = 0.0;
    let mut comparisons = 0;
    for batch in &batches {
        bank.apply(batch, &frozen, &cfg)?;
        seen += batch.len();
        for i in 0..opts.nodes {
            let oracle = oracle_representation(i, &events[..seen], batch.window_end, &frozen, &cfg, Some(0.0));
            worst = worst.max(max_rel_diff(&bank.representation(i), &oracle));
            comparisons += 1;
        }
    }
    Ok(OracleCheckReport {
        events: events.len(),
        nodes: opts.nodes,
        batches: batches.len(),
        comparisons,
        max_rel_error: worst,
        tol: opts.tol,
        seconds: started.elapsed().as_secs_f64(),
        passed: worst <= opts.tol,
    })
}

/// A small model, a non-trivial memory state, one batch and its target.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub model: Model,
    pub bank: MemoryBank,
    pub batch: EventBatch,
    pub truth: OdMatrix,
}

/// Toy instance: N=3, d=4, two heads, two clusters. Station memories start from random
/// values; cluster and area memories still hold their trainable initial values.
pub fn toy_instance(seed: u64) -> Result<GradInstance> {
    let hyper = HyperParams { d: 4, heads: 2, d_rel: 2, d_msg: 4, n_clusters: Some(2), lambda: 1e-3, ..HyperParams::default() };
    grad_instance(hyper, 3, seed)
}

pub fn grad_instance(hyper: HyperParams, n: usize, seed: u64) -> Result<GradInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(hyper.clone(), Matrix::identity(n), seed)?;
    let mut bank = model.fresh_bank(0.0);
    bank.station_a = Matrix::from_fn(n, hyper.d, |_, _| rng.random_range(-1.0..1.0));
    bank.station_b = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let events = random_stream(&mut rng, 4 * n, n, hyper.tau);
    let batch = EventBatch { events, window_start: 0.0, window_end: hyper.tau };
    let truth = OdMatrix(Matrix::from_fn(n, n, |_, _| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(1..4) as f64 }));
    Ok(GradInstance { model, bank, batch, truth })
}

/// Central finite differences of `step + predict + od_loss` for every parameter array.
pub fn grad_check(inst: &GradInstance, opts: &FdOptions) -> Result<FdReport> {
    let (_, _, analytic) = inst.model.loss_and_gradients(&inst.bank, &inst.batch, &inst.truth)?;
    let names = inst.model.params.names();
    let mut arrays = inst.model.params.to_vec();
    let mut failure = None;
    let report = fd_check(
        |p| match inst.model.loss_at(p, &inst.bank, &inst.batch, &inst.truth) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &names,
        &mut arrays,
        &analytic,
        opts,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Builds the target of each window for a stream, for callers that batch by hand.
pub fn targets_for(events: &[TransactionEvent], batches: &[EventBatch], tau: f64, n: usize) -> Vec<OdMatrix> {
    batches.iter().map(|b| build_od_matrix(events, b.window_end, tau, n)).collect()
}
