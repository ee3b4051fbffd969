//! The `cmod` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::FdOptions;
use crate::checks::{grad_check, grad_instance, oracle_check, toy_instance, OracleCheckOptions};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, export_relations, export_representations, ha_predictions, predict_stream, write_predictions,
    EvaluationReport, MetricReport,
};
use crate::ingest::{default_t0, read_events, write_events, NodeCatalog, TransactionEvent};
use crate::model::{HyperParams, Model};
use crate::synth::{generate, SynthConfig};
use crate::training::{load_checkpoint, save_checkpoint, train, write_history, Checkpoint, Phase, PreparedStream, Splits, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "cmod", version, about = "Streaming origin-destination demand forecasting")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic event stream and its catalog.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and history.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvalArgs),
    /// Write per-window predictions as CSV.
    Predict(PredictArgs),
    /// Compare online memories against the closed-form oracle.
    OracleCheck(OracleArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradArgs),
    /// Dump station representations after every batch.
    ExportReps(ExportRepsArgs),
    /// Dump station-cluster attention weights (message and fusion views).
    ExportRelations(ExportRelationsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationFlag {
    /// Without the multi-level structure.
    NoMl,
    /// Without weighted memory updates.
    NoMu,
    /// Plain squared error instead of the masked loss.
    MseLoss,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON config file with optional sections `hyper`, `train`, `synth`, `splits`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization and synthesis.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Model variant (repeatable).
    #[arg(long, value_enum)]
    pub ablation: Vec<AblationFlag>,
    /// Memory dimension d [default: 256].
    #[arg(long)]
    pub d: Option<usize>,
    /// Attention heads [default: 8].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Per-head relation width [default: d / heads].
    #[arg(long)]
    pub d_rel: Option<usize>,
    /// Message width [default: d].
    #[arg(long)]
    pub d_msg: Option<usize>,
    /// Cluster count [default: ceil(sqrt(N))].
    #[arg(long)]
    pub n_clusters: Option<usize>,
    /// Decay rate in 1/s [default: ln2/3600].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Window length in seconds [default: 1800].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Split windows into sub-batches of at most this many events.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Scale relation logits by 1/sqrt(d_rel).
    #[arg(long)]
    pub relation_scale: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Event CSV `origin,destination,timestamp`.
    #[arg(long)]
    pub events: PathBuf,
    /// Catalog CSV `name,index`; without it node names are integer indices.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Node count when no catalog is given.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Start of the first window [default: first event floored to tau].
    #[arg(long)]
    pub t0: Option<f64>,
    /// Day length in seconds for the splits [default: 86400].
    #[arg(long)]
    pub day_length: Option<f64>,
    /// Training days [default: 14].
    #[arg(long)]
    pub train_days: Option<u32>,
    /// Validation days [default: 2].
    #[arg(long)]
    pub val_days: Option<u32>,
    /// Test days [default: 2].
    #[arg(long)]
    pub test_days: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory (events.csv, catalog.csv, synth.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Node count [default: 24].
    #[arg(long)]
    pub n: Option<usize>,
    /// Community count [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    /// Log-scale spread of daily community activity [default: 0].
    #[arg(long)]
    pub day_level_spread: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV to write.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Maximum epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Early-stopping patience [default: 10].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report JSON to write (printed to stdout otherwise).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also score the historical-average baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Prediction CSV to write for the test windows.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prediction CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Which targets to predict.
    #[arg(long, value_enum, default_value = "test")]
    pub phase: PhaseArg,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of random events.
    #[arg(long, default_value_t = 10_000)]
    pub events: usize,
    /// Number of nodes.
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    /// Representation width.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Sub-batch cap.
    #[arg(long)]
    pub cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Use the built-in toy instance (N=3, d=4, two heads, two clusters).
    #[arg(long)]
    pub toy: bool,
    /// Node count for a non-toy instance.
    #[arg(long, default_value_t = 4)]
    pub nodes: usize,
    /// Per-coordinate CSV report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Relative error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Coordinates sampled per array.
    #[arg(long, default_value_t = 64)]
    pub max_coords: usize,
}

#[derive(Debug, Args)]
pub struct ExportRepsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated node indices [default: all].
    #[arg(long, value_delimiter = ',')]
    pub node: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportRelationsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write weights after every batch instead of only the last.
    #[arg(long)]
    pub every_batch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub t0: Option<f64>,
    pub day_length: f64,
    pub train_days: u32,
    pub val_days: u32,
    pub test_days: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { t0: None, day_length: 86_400.0, train_days: 14, val_days: 2, test_days: 2 }
    }
}

/// Everything a run depends on; file values are overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub hyper: HyperParams,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub splits: SplitConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn apply_common(&mut self, c: &CommonArgs) {
        if let Some(seed) = c.seed {
            self.train.seed = seed;
            self.synth.seed = seed;
        }
    }

    fn apply_model(&mut self, m: &ModelArgs) {
        let h = &mut self.hyper;
        if let Some(d) = m.d {
            h.d = d;
            h.d_msg = m.d_msg.unwrap_or(d);
        }
        if let Some(v) = m.heads {
            h.heads = v;
        }
        if m.d.is_some() || m.heads.is_some() {
            h.d_rel = (h.d / h.heads.max(1)).max(1);
        }
        if let Some(v) = m.d_rel {
            h.d_rel = v;
        }
        if let Some(v) = m.d_msg {
            h.d_msg = v;
        }
        if let Some(v) = m.n_clusters {
            h.n_clusters = Some(v);
        }
        if let Some(v) = m.lambda {
            h.lambda = v;
        }
        if let Some(v) = m.tau {
            h.tau = v;
        }
        if let Some(v) = m.cap {
            h.cap = Some(v);
        }
        h.relation_scale |= m.relation_scale;
        for a in &m.ablation {
            match a {
                AblationFlag::NoMl => h.ablation.no_multilevel = true,
                AblationFlag::NoMu => h.ablation.no_weighted_update = true,
                AblationFlag::MseLoss => h.ablation.mse_loss = true,
            }
        }
    }

    fn apply_data(&mut self, d: &DataArgs) {
        let s = &mut self.splits;
        if d.t0.is_some() {
            s.t0 = d.t0;
        }
        if let Some(v) = d.day_length {
            s.day_length = v;
        }
        if let Some(v) = d.train_days {
            s.train_days = v;
        }
        if let Some(v) = d.val_days {
            s.val_days = v;
        }
        if let Some(v) = d.test_days {
            s.test_days = v;
        }
    }
}

/// Failure of a command: usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("UsageError: {msg}");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("{}: {e}", e.class());
            1
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::OracleCheck(a) => cmd_oracle(a),
        Command::GradCheck(a) => cmd_grad(a),
        Command::ExportReps(a) => cmd_export_reps(a),
        Command::ExportRelations(a) => cmd_export_relations(a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply_common(&a.common);
    if let Some(n) = a.n {
        cfg.synth.n = n;
    }
    if let Some(k) = a.k {
        cfg.synth.k = k;
        if a.common.config.is_none() {
            cfg.synth.profile = crate::synth::commuter_profile(k);
        }
    }
    if let Some(s) = a.day_level_spread {
        cfg.synth.day_level_spread = s;
    }
    let data = generate(&cfg.synth)?;
    create_dir(&a.out)?;
    write_events(&a.out.join("events.csv"), &data.events, &data.catalog)?;
    data.catalog.save(&a.out.join("catalog.csv"))?;
    write_json(&cfg.synth, Some(&a.out.join("synth.json")))?;
    log::info!("wrote {} events for {} nodes to {}", data.events.len(), cfg.synth.n, a.out.display());
    Ok(())
}

struct Dataset {
    catalog: NodeCatalog,
    events: Vec<TransactionEvent>,
    splits: Splits,
}

fn load_data(d: &DataArgs, cfg: &RunConfig) -> std::result::Result<Dataset, Failure> {
    let catalog = match (&d.catalog, d.nodes) {
        (Some(path), _) => NodeCatalog::load(path)?,
        (None, Some(n)) => NodeCatalog::indexed(n),
        (None, None) => return Err(Failure::Usage("either --catalog or --nodes is required".into())),
    };
    let events = read_events(&d.events, &catalog)?;
    let s = &cfg.splits;
    let t0 = s.t0.unwrap_or_else(|| default_t0(&events, cfg.hyper.tau));
    let splits = Splits::by_days(t0, s.day_length, s.train_days, s.val_days, s.test_days);
    splits.validate()?;
    Ok(Dataset { catalog, events, splits })
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply_common(&a.common);
    cfg.apply_model(&a.model);
    cfg.apply_data(&a.data);
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    let data = load_data(&a.data, &cfg)?;
    let outcome = train(&data.events, &data.catalog, &cfg.hyper, &cfg.train, &data.splits)?;
    save_checkpoint(&Checkpoint::from_model(&outcome.model, Some(&outcome.optimizer)), &a.out)?;
    if let Some(path) = &a.history {
        write_history(&outcome.history, create_file(path)?)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        best_epoch: usize,
        epochs: usize,
        best_val_mae: f64,
        config: &'a RunConfig,
        config_hash: String,
    }
    let best = &outcome.history[outcome.best_epoch - 1];
    write_json(
        &Summary {
            best_epoch: outcome.best_epoch,
            epochs: outcome.history.len(),
            best_val_mae: best.val_mae,
            config: &cfg,
            config_hash: cfg.hash(),
        },
        None,
    )?;
    Ok(())
}

fn load_model(path: &Path, data: &Dataset) -> Result<Model> {
    let model = load_checkpoint(path)?.into_model()?;
    if model.dims.n != data.catalog.len() {
        return Err(Error::DimensionMismatch {
            context: "checkpoint node count",
            expected: data.catalog.len().to_string(),
            actual: model.dims.n.to_string(),
        });
    }
    Ok(model)
}

/// Config used for a checkpoint-driven command: the checkpoint's hyperparameters with
/// file and flag overrides for the data side.
fn checkpoint_config(common: &CommonArgs, d: &DataArgs, checkpoint: &Path) -> std::result::Result<(RunConfig, Model, Dataset), Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_common(common);
    cfg.apply_data(d);
    let ckpt = load_checkpoint(checkpoint)?;
    cfg.hyper = ckpt.hyper.clone();
    let data = load_data(d, &cfg)?;
    let model = load_model(checkpoint, &data)?;
    Ok((cfg, model, data))
}

#[derive(Serialize)]
struct ScopeReport<'a> {
    #[serde(flatten)]
    metrics: &'a MetricReport,
    config_hash: &'a str,
}

fn cmd_evaluate(a: EvalArgs) -> CmdResult {
    let (cfg, model, data) = checkpoint_config(&a.common, &a.data, &a.checkpoint)?;
    let stream = PreparedStream::new(&data.events, data.catalog.len(), &model.hyper, &data.splits)?;
    let (report, preds) = evaluate(&model, &stream)?;
    let hash = cfg.hash();
    let scoped = |r: &EvaluationReport| -> Vec<serde_json::Value> {
        [&r.all_pairs, &r.above_average]
            .into_iter()
            .map(|m| serde_json::to_value(ScopeReport { metrics: m, config_hash: &hash }).expect("report serializes"))
            .collect()
    };
    let mut out = serde_json::json!({ "model": scoped(&report) });
    if a.baseline {
        let (ha, unseen) = ha_predictions(&data.events, &stream, data.splits.t0, data.splits.train_end)?;
        let ha_report = EvaluationReport::from_predictions(&ha)?;
        out["historical_average"] = serde_json::Value::Array(scoped(&ha_report));
        out["historical_average_unseen_slots"] = unseen.into();
    }
    write_json(&out, a.report.as_deref())?;
    if let Some(path) = &a.predictions {
        let catalog = &data.catalog;
        write_predictions(&preds, &|i| catalog.name(i), create_file(path)?)?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let (_, model, data) = checkpoint_config(&a.common, &a.data, &a.checkpoint)?;
    let stream = PreparedStream::new(&data.events, data.catalog.len(), &model.hyper, &data.splits)?;
    let phase = match a.phase {
        PhaseArg::Train => Some(Phase::Train),
        PhaseArg::Validation => Some(Phase::Validation),
        PhaseArg::Test => Some(Phase::Test),
        PhaseArg::All => None,
    };
    let preds = predict_stream(&model, &stream, phase)?;
    let catalog = &data.catalog;
    write_predictions(&preds, &|i| catalog.name(i), create_file(&a.out)?)?;
    log::info!("wrote {} prediction windows to {}", preds.len(), a.out.display());
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> CmdResult {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let opts = OracleCheckOptions {
        events: a.events,
        nodes: a.nodes,
        d: a.dim,
        lambda: cfg.hyper.lambda,
        tau: cfg.hyper.tau,
        cap: a.cap,
        seed: a.common.seed.unwrap_or(cfg.train.seed),
        ..OracleCheckOptions::default()
    };
    let report = oracle_check(&opts)?;
    write_json(&report, None)?;
    if report.passed {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("oracle mismatch {:e} above {:e}", report.max_rel_error, report.tol)).into())
    }
}

fn cmd_grad(a: GradArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply_common(&a.common);
    cfg.apply_model(&a.model);
    let seed = cfg.train.seed;
    let inst = if a.toy { toy_instance(seed)? } else { grad_instance(cfg.hyper.clone(), a.nodes, seed)? };
    let opts = FdOptions { tol: a.tol, max_coords: a.max_coords, seed, ..FdOptions::default() };
    let report = grad_check(&inst, &opts)?;
    if let Some(path) = &a.report {
        report.write_csv(create_file(path)?)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        arrays: &'a [crate::autodiff::FdArrayReport],
        max_rel_error: f64,
        tol: f64,
        passed: bool,
    }
    write_json(
        &Summary { arrays: &report.arrays, max_rel_error: report.max_rel_error(), tol: a.tol, passed: report.passed() },
        None,
    )?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("gradient mismatch {:e} above {:e}", report.max_rel_error(), a.tol)).into())
    }
}

fn cmd_export_reps(a: ExportRepsArgs) -> CmdResult {
    let (_, model, data) = checkpoint_config(&a.common, &a.data, &a.checkpoint)?;
    let stream = PreparedStream::new(&data.events, data.catalog.len(), &model.hyper, &data.splits)?;
    let nodes: Vec<usize> = if a.node.is_empty() { (0..model.dims.n).collect() } else { a.node };
    if let Some(&bad) = nodes.iter().find(|&&i| i >= model.dims.n) {
        return Err(Failure::Usage(format!("node {bad} is out of range for {} nodes", model.dims.n)));
    }
    let rows = export_representations(&model, &stream, &nodes, create_file(&a.out)?)?;
    log::info!("wrote {rows} representation rows to {}", a.out.display());
    Ok(())
}

fn cmd_export_relations(a: ExportRelationsArgs) -> CmdResult {
    let (_, model, data) = checkpoint_config(&a.common, &a.data, &a.checkpoint)?;
    if model.hyper.ablation.no_multilevel {
        return Err(Failure::Usage("export-relations needs a model with the multi-level structure".into()));
    }
    let stream = PreparedStream::new(&data.events, data.catalog.len(), &model.hyper, &data.splits)?;
    let rows = export_relations(&model, &stream, a.every_batch, create_file(&a.out)?)?;
    log::info!("wrote {rows} relation rows to {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_model(&ModelArgs { d: Some(32), heads: Some(4), ablation: vec![AblationFlag::NoMl], ..ModelArgs::default() });
        assert_eq!((cfg.hyper.d, cfg.hyper.d_msg, cfg.hyper.d_rel), (32, 32, 8));
        assert!(cfg.hyper.ablation.no_multilevel);
        cfg.apply_common(&CommonArgs { config: None, seed: Some(9) });
        assert_eq!((cfg.train.seed, cfg.synth.seed), (9, 9));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), RunConfig::default().hash());
        let mut b = RunConfig::default();
        b.train.lr = 2e-4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_checkpoint_is_a_usage_error() {
        assert_eq!(run(["cmod", "evaluate", "--events", "e.csv", "--nodes", "2"]), 2);
        assert_eq!(run(["cmod", "frobnicate"]), 2);
    }
}
