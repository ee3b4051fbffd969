//! The per-batch pipeline: messages, memory updates, attention hierarchy, fusion and the
//! pairwise output head, plus the masked OD loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ingest::{EventBatch, OdMatrix};
use crate::matrix::Matrix;
use crate::memory::{aggregate_messages, station_decay, DecayConfig, MessageLayout, Messages};
use crate::multilevel::{
    compute_relations, fuse, project_area_message, project_cluster_messages, update_level_memories_on_tape,
    HeadLayout, RelationValues, RelationWeights,
};
use crate::nn::{mlp_forward, uniform, Mlp};

/// Variant switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop clusters, area and fusion; `Z = [r ; 0 ; 0]`.
    pub no_multilevel: bool,
    /// All decay factors and message weights set to 1.
    pub no_weighted_update: bool,
    /// Unmasked squared error.
    pub mse_loss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lambda: f64,
    pub tau: f64,
    pub heads: usize,
    pub d: usize,
    /// Per-head width of the relation projections.
    pub d_rel: usize,
    pub d_msg: usize,
    /// Cluster count; `None` means `ceil(sqrt(N))`.
    pub n_clusters: Option<usize>,
    /// Maximum events per memory update; `None` updates once per window.
    pub cap: Option<usize>,
    /// Scale relation logits by `1/sqrt(d_rel)`.
    pub relation_scale: bool,
    pub ablation: Ablation,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: DecayConfig::DEFAULT_LAMBDA,
            tau: 1800.0,
            heads: 8,
            d: 256,
            d_rel: 32,
            d_msg: 256,
            n_clusters: None,
            cap: None,
            relation_scale: false,
            ablation: Ablation::default(),
        }
    }
}

impl HyperParams {
    /// A small configuration with the default head layout rules.
    pub fn small(d: usize, heads: usize) -> Self {
        Self { d, heads, d_rel: (d / heads).max(1), d_msg: d, ..Self::default() }
    }

    pub fn clusters_for(&self, n: usize) -> usize {
        self.n_clusters.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).max(1)
    }

    pub fn decay_config(&self) -> DecayConfig {
        DecayConfig { lambda: self.lambda, d: self.d, weighted: !self.ablation.no_weighted_update }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.heads == 0 || self.d == 0 || self.d_rel == 0 || self.d_msg == 0 {
            return bad("heads and all dimensions must be at least 1".into());
        }
        if self.d_msg % self.heads != 0 {
            return bad(format!("d_msg {} is not divisible by {} heads", self.d_msg, self.heads));
        }
        if self.n_clusters == Some(0) {
            return bad("n_clusters must be at least 1".into());
        }
        if self.cap == Some(0) {
            return bad("cap must be at least 1".into());
        }
        Ok(())
    }
}

/// Sizes that depend on the node catalog as well as the hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n: usize,
    pub d_f: usize,
    pub n_c: usize,
    pub d: usize,
    pub d_rel: usize,
    pub d_msg: usize,
    pub heads: usize,
}

impl ModelDims {
    pub fn new(hyper: &HyperParams, n: usize, d_f: usize) -> Self {
        Self {
            n,
            d_f,
            n_c: hyper.clusters_for(n),
            d: hyper.d,
            d_rel: hyper.d_rel,
            d_msg: hyper.d_msg,
            heads: hyper.heads,
        }
    }

    /// Width of an event representation `[r ; F ; role]`.
    pub fn d_s(&self) -> usize {
        self.d + self.d_f + 1
    }
}

/// Every trainable array, generic over storage (`Matrix` values or tape `Var`s).
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub wc1: T,
    pub wc2: T,
    pub wg1: T,
    pub wg2: T,
    pub wc3: T,
    pub wg3: T,
    pub station_mlp: Mlp<T>,
    pub cluster_mlp: Mlp<T>,
    pub area_mlp: Mlp<T>,
    pub out_mlp: Mlp<T>,
    pub cluster_init: T,
    pub area_init: T,
}

pub type ModelParams = Params<Matrix>;

impl<T> Params<T> {
    /// Arrays in canonical (checkpoint) order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("wc1".into(), &self.wc1),
            ("wc2".into(), &self.wc2),
            ("wg1".into(), &self.wg1),
            ("wg2".into(), &self.wg2),
            ("wc3".into(), &self.wc3),
            ("wg3".into(), &self.wg3),
        ];
        for (prefix, mlp) in [
            ("station_mlp", &self.station_mlp),
            ("cluster_mlp", &self.cluster_mlp),
            ("area_mlp", &self.area_mlp),
            ("out_mlp", &self.out_mlp),
        ] {
            for (name, v) in mlp.parts() {
                out.push((format!("{prefix}.{name}"), v));
            }
        }
        out.push(("cluster_init".into(), &self.cluster_init));
        out.push(("area_init".into(), &self.area_init));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> =
            vec![&mut self.wc1, &mut self.wc2, &mut self.wg1, &mut self.wg2, &mut self.wc3, &mut self.wg3];
        out.extend(self.station_mlp.parts_mut());
        out.extend(self.cluster_mlp.parts_mut());
        out.extend(self.area_mlp.parts_mut());
        out.extend(self.out_mlp.parts_mut());
        out.push(&mut self.cluster_init);
        out.push(&mut self.area_init);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        Params {
            wc1: f(&self.wc1),
            wc2: f(&self.wc2),
            wg1: f(&self.wg1),
            wg2: f(&self.wg2),
            wc3: f(&self.wc3),
            wg3: f(&self.wg3),
            station_mlp: self.station_mlp.map(&mut f),
            cluster_mlp: self.cluster_mlp.map(&mut f),
            area_mlp: self.area_mlp.map(&mut f),
            out_mlp: self.out_mlp.map(&mut f),
            cluster_init: f(&self.cluster_init),
            area_init: f(&self.area_init),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }
}

impl ModelParams {
    pub fn arrays(&self) -> Vec<&Matrix> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    pub fn to_vec(&self) -> Vec<Matrix> {
        self.arrays().into_iter().cloned().collect()
    }

    /// Rebuilds params from arrays in canonical order, shapes taken from `self`.
    pub fn with_arrays(&self, arrays: &[Matrix]) -> Result<Self> {
        let mut out = self.clone();
        let names = self.names();
        let slots = out.arrays_mut();
        if slots.len() != arrays.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter arrays",
                expected: slots.len().to_string(),
                actual: arrays.len().to_string(),
            });
        }
        for ((slot, a), name) in slots.into_iter().zip(arrays).zip(names) {
            if slot.shape() != a.shape() {
                return Err(Error::ShapeMismatch { name, found: a.shape(), expected: slot.shape() });
            }
            *slot = a.clone();
        }
        Ok(out)
    }

    pub fn count(&self) -> usize {
        self.arrays().iter().map(|m| m.len()).sum()
    }

    /// Checks every array against the shapes `dims` implies.
    pub fn check_shapes(&self, dims: &ModelDims) -> Result<()> {
        let expected = init_params(dims, 0);
        for ((name, got), (_, want)) in self.named().into_iter().zip(expected.named()) {
            if got.shape() != want.shape() {
                return Err(Error::ShapeMismatch { name, found: got.shape(), expected: want.shape() });
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
    }
}

impl Params<Var> {
    /// Gradients in canonical order (zeros for arrays the loss did not reach).
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<Matrix> {
        self.named().into_iter().map(|(_, &v)| grads.get_or_zeros(v, tape.shape(v))).collect()
    }
}

/// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero,
/// initial cluster/area memories uniform in `±1/sqrt(d)`.
pub fn init_params(dims: &ModelDims, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, d_s, d_msg) = (dims.d, dims.d_s(), dims.d_msg);
    let rel = dims.heads * dims.d_rel;
    let w = |rng: &mut ChaCha8Rng, rows, cols: usize| uniform(rng, rows, cols, 1.0 / (cols as f64).sqrt());
    Params {
        wc1: w(&mut rng, rel, d),
        wc2: w(&mut rng, rel, d),
        wg1: w(&mut rng, rel, d),
        wg2: w(&mut rng, rel, d),
        wc3: w(&mut rng, d_msg, d_s),
        wg3: w(&mut rng, d_msg, d_msg),
        station_mlp: Mlp::init(&mut rng, d_s, d, d),
        cluster_mlp: Mlp::init(&mut rng, d_msg, d, d),
        area_mlp: Mlp::init(&mut rng, d_msg, d, d),
        out_mlp: Mlp::init(&mut rng, 6 * d, d, 1),
        cluster_init: w(&mut rng, dims.n_c, d),
        area_init: w(&mut rng, 1, d),
    }
}

/// The model's evolving state. Cluster and area memories are `None` until the first
/// update, meaning "use the trainable initial values".
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub station_a: Matrix,
    pub station_b: Vec<f64>,
    pub cluster: Option<Matrix>,
    pub area: Option<Matrix>,
    pub last_update: f64,
}

impl MemoryBank {
    pub fn new(n: usize, d: usize, t0: f64) -> Self {
        Self { station_a: Matrix::zeros(n, d), station_b: vec![1.0; n], cluster: None, area: None, last_update: t0 }
    }

    pub fn n(&self) -> usize {
        self.station_b.len()
    }

    /// `r_i = a_i / b_i` for every station.
    pub fn representations(&self) -> Result<Matrix> {
        let mut r = self.station_a.clone();
        for (i, &b) in self.station_b.iter().enumerate() {
            if !(b > 0.0) {
                return Err(Error::DegenerateNormalizer { node: i, value: b });
            }
            r.row_mut(i).iter_mut().for_each(|x| *x /= b);
        }
        Ok(r)
    }
}

/// Intermediate values of one [`step`], kept for inspection and export.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub messages: Messages,
    pub relations: Option<RelationValues>,
    pub cluster_msgs: Option<Matrix>,
    pub area_msg: Option<Matrix>,
}

#[derive(Debug)]
pub struct StepOutput {
    pub bank: MemoryBank,
    /// Fused station representations `N×3d`.
    pub z: Var,
    pub trace: StepTrace,
}

/// Advances `bank` over `batch` and records the fused representations on `tape`.
///
/// The incoming bank is a constant: gradients reach the parameters only through this
/// batch's computation (and through the initial cluster/area memories while the bank
/// still uses them).
pub fn step(
    tape: &mut Tape,
    bank: &MemoryBank,
    batch: &EventBatch,
    params: &Params<Var>,
    hyper: &HyperParams,
    features: &Matrix,
) -> Result<StepOutput> {
    let t = batch.window_end;
    if t < bank.last_update {
        return Err(Error::TimeRegression { t, last: bank.last_update });
    }
    if batch.window_start != bank.last_update {
        return Err(Error::InvalidConfig(format!(
            "batch starts at {} but memories were last updated at {}",
            batch.window_start, bank.last_update
        )));
    }
    let n = bank.n();
    let d = bank.station_a.cols();
    if features.rows() != n {
        return Err(Error::DimensionMismatch {
            context: "node features",
            expected: format!("{n} rows"),
            actual: features.rows().to_string(),
        });
    }
    let cfg = hyper.decay_config();
    let decay = cfg.decay(t - bank.last_update);

    // Station level: messages from pre-update representations, then a' = k a + MLP(p).
    let reps = bank.representations()?;
    let msgs = aggregate_messages(batch, &reps, features, MessageLayout::FULL, &cfg);
    let active_rows: Vec<f64> = msgs.q.iter().map(|&q| if q > 0.0 { 1.0 } else { 0.0 }).collect();
    let any_active = active_rows.iter().any(|&a| a > 0.0);

    let station_k: Vec<f64> = bank.station_b.iter().map(|&b| station_decay(decay, b)).collect();
    let mut decayed_a = bank.station_a.clone();
    for (i, &k) in station_k.iter().enumerate() {
        decayed_a.row_mut(i).iter_mut().for_each(|x| *x *= k);
    }
    let decayed_a = tape.constant(decayed_a);
    let new_a = if any_active {
        let p = tape.constant(msgs.p.clone());
        let inc = mlp_forward(tape, &params.station_mlp, p)?;
        let inc = tape.scale_rows(inc, active_rows)?;
        tape.add(decayed_a, inc)?
    } else {
        decayed_a
    };
    let new_b: Vec<f64> = bank.station_b.iter().zip(&msgs.q).zip(&station_k).map(|((b, q), k)| k * b + q).collect();
    let inv_b: Vec<f64> = new_b.iter().map(|b| 1.0 / b).collect();
    let new_r = tape.scale_rows(new_a, inv_b)?;

    if hyper.ablation.no_multilevel {
        let zeros = tape.constant(Matrix::zeros(n, 2 * d));
        let z = tape.concat_cols(&[new_r, zeros])?;
        let bank = MemoryBank {
            station_a: tape.value(new_a).clone(),
            station_b: new_b,
            cluster: bank.cluster.clone(),
            area: bank.area.clone(),
            last_update: t,
        };
        let trace = StepTrace { messages: msgs, relations: None, cluster_msgs: None, area_msg: None };
        return Ok(StepOutput { bank, z, trace });
    }

    // Levels above: relations from the pre-update representations.
    let station_reps = tape.constant(reps);
    let cluster_mem = match &bank.cluster {
        Some(m) => tape.constant(m.clone()),
        None => params.cluster_init,
    };
    let area_mem = match &bank.area {
        Some(m) => tape.constant(m.clone()),
        None => params.area_init,
    };
    let layout = HeadLayout {
        heads: hyper.heads,
        d_rel: hyper.d_rel,
        logit_scale: if hyper.relation_scale { 1.0 / (hyper.d_rel as f64).sqrt() } else { 1.0 },
    };
    let weights = RelationWeights { wc1: params.wc1, wc2: params.wc2, wg1: params.wg1, wg2: params.wg2 };
    let rel = compute_relations(tape, station_reps, cluster_mem, area_mem, &weights, &layout)?;

    let normalized = tape.constant(msgs.normalized());
    let cluster_msgs = project_cluster_messages(tape, &rel, normalized, params.wc3)?;
    let area_msg = project_area_message(tape, &rel, cluster_msgs, params.wg3)?;
    let (new_c, new_g) = update_level_memories_on_tape(
        tape,
        cluster_mem,
        area_mem,
        cluster_msgs,
        area_msg,
        decay,
        &params.cluster_mlp,
        &params.area_mlp,
        any_active,
    )?;
    let z = fuse(tape, new_r, new_c, new_g, &rel)?;

    let trace = StepTrace {
        messages: msgs,
        relations: Some(rel.values(tape)),
        cluster_msgs: Some(tape.value(cluster_msgs).clone()),
        area_msg: Some(tape.value(area_msg).clone()),
    };
    let bank = MemoryBank {
        station_a: tape.value(new_a).clone(),
        station_b: new_b,
        cluster: Some(tape.value(new_c).clone()),
        area: Some(tape.value(new_g).clone()),
        last_update: t,
    };
    Ok(StepOutput { bank, z, trace })
}

/// Raw (unclamped) pairwise predictions `MLP([Z_i ; Z_j])` as an `N×N` tape value.
///
/// The first layer is split into its `Z_i` and `Z_j` halves so the `N²` hidden rows are
/// sums of two `N`-row products.
pub fn predict_od(tape: &mut Tape, z: Var, out_mlp: &Mlp<Var>) -> Result<Var> {
    let (n, width) = tape.shape(z);
    let (hidden, w_in) = tape.shape(out_mlp.w1);
    if w_in != 2 * width {
        return Err(Error::DimensionMismatch {
            context: "output head input",
            expected: (2 * width).to_string(),
            actual: w_in.to_string(),
        });
    }
    let w_origin = tape.slice_cols(out_mlp.w1, 0, width)?;
    let w_dest = tape.slice_cols(out_mlp.w1, width, width)?;
    let u = tape.matmul_nt(z, w_origin)?;
    let v = tape.matmul_nt(z, w_dest)?;
    let h = tape.pairwise_sum(u, v)?;
    let h = tape.add_bias(h, out_mlp.b1)?;
    let h = tape.relu(h);
    debug_assert_eq!(tape.shape(h), (n * n, hidden));
    let y = tape.matmul_nt(h, out_mlp.w2)?;
    let y = tape.add_bias(y, out_mlp.b2)?;
    tape.reshape(y, n, n)
}

/// Negative predictions replaced by zero.
pub fn clamp_predictions(raw: &Matrix) -> OdMatrix {
    OdMatrix(raw.map(|x| x.max(0.0)))
}

/// Per-entry weight of the OD loss: zero only where the truth is zero and the
/// prediction is not positive. With `mse` every weight is one.
pub fn loss_mask(raw: &Matrix, truth: &OdMatrix, mse: bool) -> Matrix {
    raw.zip_map(truth.values(), |yhat, y| if mse || y > 0.0 || yhat > 0.0 { 1.0 } else { 0.0 })
}

/// Masked mean squared error over all `N²` entries, recorded on the tape.
pub fn od_loss(tape: &mut Tape, raw: Var, truth: &OdMatrix, mse: bool) -> Result<Var> {
    if tape.shape(raw) != truth.values().shape() {
        return Err(Error::DimensionMismatch {
            context: "loss",
            expected: format!("{:?}", truth.values().shape()),
            actual: format!("{:?}", tape.shape(raw)),
        });
    }
    let mask = loss_mask(tape.value(raw), truth, mse);
    let y = tape.constant(truth.values().clone());
    let diff = tape.sub(raw, y)?;
    let sq = tape.square(diff);
    let masked = tape.mul_const(sq, mask)?;
    Ok(tape.mean(masked))
}

/// Plain evaluation of [`od_loss`].
pub fn od_loss_value(raw: &Matrix, truth: &OdMatrix, mse: bool) -> f64 {
    let mask = loss_mask(raw, truth, mse);
    let total: f64 = raw
        .as_slice()
        .iter()
        .zip(truth.values().as_slice())
        .zip(mask.as_slice())
        .map(|((yhat, y), m)| m * (y - yhat) * (y - yhat))
        .sum();
    total / raw.len().max(1) as f64
}

/// Parameters together with everything needed to run them.
#[derive(Debug, Clone)]
pub struct Model {
    pub hyper: HyperParams,
    pub dims: ModelDims,
    pub params: ModelParams,
    pub features: Matrix,
}

/// Result of running one batch without gradients.
#[derive(Debug)]
pub struct Forward {
    pub bank: MemoryBank,
    pub z: Matrix,
    pub raw: Matrix,
    pub trace: StepTrace,
}

impl Model {
    pub fn new(hyper: HyperParams, features: Matrix, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let dims = ModelDims::new(&hyper, features.rows(), features.cols());
        let params = init_params(&dims, seed);
        Ok(Self { hyper, dims, params, features })
    }

    pub fn with_params(hyper: HyperParams, features: Matrix, params: ModelParams) -> Result<Self> {
        hyper.validate()?;
        let dims = ModelDims::new(&hyper, features.rows(), features.cols());
        params.check_shapes(&dims)?;
        Ok(Self { hyper, dims, params, features })
    }

    pub fn fresh_bank(&self, t0: f64) -> MemoryBank {
        MemoryBank::new(self.dims.n, self.dims.d, t0)
    }

    /// Runs one batch and predicts the next window, without recording gradients.
    pub fn forward(&self, bank: &MemoryBank, batch: &EventBatch) -> Result<Forward> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let out = step(&mut tape, bank, batch, &vars, &self.hyper, &self.features)?;
        let raw = predict_od(&mut tape, out.z, &vars.out_mlp)?;
        let raw_value = tape.value(raw).clone();
        if !raw_value.is_finite() {
            return Err(Error::NonFinite { context: format!("predictions for batch ending at {}", batch.window_end) });
        }
        Ok(Forward { bank: out.bank, z: tape.value(out.z).clone(), raw: raw_value, trace: out.trace })
    }

    /// One batch with gradients: returns the advanced bank, the loss and the parameter
    /// gradients in canonical order.
    pub fn loss_and_gradients(
        &self,
        bank: &MemoryBank,
        batch: &EventBatch,
        truth: &OdMatrix,
    ) -> Result<(MemoryBank, f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let out = step(&mut tape, bank, batch, &vars, &self.hyper, &self.features)?;
        let raw = predict_od(&mut tape, out.z, &vars.out_mlp)?;
        let loss = od_loss(&mut tape, raw, truth, self.hyper.ablation.mse_loss)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("loss for batch ending at {}", batch.window_end) });
        }
        let grads = tape.backward(loss)?;
        let g = vars.gradients(&tape, &grads);
        Ok((out.bank, value, g))
    }

    /// Loss of one batch from a fixed bank, as a function of the parameter arrays.
    pub fn loss_at(&self, arrays: &[Matrix], bank: &MemoryBank, batch: &EventBatch, truth: &OdMatrix) -> Result<f64> {
        let params = self.params.with_arrays(arrays)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let out = step(&mut tape, bank, batch, &vars, &self.hyper, &self.features)?;
        let raw = predict_od(&mut tape, out.z, &vars.out_mlp)?;
        let loss = od_loss(&mut tape, raw, truth, self.hyper.ablation.mse_loss)?;
        Ok(tape.value(loss).item())
    }
}
