//! Station/cluster/area attention hierarchy.
//!
//! Relations are bilinear scores between projected representations, one set per head.
//! Three normalized views are taken from them: over stations for each cluster (how cluster
//! messages are assembled), over clusters for each station (how cluster memories flow back
//! to stations), and over clusters for the single area node.

use crate::autodiff::{softmax_value, Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::memory::DecayConfig;
use crate::nn::{mlp_forward, Mlp};

/// Projection weights of the attention scores, heads stacked along rows (`(H·d')×d`).
#[derive(Debug, Clone, Copy)]
pub struct RelationWeights {
    pub wc1: Var,
    pub wc2: Var,
    pub wg1: Var,
    pub wg2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub heads: usize,
    /// Width of each head's score projection.
    pub d_rel: usize,
    /// Multiplier on the logits (1 for plain bilinear scores).
    pub logit_scale: f64,
}

/// Per-head relation logits and their normalized views, all on the tape.
#[derive(Debug, Clone)]
pub struct Relations {
    /// `N×N_c` station–cluster logits.
    pub ac: Vec<Var>,
    /// `N_c×1` cluster–area logits.
    pub ag: Vec<Var>,
    /// `ac` normalized over stations (columns sum to one).
    pub acm: Vec<Var>,
    /// `ag` normalized over clusters.
    pub agm: Vec<Var>,
    /// `ac` normalized over clusters (rows sum to one).
    pub ace: Vec<Var>,
    /// `ag` normalized over the area axis; all ones with a single area.
    pub age: Vec<Var>,
}

/// Plain copies of [`Relations`], indexed `[head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationValues {
    pub ac: Vec<Matrix>,
    pub ag: Vec<Matrix>,
    pub acm: Vec<Matrix>,
    pub agm: Vec<Matrix>,
    pub ace: Vec<Matrix>,
    pub age: Vec<Matrix>,
}

impl Relations {
    pub fn heads(&self) -> usize {
        self.ac.len()
    }

    pub fn values(&self, tape: &Tape) -> RelationValues {
        let get = |vs: &Vec<Var>| vs.iter().map(|&v| tape.value(v).clone()).collect();
        RelationValues {
            ac: get(&self.ac),
            ag: get(&self.ag),
            acm: get(&self.acm),
            agm: get(&self.agm),
            ace: get(&self.ace),
            age: get(&self.age),
        }
    }
}

impl RelationValues {
    /// Largest deviation from one of any normalized sum (station columns of `acm`,
    /// cluster columns of `agm`, station rows of `ace`).
    pub fn stochasticity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for h in 0..self.acm.len() {
            let (acm, agm, ace) = (&self.acm[h], &self.agm[h], &self.ace[h]);
            for j in 0..acm.cols() {
                let s: f64 = (0..acm.rows()).map(|i| acm.get(i, j)).sum();
                worst = worst.max((s - 1.0).abs());
            }
            let s: f64 = agm.as_slice().iter().sum();
            worst = worst.max((s - 1.0).abs());
            for i in 0..ace.rows() {
                worst = worst.max((ace.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }
}

fn check_cols(tape: &Tape, v: Var, expected: usize, context: &'static str) -> Result<()> {
    let (_, c) = tape.shape(v);
    if c != expected {
        return Err(Error::DimensionMismatch { context, expected: format!("{expected} columns"), actual: format!("{c}") });
    }
    Ok(())
}

/// Scores `Ac[h] = (r Wc1_hᵀ)(r^c Wc2_hᵀ)ᵀ` and `Ag[h] = (r^c Wg1_hᵀ)(r^g Wg2_hᵀ)ᵀ`
/// with their normalized views.
pub fn compute_relations(
    tape: &mut Tape,
    station_reps: Var,
    cluster_reps: Var,
    area_rep: Var,
    w: &RelationWeights,
    layout: &HeadLayout,
) -> Result<Relations> {
    let d = tape.shape(station_reps).1;
    check_cols(tape, cluster_reps, d, "cluster representations")?;
    check_cols(tape, area_rep, d, "area representation")?;
    let width = layout.heads * layout.d_rel;
    for (v, name) in [(w.wc1, "Wc1"), (w.wc2, "Wc2"), (w.wg1, "Wg1"), (w.wg2, "Wg2")] {
        if tape.shape(v) != (width, d) {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: format!("{width}x{d}"),
                actual: format!("{:?}", tape.shape(v)),
            });
        }
    }
    let rs = tape.matmul_nt(station_reps, w.wc1)?;
    let cs = tape.matmul_nt(cluster_reps, w.wc2)?;
    let cg = tape.matmul_nt(cluster_reps, w.wg1)?;
    let ga = tape.matmul_nt(area_rep, w.wg2)?;

    let mut rel = Relations { ac: vec![], ag: vec![], acm: vec![], agm: vec![], ace: vec![], age: vec![] };
    for h in 0..layout.heads {
        let off = h * layout.d_rel;
        let rs_h = tape.slice_cols(rs, off, layout.d_rel)?;
        let cs_h = tape.slice_cols(cs, off, layout.d_rel)?;
        let mut ac = tape.matmul_nt(rs_h, cs_h)?;
        let cg_h = tape.slice_cols(cg, off, layout.d_rel)?;
        let ga_h = tape.slice_cols(ga, off, layout.d_rel)?;
        let mut ag = tape.matmul_nt(cg_h, ga_h)?;
        if layout.logit_scale != 1.0 {
            ac = tape.scale(ac, layout.logit_scale);
            ag = tape.scale(ag, layout.logit_scale);
        }
        rel.acm.push(tape.softmax(ac, Axis::Rows));
        rel.ace.push(tape.softmax(ac, Axis::Cols));
        rel.agm.push(tape.softmax(ag, Axis::Rows));
        rel.age.push(tape.softmax(ag, Axis::Cols));
        rel.ac.push(ac);
        rel.ag.push(ag);
    }
    Ok(rel)
}

/// Cluster messages: per head `Σ_j Acm[h,j,i] · Wc3_h (p_j / q_j)`, heads concatenated.
///
/// `normalized_msgs` holds `p_j / q_j` per station (zero rows for idle stations);
/// `wc3` stacks the per-head output maps along rows (`d_msg×d_s`).
pub fn project_cluster_messages(tape: &mut Tape, rel: &Relations, normalized_msgs: Var, wc3: Var) -> Result<Var> {
    let heads = rel.heads();
    let (d_msg, d_s) = tape.shape(wc3);
    check_cols(tape, normalized_msgs, d_s, "station messages")?;
    if d_msg % heads != 0 {
        return Err(Error::DimensionMismatch {
            context: "message width",
            expected: format!("multiple of {heads}"),
            actual: d_msg.to_string(),
        });
    }
    let dh = d_msg / heads;
    let xw = tape.matmul_nt(normalized_msgs, wc3)?;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let block = tape.slice_cols(xw, h * dh, dh)?;
        parts.push(tape.matmul_t(rel.acm[h], true, block, false)?);
    }
    tape.concat_cols(&parts)
}

/// Area message: per head `Σ_i Agm[h,i] · Wg3_h p^c_i`, heads concatenated.
pub fn project_area_message(tape: &mut Tape, rel: &Relations, cluster_msgs: Var, wg3: Var) -> Result<Var> {
    let heads = rel.heads();
    let (d_msg, d_in) = tape.shape(wg3);
    check_cols(tape, cluster_msgs, d_in, "cluster messages")?;
    let dh = d_msg / heads;
    let pw = tape.matmul_nt(cluster_msgs, wg3)?;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let block = tape.slice_cols(pw, h * dh, dh)?;
        parts.push(tape.matmul_t(rel.agm[h], true, block, false)?);
    }
    tape.concat_cols(&parts)
}

/// Cluster and area memories (no normalizer at these levels).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelState {
    /// `N_c×d`
    pub cluster_mem: Matrix,
    /// `1×d`
    pub area_mem: Matrix,
    pub last_update: f64,
}

/// `a ← k·a + MLP(msg)` for clusters and the area, on the tape. The MLP terms are
/// skipped when `active` is false (the batch had no events).
#[allow(clippy::too_many_arguments)]
pub fn update_level_memories_on_tape(
    tape: &mut Tape,
    cluster_mem: Var,
    area_mem: Var,
    cluster_msgs: Var,
    area_msg: Var,
    decay: f64,
    cluster_mlp: &Mlp<Var>,
    area_mlp: &Mlp<Var>,
    active: bool,
) -> Result<(Var, Var)> {
    let c = tape.scale(cluster_mem, decay);
    let a = tape.scale(area_mem, decay);
    if !active {
        return Ok((c, a));
    }
    let dc = mlp_forward(tape, cluster_mlp, cluster_msgs)?;
    let da = mlp_forward(tape, area_mlp, area_msg)?;
    Ok((tape.add(c, dc)?, tape.add(a, da)?))
}

/// Plain-value form of [`update_level_memories_on_tape`] advancing `state` to `t`.
#[allow(clippy::too_many_arguments)]
pub fn update_level_memories(
    state: &LevelState,
    cluster_msgs: &Matrix,
    area_msg: &Matrix,
    t: f64,
    cluster_mlp: &Mlp<Matrix>,
    area_mlp: &Mlp<Matrix>,
    cfg: &DecayConfig,
    active: bool,
) -> Result<LevelState> {
    if t < state.last_update {
        return Err(Error::TimeRegression { t, last: state.last_update });
    }
    let mut tape = Tape::new();
    let c = tape.constant(state.cluster_mem.clone());
    let a = tape.constant(state.area_mem.clone());
    let cm = tape.constant(cluster_msgs.clone());
    let am = tape.constant(area_msg.clone());
    let cmlp = cluster_mlp.map(|m| tape.constant(m.clone()));
    let amlp = area_mlp.map(|m| tape.constant(m.clone()));
    let k = cfg.decay(t - state.last_update);
    let (c2, a2) = update_level_memories_on_tape(&mut tape, c, a, cm, am, k, &cmlp, &amlp, active)?;
    Ok(LevelState { cluster_mem: tape.value(c2).clone(), area_mem: tape.value(a2).clone(), last_update: t })
}

/// `Z = [r ; r^c' ; r^g']` with `r^c'_i = mean_h Σ_j Ace[h,i,j] a^c_j` and
/// `r^g'_i = mean_h Σ_j Σ_k Ace[h,i,j] Age[h,j,k] a^g_k`.
pub fn fuse(tape: &mut Tape, station_reps: Var, cluster_mem: Var, area_mem: Var, rel: &Relations) -> Result<Var> {
    let heads = rel.heads();
    let d = tape.shape(station_reps).1;
    check_cols(tape, cluster_mem, d, "cluster memory")?;
    check_cols(tape, area_mem, d, "area memory")?;
    let mut rc: Option<Var> = None;
    let mut rg: Option<Var> = None;
    for h in 0..heads {
        let c = tape.matmul(rel.ace[h], cluster_mem)?;
        let station_area = tape.matmul(rel.ace[h], rel.age[h])?;
        let g = tape.matmul(station_area, area_mem)?;
        rc = Some(match rc {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
        rg = Some(match rg {
            Some(acc) => tape.add(acc, g)?,
            None => g,
        });
    }
    let inv = 1.0 / heads as f64;
    let rc = tape.scale(rc.expect("at least one head"), inv);
    let rg = tape.scale(rg.expect("at least one head"), inv);
    tape.concat_cols(&[station_reps, rc, rg])
}

/// Plain evaluation of [`compute_relations`].
pub fn relation_values(
    station_reps: &Matrix,
    cluster_reps: &Matrix,
    area_rep: &Matrix,
    weights: [&Matrix; 4],
    layout: &HeadLayout,
) -> Result<RelationValues> {
    let mut tape = Tape::new();
    let r = tape.constant(station_reps.clone());
    let c = tape.constant(cluster_reps.clone());
    let g = tape.constant(area_rep.clone());
    let w = RelationWeights {
        wc1: tape.constant(weights[0].clone()),
        wc2: tape.constant(weights[1].clone()),
        wg1: tape.constant(weights[2].clone()),
        wg2: tape.constant(weights[3].clone()),
    };
    Ok(compute_relations(&mut tape, r, c, g, &w, layout)?.values(&tape))
}

/// Softmax helper shared with exporters.
pub fn normalize(logits: &Matrix, axis: Axis) -> Matrix {
    softmax_value(logits, axis)
}
