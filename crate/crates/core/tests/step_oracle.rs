//! The tape implementation of one batch step and the output head against a plain
//! nested-loop evaluation written from the model equations.

use cmod::memory::DecayConfig;
use cmod::nn::Mlp;
use cmod::{EventBatch, HyperParams, Matrix, MemoryBank, Model, ModelParams, TransactionEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> M {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mlp(m: &Mlp<Matrix>, x: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = (0..m.w1.rows())
        .map(|h| {
            let s: f64 = (0..x.len()).map(|k| m.w1.get(h, k) * x[k]).sum::<f64>() + m.b1.get(0, h);
            s.max(0.0)
        })
        .collect();
    (0..m.w2.rows())
        .map(|o| (0..hidden.len()).map(|h| m.w2.get(o, h) * hidden[h]).sum::<f64>() + m.b2.get(0, o))
        .collect()
}

/// `rows(W[off..off+len]) · x`
fn project(w: &Matrix, off: usize, len: usize, x: &[f64]) -> Vec<f64> {
    (0..len).map(|r| (0..x.len()).map(|k| w.get(off + r, k) * x[k]).sum()).collect()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

struct OracleState {
    a: M,
    b: Vec<f64>,
    c: M,
    g: Vec<f64>,
    t: f64,
}

struct OracleStep {
    state: OracleState,
    p: M,
    q: Vec<f64>,
    acm: Vec<M>,
    ace: Vec<M>,
    agm: Vec<Vec<f64>>,
    cluster_msgs: M,
    area_msg: Vec<f64>,
    z: M,
}

fn oracle_step(s: &OracleState, batch: &EventBatch, p: &ModelParams, hyper: &HyperParams, features: &Matrix) -> OracleStep {
    let n = s.b.len();
    let d = hyper.d;
    let heads = hyper.heads;
    let dr = hyper.d_rel;
    let n_c = s.c.len();
    let d_f = features.cols();
    let d_s = d + d_f + 1;
    let t = batch.window_end;
    let decay = |dt: f64| (-hyper.lambda * dt).exp();
    let k = decay(t - s.t);
    let r: M = (0..n).map(|i| s.a[i].iter().map(|x| x / s.b[i]).collect()).collect();

    // Messages.
    let mut pm = vec![vec![0.0; d_s]; n];
    let mut q = vec![0.0; n];
    for e in &batch.events {
        let w = decay(t - e.timestamp);
        let mut add = |node: usize, other: usize, role: f64| {
            q[node] += w;
            let mut sv = r[other].clone();
            sv.extend_from_slice(features.row(other));
            sv.push(role);
            for (x, v) in pm[node].iter_mut().zip(&sv) {
                *x += w * v;
            }
        };
        add(e.origin, e.destination, 1.0);
        if e.origin != e.destination {
            add(e.destination, e.origin, -1.0);
        }
    }

    // Station memories.
    let mut a2 = vec![vec![0.0; d]; n];
    let mut b2 = vec![0.0; n];
    for i in 0..n {
        let inc = if q[i] > 0.0 { mlp(&p.station_mlp, &pm[i]) } else { vec![0.0; d] };
        for x in 0..d {
            a2[i][x] = k * s.a[i][x] + inc[x];
        }
        b2[i] = k * s.b[i] + q[i];
    }
    let r2: M = (0..n).map(|i| a2[i].iter().map(|x| x / b2[i]).collect()).collect();

    // Relations from the pre-update representations.
    let (mut acm, mut ace, mut agm) = (vec![], vec![], vec![]);
    for h in 0..heads {
        let off = h * dr;
        let ac: M = (0..n)
            .map(|i| {
                (0..n_c)
                    .map(|j| dot(&project(&p.wc1, off, dr, &r[i]), &project(&p.wc2, off, dr, &s.c[j])))
                    .collect()
            })
            .collect();
        let ag: Vec<f64> =
            (0..n_c).map(|j| dot(&project(&p.wg1, off, dr, &s.c[j]), &project(&p.wg2, off, dr, &s.g))).collect();
        let m: M = (0..n)
            .map(|i| {
                (0..n_c).map(|j| ac[i][j].exp() / (0..n).map(|ii| ac[ii][j].exp()).sum::<f64>()).collect()
            })
            .collect();
        let e: M = (0..n)
            .map(|i| {
                (0..n_c).map(|j| ac[i][j].exp() / (0..n_c).map(|jj| ac[i][jj].exp()).sum::<f64>()).collect()
            })
            .collect();
        let total: f64 = ag.iter().map(|x| x.exp()).sum();
        acm.push(m);
        ace.push(e);
        agm.push(ag.iter().map(|x| x.exp() / total).collect::<Vec<f64>>());
    }

    // Messages to the upper levels.
    let dh = hyper.d_msg / heads;
    let norm: M =
        (0..n).map(|i| if q[i] > 0.0 { pm[i].iter().map(|x| x / q[i]).collect() } else { vec![0.0; d_s] }).collect();
    let mut cluster_msgs = vec![vec![0.0; hyper.d_msg]; n_c];
    for h in 0..heads {
        for (j, msg) in cluster_msgs.iter_mut().enumerate() {
            for i in 0..n {
                let proj = project(&p.wc3, h * dh, dh, &norm[i]);
                for x in 0..dh {
                    msg[h * dh + x] += acm[h][i][j] * proj[x];
                }
            }
        }
    }
    let mut area_msg = vec![0.0; hyper.d_msg];
    for h in 0..heads {
        for j in 0..n_c {
            let proj = project(&p.wg3, h * dh, dh, &cluster_msgs[j]);
            for x in 0..dh {
                area_msg[h * dh + x] += agm[h][j] * proj[x];
            }
        }
    }

    let active = q.iter().any(|&x| x > 0.0);
    let c2: M = (0..n_c)
        .map(|j| {
            let inc = if active { mlp(&p.cluster_mlp, &cluster_msgs[j]) } else { vec![0.0; d] };
            (0..d).map(|x| k * s.c[j][x] + inc[x]).collect()
        })
        .collect();
    let inc = if active { mlp(&p.area_mlp, &area_msg) } else { vec![0.0; d] };
    let g2: Vec<f64> = (0..d).map(|x| k * s.g[x] + inc[x]).collect();

    // Fusion.
    let z: M = (0..n)
        .map(|i| {
            let mut rc = vec![0.0; d];
            let mut rg = vec![0.0; d];
            for h in 0..heads {
                for j in 0..n_c {
                    for x in 0..d {
                        rc[x] += ace[h][i][j] * c2[j][x] / heads as f64;
                        rg[x] += ace[h][i][j] * g2[x] / heads as f64;
                    }
                }
            }
            let mut zi = r2[i].clone();
            zi.extend(rc);
            zi.extend(rg);
            zi
        })
        .collect();

    OracleStep {
        state: OracleState { a: a2, b: b2, c: c2, g: g2, t },
        p: pm,
        q,
        acm,
        ace,
        agm,
        cluster_msgs,
        area_msg,
        z,
    }
}

fn oracle_predictions(z: &M, out: &Mlp<Matrix>) -> M {
    z.iter()
        .map(|zi| {
            z.iter()
                .map(|zj| {
                    let mut x = zi.clone();
                    x.extend_from_slice(zj);
                    mlp(out, &x)[0]
                })
                .collect()
        })
        .collect()
}

fn assert_close(label: &str, got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len(), "{label}: length");
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        let err = (g - w).abs() / w.abs().max(1.0);
        assert!(err <= tol, "{label}[{k}]: {g} vs {w} (rel {err:e})");
    }
}

fn flat(m: &M) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn oracle_state(bank: &MemoryBank, model: &Model) -> OracleState {
    OracleState {
        a: rows(&bank.station_a),
        b: bank.station_b.clone(),
        c: rows(bank.cluster.as_ref().unwrap_or(&model.params.cluster_init)),
        g: bank.area.as_ref().unwrap_or(&model.params.area_init).row(0).to_vec(),
        t: bank.last_update,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, start: f64, end: f64, count: usize) -> EventBatch {
    let mut events: Vec<TransactionEvent> = (0..count)
        .map(|_| TransactionEvent::new(rng.random_range(0..n), rng.random_range(0..n), rng.random_range(start..end)))
        .collect();
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    EventBatch { events, window_start: start, window_end: end }
}

/// Runs `batches` through both implementations from a fresh bank and compares every
/// intermediate after every step.
fn compare_run(model: &Model, batches: &[EventBatch]) {
    let mut bank = model.fresh_bank(batches[0].window_start);
    let mut state = oracle_state(&bank, model);
    for (step, batch) in batches.iter().enumerate() {
        let fwd = model.forward(&bank, batch).unwrap();
        let o = oracle_step(&state, batch, &model.params, &model.hyper, &model.features);
        let tag = |s: &str| format!("step {step} {s}");
        let tol = 1e-12;
        assert_close(&tag("p"), fwd.trace.messages.p.as_slice(), &flat(&o.p), tol);
        assert_close(&tag("q"), &fwd.trace.messages.q, &o.q, tol);
        let rel = fwd.trace.relations.as_ref().unwrap();
        for h in 0..model.hyper.heads {
            assert_close(&tag("acm"), rel.acm[h].as_slice(), &flat(&o.acm[h]), tol);
            assert_close(&tag("ace"), rel.ace[h].as_slice(), &flat(&o.ace[h]), tol);
            assert_close(&tag("agm"), rel.agm[h].as_slice(), &o.agm[h], tol);
            assert!(rel.age[h].as_slice().iter().all(|&x| x == 1.0));
        }
        assert_close(&tag("cluster msgs"), fwd.trace.cluster_msgs.as_ref().unwrap().as_slice(), &flat(&o.cluster_msgs), tol);
        assert_close(&tag("area msg"), fwd.trace.area_msg.as_ref().unwrap().as_slice(), &o.area_msg, tol);
        assert_close(&tag("a"), fwd.bank.station_a.as_slice(), &flat(&o.state.a), tol);
        assert_close(&tag("b"), &fwd.bank.station_b, &o.state.b, tol);
        assert_close(&tag("cluster"), fwd.bank.cluster.as_ref().unwrap().as_slice(), &flat(&o.state.c), tol);
        assert_close(&tag("area"), fwd.bank.area.as_ref().unwrap().as_slice(), &o.state.g, tol);
        assert_close(&tag("z"), fwd.z.as_slice(), &flat(&o.z), tol);
        assert_close(&tag("raw"), fwd.raw.as_slice(), &flat(&oracle_predictions(&o.z, &model.params.out_mlp)), tol);
        assert_eq!(fwd.bank.last_update, batch.window_end);
        bank = fwd.bank;
        state = o.state;
    }
}

/// Station MLP that copies the partner-representation block of the message.
fn copy_representation_mlp(d: usize, d_s: usize) -> Mlp<Matrix> {
    let pick = Matrix::from_fn(d, d_s, |i, j| if i == j { 1.0 } else { 0.0 });
    Mlp {
        w1: Matrix::vcat(&[&pick, &pick.scaled(-1.0)]),
        b1: Matrix::zeros(1, 2 * d),
        w2: Matrix::hcat(&[&Matrix::identity(d), &Matrix::identity(d).scaled(-1.0)]),
        b2: Matrix::zeros(1, d),
    }
}

fn tiny_model() -> Model {
    let hyper = HyperParams {
        d: 2,
        heads: 1,
        d_rel: 2,
        d_msg: 2,
        n_clusters: Some(1),
        lambda: std::f64::consts::LN_2 / 900.0,
        ..HyperParams::default()
    };
    let mut model = Model::new(hyper, Matrix::identity(2), 3).unwrap();
    model.params.station_mlp = copy_representation_mlp(2, model.dims.d_s());
    model
}

#[test]
fn tiny_single_event_by_hand() {
    // Half-life 900 s, one trip 0 -> 1 at t = 900 inside [0, 1800).
    let model = tiny_model();
    let mut bank = model.fresh_bank(0.0);
    bank.station_a = Matrix::from_rows(&[vec![1.0, -2.0], vec![4.0, 0.5]]);
    bank.station_b = vec![2.0, 1.0];
    let batch = EventBatch { events: vec![TransactionEvent::new(0, 1, 900.0)], window_start: 0.0, window_end: 1800.0 };
    let fwd = model.forward(&bank, &batch).unwrap();

    // Pre-update reps r0 = (0.5, -1), r1 = (4, 0.5); message weight 1/2, decay 1/4.
    let msgs = &fwd.trace.messages;
    assert_eq!(msgs.q, vec![0.5, 0.5]);
    assert_close("p0", msgs.p.row(0), &[2.0, 0.25, 0.0, 0.5, 0.5], 1e-15);
    assert_close("p1", msgs.p.row(1), &[0.25, -0.5, 0.5, 0.0, -0.5], 1e-15);
    // a' = a/4 + (partner rep)/2, b' = b/4 + 1/2.
    assert_close("a0", fwd.bank.station_a.row(0), &[0.25 + 2.0, -0.5 + 0.25], 1e-15);
    assert_close("a1", fwd.bank.station_a.row(1), &[1.0 + 0.25, 0.125 - 0.5], 1e-15);
    assert_close("b", &fwd.bank.station_b, &[1.0, 0.75], 1e-15);
    assert_close("r0", &fwd.z.row(0)[..2], &[2.25, -0.25], 1e-15);
    assert_close("r1", &fwd.z.row(1)[..2], &[1.25 / 0.75, -0.375 / 0.75], 1e-15);

    // One cluster: every normalized view is trivial and fusion broadcasts the level memories.
    let rel = fwd.trace.relations.as_ref().unwrap();
    assert!((rel.acm[0].as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(rel.ace[0].as_slice().iter().all(|&x| x == 1.0));
    assert_eq!(rel.agm[0].as_slice(), &[1.0]);
    let c = fwd.bank.cluster.as_ref().unwrap();
    let g = fwd.bank.area.as_ref().unwrap();
    for i in 0..2 {
        assert_close("rc", &fwd.z.row(i)[2..4], c.row(0), 1e-15);
        assert_close("rg", &fwd.z.row(i)[4..6], g.row(0), 1e-15);
    }

    compare_run(&model, &[batch]);
}

#[test]
fn tiny_model_matches_loop_oracle_over_several_windows() {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batches: Vec<EventBatch> =
        (0..6).map(|k| random_batch(&mut rng, 2, k as f64 * 1800.0, (k + 1) as f64 * 1800.0, k % 3)).collect();
    compare_run(&model, &batches);
}

#[test]
fn random_model_matches_loop_oracle() {
    let hyper = HyperParams { d: 5, heads: 2, d_rel: 3, d_msg: 6, n_clusters: Some(3), lambda: 1e-3, tau: 600.0, ..HyperParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let features = Matrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
    let mut model = Model::new(hyper, features, 9).unwrap();
    // Nonzero biases so every bias path is exercised.
    for m in [&mut model.params.station_mlp, &mut model.params.cluster_mlp, &mut model.params.area_mlp, &mut model.params.out_mlp] {
        m.b1 = Matrix::from_fn(1, m.b1.cols(), |_, _| rng.random_range(-0.3..0.3));
        m.b2 = Matrix::from_fn(1, m.b2.cols(), |_, _| rng.random_range(-0.3..0.3));
    }
    let batches: Vec<EventBatch> = (0..8)
        .map(|k| {
            let count = if k == 3 { 0 } else { rng.random_range(1..12) };
            random_batch(&mut rng, 6, k as f64 * 600.0, (k + 1) as f64 * 600.0, count)
        })
        .collect();
    compare_run(&model, &batches);
}

#[test]
fn two_steps_differ_from_one_step_on_the_same_events() {
    let hyper = HyperParams { d: 4, heads: 2, d_rel: 2, d_msg: 4, n_clusters: Some(2), lambda: 1e-3, ..HyperParams::default() };
    let model = Model::new(hyper, Matrix::identity(4), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bank = model.fresh_bank(0.0);
    bank.station_a = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
    let all = random_batch(&mut rng, 4, 0.0, 1000.0, 12);
    let (first, second): (Vec<_>, Vec<_>) = all.events.iter().partition(|e| e.timestamp < 500.0);
    let one = model.forward(&bank, &all).unwrap();
    let half = model.forward(&bank, &EventBatch { events: first, window_start: 0.0, window_end: 500.0 }).unwrap();
    let two = model.forward(&half.bank, &EventBatch { events: second, window_start: 500.0, window_end: 1000.0 }).unwrap();
    let gap = one.bank.station_a.zip_map(&two.bank.station_a, |x, y| (x - y).abs()).max_abs();
    assert!(gap > 1e-6, "nonlinear updates should not be batch-split invariant (gap {gap:e})");
    assert_ne!(one.z, two.z);
}

#[test]
fn empty_batch_only_decays() {
    let hyper = HyperParams { d: 3, heads: 1, d_rel: 2, d_msg: 3, ..HyperParams::default() };
    let model = Model::new(hyper.clone(), Matrix::identity(3), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bank = model.fresh_bank(0.0);
    bank.station_a = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    bank.station_b = vec![0.7, 1.3, 2.1];
    let before = bank.representations().unwrap();
    let fwd = model.forward(&bank, &EventBatch { events: vec![], window_start: 0.0, window_end: 5000.0 }).unwrap();
    let k = DecayConfig::new(hyper.lambda, 3).decay(5000.0);
    assert_close("a", fwd.bank.station_a.as_slice(), bank.station_a.scaled(k).as_slice(), 1e-15);
    for i in 0..3 {
        assert_close("station block", &fwd.z.row(i)[..3], before.row(i), 1e-12);
    }
}
