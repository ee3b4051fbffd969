use cmod::evaluation::{
    compute_metrics, evaluate, export_relations, export_representations, ha_predictions, predict_stream, slot_of,
    write_predictions, EvaluationReport, HaBaseline, Scope,
};
use cmod::ingest::build_od_matrix;
use cmod::synth::{commuter_profile, generate, SynthConfig};
use cmod::training::{PreparedStream, Splits};
use cmod::{Ablation, HyperParams, Matrix, Model, OdMatrix, TransactionEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_od(rng: &mut ChaCha8Rng, n: usize) -> OdMatrix {
    OdMatrix(Matrix::from_fn(n, n, |_, _| rng.random_range(0..5) as f64))
}

#[test]
fn metrics_match_a_flat_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truths: Vec<OdMatrix> = (0..5).map(|_| random_od(&mut rng, 4)).collect();
    let preds: Vec<OdMatrix> =
        (0..5).map(|_| OdMatrix(Matrix::from_fn(4, 4, |_, _| rng.random_range(0.0..4.0)))).collect();

    let mut cells: Vec<(f64, f64)> = Vec::new();
    for w in 0..5 {
        for i in 0..4 {
            for j in 0..4 {
                cells.push((preds[w].get(i, j), truths[w].get(i, j)));
            }
        }
    }
    let mean_truth = cells.iter().map(|c| c.1).sum::<f64>() / cells.len() as f64;
    for (scope, keep) in [(Scope::AllPairs, f64::NEG_INFINITY), (Scope::AboveAverage, mean_truth)] {
        let kept: Vec<(f64, f64)> = cells.iter().copied().filter(|c| c.1 > keep).collect();
        let n = kept.len() as f64;
        let mae = kept.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
        let rmse = (kept.iter().map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n).sqrt();
        let (mp, my) = (kept.iter().map(|c| c.0).sum::<f64>() / n, kept.iter().map(|c| c.1).sum::<f64>() / n);
        let cov: f64 = kept.iter().map(|(p, y)| (p - mp) * (y - my)).sum();
        let vp: f64 = kept.iter().map(|(p, _)| (p - mp).powi(2)).sum();
        let vy: f64 = kept.iter().map(|(_, y)| (y - my).powi(2)).sum();
        let pcc = cov / (vp * vy).sqrt();

        let r = compute_metrics(&preds, &truths, scope).unwrap();
        assert_eq!(r.cells, kept.len());
        assert_eq!(r.windows, 5);
        assert!((r.mae.unwrap() - mae).abs() < 1e-12);
        assert!((r.rmse.unwrap() - rmse).abs() < 1e-12);
        assert!((r.pcc.unwrap() - pcc).abs() < 1e-12);
        assert!(r.mae.unwrap() <= r.rmse.unwrap());
    }
}

fn periodic_config() -> SynthConfig {
    SynthConfig {
        n: 5,
        k: 2,
        profile: commuter_profile(2),
        train_days: 3,
        val_days: 1,
        test_days: 1,
        base_rate: 4.0 / 3600.0,
        seed: 5,
        ..SynthConfig::default()
    }
}

#[test]
fn historical_average_matches_per_slot_loop_means() {
    let cfg = periodic_config();
    let data = generate(&cfg).unwrap();
    let hyper = HyperParams::small(4, 1);
    let splits = cfg.splits();
    let stream = PreparedStream::new(&data.events, cfg.n, &hyper, &splits).unwrap();
    let (preds, unseen) = ha_predictions(&data.events, &stream, 0.0, splits.train_end).unwrap();
    assert_eq!(unseen, 0);
    assert_eq!(preds.len(), stream.count(cmod::training::Phase::Test));

    // Per-slot means by direct event counting.
    let slots = 48;
    let mut sums = vec![vec![0.0; cfg.n * cfg.n]; slots];
    for e in data.events.iter().filter(|e| e.timestamp < splits.train_end) {
        let s = ((e.timestamp % 86_400.0) / 1800.0) as usize;
        sums[s][e.origin * cfg.n + e.destination] += 1.0;
    }
    let mut abs = 0.0;
    let mut cells = 0.0;
    for p in &preds {
        let s = ((p.window_start % 86_400.0) / 1800.0) as usize;
        let truth = p.actual.as_ref().unwrap();
        for i in 0..cfg.n {
            for j in 0..cfg.n {
                let mean = sums[s][i * cfg.n + j] / cfg.train_days as f64;
                assert!((p.predicted.get(i, j) - mean).abs() < 1e-12);
                abs += (mean - truth.get(i, j)).abs();
                cells += 1.0;
            }
        }
    }
    let report = EvaluationReport::from_predictions(&preds).unwrap();
    assert!((report.all_pairs.mae.unwrap() - abs / cells).abs() < 1e-12);
}

#[test]
fn historical_average_on_its_own_single_day_is_exact() {
    let cfg = SynthConfig { train_days: 1, val_days: 0, test_days: 0, ..periodic_config() };
    let data = generate(&cfg).unwrap();
    let windows: Vec<(f64, OdMatrix)> =
        (0..48).map(|k| (k as f64 * 1800.0, build_od_matrix(&data.events, k as f64 * 1800.0, 1800.0, cfg.n))).collect();
    let ha = HaBaseline::fit(&windows, 1800.0).unwrap();
    let preds: Vec<OdMatrix> = windows.iter().map(|(t, _)| ha.predict_strict(*t).unwrap()).collect();
    let truths: Vec<OdMatrix> = windows.iter().map(|(_, y)| y.clone()).collect();
    assert_eq!(compute_metrics(&preds, &truths, Scope::AllPairs).unwrap().mae, Some(0.0));
}

#[test]
fn historical_average_averages_days() {
    let one = |v: f64| OdMatrix(Matrix::filled(1, 1, v));
    let nine = 9.0 * 3600.0;
    let ha = HaBaseline::fit(&[(nine, one(2.0)), (86_400.0 + nine, one(4.0))], 1800.0).unwrap();
    assert_eq!(ha.predict_strict(2.0 * 86_400.0 + nine).unwrap().get(0, 0), 3.0);
    assert_eq!(slot_of(nine, 1800.0), 18);
    let (fallback, flagged) = ha.predict(0.0);
    assert!(flagged);
    assert_eq!(fallback.get(0, 0), 3.0);
}

fn small_model(n: usize, seed: u64) -> Model {
    Model::new(HyperParams::small(4, 2), Matrix::identity(n), seed).unwrap()
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = periodic_config();
    let data = generate(&cfg).unwrap();
    let model = small_model(cfg.n, 3);
    let stream = PreparedStream::new(&data.events, cfg.n, &model.hyper, &cfg.splits()).unwrap();
    let (a, pa) = evaluate(&model, &stream).unwrap();
    let (b, pb) = evaluate(&model, &stream).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let dump = |p: &[cmod::evaluation::WindowPrediction]| {
        let mut out = Vec::new();
        write_predictions(p, &|i| format!("s{i}"), &mut out).unwrap();
        out
    };
    assert_eq!(dump(&pa), dump(&pb));
    assert!(a.all_pairs.mae.unwrap() <= a.all_pairs.rmse.unwrap());
}

#[test]
fn zero_head_on_empty_demand() {
    let mut model = small_model(3, 1);
    model.params.out_mlp.w2 = Matrix::zeros(1, model.params.out_mlp.w2.cols());
    model.params.out_mlp.b2 = Matrix::scalar(0.0);
    let splits = Splits::by_days(0.0, 86_400.0, 1, 0, 1);
    let stream = PreparedStream::new(&[], 3, &model.hyper, &splits).unwrap();
    let (report, preds) = evaluate(&model, &stream).unwrap();
    assert_eq!(preds.len(), 48);
    assert_eq!(report.all_pairs.mae, Some(0.0));
    assert!(report.all_pairs.pcc_degenerate);
    assert!(report.above_average.is_empty());
    assert_eq!(report.above_average.mae, None);
}

#[test]
fn negative_raw_outputs_are_reported_as_zero() {
    let mut model = small_model(3, 2);
    model.params.out_mlp.w2 = Matrix::zeros(1, model.params.out_mlp.w2.cols());
    model.params.out_mlp.b2 = Matrix::scalar(-0.7);
    let splits = Splits::by_days(0.0, 86_400.0, 1, 0, 1);
    let events = vec![TransactionEvent::new(0, 1, 100.0)];
    let stream = PreparedStream::new(&events, 3, &model.hyper, &splits).unwrap();
    for p in predict_stream(&model, &stream, None).unwrap() {
        assert!(p.predicted.values().as_slice().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn representation_export_rows_and_values() {
    let model = small_model(3, 4);
    let splits = Splits { t0: 0.0, train_end: 5400.0, val_end: 5400.0, end: 7200.0 };
    // One trip in the first window, then three empty windows.
    let events = vec![TransactionEvent::new(0, 1, 100.0)];
    let stream = PreparedStream::new(&events, 3, &model.hyper, &splits).unwrap();
    assert_eq!(stream.batches.len(), 4);
    let mut out = Vec::new();
    let rows = export_representations(&model, &stream, &[0, 2], &mut out).unwrap();
    assert_eq!(rows, 4 * 2 * 4);

    let mut reader = csv::Reader::from_reader(out.as_slice());
    let records: Vec<(f64, usize, usize, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap())
        })
        .collect();
    assert_eq!(records.len(), rows);

    // In-process values after every batch.
    let mut bank = model.fresh_bank(0.0);
    let mut expected = Vec::new();
    for b in &stream.batches {
        bank = model.forward(&bank, b).unwrap().bank;
        let reps = bank.representations().unwrap();
        for i in [0, 2] {
            for k in 0..4 {
                expected.push((b.window_end, i, k, reps.get(i, k)));
            }
        }
    }
    assert_eq!(records, expected);

    // Node 0 is idle after the first window: its rows repeat across the empty ones.
    let node0: Vec<Vec<f64>> = (0..4)
        .map(|b| records.iter().filter(|r| r.1 == 0 && r.0 == stream.batches[b].window_end).map(|r| r.3).collect())
        .collect();
    for b in 2..4 {
        for (x, y) in node0[b].iter().zip(&node0[1]) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300), "{x} vs {y}");
        }
    }
    assert!(export_representations(&model, &stream, &[3], Vec::new()).is_err());
}

#[test]
fn relation_export_rows_sum_to_one() {
    let model = small_model(4, 5);
    let splits = Splits { t0: 0.0, train_end: 3600.0, val_end: 3600.0, end: 5400.0 };
    let events = vec![TransactionEvent::new(0, 3, 10.0), TransactionEvent::new(2, 1, 2000.0)];
    let stream = PreparedStream::new(&events, 4, &model.hyper, &splits).unwrap();
    let mut out = Vec::new();
    let rows = export_relations(&model, &stream, false, &mut out).unwrap();
    let n_c = model.dims.n_c;
    assert_eq!(rows, 2 * model.hyper.heads * 4 * n_c);
    let mut reader = csv::Reader::from_reader(out.as_slice());
    let mut sums = std::collections::BTreeMap::new();
    for r in reader.records() {
        let r = r.unwrap();
        // Message weights normalize over stations, fusion weights over clusters.
        let key = match &r[1] {
            "message" => ("message", r[2].to_string(), r[4].to_string()),
            "fusion" => ("fusion", r[2].to_string(), r[3].to_string()),
            v => panic!("unknown view {v}"),
        };
        *sums.entry(key).or_insert(0.0) += r[5].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), model.hyper.heads * (n_c + 4));
    assert!(sums.values().all(|s: &f64| (s - 1.0).abs() < 1e-12), "{sums:?}");

    let all = export_relations(&model, &stream, true, Vec::new()).unwrap();
    assert_eq!(all, rows * stream.batches.len());

    let flat = Model::new(
        HyperParams { ablation: Ablation { no_multilevel: true, ..Ablation::default() }, ..model.hyper.clone() },
        Matrix::identity(4),
        5,
    )
    .unwrap();
    assert!(export_relations(&flat, &stream, false, Vec::new()).is_err());
}
