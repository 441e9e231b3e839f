//! Hot paths: one target solve, one LSTM forward and backward pass over a
//! training window, and a monthly backtest.

use chrono::NaiveDate;
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use dslq_core::backtest::{run_backtest, BacktestConfig};
use dslq_core::marketdata::{generate_synthetic_market, FeatureWindow, SynthConfig};
use dslq_core::strategies::{window_loss, Label, Method, StrategyConfig, TrainSample, WeightDecision};
use dslq_core::targetsolver::{solve_target, Objective, TargetSpec};
use dslq_core::tensorauto::{init_params, Architecture, BoundParams, ModelHyper, RngStream, Tape};

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

fn bench_target(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let r = Array2::from_shape_fn((21, 8), |(t, j)| {
        0.001 * (j as f64 - 3.0) + 0.02 * (rng.unit() - 0.5) + 0.005 * ((t % 5) as f64 - 2.0) / 2.0
    });
    for obj in [Objective::MaxSharpe, Objective::MaxSortino] {
        let spec = TargetSpec::new(obj);
        c.bench_function(&format!("solve_target/{}/8x21", obj.code()), |b| {
            b.iter(|| solve_target(black_box(r.view()), &spec).expect("solvable"))
        });
    }
}

fn bench_lstm(c: &mut Criterion) {
    let hyper = ModelHyper::default_for(Architecture::Lstm);
    let mut rng = RngStream::new(2);
    let params = init_params(Architecture::Lstm, hyper, &mut rng).expect("valid hyper");
    let cfg = StrategyConfig::learning(Method::Dsl, Architecture::Lstm, Objective::MaxSharpe, date(2019, 1, 1), 0);
    let day = date(2020, 1, 31);
    let samples: Vec<TrainSample> = (0..12)
        .map(|_| {
            let assets: Vec<String> = (0..8).map(|i| format!("A{i}")).collect();
            let features = assets
                .iter()
                .map(|a| FeatureWindow {
                    asset: a.clone(),
                    as_of: day,
                    first_date: day,
                    values: (0..hyper.window_len * hyper.input_dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                })
                .collect();
            TrainSample {
                rebalance_date: day,
                assets,
                features,
                label: Label::Weights(vec![0.125; 8]),
                label_end: day,
            }
        })
        .collect();
    c.bench_function("lstm/forward_backward/12x8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = params
                .tensors
                .iter()
                .map(|(k, t)| Ok((k.clone(), tape.param(t.clone())?)))
                .collect::<dslq_core::tensorauto::Result<_>>()
                .expect("params bind");
            let bound = BoundParams::from_vars(vars);
            let loss = window_loss(&mut tape, &params, &bound, black_box(&samples), &cfg).expect("loss");
            tape.backward(loss).expect("backward")
        })
    });
}

fn bench_backtest(c: &mut Criterion) {
    let table = generate_synthetic_market(&SynthConfig::equicorrelated(20, 1512, 0.08, 0.25, 0.3, 3))
        .expect("valid synth config");
    let cal = table.calendar();
    let (start, end) = (cal[0], *cal.last().expect("non-empty"));
    let decisions: Vec<WeightDecision> = table
        .month_ends(start, end)
        .into_iter()
        .map(|d| WeightDecision {
            decision_date: d,
            assets: table.assets().to_vec(),
            weights: vec![0.05; 20],
            feature_end: d,
        })
        .collect();
    let bt = BacktestConfig::new(start, end);
    c.bench_function("backtest/20x1512_monthly", |b| {
        b.iter(|| run_backtest(black_box(&decisions), &table, &bt).expect("backtest"))
    });
}

criterion_group!(benches, bench_target, bench_lstm, bench_backtest);
criterion_main!(benches);
