use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use psyfield::acquisition::{candidate_grid, AcquisitionKind, ModelEval};
use psyfield::benchmark::{run_benchmark, BenchmarkConfig};
use psyfield::exec::Execution;
use psyfield::rng::{stream, Stream};
use psyfield::strategy::{Model, ModelKind, SessionState, StrategyConfig};
use psyfield::testfuns::{simulate_response, TestFunction};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn fitted(kind: ModelKind, trials: usize) -> Model {
    let tf = TestFunction::detection();
    let mut cfg = StrategyConfig::new(tf.domain.clone(), kind, AcquisitionKind::Sobol);
    cfg.adaptive_trials = trials;
    let mut state = SessionState::new(cfg).unwrap();
    let mut rng = stream(1, Stream::Observer, &[0]);
    for _ in 0..trials {
        let x = state.next_point().unwrap();
        let y = simulate_response(&tf, &x, &mut rng);
        state.record_outcome(&x, Some(y)).unwrap();
    }
    state.refresh_fit().unwrap();
    state.current_model().unwrap()
}

fn candidate_prediction(c: &mut Criterion) {
    let q = candidate_grid(1024, 2).unwrap();
    let mut group = c.benchmark_group("predict_1024_candidates");
    group.sample_size(10);
    for kind in [ModelKind::Rbf, ModelKind::MonotonicRbf] {
        let mut model = fitted(kind, 60);
        for (name, exec) in MODES {
            model.exec = exec;
            group.bench_with_input(BenchmarkId::new(kind.name(), name), &q, |b, q| b.iter(|| model.predict(q).unwrap()));
        }
    }
    group.finish();
}

fn replications(c: &mut Criterion) {
    let tf = TestFunction::detection();
    let mut strat = StrategyConfig::new(tf.domain.clone(), ModelKind::Rbf, AcquisitionKind::Bald);
    strat.adaptive_trials = 15;
    let mut cfg = BenchmarkConfig::new(tf, strat);
    cfg.replications = 4;
    cfg.checkpoints = vec![20];
    let mut group = c.benchmark_group("benchmark_4_replications");
    group.sample_size(10);
    for (name, workers) in [("sequential", 1), ("parallel", 4)] {
        cfg.workers = workers;
        group.bench_function(name, |b| b.iter(|| run_benchmark(&cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, candidate_prediction, replications);
criterion_main!(benches);
