//! Simulation harness: replicated ask/simulate/tell runs against a test
//! function with metrics at checkpoints and CSV reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::acquisition::{DomainBox, ModelEval, Prediction};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{self, Stream};
use crate::strategy::{estimate_threshold, linspace, SessionState, StrategyConfig, ThresholdCurve};
use crate::testfuns::{simulate_response, TestFunction};

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub test_function: TestFunction,
    /// Strategy template; its seed is replaced per replication.
    pub strategy: StrategyConfig,
    pub replications: usize,
    pub eval_grid_n: usize,
    /// Answered-trial counts at which metrics are computed.
    pub checkpoints: Vec<usize>,
    pub base_seed: u64,
    pub workers: usize,
    pub interior_only: bool,
}

impl BenchmarkConfig {
    /// Desk defaults: 20 replications, checkpoints every 5 trials from the
    /// end of initialization.
    pub fn new(test_function: TestFunction, strategy: StrategyConfig) -> Self {
        let checkpoints = default_checkpoints(strategy.init_trials, strategy.total_trials());
        BenchmarkConfig {
            test_function,
            strategy,
            replications: 20,
            eval_grid_n: 30,
            checkpoints,
            base_seed: 0,
            workers: 1,
            interior_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::config("replications", "must be at least 1"));
        }
        if self.eval_grid_n < 3 {
            return Err(Error::config("eval_grid_n", "must be at least 3"));
        }
        let (lo, hi) = (self.strategy.init_trials, self.strategy.total_trials());
        if let Some(c) = self.checkpoints.iter().find(|c| **c < lo || **c > hi) {
            return Err(Error::config("checkpoints", format!("checkpoint {c} outside [{lo}, {hi}]")));
        }
        if self.strategy.domain.dim() != self.test_function.domain.dim() {
            return Err(Error::config("parnames", "domain dimension differs from the test function"));
        }
        self.strategy.validate()
    }
}

pub fn default_checkpoints(init: usize, total: usize) -> Vec<usize> {
    let mut c: Vec<usize> = (init..=total).filter(|t| t % 5 == 0).collect();
    if c.last() != Some(&total) {
        c.push(total);
    }
    c
}

/// Ground truth as a model: zero latent variance.
pub struct TruthModel<'a> {
    pub tf: &'a TestFunction,
}

impl ModelEval for TruthModel<'_> {
    fn predict(&self, q: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        Ok(q.row_iter()
            .map(|r| {
                let u: Vec<f64> = r.iter().copied().collect();
                Prediction::from_latent(self.tf.latent(&self.tf.domain.from_unit(&u)), 0.0)
            })
            .collect())
    }

    fn sample_joint(&self, q: &DMatrix<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(q.nrows(), self.predict(q)?.into_iter().map(|p| p.latent_mean)))
    }
}

/// Lattice over the box in unit coordinates, optionally without its outer
/// ring.
pub fn evaluation_grid(dim: usize, grid_n: usize, interior_only: bool) -> DMatrix<f64> {
    let axis: Vec<f64> = {
        let a = linspace(0.0, 1.0, grid_n);
        if interior_only {
            a[1..grid_n - 1].to_vec()
        } else {
            a
        }
    };
    let per = axis.len();
    let total = per.pow(dim as u32);
    DMatrix::from_fn(total, dim, |r, k| {
        let idx = (r / per.pow((dim - 1 - k) as u32)) % per;
        axis[idx]
    })
}

/// Error summaries of model against truth probabilities on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbErrors {
    pub mae: f64,
    pub max_abs: f64,
    pub mse: f64,
    pub correlation: f64,
}

pub fn prob_errors(model_p: &[f64], truth_p: &[f64]) -> ProbErrors {
    let n = model_p.len() as f64;
    let diffs: Vec<f64> = model_p.iter().zip(truth_p).map(|(a, b)| a - b).collect();
    let mae = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
    let max_abs = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mse = diffs.iter().map(|d| d * d).sum::<f64>() / n;
    let (ma, mb) = (model_p.iter().sum::<f64>() / n, truth_p.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in model_p.iter().zip(truth_p) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    let correlation = if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        f64::NAN
    };
    ProbErrors {
        mae,
        max_abs,
        mse,
        correlation,
    }
}

fn grid_probs<M: ModelEval + ?Sized>(model: &M, grid: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(model.predict(grid)?.iter().map(|p| p.p_mean).collect())
}

pub fn prob_mae<M: ModelEval + ?Sized>(model: &M, tf: &TestFunction, grid_n: usize, interior_only: bool) -> Result<f64> {
    let grid = evaluation_grid(tf.domain.dim(), grid_n, interior_only);
    let truth = grid_probs(&TruthModel { tf }, &grid)?;
    Ok(prob_errors(&grid_probs(model, &grid)?, &truth).mae)
}

/// Mean absolute threshold difference over contexts where both curves are
/// defined, and the fraction of such contexts. `None` when there are none.
pub fn curve_mae(model: &ThresholdCurve, truth: &ThresholdCurve, interior_only: bool) -> (Option<f64>, f64) {
    let n = model.thresholds.len();
    let range = if interior_only && n > 2 { 1..n - 1 } else { 0..n };
    let total = range.len();
    let pairs: Vec<f64> = range
        .filter_map(|k| match (model.thresholds[k], truth.thresholds[k]) {
            (Some(a), Some(b)) => Some((a - b).abs()),
            _ => None,
        })
        .collect();
    let frac = if total == 0 { 0.0 } else { pairs.len() as f64 / total as f64 };
    if pairs.is_empty() {
        (None, frac)
    } else {
        (Some(pairs.iter().sum::<f64>() / pairs.len() as f64), frac)
    }
}

pub fn threshold_mae<M: ModelEval + ?Sized>(model: &M, tf: &TestFunction, target: f64, grid_n: usize) -> Result<Option<f64>> {
    let truth = estimate_threshold(&TruthModel { tf }, target, &tf.domain, grid_n)?;
    let est = estimate_threshold(model, target, &tf.domain, grid_n)?;
    Ok(curve_mae(&est, &truth, false).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub rep: usize,
    pub checkpoint: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub rep: usize,
    pub trial_index: usize,
    pub x: Vec<f64>,
    pub outcome: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rep: usize,
    pub trials: Vec<TrialRow>,
    pub metrics: Vec<MetricRow>,
    /// Wall-clock seconds per trial (not exported; varies between runs).
    pub trial_seconds: Vec<f64>,
    pub failure: Option<String>,
}

impl RunResult {
    pub fn metric(&self, checkpoint: usize, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.checkpoint == checkpoint && m.metric == name)
            .map(|m| m.value)
    }
}

/// Formats like C's `%.9g`.
pub fn format_g9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let e: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&e) {
        trim(format!("{:.*}", (8 - e).max(0) as usize, v))
    } else {
        format!("{}e{}{:02}", trim(mant.to_string()), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn round_g9(v: f64) -> f64 {
    format_g9(v).parse().unwrap_or(v)
}

fn push_metric(rows: &mut Vec<MetricRow>, rep: usize, checkpoint: usize, metric: &str, value: f64) {
    rows.push(MetricRow {
        rep,
        checkpoint,
        metric: metric.into(),
        value: round_g9(value),
    });
}

fn checkpoint_metrics(
    cfg: &BenchmarkConfig,
    state: &mut SessionState,
    rep: usize,
    checkpoint: usize,
    grid: &DMatrix<f64>,
    truth_p: &[f64],
    truth_curve: &ThresholdCurve,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    state.refresh_fit()?;
    let model = state.current_model()?;
    let pred = model.predict(grid)?;
    let p: Vec<f64> = pred.iter().map(|p| p.p_mean).collect();
    let e = prob_errors(&p, truth_p);
    let curve = estimate_threshold(&model, cfg.strategy.acq.target, &cfg.test_function.domain, cfg.eval_grid_n)?;
    let (t_mae, frac) = curve_mae(&curve, truth_curve, cfg.interior_only);
    push_metric(rows, rep, checkpoint, "prob_mae", e.mae);
    push_metric(rows, rep, checkpoint, "prob_max_abs", e.max_abs);
    push_metric(rows, rep, checkpoint, "prob_mse", e.mse);
    push_metric(rows, rep, checkpoint, "prob_corr", e.correlation);
    push_metric(rows, rep, checkpoint, "threshold_mae", t_mae.unwrap_or(f64::NAN));
    push_metric(rows, rep, checkpoint, "threshold_defined", frac);
    let probe = DMatrix::from_element(1, cfg.strategy.domain.dim(), 0.5);
    if let Some(a) = model.monotone_acceptance(&probe)? {
        push_metric(rows, rep, checkpoint, "acceptance", a);
    }
    Ok(())
}

/// One full simulated session.
pub fn run_replication(cfg: &BenchmarkConfig, rep: usize) -> RunResult {
    let mut result = RunResult {
        rep,
        trials: Vec::new(),
        metrics: Vec::new(),
        trial_seconds: Vec::new(),
        failure: None,
    };
    if let Err(e) = replicate_into(cfg, rep, &mut result) {
        let reached = result.trials.len();
        result.failure = Some(e.to_string());
        result.metrics.push(MetricRow {
            rep,
            checkpoint: reached,
            metric: "failed".into(),
            value: 1.0,
        });
    }
    result
}

fn replicate_into(cfg: &BenchmarkConfig, rep: usize, out: &mut RunResult) -> Result<()> {
    let mut strat = cfg.strategy.clone();
    strat.seed = rng::derive_seed(cfg.base_seed, Stream::Replication, &[rep as u64]);
    let tf = &cfg.test_function;
    let mut observer = rng::stream(cfg.base_seed, Stream::Observer, &[rep as u64]);
    let mut state = SessionState::new(strat)?;
    let grid = evaluation_grid(tf.domain.dim(), cfg.eval_grid_n, cfg.interior_only);
    let truth_p = grid_probs(&TruthModel { tf }, &grid)?;
    let truth_curve = estimate_threshold(&TruthModel { tf }, cfg.strategy.acq.target, &tf.domain, cfg.eval_grid_n)?;
    while !state.is_finished() {
        let start = Instant::now();
        let x = state.next_point()?;
        let y = simulate_response(tf, &x, &mut observer);
        state.record_outcome(&x, Some(y))?;
        out.trial_seconds.push(start.elapsed().as_secs_f64());
        out.trials.push(TrialRow {
            rep,
            trial_index: out.trials.len(),
            x,
            outcome: Some(y),
        });
        let n = state.n_data();
        if cfg.checkpoints.contains(&n) {
            checkpoint_metrics(cfg, &mut state, rep, n, &grid, &truth_p, &truth_curve, &mut out.metrics)?;
        }
    }
    Ok(())
}

/// Runs all replications; results are ordered by replication and do not
/// depend on the number of workers.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    Ok(Execution::with_workers(cfg.workers, |exec| {
        exec.map_range(cfg.replications, |rep| run_replication(cfg, rep))
    }))
}

/// Median over replications of `metric` at `checkpoint`, ignoring missing
/// and non-finite values.
pub fn median_metric(results: &[RunResult], checkpoint: usize, metric: &str) -> Option<f64> {
    let mut v: Vec<f64> = results
        .iter()
        .filter_map(|r| r.metric(checkpoint, metric))
        .filter(|v| v.is_finite())
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn trials_csv(results: &[RunResult], domain: &DomainBox) -> String {
    let mut s = String::from("rep,trial_index");
    for name in &domain.names {
        s.push(',');
        s.push_str(name);
    }
    s.push_str(",outcome\n");
    let mut rows: Vec<&TrialRow> = results.iter().flat_map(|r| &r.trials).collect();
    rows.sort_by_key(|r| (r.rep, r.trial_index));
    for r in rows {
        let _ = write!(s, "{},{}", r.rep, r.trial_index);
        for v in &r.x {
            let _ = write!(s, ",{}", format_g9(*v));
        }
        let o = match r.outcome {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        let _ = writeln!(s, ",{o}");
    }
    s
}

pub fn metrics_csv(results: &[RunResult]) -> String {
    let mut s = String::from("rep,checkpoint,metric,value\n");
    let mut rows: Vec<&MetricRow> = results.iter().flat_map(|r| &r.metrics).collect();
    rows.sort_by(|a, b| (a.rep, a.checkpoint).cmp(&(b.rep, b.checkpoint)));
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.rep, r.checkpoint, r.metric, format_g9(r.value));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("rep,checkpoint,metric,value") {
        return Err(Error::Precondition("unexpected metrics header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Precondition(format!("malformed metrics row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRow {
                rep: f[0].parse().map_err(|_| bad())?,
                checkpoint: f[1].parse().map_err(|_| bad())?,
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes `trials.csv` and `metrics.csv` into `dir`.
pub fn export_csv(results: &[RunResult], domain: &DomainBox, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trials.csv"), trials_csv(results, domain))?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(results))?;
    Ok(())
}
