//! Sequential experiment orchestration: Sobol initialization, model-based
//! selection, refits, and threshold/JND extraction.

use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::acquisition::{candidate_grid, optimize_acquisition, AcquisitionKind, AcquisitionSpec, DomainBox, ModelEval, Prediction};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gp::{KernelFamily, KernelSpec};
use crate::inference::{self, Dataset, FitOptions, FittedPosterior, HyperPriors};
use crate::monotonic::{self, MonotonicSpec, SampleMode};
use crate::rng::{self, Stream};
use crate::sobol::SobolSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    LinearAdditive,
    Rbf,
    MonotonicRbf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::LinearAdditive, ModelKind::Rbf, ModelKind::MonotonicRbf];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinearAdditive => "LinearAdditive",
            ModelKind::Rbf => "RBF",
            ModelKind::MonotonicRbf => "MonotonicRBF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s.trim()))
    }

    pub fn family(self) -> KernelFamily {
        match self {
            ModelKind::LinearAdditive => KernelFamily::AdditiveLinearRbf,
            ModelKind::Rbf | ModelKind::MonotonicRbf => KernelFamily::Rbf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSchedule {
    /// Options for the first fit of a session.
    pub cold: FitOptions,
    /// Options for warm-started refits.
    pub warm: FitOptions,
}

impl Default for FitSchedule {
    fn default() -> Self {
        FitSchedule {
            cold: FitOptions::default(),
            warm: FitOptions {
                iters: 50,
                learning_rate: 0.05,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicSettings {
    pub n_inducing: usize,
    pub n_draw: usize,
    pub n_keep: usize,
}

impl Default for MonotonicSettings {
    fn default() -> Self {
        MonotonicSettings {
            n_inducing: monotonic::DEFAULT_INDUCING,
            n_draw: monotonic::DEFAULT_DRAWS,
            n_keep: monotonic::DEFAULT_KEEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub domain: DomainBox,
    pub init_trials: usize,
    pub adaptive_trials: usize,
    pub model_kind: ModelKind,
    pub acq: AcquisitionSpec,
    pub refit_every: usize,
    pub seed: u64,
    pub fit: FitSchedule,
    pub monotonic: MonotonicSettings,
}

impl StrategyConfig {
    /// Defaults for everything but the domain, model and acquisition. The
    /// noisy selection heuristic is enabled for the linear-additive model.
    pub fn new(domain: DomainBox, model_kind: ModelKind, kind: AcquisitionKind) -> Self {
        let mut acq = AcquisitionSpec::new(kind);
        acq.noisy_heuristic = model_kind == ModelKind::LinearAdditive;
        StrategyConfig {
            domain,
            init_trials: 5,
            adaptive_trials: 145,
            model_kind,
            acq,
            refit_every: 1,
            seed: 0,
            fit: FitSchedule::default(),
            monotonic: MonotonicSettings::default(),
        }
    }

    pub fn total_trials(&self) -> usize {
        self.init_trials + self.adaptive_trials
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_trials < 1 {
            return Err(Error::config("init_trials", "must be at least 1"));
        }
        if self.refit_every < 1 {
            return Err(Error::config("refit_every", "must be at least 1"));
        }
        self.acq
            .validate()
            .map_err(|e| Error::config("acqf", e.to_string()))?;
        if self.model_kind == ModelKind::LinearAdditive && self.domain.dim() < 1 {
            return Err(Error::config("intensity_dim", "linear-additive model needs an intensity dimension"));
        }
        let m = &self.monotonic;
        if self.model_kind == ModelKind::MonotonicRbf && (m.n_inducing == 0 || m.n_keep == 0 || m.n_keep > m.n_draw) {
            return Err(Error::config("monotonic", "need inducing points and 0 < n_keep <= n_draw"));
        }
        crate::sobol::SobolSequence::new(self.domain.dim()).map_err(|e| Error::config("parnames", e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    /// Stimulus units.
    pub x: Vec<f64>,
    /// `None` for unanswered or aborted trials.
    pub outcome: Option<bool>,
    pub phase: Phase,
    /// Told without a preceding ask.
    pub out_of_band: bool,
    pub timestamp_ms: u64,
}

/// Checks that a numeric outcome is 0 or 1.
pub fn outcome_from_value(v: f64) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::Precondition(format!("outcome must be 0 or 1, got {v}")))
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A fitted model bound to its domain, usable for acquisition and queries.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub posterior: FittedPosterior,
    pub monotonic: Option<MonotonicSpec>,
    /// Seed of the Monte-Carlo streams used by monotone predictions.
    pub sample_seed: u64,
    pub exec: Execution,
}

/// Fixed chunking keeps results independent of the execution mode.
const PREDICT_CHUNK: usize = 256;

impl Model {
    /// Monte-Carlo acceptance fraction of the monotone sampler at `q`.
    pub fn monotone_acceptance(&self, q: &DMatrix<f64>) -> Result<Option<f64>> {
        match &self.monotonic {
            Some(spec) => {
                let mut r = rng::stream(self.sample_seed, Stream::Monotonic, &[0]);
                let s = monotonic::sample_monotonic_with_mode(&self.posterior, q, spec, SampleMode::Marginal, &mut r)?;
                Ok(Some(s.acceptance()))
            }
            None => Ok(None),
        }
    }
}

impl ModelEval for Model {
    fn predict(&self, q: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        if let Some(spec) = &self.monotonic {
            let mut r = rng::stream(self.sample_seed, Stream::Monotonic, &[0]);
            let s = monotonic::sample_monotonic_with_mode(&self.posterior, q, spec, SampleMode::Marginal, &mut r)?;
            let probs = monotonic::probabilities_from_samples(&s.samples);
            let n = s.samples.nrows() as f64;
            return Ok(s
                .samples
                .column_iter()
                .zip(probs)
                .map(|(col, p)| {
                    let mean = col.mean();
                    let var = if n > 1.0 {
                        col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
                    } else {
                        0.0
                    };
                    Prediction {
                        latent_mean: mean,
                        latent_var: var,
                        p_mean: p.p_mean,
                        p_var: p.p_var,
                    }
                })
                .collect());
        }
        let starts: Vec<usize> = (0..q.nrows()).step_by(PREDICT_CHUNK).collect();
        let parts: Vec<Result<Vec<Prediction>>> = self.exec.map(&starts, |&s| {
            let rows = PREDICT_CHUNK.min(q.nrows() - s);
            let chunk = q.rows(s, rows).clone_owned();
            let lat = inference::predict_latent(&self.posterior, &chunk, false)?;
            Ok(lat
                .mean
                .iter()
                .zip(lat.var.iter())
                .map(|(m, v)| Prediction::from_latent(*m, *v))
                .collect::<Vec<_>>())
        });
        let mut out = Vec::with_capacity(q.nrows());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn sample_joint(&self, q: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        match &self.monotonic {
            Some(spec) => {
                // Least-violating draw of a fresh batch.
                let one = spec.clone().with_counts(spec.n_draw, 1);
                let s = monotonic::sample_monotonic(&self.posterior, q, &one, rng)?;
                Ok(s.samples.row(0).transpose())
            }
            None => {
                let lat = inference::predict_latent(&self.posterior, q, true)?;
                let block = lat.joint.expect("joint requested");
                let draws = crate::gp::sample_gaussian(&block, 1, rng)?;
                Ok(draws.row(0).transpose())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub config: StrategyConfig,
    pub records: Vec<TrialRecord>,
    pub fitted: Option<FittedPosterior>,
    pub pending_ask: Option<Vec<f64>>,
    priors: HyperPriors,
    sobol: SobolSequence,
    candidates: DMatrix<f64>,
    asks: u64,
    fitted_on: usize,
    pub exec: Execution,
}

impl SessionState {
    pub fn new(config: StrategyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.domain.dim();
        let mut sobol = SobolSequence::new(d)?;
        sobol.skip(1);
        let candidates = candidate_grid(config.acq.candidate_count, d)?;
        Ok(SessionState {
            priors: HyperPriors::unit_box(d)?,
            sobol,
            candidates,
            config,
            records: Vec::new(),
            fitted: None,
            pending_ask: None,
            asks: 0,
            fitted_on: 0,
            exec: Execution::Sequential,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Answered trials.
    pub fn n_data(&self) -> usize {
        self.records.iter().filter(|r| r.outcome.is_some()).count()
    }

    pub fn is_finished(&self) -> bool {
        self.n_data() >= self.config.total_trials()
    }

    pub fn phase(&self) -> Phase {
        if self.n_data() < self.config.init_trials {
            Phase::Init
        } else {
            Phase::Adaptive
        }
    }

    pub fn next_trial_index(&self) -> usize {
        self.records.len()
    }

    /// Answered trials in unit-box coordinates.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = self.config.domain.dim();
        let answered: Vec<&TrialRecord> = self.records.iter().filter(|r| r.outcome.is_some()).collect();
        let x = DMatrix::from_fn(answered.len(), d, |i, j| {
            (answered[i].x[j] - self.config.domain.lower[j]) / self.config.domain.range(j)
        });
        Dataset::new(x, answered.iter().map(|r| r.outcome.unwrap()).collect())
    }

    fn initial_kernel(&self) -> KernelSpec {
        self.priors
            .initial_kernel(self.config.model_kind.family(), self.config.domain.intensity_dim)
    }

    fn fit_current(&self, data: &Dataset) -> Result<FittedPosterior> {
        match &self.fitted {
            Some(prev) => inference::refit(data, prev, &self.priors, &self.config.fit.warm),
            None => inference::fit(data, &self.initial_kernel(), &self.priors, &self.config.fit.cold),
        }
    }

    fn wrap(&self, posterior: FittedPosterior) -> Result<Model> {
        let monotonic = if self.config.model_kind == ModelKind::MonotonicRbf {
            let d = self.config.domain.dim();
            let m = &self.config.monotonic;
            let mut spec = MonotonicSpec::new(d, self.config.domain.intensity_dim)?.with_counts(m.n_draw, m.n_keep);
            spec.inducing_grid = crate::sobol::sobol(m.n_inducing, d, 1)?;
            Some(spec)
        } else {
            None
        };
        Ok(Model {
            kind: self.config.model_kind,
            sample_seed: rng::derive_seed(self.config.seed, Stream::Monotonic, &[posterior.len() as u64]),
            posterior,
            monotonic,
            exec: self.exec,
        })
    }

    /// Model for the answered data without changing the session: the prior
    /// before any data, the stored fit when current, otherwise a fresh
    /// warm-started fit.
    pub fn current_model(&self) -> Result<Model> {
        let data = self.dataset()?;
        if data.is_empty() {
            // The unconstrained prior: no monotone reweighting before data.
            let mut m = self.wrap(FittedPosterior::prior(self.initial_kernel())?)?;
            m.monotonic = None;
            return Ok(m);
        }
        if let Some(f) = &self.fitted {
            if f.train_x == data.x {
                return self.wrap(f.clone());
            }
        }
        self.wrap(self.fit_current(&data)?)
    }

    /// Refits when at least `refit_every` new answers arrived since the last
    /// fit (or no fit exists yet).
    pub fn refresh_fit(&mut self) -> Result<()> {
        let data = self.dataset()?;
        if data.is_empty() {
            return Ok(());
        }
        let due = self.fitted.is_none() || data.len() >= self.fitted_on + self.config.refit_every;
        if due {
            let post = self.fit_current(&data)?;
            self.fitted = Some(post);
            self.fitted_on = data.len();
        }
        Ok(())
    }

    /// Proposes the next stimulus (stimulus units) and records it as pending.
    pub fn next_point(&mut self) -> Result<Vec<f64>> {
        if self.pending_ask.is_some() {
            return Err(Error::Protocol("an ask is already pending; tell its outcome first".into()));
        }
        if self.is_finished() {
            return Err(Error::Finished);
        }
        let unit = if self.phase() == Phase::Init || self.config.acq.kind == AcquisitionKind::Sobol {
            self.sobol.next_point()
        } else {
            self.refresh_fit()?;
            let posterior = match &self.fitted {
                Some(f) => f.clone(),
                None => FittedPosterior::prior(self.initial_kernel())?,
            };
            let model = self.wrap(posterior)?;
            let mut r = rng::stream(self.config.seed, Stream::Acquisition, &[self.asks]);
            optimize_acquisition(&model, &self.config.acq, &self.candidates, &mut r)?
        };
        self.asks += 1;
        let x = self.config.domain.from_unit(&unit);
        self.pending_ask = Some(x.clone());
        Ok(x)
    }

    /// Appends an outcome for `x`. Without a pending ask the datum is
    /// accepted as out-of-band.
    pub fn record_outcome(&mut self, x: &[f64], outcome: Option<bool>) -> Result<()> {
        let domain = &self.config.domain;
        if x.len() != domain.dim() {
            return Err(Error::DimensionMismatch(format!(
                "told point has {} coordinates, domain has {}",
                x.len(),
                domain.dim()
            )));
        }
        let (phase, out_of_band) = match &self.pending_ask {
            Some(p) => {
                let tol = 1e-9;
                if p.iter().zip(x).any(|(a, b)| (a - b).abs() > tol * a.abs().max(1.0)) {
                    return Err(Error::Protocol(format!("told point {x:?} does not match pending ask {p:?}")));
                }
                (self.phase(), false)
            }
            None => {
                if !domain.contains(x) {
                    return Err(Error::Precondition(format!("out-of-band point {x:?} outside the domain")));
                }
                (Phase::Adaptive, true)
            }
        };
        self.records.push(TrialRecord {
            trial_index: self.records.len(),
            x: x.to_vec(),
            outcome,
            phase,
            out_of_band,
            timestamp_ms: now_ms(),
        });
        self.pending_ask = None;
        Ok(())
    }
}

/// Threshold estimates along the intensity axis for a grid of contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    /// Context coordinates (stimulus units, context dimensions only).
    pub contexts: Vec<Vec<f64>>,
    /// Intensity at the target probability; `None` where no bracket exists.
    pub thresholds: Vec<Option<f64>>,
}

impl ThresholdCurve {
    pub fn defined_fraction(&self) -> f64 {
        if self.thresholds.is_empty() {
            return 0.0;
        }
        self.thresholds.iter().filter(|t| t.is_some()).count() as f64 / self.thresholds.len() as f64
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// First upward crossing `p_j <= target <= p_{j+1}`, linearly interpolated.
pub fn threshold_from_grid(intensities: &[f64], probs: &[f64], target: f64) -> Option<f64> {
    for j in 0..probs.len().saturating_sub(1) {
        let (a, b) = (probs[j], probs[j + 1]);
        if a <= target && target <= b {
            if b == a {
                return Some(intensities[j]);
            }
            let t = (target - a) / (b - a);
            return Some(intensities[j] + t * (intensities[j + 1] - intensities[j]));
        }
    }
    None
}

/// All context grid points (cartesian product over context dimensions).
fn context_grid(domain: &DomainBox, grid_n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for k in 0..domain.dim() {
        if k == domain.intensity_dim {
            continue;
        }
        let vals = linspace(domain.lower[k], domain.upper[k], grid_n);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                vals.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    out
}

fn full_point(domain: &DomainBox, context: &[f64], intensity: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(domain.dim());
    let mut c = context.iter();
    for k in 0..domain.dim() {
        if k == domain.intensity_dim {
            x.push(intensity);
        } else {
            x.push(*c.next().expect("context length"));
        }
    }
    x
}

pub fn estimate_threshold<M: ModelEval + ?Sized>(
    model: &M,
    target: f64,
    domain: &DomainBox,
    grid_n: usize,
) -> Result<ThresholdCurve> {
    if grid_n < 2 {
        return Err(Error::Precondition("threshold grid needs at least 2 points".into()));
    }
    let i = domain.intensity_dim;
    let intensities = linspace(domain.lower[i], domain.upper[i], grid_n);
    let contexts = context_grid(domain, grid_n);
    let points: Vec<Vec<f64>> = contexts
        .iter()
        .flat_map(|c| intensities.iter().map(move |v| domain.to_unit(&full_point(domain, c, *v))))
        .collect();
    let q = DMatrix::from_fn(points.len(), domain.dim(), |r, k| points[r][k]);
    let pred = model.predict(&q)?;
    let thresholds = pred
        .chunks(grid_n)
        .map(|ps| {
            let p: Vec<f64> = ps.iter().map(|p| p.p_mean).collect();
            threshold_from_grid(&intensities, &p, target)
        })
        .collect();
    Ok(ThresholdCurve { contexts, thresholds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JndDefinition {
    /// Reciprocal slope of the posterior-mean latent along intensity.
    Derivative,
    /// Smallest increment raising the posterior-mean latent by one.
    Step,
}

fn latent_mean_at<M: ModelEval + ?Sized>(model: &M, domain: &DomainBox, x: &[f64]) -> Result<f64> {
    let u = domain.to_unit(x);
    let q = DMatrix::from_row_slice(1, u.len(), &u);
    Ok(model.predict(&q)?[0].latent_mean)
}

/// Just-noticeable difference at `x` in intensity units; `None` where the
/// latent is not increasing.
pub fn estimate_jnd<M: ModelEval + ?Sized>(
    model: &M,
    domain: &DomainBox,
    x: &[f64],
    definition: JndDefinition,
    grid_n: usize,
) -> Result<Option<f64>> {
    let i = domain.intensity_dim;
    if !(x[i] > domain.lower[i] && x[i] < domain.upper[i]) {
        return Err(Error::Precondition("JND point must be interior in intensity".into()));
    }
    match definition {
        JndDefinition::Derivative => {
            let h = 1e-3 * domain.range(i);
            let mut hi = x.to_vec();
            hi[i] = (x[i] + h).min(domain.upper[i]);
            let mut lo = x.to_vec();
            lo[i] = (x[i] - h).max(domain.lower[i]);
            let slope = (latent_mean_at(model, domain, &hi)? - latent_mean_at(model, domain, &lo)?) / (hi[i] - lo[i]);
            Ok((slope > 0.0).then(|| 1.0 / slope))
        }
        JndDefinition::Step => {
            if grid_n < 2 {
                return Err(Error::Precondition("JND grid needs at least 2 points".into()));
            }
            let f0 = latent_mean_at(model, domain, x)?;
            let steps = linspace(0.0, domain.upper[i] - x[i], grid_n);
            let pts: Vec<Vec<f64>> = steps
                .iter()
                .map(|d| {
                    let mut p = x.to_vec();
                    p[i] = (x[i] + d).min(domain.upper[i]);
                    domain.to_unit(&p)
                })
                .collect();
            let q = DMatrix::from_fn(pts.len(), x.len(), |r, k| pts[r][k]);
            let f: Vec<f64> = model.predict(&q)?.iter().map(|p| p.latent_mean - f0 - 1.0).collect();
            for k in 1..f.len() {
                if f[k] >= 0.0 {
                    let (a, b) = (f[k - 1], f[k]);
                    let t = if b == a { 0.0 } else { -a / (b - a) };
                    return Ok(Some(steps[k - 1] + t * (steps[k] - steps[k - 1])));
                }
            }
            Ok(None)
        }
    }
}
