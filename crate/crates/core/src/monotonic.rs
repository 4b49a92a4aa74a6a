//! Approximately monotone posterior samples by derivative rejection.
//!
//! Joint draws of `(f(Q), df/dx_i(inducing grid))` are taken from the
//! predictive distribution of a fitted posterior. Draws whose derivatives
//! are all non-negative are kept; remaining slots are filled with the draws
//! of smallest total violation.
//!
//! Sampling happens in two stages that together give exact joint draws: the
//! derivative block first (all `n_draw` of them), then `f(Q)` conditioned on
//! the derivatives for the kept draws only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{derivative_derivative_matrix, kernel_matrix, rows, sampling_factor, value_derivative_matrix, KernelFamily};
use crate::inference::{FittedPosterior, ProbPrediction};
use crate::linalg::{self, cholesky_ladder};
use crate::quadrature::norm_cdf;
use crate::sobol::sobol;

pub const DEFAULT_INDUCING: usize = 32;
pub const DEFAULT_DRAWS: usize = 1024;
pub const DEFAULT_KEEP: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicSpec {
    pub intensity_dim: usize,
    /// Derivative inducing points, unit-box coordinates.
    pub inducing_grid: DMatrix<f64>,
    pub n_draw: usize,
    pub n_keep: usize,
}

impl MonotonicSpec {
    /// Sobol inducing design over the whole unit box with default counts.
    pub fn new(dim: usize, intensity_dim: usize) -> Result<Self> {
        Ok(MonotonicSpec {
            intensity_dim,
            inducing_grid: sobol(DEFAULT_INDUCING, dim, 1)?,
            n_draw: DEFAULT_DRAWS,
            n_keep: DEFAULT_KEEP,
        })
    }

    pub fn with_counts(mut self, n_draw: usize, n_keep: usize) -> Self {
        self.n_draw = n_draw;
        self.n_keep = n_keep;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_keep == 0 || self.n_keep > self.n_draw {
            return Err(Error::Precondition(format!(
                "need 0 < n_keep <= n_draw, got {} and {}",
                self.n_keep, self.n_draw
            )));
        }
        if self.inducing_grid.nrows() == 0 {
            return Err(Error::Precondition("empty inducing grid".into()));
        }
        if self.inducing_grid.ncols() != dim || self.intensity_dim >= dim {
            return Err(Error::DimensionMismatch(format!(
                "inducing grid has {} columns, intensity dimension {}, model dimension {dim}",
                self.inducing_grid.ncols(),
                self.intensity_dim
            )));
        }
        Ok(())
    }
}

/// How `f(Q)` is drawn given the derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Full joint draw over `Q`.
    Joint,
    /// Each query point from its exact conditional marginal; cheaper for
    /// large `Q` when only per-point summaries are needed.
    Marginal,
}

#[derive(Debug, Clone)]
pub struct MonotonicSamples {
    /// Kept draws, one row each, ordered by ascending violation.
    pub samples: DMatrix<f64>,
    /// Violation score of each kept draw.
    pub violations: Vec<f64>,
    /// Number of the `n_draw` raw draws with no negative derivative.
    pub violation_free: usize,
    pub n_draw: usize,
}

impl MonotonicSamples {
    pub fn acceptance(&self) -> f64 {
        self.violation_free as f64 / self.n_draw as f64
    }
}

/// `Σ_j max(0, -d_j)`.
pub fn violation_score(derivs: impl IntoIterator<Item = f64>) -> f64 {
    derivs.into_iter().map(|d| (-d).max(0.0)).sum()
}

/// Indices of the `keep` smallest scores, ties in draw order.
pub fn select_least_violating(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order.truncate(keep);
    order
}

pub fn sample_monotonic<R: Rng + ?Sized>(
    posterior: &FittedPosterior,
    q: &DMatrix<f64>,
    spec: &MonotonicSpec,
    rng: &mut R,
) -> Result<MonotonicSamples> {
    sample_monotonic_with_mode(posterior, q, spec, SampleMode::Joint, rng)
}

pub fn sample_monotonic_with_mode<R: Rng + ?Sized>(
    posterior: &FittedPosterior,
    q: &DMatrix<f64>,
    spec: &MonotonicSpec,
    mode: SampleMode,
    rng: &mut R,
) -> Result<MonotonicSamples> {
    let kernel = &posterior.kernel;
    if kernel.family != KernelFamily::Rbf {
        return Err(Error::UnsupportedFamily(kernel.family));
    }
    spec.validate(kernel.dim())?;
    let d = spec.intensity_dim;
    let xt = &spec.inducing_grid;
    let (nq, m) = (q.nrows(), xt.nrows());

    let k_dd = derivative_derivative_matrix(xt, xt, d, kernel)?;
    let k_qd = value_derivative_matrix(q, xt, d, kernel)?;
    let qrows = rows(q);
    let k_qq_diag: Vec<f64> = qrows.iter().map(|r| kernel.eval(r, r)).collect();

    let (mu_q, mu_d, s_dd, s_qd, var_q, full_q);
    if posterior.is_empty() {
        mu_q = DVector::zeros(nq);
        mu_d = DVector::zeros(m);
        s_dd = k_dd;
        s_qd = k_qd;
        var_q = DVector::from_vec(k_qq_diag);
        full_q = match mode {
            SampleMode::Joint => Some(kernel_matrix(q, q, kernel)?),
            SampleMode::Marginal => None,
        };
    } else {
        let x = &posterior.train_x;
        let w_q = posterior.whiten_cross(&kernel_matrix(x, q, kernel)?);
        let w_d = posterior.whiten_cross(&value_derivative_matrix(x, xt, d, kernel)?);
        mu_q = posterior.predictive_mean(&w_q);
        mu_d = posterior.predictive_mean(&w_d);
        s_dd = posterior.predictive_cov(&k_dd, &w_d, &w_d);
        s_qd = posterior.predictive_cov(&k_qd, &w_q, &w_d);
        var_q = posterior.predictive_var(&k_qq_diag, &w_q);
        full_q = match mode {
            SampleMode::Joint => Some(posterior.predictive_cov(&kernel_matrix(q, q, kernel)?, &w_q, &w_q)),
            SampleMode::Marginal => None,
        };
    }

    // Same relative nugget as the joint prior blocks.
    let mut s_dd = linalg::symmetrize(&s_dd);
    let nugget = linalg::JITTER_LADDER[0] * kernel.output_scale;
    for i in 0..m {
        s_dd[(i, i)] += nugget;
    }
    let scale = s_dd.diagonal().iter().fold(0.0f64, |a, v| a.max(*v));
    let l_d = cholesky_ladder(&s_dd, scale, true)?.l;

    let z1 = DMatrix::from_fn(m, spec.n_draw, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut derivs = &l_d * &z1;
    for mut col in derivs.column_iter_mut() {
        col += &mu_d;
    }
    let scores: Vec<f64> = derivs.column_iter().map(|c| violation_score(c.iter().copied())).collect();
    let violation_free = scores.iter().filter(|s| **s == 0.0).count();
    let kept = select_least_violating(&scores, spec.n_keep);

    // f(Q) | d has mean mu_q + V^T z1 and covariance S_qq - V^T V with
    // V = L_d^{-1} S_dq.
    let v = linalg::solve_lower(&l_d, &s_qd.transpose());
    let z_kept = DMatrix::from_fn(m, kept.len(), |i, j| z1[(i, kept[j])]);
    let mut f = v.transpose() * z_kept;
    for mut col in f.column_iter_mut() {
        col += &mu_q;
    }
    let z2 = DMatrix::from_fn(nq, kept.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    match full_q {
        Some(s_qq) => {
            let cond = linalg::symmetrize(&(s_qq - v.transpose() * &v));
            let l_c = sampling_factor(&cond)?;
            f += l_c * z2;
        }
        None => {
            for i in 0..nq {
                let sd = (var_q[i] - v.column(i).norm_squared()).max(0.0).sqrt();
                for j in 0..kept.len() {
                    f[(i, j)] += sd * z2[(i, j)];
                }
            }
        }
    }
    Ok(MonotonicSamples {
        samples: f.transpose(),
        violations: kept.iter().map(|&k| scores[k]).collect(),
        violation_free,
        n_draw: spec.n_draw,
    })
}

/// Sample mean and variance of `Φ(f)` over kept draws.
pub fn probabilities_from_samples(samples: &DMatrix<f64>) -> Vec<ProbPrediction> {
    let n = samples.nrows();
    samples
        .column_iter()
        .map(|col| {
            let p: Vec<f64> = col.iter().map(|f| norm_cdf(*f)).collect();
            let mean = p.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            ProbPrediction { p_mean: mean, p_var: var }
        })
        .collect()
}

pub fn monotonic_predict_prob<R: Rng + ?Sized>(
    posterior: &FittedPosterior,
    q: &DMatrix<f64>,
    spec: &MonotonicSpec,
    rng: &mut R,
) -> Result<Vec<ProbPrediction>> {
    let s = sample_monotonic_with_mode(posterior, q, spec, SampleMode::Marginal, rng)?;
    Ok(probabilities_from_samples(&s.samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelSpec;
    use crate::inference::{predict_latent, probit_moments};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn steep_posterior() -> FittedPosterior {
        // Latent mean 12 * (x_i - 0.5) with small spread.
        let spec = KernelSpec::rbf(vec![0.5, 0.6], 1.0);
        let n = 12;
        let x = sobol(n, 2, 1).unwrap();
        let mean = DVector::from_fn(n, |i, _| 12.0 * (x[(i, 1)] - 0.5));
        let cov = DMatrix::identity(n, n) * 0.05;
        FittedPosterior::from_moments(spec, x, mean, cov).unwrap()
    }

    #[test]
    fn selection_order() {
        let s = [0.0, 0.3, 0.0, 0.1, 0.3];
        assert_eq!(select_least_violating(&s, 5), vec![0, 2, 3, 1, 4]);
        assert_eq!(select_least_violating(&s, 2), vec![0, 2]);
        assert_eq!(violation_score([1.0, -0.5, -0.25, 0.0]), 0.75);
    }

    #[test]
    fn kept_set_sorted_with_monotone_first() {
        let post = steep_posterior();
        let spec = MonotonicSpec::new(2, 1).unwrap().with_counts(200, 150);
        let q = sobol(7, 2, 3).unwrap();
        let s = sample_monotonic(&post, &q, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.samples.shape(), (150, 7));
        assert!(s.violations.windows(2).all(|w| w[0] <= w[1]));
        let zeros = s.violations.iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, s.violation_free.min(150));
    }

    #[test]
    fn keep_all_is_reordering_of_all_draws() {
        let post = steep_posterior();
        let spec = MonotonicSpec::new(2, 1).unwrap().with_counts(64, 64);
        let q = sobol(3, 2, 1).unwrap();
        let s = sample_monotonic(&post, &q, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.samples.nrows(), 64);
        assert!(s.violations.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn deterministic_under_seed() {
        let post = steep_posterior();
        let spec = MonotonicSpec::new(2, 1).unwrap().with_counts(100, 20);
        let q = sobol(5, 2, 1).unwrap();
        let a = sample_monotonic(&post, &q, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_monotonic(&post, &q, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn concentrated_increasing_posterior_is_mostly_accepted() {
        let post = steep_posterior();
        let spec = MonotonicSpec::new(2, 1).unwrap();
        let q = sobol(5, 2, 1).unwrap();
        let s = sample_monotonic(&post, &q, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(s.acceptance() > 0.9, "{}", s.acceptance());
        assert!(s.violations.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_posterior_gives_half() {
        let spec = KernelSpec::rbf(vec![0.3, 0.3], 1e-30);
        let n = 4;
        let x = sobol(n, 2, 1).unwrap();
        let post = FittedPosterior::from_moments(spec, x, DVector::zeros(n), DMatrix::zeros(n, n)).unwrap();
        let ms = MonotonicSpec::new(2, 1).unwrap().with_counts(64, 16);
        let p = monotonic_predict_prob(&post, &sobol(9, 2, 1).unwrap(), &ms, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for v in p {
            assert!((v.p_mean - 0.5).abs() <= 1e-12, "{}", v.p_mean);
        }
    }

    #[test]
    fn joint_and_marginal_modes_agree_in_distribution() {
        let post = steep_posterior();
        let ms = MonotonicSpec::new(2, 1).unwrap().with_counts(4000, 4000);
        let q = DMatrix::from_row_slice(2, 2, &[0.3, 0.45, 0.7, 0.55]);
        let exact = predict_latent(&post, &q, false).unwrap();
        for mode in [SampleMode::Joint, SampleMode::Marginal] {
            let s = sample_monotonic_with_mode(&post, &q, &ms, mode, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            for j in 0..2 {
                let col = s.samples.column(j);
                let mean = col.mean();
                let se = (exact.var[j] / 4000.0).sqrt();
                assert!((mean - exact.mean[j]).abs() < 4.0 * se, "{mode:?} {j}");
                let var = col.variance();
                assert!((var / exact.var[j] - 1.0).abs() < 0.1);
            }
        }
    }

    #[test]
    fn keep_all_matches_unconstrained_probabilities() {
        let post = steep_posterior();
        let ms = MonotonicSpec::new(2, 1).unwrap().with_counts(4000, 4000);
        let q = DMatrix::from_row_slice(2, 2, &[0.2, 0.48, 0.8, 0.52]);
        let exact = predict_latent(&post, &q, false).unwrap();
        let p = monotonic_predict_prob(&post, &q, &ms, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for j in 0..2 {
            let e = probit_moments(exact.mean[j], exact.var[j]);
            let se = (p[j].p_var / 4000.0).sqrt();
            assert!((p[j].p_mean - e.p_mean).abs() < 3.0 * se, "{j}: {} {}", p[j].p_mean, e.p_mean);
        }
    }

    #[test]
    fn rejects_non_rbf() {
        let spec = KernelSpec::linear_intensity(2, 1, 1.0);
        let post = FittedPosterior::prior(spec).unwrap();
        let ms = MonotonicSpec::new(2, 1).unwrap();
        assert!(matches!(
            sample_monotonic(&post, &sobol(2, 2, 1).unwrap(), &ms, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::UnsupportedFamily(_))
        ));
    }
}
