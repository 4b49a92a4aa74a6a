//! Variational probit-GP classification.
//!
//! The approximate posterior is a full-rank Gaussian `q(f) = N(m, S)` over
//! the latent values at the training inputs. Internally it is optimized in
//! whitened coordinates `f = L_K u` with `q(u) = N(m_u, L_u L_u^T)`, which
//! gives the same family of `q(f)` (`m = L_K m_u`, `S = L_K L_u L_u^T L_K^T`)
//! with a much better conditioned objective. Hyperparameters are fitted
//! jointly by MAP inside the same ascent loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::gp::{kernel_matrix, rows, EntryLabel, GaussianBlock, KernelFamily, KernelSpec};
use crate::linalg::{self, cholesky_ladder, lower_triangular_inverse, tril_in_place, Factor};
use crate::quadrature::{gauss_hermite, inv_mills, log_norm_cdf, norm_cdf, norm_quantile};

/// Binary responses at stimulus configurations (normalized coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<bool>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<bool>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} stimuli but {} outcomes",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Dataset { x, y })
    }

    pub fn empty(dim: usize) -> Self {
        Dataset {
            x: DMatrix::zeros(0, dim),
            y: Vec::new(),
        }
    }

    pub fn from_rows(points: &[Vec<f64>], y: Vec<bool>) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::DimensionMismatch("ragged stimulus rows".into()));
        }
        Self::new(DMatrix::from_fn(points.len(), d, |i, j| points[i][j]), y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            gamma_ur(self.shape, self.rate / x)
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln() - self.rate / x
    }

    /// `d ln p / d ln x`.
    fn dln_pdf_dlog(&self, x: f64) -> f64 {
        -(self.shape + 1.0) + self.rate / x
    }

    pub fn mean(&self) -> f64 {
        self.rate / (self.shape - 1.0)
    }
}

/// Inverse-gamma parameters with `CDF(low) = 0.01` and `CDF(high) = 0.99`,
/// by damped Newton iteration on `(ln shape, ln rate)`.
pub fn solve_lengthscale_prior(low: f64, high: f64) -> Result<InverseGamma> {
    if !(low > 0.0 && high > low && high.is_finite()) {
        return Err(Error::Precondition(format!(
            "lengthscale prior needs 0 < low < high, got ({low}, {high})"
        )));
    }
    let (q_lo, q_hi) = (norm_quantile(0.01), norm_quantile(0.99));
    // Residuals on the probit scale stay well conditioned near 0 and 1.
    let residual = |p: [f64; 2]| -> [f64; 2] {
        let ig = InverseGamma {
            shape: p[0].exp(),
            rate: p[1].exp(),
        };
        [
            norm_quantile(ig.cdf(low).clamp(1e-300, 1.0 - 1e-16)) - q_lo,
            norm_quantile(ig.cdf(high).clamp(1e-300, 1.0 - 1e-16)) - q_hi,
        ]
    };
    let norm = |r: [f64; 2]| r[0].hypot(r[1]);
    let mut p = [4.0f64.ln(), (3.0 * (low * high).sqrt()).ln()];
    let mut r = residual(p);
    for _ in 0..200 {
        if norm(r) < 1e-12 {
            break;
        }
        let h = 1e-7;
        let mut jac = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut pp = p;
            pp[k] += h;
            let mut pm = p;
            pm[k] -= h;
            let (rp, rm) = (residual(pp), residual(pm));
            jac[0][k] = (rp[0] - rm[0]) / (2.0 * h);
            jac[1][k] = (rp[1] - rm[1]) / (2.0 * h);
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let step = [
            (jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
            (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det,
        ];
        let mut t = 1.0;
        loop {
            let cand = [p[0] - t * step[0], p[1] - t * step[1]];
            let rc = residual(cand);
            if norm(rc) < norm(r) || t < 1e-6 {
                p = cand;
                r = rc;
                break;
            }
            t *= 0.5;
        }
    }
    if norm(r) < 1e-9 {
        Ok(InverseGamma {
            shape: p[0].exp(),
            rate: p[1].exp(),
        })
    } else {
        Err(Error::Numerical(format!(
            "lengthscale prior for [{low}, {high}] did not converge (residual {:e})",
            norm(r)
        )))
    }
}

/// Priors regularizing the kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    /// Support of the uniform prior on every output scale.
    pub output_scale_bounds: (f64, f64),
    /// One inverse-gamma prior per input dimension.
    pub lengthscale: Vec<InverseGamma>,
}

impl HyperPriors {
    /// Priors placing 98% of each lengthscale's mass in `[0.1 r_k, r_k]`.
    pub fn for_ranges(ranges: &[f64]) -> Result<Self> {
        let lengthscale = ranges
            .iter()
            .map(|&r| solve_lengthscale_prior(0.1 * r, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(HyperPriors {
            output_scale_bounds: (1.0, 4.0),
            lengthscale,
        })
    }

    /// Priors for inputs normalized to the unit box.
    pub fn unit_box(dim: usize) -> Result<Self> {
        Self::for_ranges(&vec![1.0; dim])
    }

    pub fn log_density(&self, spec: &KernelSpec) -> f64 {
        let (lo, hi) = self.output_scale_bounds;
        let uniform = |v: f64| {
            if (lo..=hi).contains(&v) {
                -(hi - lo).ln()
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut lp = uniform(spec.output_scale);
        if spec.family == KernelFamily::AdditiveLinearRbf {
            lp += uniform(spec.linear_scale);
        }
        for (k, ig) in self.lengthscale.iter().enumerate() {
            if spec.uses_lengthscale(k) {
                lp += ig.ln_pdf(spec.lengthscales[k]);
            }
        }
        lp
    }

    /// Kernel at the center of the priors, used to start a cold fit.
    pub fn initial_kernel(&self, family: KernelFamily, intensity_dim: usize) -> KernelSpec {
        let (lo, hi) = self.output_scale_bounds;
        let mid = 0.5 * (lo + hi);
        let lengthscales = self.lengthscale.iter().map(InverseGamma::mean).collect();
        KernelSpec {
            family,
            lengthscales,
            output_scale: mid,
            linear_scale: mid,
            intensity_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub iters: usize,
    pub learning_rate: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iters: 300,
            learning_rate: 0.05,
        }
    }
}

/// Variational posterior over latent values at the training inputs.
#[derive(Debug, Clone)]
pub struct FittedPosterior {
    pub kernel: KernelSpec,
    pub train_x: DMatrix<f64>,
    /// Variational mean `m` of `f` at `train_x`.
    pub mean: DVector<f64>,
    /// Lower factor `L` with `S = L L^T`.
    pub cov_factor: DMatrix<f64>,
    pub elbo_trace: Vec<f64>,
    whitened_mean: DVector<f64>,
    whitened_factor: DMatrix<f64>,
    kernel_factor: Factor,
}

/// Posterior predictive over latent values.
#[derive(Debug, Clone)]
pub struct LatentPrediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub joint: Option<GaussianBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbPrediction {
    pub p_mean: f64,
    pub p_var: f64,
}

fn kernel_factor(x: &DMatrix<f64>, spec: &KernelSpec) -> Result<Factor> {
    let k = kernel_matrix(x, x, spec)?;
    // The first rung is always applied so that K matches the joint blocks.
    cholesky_ladder(&k, spec.variance_scale(), false)
}

impl FittedPosterior {
    /// Zero-data posterior, equal to the prior.
    pub fn prior(kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        let d = kernel.dim();
        Ok(FittedPosterior {
            kernel,
            train_x: DMatrix::zeros(0, d),
            mean: DVector::zeros(0),
            cov_factor: DMatrix::zeros(0, 0),
            elbo_trace: Vec::new(),
            whitened_mean: DVector::zeros(0),
            whitened_factor: DMatrix::zeros(0, 0),
            kernel_factor: Factor {
                l: DMatrix::zeros(0, 0),
                jitter: 0.0,
            },
        })
    }

    /// Posterior with the given variational moments `q(f) = N(mean, L L^T)`.
    pub fn from_moments(
        kernel: KernelSpec,
        train_x: DMatrix<f64>,
        mean: DVector<f64>,
        cov_factor: DMatrix<f64>,
    ) -> Result<Self> {
        kernel.validate()?;
        let n = train_x.nrows();
        if mean.len() != n || cov_factor.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "{n} training points, mean {}, factor {:?}",
                mean.len(),
                cov_factor.shape()
            )));
        }
        let kernel_factor = kernel_factor(&train_x, &kernel)?;
        let whitened_mean = linalg::solve_lower_vec(&kernel_factor.l, &mean);
        let mut whitened_factor = linalg::solve_lower(&kernel_factor.l, &cov_factor);
        tril_in_place(&mut whitened_factor);
        Ok(FittedPosterior {
            kernel,
            train_x,
            mean,
            cov_factor,
            elbo_trace: Vec::new(),
            whitened_mean,
            whitened_factor,
            kernel_factor,
        })
    }

    pub fn len(&self) -> usize {
        self.train_x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute diagonal jitter added to `K(train_x, train_x)`.
    pub fn jitter(&self) -> f64 {
        self.kernel_factor.jitter
    }

    /// Covariance `S` of the variational distribution.
    pub fn cov(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }

    /// `W = L_K^{-1} K(train_x, q)`; projects prior cross-covariances into
    /// whitened coordinates.
    pub(crate) fn whiten_cross(&self, k_nq: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::solve_lower(&self.kernel_factor.l, k_nq)
    }

    /// Predictive covariance between two target sets given their prior
    /// covariance `k_ab` and whitened cross terms.
    pub(crate) fn predictive_cov(&self, k_ab: &DMatrix<f64>, w_a: &DMatrix<f64>, w_b: &DMatrix<f64>) -> DMatrix<f64> {
        let su_a = self.whitened_factor.transpose() * w_a;
        let su_b = self.whitened_factor.transpose() * w_b;
        k_ab - w_a.transpose() * w_b + su_a.transpose() * su_b
    }

    pub(crate) fn predictive_mean(&self, w: &DMatrix<f64>) -> DVector<f64> {
        w.transpose() * &self.whitened_mean
    }

    pub(crate) fn predictive_var(&self, k_diag: &[f64], w: &DMatrix<f64>) -> DVector<f64> {
        let su = self.whitened_factor.transpose() * w;
        DVector::from_fn(w.ncols(), |j, _| {
            let a = w.column(j).norm_squared();
            let b = su.column(j).norm_squared();
            (k_diag[j] - a + b).max(0.0)
        })
    }
}

/// Expected log-likelihood of one response under `f ~ N(mean, sd²)`, with
/// its derivatives in `mean` and `sd`.
fn expected_log_lik(y: bool, mean: f64, sd: f64) -> (f64, f64, f64) {
    let gh = gauss_hermite();
    let s = if y { 1.0 } else { -1.0 };
    let norm = 1.0 / std::f64::consts::PI.sqrt();
    let (mut v, mut dm, mut ds) = (0.0, 0.0, 0.0);
    for (t, w) in gh.nodes.iter().zip(&gh.weights) {
        let z = s * (mean + std::f64::consts::SQRT_2 * sd * t);
        let lam = inv_mills(z);
        v += w * log_norm_cdf(z);
        dm += w * s * lam;
        ds += w * s * lam * std::f64::consts::SQRT_2 * t;
    }
    (v * norm, dm * norm, ds * norm)
}

/// Evidence lower bound of `posterior` on `data`, including the log
/// hyperprior density.
pub fn elbo(posterior: &FittedPosterior, data: &Dataset, priors: &HyperPriors) -> Result<f64> {
    if posterior.train_x != data.x {
        return Err(Error::Precondition(
            "posterior training inputs differ from the dataset".into(),
        ));
    }
    let n = data.len();
    let prior_term = priors.log_density(&posterior.kernel);
    if n == 0 {
        return Ok(prior_term);
    }
    let factor = kernel_factor(&data.x, &posterior.kernel)?;
    let l_s = &posterior.cov_factor;
    let m = &posterior.mean;
    let mut data_term = 0.0;
    for i in 0..n {
        let sd = l_s.row(i).norm();
        data_term += expected_log_lik(data.y[i], m[i], sd).0;
    }
    let kinv = lower_triangular_inverse(&factor.l);
    let trace = (&kinv * l_s).norm_squared();
    let maha = (&kinv * m).norm_squared();
    let logdet_k = linalg::log_det_from_factor(&factor.l);
    let logdet_s = 2.0 * l_s.diagonal().iter().map(|v| v.abs().ln()).sum::<f64>();
    let kl = 0.5 * (trace + maha - n as f64 + logdet_k - logdet_s);
    Ok(data_term - kl + prior_term)
}

/// Positions of the unconstrained parameters in the flat optimization vector.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    family: KernelFamily,
    lengthscale_dims: Vec<usize>,
    bounds: (f64, f64),
}

impl Layout {
    fn new(n: usize, spec: &KernelSpec, priors: &HyperPriors) -> Self {
        Layout {
            n,
            family: spec.family,
            lengthscale_dims: (0..spec.dim()).filter(|&k| spec.uses_lengthscale(k)).collect(),
            bounds: priors.output_scale_bounds,
        }
    }

    fn tri_len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    fn hyper_offset(&self) -> usize {
        self.n + self.tri_len()
    }

    fn has_linear(&self) -> bool {
        self.family == KernelFamily::AdditiveLinearRbf
    }

    fn len(&self) -> usize {
        self.hyper_offset() + self.lengthscale_dims.len() + 1 + usize::from(self.has_linear())
    }

    fn to_scale(&self, raw: f64) -> f64 {
        let (lo, hi) = self.bounds;
        lo + (hi - lo) * sigmoid(raw)
    }

    fn scale_derivative(&self, raw: f64) -> f64 {
        let (lo, hi) = self.bounds;
        let s = sigmoid(raw);
        (hi - lo) * s * (1.0 - s)
    }

    fn from_scale(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds;
        let t = ((v - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
        (t / (1.0 - t)).ln()
    }

    fn kernel(&self, p: &[f64], template: &KernelSpec) -> KernelSpec {
        let mut spec = template.clone();
        let h = &p[self.hyper_offset()..];
        for (j, &k) in self.lengthscale_dims.iter().enumerate() {
            spec.lengthscales[k] = h[j].exp();
        }
        let o = self.lengthscale_dims.len();
        spec.output_scale = self.to_scale(h[o]);
        if self.has_linear() {
            spec.linear_scale = self.to_scale(h[o + 1]);
        }
        spec
    }

    fn encode_hyper(&self, spec: &KernelSpec, out: &mut [f64]) {
        let h = &mut out[self.hyper_offset()..];
        for (j, &k) in self.lengthscale_dims.iter().enumerate() {
            h[j] = spec.lengthscales[k].ln();
        }
        let o = self.lengthscale_dims.len();
        h[o] = self.from_scale(spec.output_scale);
        if self.has_linear() {
            h[o + 1] = self.from_scale(spec.linear_scale);
        }
    }

    /// Whitened mean and lower factor (diagonal stored as logs).
    fn unpack_variational(&self, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let m = DVector::from_column_slice(&p[..n]);
        let mut l = DMatrix::zeros(n, n);
        let mut idx = n;
        for j in 0..n {
            for i in j..n {
                l[(i, j)] = if i == j { p[idx].exp() } else { p[idx] };
                idx += 1;
            }
        }
        (m, l)
    }

    fn pack_variational(&self, m: &DVector<f64>, l: &DMatrix<f64>, out: &mut [f64]) {
        let n = self.n;
        out[..n].copy_from_slice(m.as_slice());
        let mut idx = n;
        for j in 0..n {
            for i in j..n {
                out[idx] = if i == j { l[(i, j)].max(1e-12).ln() } else { l[(i, j)] };
                idx += 1;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The ELBO as a function of the flat unconstrained parameter vector
/// `[m_u, vech(L_u) with log diagonal, log lengthscales, logit scales]`.
pub struct Objective<'a> {
    data: &'a Dataset,
    priors: &'a HyperPriors,
    layout: Layout,
    template: KernelSpec,
    pair_sq: Vec<Vec<f64>>,
    x_rows: Vec<Vec<f64>>,
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
    spec: KernelSpec,
    factor: Factor,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a Dataset, priors: &'a HyperPriors, template: KernelSpec) -> Self {
        let layout = Layout::new(data.len(), &template, priors);
        let x_rows = rows(&data.x);
        let n = data.len();
        // Squared per-dimension differences, reused for lengthscale gradients.
        let pair_sq = (0..template.dim())
            .map(|k| {
                let mut v = Vec::with_capacity(n * n);
                for j in 0..n {
                    for i in 0..n {
                        let d = x_rows[i][k] - x_rows[j][k];
                        v.push(d * d);
                    }
                }
                v
            })
            .collect();
        Objective {
            data,
            priors,
            layout,
            template,
            pair_sq,
            x_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters of `q = prior` with the template hyperparameters.
    pub fn initial_point(&self) -> Vec<f64> {
        let n = self.layout.n;
        let mut p = vec![0.0; self.layout.len()];
        self.layout.pack_variational(&DVector::zeros(n), &DMatrix::identity(n, n), &mut p);
        self.layout.encode_hyper(&self.template, &mut p);
        p
    }

    pub fn value_and_gradient(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = self.evaluate(p)?;
        Ok((e.value, e.grad))
    }

    fn evaluate(&self, p: &[f64]) -> Result<Evaluation> {
        let lay = &self.layout;
        let n = lay.n;
        let spec = self.layout.kernel(p, &self.template);
        let kmat = kernel_matrix(&self.data.x, &self.data.x, &spec)?;
        let factor = cholesky_ladder(&kmat, spec.variance_scale(), false)?;
        let jitter_ratio = factor.jitter / spec.variance_scale();
        let l = &factor.l;
        let (m_u, l_u) = lay.unpack_variational(p);

        let mu = l * &m_u;
        let b = l * &l_u;
        let mut data_term = 0.0;
        let mut g_mu = DVector::zeros(n);
        let mut d_scale = DVector::zeros(n);
        for i in 0..n {
            let sd = b.row(i).norm();
            let (v, dm, ds) = expected_log_lik(self.data.y[i], mu[i], sd);
            data_term += v;
            g_mu[i] = dm;
            d_scale[i] = if sd > 0.0 { ds / sd } else { 0.0 };
        }
        let log_diag: f64 = (0..n).map(|i| l_u[(i, i)].ln()).sum();
        let kl = 0.5 * (l_u.norm_squared() + m_u.norm_squared() - n as f64) - log_diag;
        let prior_term = self.priors.log_density(&spec);
        let value = data_term - kl + prior_term;

        let mut grad = vec![0.0; lay.len()];
        // Variational mean.
        let g_mu_u = l.transpose() * &g_mu - &m_u;
        grad[..n].copy_from_slice(g_mu_u.as_slice());
        // Variational factor.
        let mut db = b.clone();
        for (i, mut row) in db.row_iter_mut().enumerate() {
            row *= d_scale[i];
        }
        let mut g_lu = l.transpose() * &db - &l_u;
        for i in 0..n {
            g_lu[(i, i)] += 1.0 / l_u[(i, i)];
        }
        let mut idx = n;
        for j in 0..n {
            for i in j..n {
                grad[idx] = if i == j { g_lu[(i, j)] * l_u[(i, j)] } else { g_lu[(i, j)] };
                idx += 1;
            }
        }
        // Back through the Cholesky factor of K.
        let mut g_l = &g_mu * m_u.transpose() + &db * l_u.transpose();
        tril_in_place(&mut g_l);
        let mut phi = l.transpose() * g_l;
        tril_in_place(&mut phi);
        for i in 0..n {
            phi[(i, i)] *= 0.5;
        }
        let kinv = lower_triangular_inverse(l);
        let sym = linalg::symmetrize(&phi);
        let kbar = kinv.transpose() * (sym * &kinv);

        let h0 = lay.hyper_offset();
        let kb = kbar.as_slice();
        let kbar_trace = kbar.trace();
        // RBF part of K without jitter, for the scale and lengthscale terms.
        let rbf_part: Vec<f64> = match spec.family {
            KernelFamily::Rbf => kmat.as_slice().to_vec(),
            KernelFamily::LinearIntensity => vec![0.0; n * n],
            KernelFamily::AdditiveLinearRbf => {
                let i = spec.intensity_dim;
                let mut v = kmat.as_slice().to_vec();
                for c in 0..n {
                    for r in 0..n {
                        v[c * n + r] -= spec.linear_scale * self.x_rows[r][i] * self.x_rows[c][i];
                    }
                }
                v
            }
        };
        for (j, &k) in lay.lengthscale_dims.iter().enumerate() {
            let l2 = spec.lengthscales[k] * spec.lengthscales[k];
            let g: f64 = kb
                .iter()
                .zip(&rbf_part)
                .zip(&self.pair_sq[k])
                .map(|((a, r), s)| a * r * s)
                .sum::<f64>()
                / l2;
            grad[h0 + j] = g + self.priors.lengthscale[k].dln_pdf_dlog(spec.lengthscales[k]);
        }
        let o = lay.lengthscale_dims.len();
        let raw_out = p[h0 + o];
        let d_out = match spec.family {
            KernelFamily::LinearIntensity => {
                let i = spec.intensity_dim;
                let mut s = 0.0;
                for c in 0..n {
                    for r in 0..n {
                        s += kb[c * n + r] * self.x_rows[r][i] * self.x_rows[c][i];
                    }
                }
                s
            }
            _ => kb.iter().zip(&rbf_part).map(|(a, r)| a * r).sum::<f64>() / spec.output_scale,
        };
        grad[h0 + o] = (d_out + jitter_ratio * kbar_trace) * lay.scale_derivative(raw_out);
        if lay.has_linear() {
            let i = spec.intensity_dim;
            let mut s = 0.0;
            for c in 0..n {
                for r in 0..n {
                    s += kb[c * n + r] * self.x_rows[r][i] * self.x_rows[c][i];
                }
            }
            grad[h0 + o + 1] = (s + jitter_ratio * kbar_trace) * lay.scale_derivative(p[h0 + o + 1]);
        }
        Ok(Evaluation {
            value,
            grad,
            spec,
            factor,
        })
    }
}

/// Maximizes the ELBO from the prior (`q(f) = p(f)`) and the given starting
/// hyperparameters.
pub fn fit(data: &Dataset, spec: &KernelSpec, priors: &HyperPriors, opts: &FitOptions) -> Result<FittedPosterior> {
    check_fit_inputs(data, spec, priors)?;
    let layout = Layout::new(data.len(), spec, priors);
    let mut p = vec![0.0; layout.len()];
    layout.pack_variational(&DVector::zeros(data.len()), &DMatrix::identity(data.len(), data.len()), &mut p);
    layout.encode_hyper(spec, &mut p);
    optimize(data, priors, spec.clone(), p, opts)
}

/// Maximizes the ELBO starting from `previous`. When the previous training
/// inputs are a prefix of `data.x` the variational state is extended with
/// prior-conditional entries for the new points; otherwise only the
/// hyperparameters carry over.
pub fn refit(
    data: &Dataset,
    previous: &FittedPosterior,
    priors: &HyperPriors,
    opts: &FitOptions,
) -> Result<FittedPosterior> {
    let spec = &previous.kernel;
    check_fit_inputs(data, spec, priors)?;
    let n_old = previous.len();
    let is_prefix = n_old <= data.len()
        && n_old > 0
        && previous.train_x == data.x.rows(0, n_old).clone_owned();
    if !is_prefix {
        return fit(data, spec, priors, opts);
    }
    let n = data.len();
    let layout = Layout::new(n, spec, priors);
    let mut m_u = DVector::zeros(n);
    m_u.rows_mut(0, n_old).copy_from(&previous.whitened_mean);
    let mut l_u = DMatrix::identity(n, n);
    l_u.view_mut((0, 0), (n_old, n_old)).copy_from(&previous.whitened_factor);
    for i in 0..n_old {
        if l_u[(i, i)] <= 0.0 {
            l_u[(i, i)] = 1e-6;
        }
    }
    let mut p = vec![0.0; layout.len()];
    layout.pack_variational(&m_u, &l_u, &mut p);
    layout.encode_hyper(spec, &mut p);
    optimize(data, priors, spec.clone(), p, opts)
}

fn check_fit_inputs(data: &Dataset, spec: &KernelSpec, priors: &HyperPriors) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Precondition("fit needs at least one observation".into()));
    }
    spec.validate()?;
    if data.dim() != spec.dim() || priors.lengthscale.len() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} dimensions, kernel {}, priors {}",
            data.dim(),
            spec.dim(),
            priors.lengthscale.len()
        )));
    }
    Ok(())
}

fn optimize(
    data: &Dataset,
    priors: &HyperPriors,
    template: KernelSpec,
    mut p: Vec<f64>,
    opts: &FitOptions,
) -> Result<FittedPosterior> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let objective = Objective::new(data, priors, template);
    let mut m1 = vec![0.0; p.len()];
    let mut m2 = vec![0.0; p.len()];
    let mut trace = Vec::with_capacity(opts.iters + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for it in 0..opts.iters {
        let eval = objective.evaluate(&p)?;
        if !eval.value.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteElbo { iteration: it });
        }
        trace.push(eval.value);
        if best.as_ref().is_none_or(|(v, _)| eval.value > *v) {
            best = Some((eval.value, p.clone()));
        }
        let t = (it + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (k, g) in eval.grad.iter().enumerate() {
            m1[k] = BETA1 * m1[k] + (1.0 - BETA1) * g;
            m2[k] = BETA2 * m2[k] + (1.0 - BETA2) * g * g;
            p[k] += opts.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + EPS);
        }
    }
    let mut eval = objective.evaluate(&p)?;
    if !eval.value.is_finite() {
        return Err(Error::NonFiniteElbo { iteration: opts.iters });
    }
    if let Some((v, bp)) = best {
        if v > eval.value {
            p = bp;
            eval = objective.evaluate(&p)?;
        }
    }
    trace.push(eval.value);
    let layout = &objective.layout;
    let (m_u, l_u) = layout.unpack_variational(&p);
    let l = &eval.factor.l;
    let mean = l * &m_u;
    let mut cov_factor = l * &l_u;
    tril_in_place(&mut cov_factor);
    Ok(FittedPosterior {
        kernel: eval.spec,
        train_x: data.x.clone(),
        mean,
        cov_factor,
        elbo_trace: trace,
        whitened_mean: m_u,
        whitened_factor: l_u,
        kernel_factor: eval.factor,
    })
}

/// Latent predictive at query rows `q`:
/// `mean = A m`, `cov = K_qq - A K_nq + A S A^T` with `A = K_qn K_nn^{-1}`.
pub fn predict_latent(posterior: &FittedPosterior, q: &DMatrix<f64>, want_joint: bool) -> Result<LatentPrediction> {
    let spec = &posterior.kernel;
    let qrows = rows(q);
    if q.ncols() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} columns, kernel expects {}",
            q.ncols(),
            spec.dim()
        )));
    }
    if q.iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
        log::warn!("latent prediction requested outside the unit box");
    }
    let k_diag: Vec<f64> = qrows.iter().map(|r| spec.eval(r, r)).collect();
    let nq = q.nrows();
    if posterior.is_empty() {
        let joint = if want_joint {
            let k = kernel_matrix(q, q, spec)?;
            Some(GaussianBlock::new(DVector::zeros(nq), k, vec![EntryLabel::Value; nq])?)
        } else {
            None
        };
        return Ok(LatentPrediction {
            mean: DVector::zeros(nq),
            var: DVector::from_vec(k_diag),
            joint,
        });
    }
    let k_nq = kernel_matrix(&posterior.train_x, q, spec)?;
    let w = posterior.whiten_cross(&k_nq);
    let mean = posterior.predictive_mean(&w);
    let var = posterior.predictive_var(&k_diag, &w);
    let joint = if want_joint {
        let k_qq = kernel_matrix(q, q, spec)?;
        let mut cov = linalg::symmetrize(&posterior.predictive_cov(&k_qq, &w, &w));
        for (j, v) in var.iter().enumerate() {
            cov[(j, j)] = *v;
        }
        Some(GaussianBlock::new(mean.clone(), cov, vec![EntryLabel::Value; nq])?)
    } else {
        None
    };
    Ok(LatentPrediction { mean, var, joint })
}

/// Mean and variance of `Φ(f)` for `f ~ N(mean, var)`.
pub fn probit_moments(mean: f64, var: f64) -> ProbPrediction {
    let var = var.max(0.0);
    let p_mean = norm_cdf(mean / (1.0 + var).sqrt());
    let second = gauss_hermite().expect(mean, var.sqrt(), |f| {
        let p = norm_cdf(f);
        p * p
    });
    let p_var = (second - p_mean * p_mean).clamp(0.0, p_mean * (1.0 - p_mean));
    ProbPrediction { p_mean, p_var }
}

pub fn predict_prob(posterior: &FittedPosterior, q: &DMatrix<f64>) -> Result<Vec<ProbPrediction>> {
    let lat = predict_latent(posterior, q, false)?;
    Ok(lat.mean.iter().zip(lat.var.iter()).map(|(m, v)| probit_moments(*m, *v)).collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_problem(seed: u64, n: usize) -> (Dataset, KernelSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let y = (0..n).map(|_| rng.random::<bool>()).collect();
        let spec = KernelSpec::rbf(vec![rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)], rng.random_range(1.2..3.8));
        (Dataset::new(x, y).unwrap(), spec)
    }

    #[test]
    fn prior_solution_reference_values() {
        let ig = solve_lengthscale_prior(0.1, 1.0).unwrap();
        // Independently solved with scipy.stats.invgamma.
        assert_relative_eq!(ig.shape, 4.629_089_520_398_345, max_relative = 1e-6);
        assert_relative_eq!(ig.rate, 1.103_365_980_094_873_4, max_relative = 1e-6);
        assert!((ig.cdf(0.1) - 0.01).abs() < 1e-3);
        assert!((ig.cdf(1.0) - 0.99).abs() < 1e-3);
        let mass = ig.cdf(1.0) - ig.cdf(0.1);
        assert!((0.979..=0.981).contains(&mass));
    }

    #[test]
    fn prior_solution_scales_with_range() {
        let a = solve_lengthscale_prior(0.1, 1.0).unwrap();
        let b = solve_lengthscale_prior(0.5, 5.0).unwrap();
        assert_relative_eq!(a.shape, b.shape, max_relative = 1e-6);
        assert_relative_eq!(b.rate, 5.0 * a.rate, max_relative = 1e-6);
    }

    #[test]
    fn prior_solution_rejects_inverted_range() {
        assert!(matches!(solve_lengthscale_prior(1.0, 1.0), Err(Error::Precondition(_))));
        assert!(matches!(solve_lengthscale_prior(2.0, 1.0), Err(Error::Precondition(_))));
        assert!(solve_lengthscale_prior(0.0, 1.0).is_err());
    }

    #[test]
    fn empty_elbo_is_log_prior() {
        let priors = HyperPriors::unit_box(2).unwrap();
        let spec = priors.initial_kernel(KernelFamily::Rbf, 0);
        let post = FittedPosterior::prior(spec.clone()).unwrap();
        let v = elbo(&post, &Dataset::empty(2), &priors).unwrap();
        assert_eq!(v, priors.log_density(&spec));
    }

    #[test]
    fn elbo_at_prior_single_point() {
        // q equal to the prior at one point with unit variance: KL = 0 and
        // the data term is E[ln Φ(f)], f ~ N(0, 1), which equals -1.
        let priors = HyperPriors::unit_box(1).unwrap();
        let spec = KernelSpec::rbf(vec![0.3], 1.0);
        let x = DMatrix::from_element(1, 1, 0.5);
        let jitter = 1e-6;
        let post = FittedPosterior::from_moments(
            spec.clone(),
            x.clone(),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, (1.0f64 + jitter).sqrt()),
        )
        .unwrap();
        let data = Dataset::new(x, vec![true]).unwrap();
        let v = elbo(&post, &data, &priors).unwrap() - priors.log_density(&spec);
        assert!((v + 1.0).abs() < 2e-3, "{v}");
    }

    #[test]
    fn fit_rejects_empty_data() {
        let priors = HyperPriors::unit_box(1).unwrap();
        let spec = priors.initial_kernel(KernelFamily::Rbf, 0);
        assert!(matches!(
            fit(&Dataset::empty(1), &spec, &priors, &FitOptions::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn all_positive_responses_push_probability_up() {
        let priors = HyperPriors::unit_box(1).unwrap();
        let spec = priors.initial_kernel(KernelFamily::Rbf, 0);
        let x = DMatrix::from_element(6, 1, 0.4);
        let data = Dataset::new(x, vec![true; 6]).unwrap();
        let post = fit(&data, &spec, &priors, &FitOptions::default()).unwrap();
        let p = predict_prob(&post, &DMatrix::from_element(1, 1, 0.4)).unwrap();
        assert!(p[0].p_mean >= 0.5);
    }

    #[test]
    fn balanced_responses_stay_near_half() {
        let priors = HyperPriors::unit_box(1).unwrap();
        let spec = priors.initial_kernel(KernelFamily::Rbf, 0);
        let x = DMatrix::from_element(6, 1, 0.4);
        let data = Dataset::new(x, vec![true, false, true, false, true, false]).unwrap();
        let post = fit(&data, &spec, &priors, &FitOptions::default()).unwrap();
        let p = predict_prob(&post, &DMatrix::from_element(1, 1, 0.4)).unwrap();
        assert!((0.35..=0.65).contains(&p[0].p_mean), "{}", p[0].p_mean);
    }

    #[test]
    fn fitted_factor_has_positive_diagonal() {
        let (data, spec) = random_problem(4, 8);
        let priors = HyperPriors::unit_box(2).unwrap();
        let post = fit(&data, &spec, &priors, &FitOptions { iters: 50, learning_rate: 0.05 }).unwrap();
        assert!(post.cov_factor.diagonal().iter().all(|v| *v > 0.0));
        assert_eq!(post.mean.len(), 8);
        let last = *post.elbo_trace.last().unwrap();
        let best = post.elbo_trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(last >= best - 0.01 * best.abs());
    }

    #[test]
    fn fit_is_deterministic() {
        let (data, spec) = random_problem(5, 10);
        let priors = HyperPriors::unit_box(2).unwrap();
        let opts = FitOptions { iters: 40, learning_rate: 0.05 };
        let a = fit(&data, &spec, &priors, &opts).unwrap();
        let b = fit(&data, &spec, &priors, &opts).unwrap();
        assert_eq!(a.elbo_trace, b.elbo_trace);
    }

    #[test]
    fn whitened_objective_matches_public_elbo() {
        let (data, spec) = random_problem(6, 5);
        let priors = HyperPriors::unit_box(2).unwrap();
        let post = fit(&data, &spec, &priors, &FitOptions { iters: 30, learning_rate: 0.05 }).unwrap();
        let direct = elbo(&post, &data, &priors).unwrap();
        assert_relative_eq!(direct, *post.elbo_trace.last().unwrap(), max_relative = 1e-9);
    }

    #[test]
    fn warm_start_extends_with_prior_conditional_mean() {
        let (data, spec) = random_problem(7, 6);
        let priors = HyperPriors::unit_box(2).unwrap();
        let first = Dataset::new(data.x.rows(0, 5).clone_owned(), data.y[..5].to_vec()).unwrap();
        let post = fit(&first, &spec, &priors, &FitOptions { iters: 40, learning_rate: 0.05 }).unwrap();
        let zero_iters = FitOptions { iters: 0, learning_rate: 0.05 };
        let warm = refit(&data, &post, &priors, &zero_iters).unwrap();
        let pred = predict_latent(&post, &data.x.rows(5, 1).clone_owned(), false).unwrap();
        assert_relative_eq!(warm.mean[5], pred.mean[0], epsilon = 1e-9);
        for i in 0..5 {
            assert_relative_eq!(warm.mean[i], post.mean[i], epsilon = 1e-12);
        }
    }

    fn fd_check(data: &Dataset, spec: KernelSpec, seed: u64) {
        let priors = HyperPriors::unit_box(data.dim()).unwrap();
        let obj = Objective::new(data, &priors, spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = obj.initial_point().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        let (_, g) = obj.value_and_gradient(&p).unwrap();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut pp = p.clone();
            pp[k] += h;
            let mut pm = p.clone();
            pm[k] -= h;
            let fd = (obj.value_and_gradient(&pp).unwrap().0 - obj.value_and_gradient(&pm).unwrap().0) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3);
            assert!(err < 1e-4, "coordinate {k}: analytic {} fd {fd}", g[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (data, spec) = random_problem(100 + seed, 4);
            fd_check(&data, spec.clone(), seed);
            fd_check(&data, KernelSpec::linear_intensity(2, 1, 2.0), seed);
            fd_check(&data, KernelSpec::additive(spec.lengthscales.clone(), 1, 1.5, 2.5), seed);
        }
    }

    #[test]
    fn prior_predictive() {
        let spec = KernelSpec::rbf(vec![0.3, 0.3], 2.0);
        let post = FittedPosterior::prior(spec).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.7, 0.9]);
        let pred = predict_latent(&post, &q, true).unwrap();
        assert_eq!(pred.mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(pred.var.as_slice(), &[2.0, 2.0]);
        let p = predict_prob(&post, &q).unwrap();
        assert_eq!(p[0].p_mean, 0.5);
    }

    #[test]
    fn interpolates_variational_mean_at_data() {
        let (data, spec) = random_problem(8, 4);
        let m = DVector::from_vec(vec![0.3, -1.2, 0.8, 2.0]);
        let post = FittedPosterior::from_moments(spec, data.x.clone(), m.clone(), DMatrix::zeros(4, 4)).unwrap();
        let pred = predict_latent(&post, &data.x.rows(2, 1).clone_owned(), false).unwrap();
        // Exact up to the diagonal nugget on K.
        assert!(post.jitter() > 0.0);
        assert_relative_eq!(pred.mean[0], m[2], epsilon = 1e3 * post.jitter());
    }

    #[test]
    fn joint_marginals_match_marginal_output() {
        let (data, spec) = random_problem(9, 7);
        let priors = HyperPriors::unit_box(2).unwrap();
        let post = fit(&data, &spec, &priors, &FitOptions { iters: 30, learning_rate: 0.05 }).unwrap();
        let q = DMatrix::from_row_slice(3, 2, &[0.1, 0.1, 0.5, 0.6, 0.9, 0.2]);
        let pred = predict_latent(&post, &q, true).unwrap();
        let joint = pred.joint.unwrap();
        for j in 0..3 {
            assert!((joint.cov[(j, j)] - pred.var[j]).abs() <= 1e-10);
            assert!((joint.mean[j] - pred.mean[j]).abs() <= 1e-10);
        }
    }

    #[test]
    fn probit_moment_examples() {
        for v in [0.0, 0.3, 2.0, 10.0] {
            assert_eq!(probit_moments(0.0, v).p_mean, 0.5);
        }
        let p = probit_moments(1.96, 0.0);
        assert_relative_eq!(p.p_mean, 0.975_002_104_851_779_5, epsilon = 1e-12);
        assert!(p.p_var.abs() < 1e-12);
        // scipy.integrate.quad reference.
        let q = probit_moments(0.3, 0.8);
        assert_relative_eq!(q.p_mean, 0.588_468_363_120_939_3, epsilon = 1e-12);
        assert_relative_eq!(q.p_var, 0.070_339_035_952_611_82, epsilon = 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn probit_variance_bounded(mean in -6.0f64..6.0, var in 0.0f64..9.0) {
            let p = probit_moments(mean, var);
            proptest::prop_assert!(p.p_var <= p.p_mean * (1.0 - p.p_mean) + 1e-15);
            proptest::prop_assert!(p.p_var >= 0.0);
        }
    }
}
