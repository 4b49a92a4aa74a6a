//! Kernels, their derivative covariances, and exact multivariate-Gaussian
//! algebra.
//!
//! Point sets are `n x d` matrices with one stimulus configuration per row.
//! All functions here are pure; sampling takes the RNG explicitly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_ladder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    /// Squared exponential over every dimension, one lengthscale per dimension.
    Rbf,
    /// `scale * x_i * z_i` on the intensity dimension only.
    LinearIntensity,
    /// Linear kernel on the intensity dimension plus RBF on the context
    /// dimensions.
    AdditiveLinearRbf,
}

/// Kernel family and hyperparameters.
///
/// `lengthscales` always has one entry per input dimension; entries that the
/// family does not use (the intensity entry of the additive kernel, all
/// entries of the linear kernel) are carried but ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    /// Variance of the RBF component (of the linear kernel for
    /// `LinearIntensity`).
    pub output_scale: f64,
    /// Variance of the linear component of `AdditiveLinearRbf`.
    pub linear_scale: f64,
    pub intensity_dim: usize,
}

impl KernelSpec {
    pub fn rbf(lengthscales: Vec<f64>, output_scale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            lengthscales,
            output_scale,
            linear_scale: 1.0,
            intensity_dim: 0,
        }
    }

    pub fn linear_intensity(dim: usize, intensity_dim: usize, output_scale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::LinearIntensity,
            lengthscales: vec![1.0; dim],
            output_scale,
            linear_scale: 1.0,
            intensity_dim,
        }
    }

    pub fn additive(
        lengthscales: Vec<f64>,
        intensity_dim: usize,
        linear_scale: f64,
        output_scale: f64,
    ) -> Self {
        KernelSpec {
            family: KernelFamily::AdditiveLinearRbf,
            lengthscales,
            output_scale,
            linear_scale,
            intensity_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::Precondition("kernel needs at least one dimension".into()));
        }
        if self.lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Precondition(format!(
                "lengthscales must be positive, got {:?}",
                self.lengthscales
            )));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Precondition(format!(
                "output scale must be positive, got {}",
                self.output_scale
            )));
        }
        if self.family == KernelFamily::AdditiveLinearRbf
            && !(self.linear_scale.is_finite() && self.linear_scale > 0.0)
        {
            return Err(Error::Precondition(format!(
                "linear scale must be positive, got {}",
                self.linear_scale
            )));
        }
        if self.family != KernelFamily::Rbf && self.intensity_dim >= self.dim() {
            return Err(Error::Precondition(format!(
                "intensity dimension {} out of range for {} dimensions",
                self.intensity_dim,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Magnitude used to scale diagonal jitter.
    pub fn variance_scale(&self) -> f64 {
        match self.family {
            KernelFamily::AdditiveLinearRbf => self.output_scale + self.linear_scale,
            _ => self.output_scale,
        }
    }

    /// Whether dimension `k` enters through an RBF factor.
    pub fn uses_lengthscale(&self, k: usize) -> bool {
        match self.family {
            KernelFamily::Rbf => true,
            KernelFamily::LinearIntensity => false,
            KernelFamily::AdditiveLinearRbf => k != self.intensity_dim,
        }
    }

    /// Unit-variance RBF factor over the dimensions that use a lengthscale.
    fn rbf_unit(&self, x: &[f64], z: &[f64]) -> f64 {
        let mut s = 0.0;
        for (k, l) in self.lengthscales.iter().enumerate() {
            if self.uses_lengthscale(k) {
                let r = (x[k] - z[k]) / l;
                s += r * r;
            }
        }
        (-0.5 * s).exp()
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Rbf => self.output_scale * self.rbf_unit(x, z),
            KernelFamily::LinearIntensity => {
                let i = self.intensity_dim;
                self.output_scale * (x[i] * z[i])
            }
            KernelFamily::AdditiveLinearRbf => {
                let i = self.intensity_dim;
                self.linear_scale * (x[i] * z[i]) + self.output_scale * self.rbf_unit(x, z)
            }
        }
    }

    fn require_rbf(&self) -> Result<()> {
        if self.family == KernelFamily::Rbf {
            Ok(())
        } else {
            Err(Error::UnsupportedFamily(self.family))
        }
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn check_dims(x: &DMatrix<f64>, spec: &KernelSpec, what: &str) -> Result<()> {
    if x.ncols() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{what} has {} columns, kernel expects {}",
            x.ncols(),
            spec.dim()
        )));
    }
    Ok(())
}

/// Covariance matrix `K(X, Z)`.
pub fn kernel_matrix(x: &DMatrix<f64>, z: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    check_dims(x, spec, "X")?;
    check_dims(z, spec, "Z")?;
    let xr = rows(x);
    let zr = rows(z);
    Ok(DMatrix::from_fn(xr.len(), zr.len(), |i, j| spec.eval(&xr[i], &zr[j])))
}

/// `Cov[f(x), df(z)/dz_d]` under an RBF prior.
pub fn rbf_value_derivative_cov(x: &[f64], z: &[f64], d: usize, spec: &KernelSpec) -> Result<f64> {
    spec.require_rbf()?;
    check_point(x, z, d, spec)?;
    let l2 = spec.lengthscales[d] * spec.lengthscales[d];
    Ok(spec.eval(x, z) * (x[d] - z[d]) / l2)
}

/// `Cov[df(x)/dx_d, df(z)/dz_d]` under an RBF prior.
pub fn rbf_derivative_derivative_cov(
    x: &[f64],
    z: &[f64],
    d: usize,
    spec: &KernelSpec,
) -> Result<f64> {
    spec.require_rbf()?;
    check_point(x, z, d, spec)?;
    let l2 = spec.lengthscales[d] * spec.lengthscales[d];
    let diff = x[d] - z[d];
    Ok(spec.eval(x, z) * (1.0 / l2 - diff * diff / (l2 * l2)))
}

fn check_point(x: &[f64], z: &[f64], d: usize, spec: &KernelSpec) -> Result<()> {
    if x.len() != spec.dim() || z.len() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "points of length {} and {} for a {}-dimensional kernel",
            x.len(),
            z.len(),
            spec.dim()
        )));
    }
    if d >= spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "derivative dimension {d} out of range"
        )));
    }
    Ok(())
}

/// Cross-covariance between values at `x` rows and derivatives (along `d`)
/// at `z` rows.
pub fn value_derivative_matrix(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    d: usize,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    spec.require_rbf()?;
    check_dims(x, spec, "value points")?;
    check_dims(z, spec, "derivative points")?;
    if d >= spec.dim() {
        return Err(Error::DimensionMismatch(format!("derivative dimension {d} out of range")));
    }
    let xr = rows(x);
    let zr = rows(z);
    let l2 = spec.lengthscales[d] * spec.lengthscales[d];
    Ok(DMatrix::from_fn(xr.len(), zr.len(), |i, j| {
        spec.eval(&xr[i], &zr[j]) * (xr[i][d] - zr[j][d]) / l2
    }))
}

pub fn derivative_derivative_matrix(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    d: usize,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    spec.require_rbf()?;
    check_dims(x, spec, "derivative points")?;
    check_dims(z, spec, "derivative points")?;
    if d >= spec.dim() {
        return Err(Error::DimensionMismatch(format!("derivative dimension {d} out of range")));
    }
    let xr = rows(x);
    let zr = rows(z);
    let l2 = spec.lengthscales[d] * spec.lengthscales[d];
    Ok(DMatrix::from_fn(xr.len(), zr.len(), |i, j| {
        let diff = xr[i][d] - zr[j][d];
        spec.eval(&xr[i], &zr[j]) * (1.0 / l2 - diff * diff / (l2 * l2))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryLabel {
    Value,
    Derivative { dim: usize },
}

/// A multivariate normal over labelled entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlock {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub labels: Vec<EntryLabel>,
}

impl GaussianBlock {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, labels: Vec<EntryLabel>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() || labels.len() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean {}, cov {}x{}, labels {}",
                mean.len(),
                cov.nrows(),
                cov.ncols(),
                labels.len()
            )));
        }
        Ok(GaussianBlock { mean, cov, labels })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn scale(&self) -> f64 {
        let n = self.dim().max(1) as f64;
        self.cov.trace().abs() / n
    }
}

/// Zero-mean joint prior over `f(f_points)` followed by `df/dx_d` at
/// `deriv_points`, with `1e-6 * output_scale` diagonal jitter.
pub fn build_joint(
    f_points: &DMatrix<f64>,
    deriv_points: &DMatrix<f64>,
    d: usize,
    spec: &KernelSpec,
) -> Result<GaussianBlock> {
    spec.require_rbf()?;
    let n = f_points.nrows();
    let m = deriv_points.nrows();
    let kff = kernel_matrix(f_points, f_points, spec)?;
    let kfd = value_derivative_matrix(f_points, deriv_points, d, spec)?;
    let kdd = derivative_derivative_matrix(deriv_points, deriv_points, d, spec)?;
    let mut cov = DMatrix::zeros(n + m, n + m);
    cov.view_mut((0, 0), (n, n)).copy_from(&kff);
    cov.view_mut((0, n), (n, m)).copy_from(&kfd);
    cov.view_mut((n, 0), (m, n)).copy_from(&kfd.transpose());
    cov.view_mut((n, n), (m, m)).copy_from(&kdd);
    let jitter = linalg::JITTER_LADDER[0] * spec.output_scale;
    for i in 0..n + m {
        cov[(i, i)] += jitter;
    }
    // Fails here rather than at first use.
    cholesky_ladder(&cov, spec.output_scale, true)?;
    let mut labels = vec![EntryLabel::Value; n];
    labels.extend(std::iter::repeat_n(EntryLabel::Derivative { dim: d }, m));
    GaussianBlock::new(DVector::zeros(n + m), cov, labels)
}

/// Conditions `block` on the entries `observed_idx` taking `observed_vals`;
/// returns the Gaussian over the remaining entries in their original order.
pub fn condition(
    block: &GaussianBlock,
    observed_idx: &[usize],
    observed_vals: &DVector<f64>,
) -> Result<GaussianBlock> {
    let dim = block.dim();
    if observed_idx.len() != observed_vals.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} indices but {} values",
            observed_idx.len(),
            observed_vals.len()
        )));
    }
    let mut seen = vec![false; dim];
    for &i in observed_idx {
        if i >= dim {
            return Err(Error::Precondition(format!("index {i} out of range for {dim} entries")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Precondition(format!("index {i} observed twice")));
        }
    }
    if observed_idx.is_empty() {
        return Ok(block.clone());
    }
    let rest: Vec<usize> = (0..dim).filter(|i| !seen[*i]).collect();
    let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| block.cov[(r[i], c[j])]);
    let s_bb = sub(observed_idx, observed_idx);
    let s_ab = sub(&rest, observed_idx);
    let s_aa = sub(&rest, &rest);
    let mu_a = DVector::from_fn(rest.len(), |i, _| block.mean[rest[i]]);
    let mu_b = DVector::from_fn(observed_idx.len(), |i, _| block.mean[observed_idx[i]]);

    let factor = cholesky_ladder(&s_bb, block.scale(), true)?;
    // V = L^-1 S_BA, so S_AB S_BB^-1 S_BA = V^T V.
    let v = linalg::solve_lower(&factor.l, &s_ab.transpose());
    let resid = linalg::solve_lower_vec(&factor.l, &(observed_vals - mu_b));
    let mean = mu_a + v.transpose() * resid;
    let cov = linalg::symmetrize(&(s_aa - v.transpose() * &v));
    let labels = rest.iter().map(|&i| block.labels[i]).collect();
    GaussianBlock::new(mean, cov, labels)
}

/// Lower factor used for sampling: exact Cholesky when possible, the jitter
/// ladder otherwise; an all-zero covariance yields a zero factor.
pub fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let scale = cov.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    Ok(cholesky_ladder(cov, scale, true)?.l)
}

/// `n` draws (rows) from `block`.
pub fn sample_gaussian<R: Rng + ?Sized>(block: &GaussianBlock, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let dim = block.dim();
    let l = sampling_factor(&block.cov)?;
    let z = DMatrix::from_fn(dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut draws = &l * z;
    for mut col in draws.column_iter_mut() {
        col += &block.mean;
    }
    Ok(draws.transpose())
}
