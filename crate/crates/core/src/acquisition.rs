//! Acquisition criteria and the candidate-grid optimizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::probit_moments;
use crate::quadrature::{binary_entropy, gauss_hermite, norm_cdf};
use crate::sobol::sobol;

/// Experiment domain in stimulus units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub names: Vec<String>,
    pub intensity_dim: usize,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, names: Vec<String>, intensity_dim: usize) -> Result<Self> {
        if lower.len() != upper.len() || names.len() != lower.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} lower bounds, {} upper bounds, {} names",
                lower.len(),
                upper.len(),
                names.len()
            )));
        }
        if lower.is_empty() {
            return Err(Error::Precondition("domain needs at least one dimension".into()));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Precondition(format!("dimension {k}: need lower < upper, got [{lo}, {hi}]")));
            }
        }
        if intensity_dim >= lower.len() {
            return Err(Error::Precondition(format!("intensity dimension {intensity_dim} out of range")));
        }
        Ok(DomainBox {
            lower,
            upper,
            names,
            intensity_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn range(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| (v - self.lower[k]) / self.range(k))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, v)| (self.lower[k] + v * self.range(k)).clamp(self.lower[k], self.upper[k]))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(k, v)| (self.lower[k]..=self.upper[k]).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AcquisitionKind {
    Sobol,
    Balv,
    Bald,
    Lse,
    Lsets,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 5] = [
        AcquisitionKind::Sobol,
        AcquisitionKind::Balv,
        AcquisitionKind::Bald,
        AcquisitionKind::Lse,
        AcquisitionKind::Lsets,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionKind::Sobol => "Sobol",
            AcquisitionKind::Balv => "BALV",
            AcquisitionKind::Bald => "BALD",
            AcquisitionKind::Lse => "LSE",
            AcquisitionKind::Lsets => "LSETS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    pub target: f64,
    pub confidence_mult: f64,
    pub candidate_count: usize,
    pub noisy_heuristic: bool,
    pub noise_sd: f64,
}

impl AcquisitionSpec {
    pub fn new(kind: AcquisitionKind) -> Self {
        AcquisitionSpec {
            kind,
            target: 0.75,
            confidence_mult: 3.84,
            candidate_count: 1024,
            noisy_heuristic: false,
            noise_sd: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::Precondition(format!("target must lie in (0, 1), got {}", self.target)));
        }
        if !(self.confidence_mult > 0.0) {
            return Err(Error::Precondition("confidence multiplier must be positive".into()));
        }
        if self.candidate_count < 2 {
            return Err(Error::Precondition("need at least two candidates".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Precondition("noise sd must be non-negative".into()));
        }
        Ok(())
    }
}

/// Predictive summary at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub latent_mean: f64,
    pub latent_var: f64,
    pub p_mean: f64,
    pub p_var: f64,
}

impl Prediction {
    pub fn from_latent(mean: f64, var: f64) -> Self {
        let p = probit_moments(mean, var);
        Prediction {
            latent_mean: mean,
            latent_var: var.max(0.0),
            p_mean: p.p_mean,
            p_var: p.p_var,
        }
    }

    pub fn p_sd(&self) -> f64 {
        self.p_var.max(0.0).sqrt()
    }
}

/// A fitted model as seen by acquisition, threshold extraction and metrics.
/// Query rows are in unit-box coordinates.
pub trait ModelEval {
    fn predict(&self, q: &DMatrix<f64>) -> Result<Vec<Prediction>>;

    /// One joint latent draw at the rows of `q`.
    fn sample_joint(&self, q: &DMatrix<f64>, rng: &mut dyn rand::RngCore) -> Result<DVector<f64>>;
}

pub fn balv(p_mean: &[f64]) -> Vec<f64> {
    p_mean.iter().map(|p| p * (1.0 - p)).collect()
}

/// Mutual information between the next outcome and `Φ(f)`, in nats.
pub fn bald(mean: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != var.len() {
        return Err(Error::DimensionMismatch(format!("{} means, {} variances", mean.len(), var.len())));
    }
    let gh = gauss_hermite();
    mean.iter()
        .zip(var)
        .map(|(&m, &v)| {
            if !(v >= 0.0) {
                return Err(Error::Precondition(format!("negative latent variance {v}")));
            }
            if v == 0.0 {
                return Ok(0.0);
            }
            let marginal = binary_entropy(norm_cdf(m / (1.0 + v).sqrt()));
            let conditional = gh.expect(m, v.sqrt(), |f| binary_entropy(norm_cdf(f)));
            Ok((marginal - conditional).clamp(0.0, std::f64::consts::LN_2))
        })
        .collect()
}

/// Straddle ambiguity `sqrt(beta) * sd - |p - target|`.
pub fn lse_ambiguity(p_mean: &[f64], p_sd: &[f64], spec: &AcquisitionSpec) -> Vec<f64> {
    let k = spec.confidence_mult.sqrt();
    p_mean
        .iter()
        .zip(p_sd)
        .map(|(p, s)| k * s - (p - spec.target).abs())
        .collect()
}

/// Index of the candidate whose sampled probability is closest to `target`.
pub fn lsets_select(
    sample: impl FnOnce(&DMatrix<f64>) -> Result<DVector<f64>>,
    candidates: &DMatrix<f64>,
    target: f64,
) -> Result<usize> {
    if candidates.nrows() == 0 {
        return Err(Error::Precondition("no candidates".into()));
    }
    let f = sample(candidates)?;
    let dist: Vec<f64> = f.iter().map(|v| -(norm_cdf(*v) - target).abs()).collect();
    argmax(&dist)
}

/// First index of the largest finite value.
pub fn argmax(values: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Numerical("no finite acquisition value".into()))
}

/// Min-max normalizes `values`, adds `N(0, sd)` noise and returns the argmax.
pub fn noisy_argmax<R: Rng + ?Sized>(values: &[f64], sd: f64, rng: &mut R) -> Result<usize> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Numerical("no finite acquisition value".into()));
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let noise = Normal::new(0.0, sd).map_err(|e| Error::Precondition(e.to_string()))?;
    let noised: Vec<f64> = values
        .iter()
        .map(|&v| {
            let z = noise.sample(rng);
            if !v.is_finite() {
                f64::NAN
            } else if span > 0.0 {
                (v - lo) / span + z
            } else {
                z
            }
        })
        .collect();
    argmax(&noised)
}

/// Sobol candidate design in the unit box.
pub fn candidate_grid(count: usize, dim: usize) -> Result<DMatrix<f64>> {
    sobol(count, dim, 1)
}

/// Acquisition values of a non-sampling criterion at `candidates`.
pub fn acquisition_values<M: ModelEval + ?Sized>(
    model: &M,
    spec: &AcquisitionSpec,
    candidates: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let pred = model.predict(candidates)?;
    match spec.kind {
        AcquisitionKind::Balv => Ok(balv(&pred.iter().map(|p| p.p_mean).collect::<Vec<_>>())),
        AcquisitionKind::Bald => bald(
            &pred.iter().map(|p| p.latent_mean).collect::<Vec<_>>(),
            &pred.iter().map(|p| p.latent_var).collect::<Vec<_>>(),
        ),
        AcquisitionKind::Lse => Ok(lse_ambiguity(
            &pred.iter().map(|p| p.p_mean).collect::<Vec<_>>(),
            &pred.iter().map(Prediction::p_sd).collect::<Vec<_>>(),
            spec,
        )),
        AcquisitionKind::Sobol | AcquisitionKind::Lsets => Err(Error::Precondition(format!(
            "{} has no acquisition surface",
            spec.kind.name()
        ))),
    }
}

/// Picks a candidate from precomputed acquisition values.
pub fn select_from_values<R: Rng + ?Sized>(values: &[f64], spec: &AcquisitionSpec, rng: &mut R) -> Result<usize> {
    if spec.noisy_heuristic {
        noisy_argmax(values, spec.noise_sd, rng)
    } else {
        argmax(values)
    }
}

/// Next point (unit coordinates) chosen over the candidate design.
pub fn optimize_acquisition<M: ModelEval + ?Sized, R: Rng>(
    model: &M,
    spec: &AcquisitionSpec,
    candidates: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let index = match spec.kind {
        AcquisitionKind::Lsets => lsets_select(|c| model.sample_joint(c, rng), candidates, spec.target)?,
        _ => {
            let values = acquisition_values(model, spec, candidates)?;
            select_from_values(&values, spec, rng)?
        }
    };
    Ok(candidates.row(index).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balv_examples() {
        assert_eq!(balv(&[0.5, 0.0, 1.0, 0.75]), vec![0.25, 0.0, 0.0, 0.1875]);
    }

    #[test]
    fn bald_examples() {
        assert_eq!(bald(&[0.7], &[0.0]).unwrap(), vec![0.0]);
        // Reference values by adaptive quadrature (scipy.integrate.quad).
        assert_relative_eq!(bald(&[0.0], &[1.0]).unwrap()[0], 0.193_147_180_559_945_06, epsilon = 1e-4);
        assert_relative_eq!(bald(&[0.7], &[2.5]).unwrap()[0], 0.294_100_089_920_818_5, epsilon = 1e-4);
        let a = bald(&[0.9], &[1.3]).unwrap()[0];
        let b = bald(&[-0.9], &[1.3]).unwrap()[0];
        assert!((a - b).abs() < 1e-14);
        assert!(bald(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn lse_examples() {
        let spec = AcquisitionSpec::new(AcquisitionKind::Lse);
        let v = lse_ambiguity(&[0.6, 0.75, 0.9], &[0.1, 0.1, 0.0], &spec);
        assert_relative_eq!(v[0], 3.84f64.sqrt() * 0.1 - 0.15, epsilon = 1e-15);
        assert_relative_eq!(v[0], 0.046, epsilon = 1e-3);
        assert_relative_eq!(v[1], 3.84f64.sqrt() * 0.1, epsilon = 1e-15);
        assert!(v[2] < 0.0);
    }

    #[test]
    fn argmax_ties_and_failures() {
        assert_eq!(argmax(&[1.0, 1.0, 1.0]).unwrap(), 0);
        assert_eq!(argmax(&[f64::NAN, 2.0, 2.0]).unwrap(), 1);
        assert!(matches!(argmax(&[f64::NAN, f64::INFINITY]), Err(Error::Numerical(_))));
    }

    #[test]
    fn noisy_selection_is_seeded() {
        let values: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = noisy_argmax(&values, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = noisy_argmax(&values, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lsets_single_and_degenerate() {
        let c = DMatrix::from_row_slice(1, 1, &[0.3]);
        assert_eq!(lsets_select(|_| Ok(DVector::from_element(1, 2.0)), &c, 0.75).unwrap(), 0);
        let c = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]);
        let f = DVector::from_vec(vec![-1.0, 0.6, 2.0]);
        assert_eq!(lsets_select(|_| Ok(f.clone()), &c, 0.75).unwrap(), 1);
        assert!(lsets_select(|_| Ok(f.clone()), &DMatrix::zeros(0, 1), 0.75).is_err());
    }

    #[test]
    fn grid_argmax_finds_interior_peak() {
        let cand = candidate_grid(1024, 2).unwrap();
        let c = [0.3, 0.62];
        let values: Vec<f64> = cand
            .row_iter()
            .map(|r| -((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)).sqrt())
            .collect();
        let spec = AcquisitionSpec::new(AcquisitionKind::Balv);
        let i = select_from_values(&values, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let d = ((cand[(i, 0)] - c[0]).powi(2) + (cand[(i, 1)] - c[1]).powi(2)).sqrt();
        // 1024 points in 2-D: spacing about 1/32.
        assert!(d < 1.0 / 32.0, "{d}");
    }

    #[test]
    fn box_round_trip() {
        let b = DomainBox::new(vec![-20.0, 0.25], vec![120.0, 8.0], vec!["db".into(), "khz".into()], 0).unwrap();
        let x = vec![50.0, 3.0];
        let u = b.to_unit(&x);
        let back = b.from_unit(&u);
        assert_relative_eq!(back[0], x[0], epsilon = 1e-12);
        assert_relative_eq!(back[1], x[1], epsilon = 1e-12);
        assert!(DomainBox::new(vec![0.0, 0.0], vec![0.0, 1.0], vec!["a".into(), "b".into()], 0).is_err());
    }

    proptest! {
        #[test]
        fn bald_within_information_bounds(m in -5.0f64..5.0, v in 0.0f64..25.0) {
            let b = bald(&[m], &[v]).unwrap()[0];
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&b));
        }

        #[test]
        fn balv_and_lse_agree_at_half(ps in proptest::collection::vec(0.01f64..0.99, 2..30), sd in 0.0f64..0.3) {
            let mut spec = AcquisitionSpec::new(AcquisitionKind::Lse);
            spec.target = 0.5;
            let sds = vec![sd; ps.len()];
            let a = argmax(&balv(&ps)).unwrap();
            let b = argmax(&lse_ambiguity(&ps, &sds, &spec)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
