//! Ground-truth psychometric fields and a simulated observer.
//!
//! Every test function has two dimensions, context first and intensity
//! second.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::DomainBox;
use crate::error::{Error, Result};
use crate::quadrature::{norm_cdf, norm_quantile};

/// Spread values used for the audiometric functions.
pub const BETA_GRID: [f64; 6] = [0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

pub const CONTEXT_DIM: usize = 0;
pub const INTENSITY_DIM: usize = 1;

/// Bundled synthetic audiogram used when no table is supplied.
pub const EXAMPLE_TABLE: &str = include_str!("../data/example_thresholds.csv");

pub fn theta_h(x_c: f64) -> f64 {
    let t = -1.0 + 0.2 * x_c;
    2.0 * (0.05 + 0.4 * t * t * x_c * x_c)
}

pub fn f_det(x_i: f64, x_c: f64) -> f64 {
    4.0 * (1.0 + x_i) / theta_h(x_c) - 4.0
}

pub fn f_disc(x_i: f64, x_c: f64) -> f64 {
    2.0 * (1.0 + x_i) / theta_h(x_c)
}

/// Audiometric thresholds (dB) against frequency (kHz), interpolated by a
/// natural cubic spline and extrapolated linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub frequencies: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub beta: f64,
    second_derivs: Vec<f64>,
}

impl ThresholdTable {
    pub fn new(frequencies: Vec<f64>, thresholds: Vec<f64>, beta: f64) -> Result<Self> {
        if frequencies.len() != thresholds.len() || frequencies.len() < 2 {
            return Err(Error::Precondition(format!(
                "threshold table needs two or more paired rows, got {} and {}",
                frequencies.len(),
                thresholds.len()
            )));
        }
        if frequencies.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Precondition("frequencies must be strictly ascending".into()));
        }
        if frequencies.iter().chain(&thresholds).any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite threshold table entry".into()));
        }
        if !(beta > 0.0) {
            return Err(Error::Precondition(format!("spread must be positive, got {beta}")));
        }
        let second_derivs = natural_spline(&frequencies, &thresholds);
        Ok(ThresholdTable {
            frequencies,
            thresholds,
            beta,
            second_derivs,
        })
    }

    /// Parses `freq_khz,threshold_db` CSV text.
    pub fn from_csv(text: &str, beta: f64) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().unwrap_or_default();
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["freq_khz", "threshold_db"] {
            return Err(Error::Precondition(format!("unexpected threshold table header `{header}`")));
        }
        let (mut f, mut t) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Precondition(format!("threshold table row {}: {e}", i + 2)))
            };
            if parts.len() != 2 {
                return Err(Error::Precondition(format!("threshold table row {} needs two fields", i + 2)));
            }
            f.push(parse(parts[0])?);
            t.push(parse(parts[1])?);
        }
        Self::new(f, t, beta)
    }

    pub fn from_csv_path(path: &Path, beta: f64) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, beta)
    }

    pub fn example(beta: f64) -> Result<Self> {
        Self::from_csv(EXAMPLE_TABLE, beta)
    }

    pub fn theta(&self, freq: f64) -> f64 {
        let (f, t, y2) = (&self.frequencies, &self.thresholds, &self.second_derivs);
        let n = f.len();
        if freq <= f[0] {
            return t[0] + self.end_slope(0) * (freq - f[0]);
        }
        if freq >= f[n - 1] {
            return t[n - 1] + self.end_slope(n - 2) * (freq - f[n - 1]);
        }
        let k = f.partition_point(|v| *v <= freq).clamp(1, n - 1);
        let (lo, hi) = (k - 1, k);
        let h = f[hi] - f[lo];
        let a = (f[hi] - freq) / h;
        let b = (freq - f[lo]) / h;
        a * t[lo] + b * t[hi] + ((a * a * a - a) * y2[lo] + (b * b * b - b) * y2[hi]) * h * h / 6.0
    }

    /// Spline slope at the outer end of boundary segment `seg`.
    fn end_slope(&self, seg: usize) -> f64 {
        let (f, t, y2) = (&self.frequencies, &self.thresholds, &self.second_derivs);
        let h = f[seg + 1] - f[seg];
        let secant = (t[seg + 1] - t[seg]) / h;
        if seg == 0 {
            secant - h * (2.0 * y2[0] + y2[1]) / 6.0
        } else {
            secant + h * (y2[seg] + 2.0 * y2[seg + 1]) / 6.0
        }
    }
}

/// Second derivatives of the natural cubic spline through `(x, y)`.
fn natural_spline(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut y2 = vec![0.0; n];
    let mut u = vec![0.0; n];
    for i in 1..n - 1 {
        let sig = (x[i] - x[i - 1]) / (x[i + 1] - x[i - 1]);
        let p = sig * y2[i - 1] + 2.0;
        y2[i] = (sig - 1.0) / p;
        let d = (y[i + 1] - y[i]) / (x[i + 1] - x[i]) - (y[i] - y[i - 1]) / (x[i] - x[i - 1]);
        u[i] = (6.0 * d / (x[i + 1] - x[i - 1]) - sig * u[i - 1]) / p;
    }
    y2[n - 1] = 0.0;
    for k in (0..n - 1).rev() {
        y2[k] = y2[k] * y2[k + 1] + u[k];
    }
    y2[0] = 0.0;
    y2
}

pub fn f_song(x_i: f64, x_c: f64, table: &ThresholdTable) -> f64 {
    (x_i - table.theta(x_c)) / table.beta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Field {
    Detection,
    Discrimination,
    Audiometric(ThresholdTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    pub field: Field,
    pub domain: DomainBox,
}

fn unit_square() -> DomainBox {
    DomainBox::new(
        vec![-1.0, -1.0],
        vec![1.0, 1.0],
        vec!["context".into(), "intensity".into()],
        INTENSITY_DIM,
    )
    .expect("valid box")
}

impl TestFunction {
    pub fn detection() -> Self {
        TestFunction {
            name: "det".into(),
            field: Field::Detection,
            domain: unit_square(),
        }
    }

    pub fn discrimination() -> Self {
        TestFunction {
            name: "disc".into(),
            field: Field::Discrimination,
            domain: unit_square(),
        }
    }

    /// Audiometric field over the table's frequency span and `[-20, 120]` dB.
    pub fn audiometric(table: ThresholdTable) -> Self {
        let (lo, hi) = (table.frequencies[0], *table.frequencies.last().unwrap());
        let domain = DomainBox::new(
            vec![lo, -20.0],
            vec![hi, 120.0],
            vec!["freq_khz".into(), "level_db".into()],
            INTENSITY_DIM,
        )
        .expect("ascending table");
        TestFunction {
            name: "song".into(),
            field: Field::Audiometric(table),
            domain,
        }
    }

    /// Looks up a built-in function; `song` uses `table` or the bundled
    /// example with spread `beta`.
    pub fn by_name(name: &str, beta: f64, table: Option<&Path>) -> Result<Self> {
        match name.trim().to_ascii_lowercase().trim_start_matches("f_") {
            "det" => Ok(Self::detection()),
            "disc" => Ok(Self::discrimination()),
            "song" => {
                let t = match table {
                    Some(p) => ThresholdTable::from_csv_path(p, beta)?,
                    None => ThresholdTable::example(beta)?,
                };
                Ok(Self::audiometric(t))
            }
            other => Err(Error::config(
                "test_function",
                format!("unknown test function `{other}`; expected one of det, disc, song"),
            )),
        }
    }

    pub fn names() -> [(&'static str, &'static str); 3] {
        [
            ("det", "detection field 4(1+x_i)/theta_h(x_c) - 4 on [-1,1]^2"),
            ("disc", "discrimination field 2(1+x_i)/theta_h(x_c) on [-1,1]^2"),
            ("song", "audiometric field (x_i - theta(x_c))/beta from a threshold table"),
        ]
    }

    /// Latent value at `x` (stimulus units, context then intensity).
    pub fn latent(&self, x: &[f64]) -> f64 {
        let (c, i) = (x[CONTEXT_DIM], x[INTENSITY_DIM]);
        match &self.field {
            Field::Detection => f_det(i, c),
            Field::Discrimination => f_disc(i, c),
            Field::Audiometric(t) => f_song(i, c, t),
        }
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        norm_cdf(self.latent(x))
    }

    /// Intensity with `Φ(f) = target` at context `c`, if it lies in the box.
    pub fn analytic_threshold(&self, c: f64, target: f64) -> Option<f64> {
        let z = norm_quantile(target);
        let t = match &self.field {
            Field::Detection => theta_h(c) * (z + 4.0) / 4.0 - 1.0,
            Field::Discrimination => theta_h(c) * z / 2.0 - 1.0,
            Field::Audiometric(table) => table.theta(c) + table.beta * z,
        };
        let k = INTENSITY_DIM;
        (self.domain.lower[k]..=self.domain.upper[k]).contains(&t).then_some(t)
    }
}

pub fn simulate_response<R: Rng + ?Sized>(tf: &TestFunction, x: &[f64], rng: &mut R) -> bool {
    rng.random::<f64>() < tf.prob(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn theta_h_examples() {
        assert_relative_eq!(theta_h(0.0), 0.1, epsilon = 1e-15);
        assert_relative_eq!(theta_h(1.0), 0.612, epsilon = 1e-12);
        assert_relative_eq!(theta_h(-1.0), 1.252, epsilon = 1e-12);
    }

    #[test]
    fn field_examples() {
        assert_relative_eq!(f_det(-1.0, 0.4), -4.0, epsilon = 1e-15);
        assert_relative_eq!(norm_cdf(f_det(-1.0, 0.4)), 3.167e-5, epsilon = 1e-7);
        assert_relative_eq!(f_det(0.0, 0.0), 36.0, epsilon = 1e-12);
        assert_relative_eq!(f_det(theta_h(0.3) - 1.0, 0.3), 0.0, epsilon = 1e-12);
        assert_eq!(f_disc(-1.0, 0.7), 0.0);
        assert_relative_eq!(f_disc(0.0, 0.0), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn disc_never_below_half_on_box() {
        for a in 0..50 {
            for b in 0..50 {
                let (c, i) = (-1.0 + 2.0 * a as f64 / 49.0, -1.0 + 2.0 * b as f64 / 49.0);
                assert!(norm_cdf(f_disc(i, c)) >= 0.5);
            }
        }
    }

    #[test]
    fn spline_examples() {
        let t = ThresholdTable::new(vec![1.0, 3.0], vec![10.0, 30.0], 1.0).unwrap();
        assert_relative_eq!(t.theta(2.0), 20.0, epsilon = 1e-12);
        assert_relative_eq!(t.theta(5.0), 50.0, epsilon = 1e-12);
        assert_relative_eq!(f_song(t.theta(2.4), 2.4, &t), 0.0, epsilon = 1e-12);
        let t2 = ThresholdTable::new(vec![1.0, 3.0], vec![10.0, 30.0], 2.0).unwrap();
        assert_relative_eq!(f_song(21.0, 2.0, &t), 1.0, epsilon = 1e-12);
        assert_relative_eq!(f_song(21.0, 2.0, &t2), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spline_passes_through_knots_and_extrapolates_smoothly() {
        let t = ThresholdTable::example(1.0).unwrap();
        for (f, v) in t.frequencies.iter().zip(&t.thresholds) {
            assert!((t.theta(*f) - v).abs() <= 1e-10);
        }
        let n = t.frequencies.len();
        let (lo, hi) = (t.frequencies[0], t.frequencies[n - 1]);
        let h = 1e-6;
        for x in [lo, hi] {
            let left = (t.theta(x) - t.theta(x - h)) / h;
            let right = (t.theta(x + h) - t.theta(x)) / h;
            assert!((left - right).abs() < 1e-3, "{x}: {left} {right}");
        }
    }

    #[test]
    fn table_validation() {
        assert!(ThresholdTable::new(vec![1.0], vec![1.0], 1.0).is_err());
        assert!(ThresholdTable::new(vec![2.0, 1.0], vec![1.0, 2.0], 1.0).is_err());
        assert!(ThresholdTable::from_csv("f,t\n1,2\n3,4\n", 1.0).is_err());
        assert!(ThresholdTable::from_csv("freq_khz,threshold_db\n1,2\n3,4\n", 1.0).is_ok());
    }

    #[test]
    fn analytic_thresholds_hit_target() {
        let song = TestFunction::audiometric(ThresholdTable::example(BETA_GRID[3]).unwrap());
        for tf in [TestFunction::detection(), TestFunction::discrimination(), song] {
            let (lo, hi) = (tf.domain.lower[0], tf.domain.upper[0]);
            for k in 0..=10 {
                let c = lo + (hi - lo) * k as f64 / 10.0;
                if let Some(t) = tf.analytic_threshold(c, 0.75) {
                    assert_relative_eq!(tf.prob(&[c, t]), 0.75, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn observer_rates() {
        let tf = TestFunction::detection();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // f_det = 10 at x_i where 4(1+x_i)/0.1 = 14.
        let x = [0.0, 0.35 - 1.0];
        assert_relative_eq!(tf.latent(&x), 10.0, epsilon = 1e-9);
        assert!((0..1000).all(|_| simulate_response(&tf, &x, &mut rng)));
        let x0 = [0.0, theta_h(0.0) - 1.0];
        let hits = (0..10_000).filter(|_| simulate_response(&tf, &x0, &mut rng)).count();
        assert!((hits as f64 / 1e4 - 0.5).abs() <= 0.015);
        let a: Vec<bool> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..20).map(|_| simulate_response(&tf, &x0, &mut r)).collect()
        };
        let b: Vec<bool> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..20).map(|_| simulate_response(&tf, &x0, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn det_is_affine_in_disc(i in -1.0f64..1.0, c in -1.0f64..1.0) {
            prop_assert!((f_det(i, c) - (2.0 * f_disc(i, c) - 4.0)).abs() < 1e-9);
            prop_assert!(theta_h(c) > 0.0);
        }
    }
}
