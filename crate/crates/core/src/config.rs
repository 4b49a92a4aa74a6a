//! INI experiment configuration shared by the server and the benchmark
//! harness.
//!
//! ```ini
//! [common]
//! parnames = [context, intensity]
//! lb = [-1, -1]
//! ub = [1, 1]
//! target = 0.75
//! intensity_dim = 1
//!
//! [init_strat]
//! n_trials = 5
//! generator = SobolGenerator
//!
//! [opt_strat]
//! n_trials = 145
//! model = MonotonicRBF
//! acqf = LSE
//! ```
//!
//! Keys and section names are case-insensitive.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use configparser::ini::Ini;

use crate::acquisition::{AcquisitionKind, DomainBox};
use crate::benchmark::{default_checkpoints, BenchmarkConfig};
use crate::error::{Error, Result};
use crate::strategy::{ModelKind, StrategyConfig};
use crate::testfuns::TestFunction;

const GENERATORS: [&str; 2] = ["SobolGenerator", "Sobol"];

/// Benchmark-only options from the optional `[benchmark]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSection {
    pub test_function: String,
    pub beta: f64,
    pub table: Option<PathBuf>,
    pub replications: usize,
    pub eval_grid_n: usize,
    pub checkpoints: Option<Vec<usize>>,
    pub seed: u64,
    pub workers: usize,
    pub interior_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: StrategyConfig,
    /// Seed given in `[opt_strat]`; `strategy.seed` is 0 when absent.
    pub seed: Option<u64>,
    pub benchmark: Option<BenchmarkSection>,
}

struct Source {
    ini: Ini,
}

impl Source {
    fn raw(&self, section: &str, key: &str) -> Option<String> {
        self.ini
            .get(section, key)
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
    }

    fn has_section(&self, section: &str) -> bool {
        self.ini.sections().iter().any(|s| s == section)
    }

    fn required(&self, section: &str, key: &str) -> Result<String> {
        self.raw(section, key)
            .ok_or_else(|| Error::config(key, format!("missing required key in [{section}]")))
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    fn or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    fn flag(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
            },
        }
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(section, key) else {
            return Ok(None);
        };
        let items = parse_list(&v).map_err(|m| Error::config(key, m))?;
        items
            .iter()
            .map(|s| s.parse().map_err(|_| Error::config(key, format!("cannot parse element `{s}`"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

/// Splits `[a, b, c]` (brackets optional) into trimmed items.
pub fn parse_list(text: &str) -> std::result::Result<Vec<String>, String> {
    let t = text.trim();
    let inner = match (t.strip_prefix('['), t.strip_suffix(']')) {
        (Some(_), Some(_)) => &t[1..t.len() - 1],
        (None, None) => t,
        _ => return Err(format!("unbalanced brackets in `{t}`")),
    };
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    let items: Vec<String> = inner.split(',').map(|s| s.trim().to_string()).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err(format!("empty element in `{t}`"));
    }
    Ok(items)
}

fn load(text: &str) -> Result<Source> {
    let mut ini = Ini::new();
    ini.read(text.to_string())
        .map_err(|m| Error::config("ini", m))?;
    Ok(Source { ini })
}

fn parse_benchmark(src: &Source) -> Result<Option<BenchmarkSection>> {
    const S: &str = "benchmark";
    if !src.has_section(S) {
        return Ok(None);
    }
    Ok(Some(BenchmarkSection {
        test_function: src.required(S, "test_function")?,
        beta: src.or(S, "beta", 1.0)?,
        table: src.raw(S, "table").map(PathBuf::from),
        replications: src.or(S, "replications", 20)?,
        eval_grid_n: src.or(S, "eval_grid_n", 30)?,
        checkpoints: src.list(S, "checkpoints")?,
        seed: src.or(S, "seed", 0)?,
        workers: src.or(S, "workers", 1)?,
        interior_only: src.flag(S, "interior_only", false)?,
    }))
}

fn parse_domain(src: &Source, fallback: Option<&DomainBox>) -> Result<DomainBox> {
    const S: &str = "common";
    let lb: Option<Vec<f64>> = src.list(S, "lb")?;
    let ub: Option<Vec<f64>> = src.list(S, "ub")?;
    let (lb, ub) = match (lb, ub, fallback) {
        (Some(l), Some(u), _) => (l, u),
        (None, None, Some(d)) => (d.lower.clone(), d.upper.clone()),
        (None, _, _) => return Err(Error::config("lb", "missing required key in [common]")),
        (_, None, _) => return Err(Error::config("ub", "missing required key in [common]")),
    };
    if lb.len() != ub.len() {
        return Err(Error::config("ub", format!("{} lower bounds but {} upper bounds", lb.len(), ub.len())));
    }
    if lb.is_empty() {
        return Err(Error::config("lb", "need at least one dimension"));
    }
    for (k, (l, u)) in lb.iter().zip(&ub).enumerate() {
        if !(l < u) {
            return Err(Error::config("lb", format!("dimension {k}: lb {l} must be below ub {u}")));
        }
    }
    let d = lb.len();
    let names = match src.list::<String>(S, "parnames")? {
        Some(n) => n,
        None => match fallback {
            Some(f) if f.dim() == d => f.names.clone(),
            _ => (0..d).map(|k| format!("x{k}")).collect(),
        },
    };
    if names.len() != d {
        return Err(Error::config("parnames", format!("{} names for {d} dimensions", names.len())));
    }
    let intensity_dim = src.or(S, "intensity_dim", fallback.map_or(d - 1, |f| f.intensity_dim))?;
    if intensity_dim >= d {
        return Err(Error::config("intensity_dim", format!("{intensity_dim} is not below the dimension count {d}")));
    }
    DomainBox::new(lb, ub, names, intensity_dim).map_err(|e| Error::config("lb", e.to_string()))
}

fn build(src: &Source, bench: Option<&BenchmarkSection>) -> Result<(StrategyConfig, Option<u64>)> {
    let tf_domain = match bench {
        Some(b) => Some(test_function(b)?.domain),
        None => None,
    };
    let domain = parse_domain(src, tf_domain.as_ref())?;

    let model_name = src.required("opt_strat", "model")?;
    let model = ModelKind::parse(&model_name).ok_or_else(|| {
        let valid: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        Error::config("model", format!("unknown model `{model_name}`; valid: {}", valid.join(", ")))
    })?;
    let acq_name = src.required("opt_strat", "acqf")?;
    let acq = AcquisitionKind::parse(&acq_name).ok_or_else(|| {
        let valid: Vec<&str> = AcquisitionKind::ALL.iter().map(|k| k.name()).collect();
        Error::config("acqf", format!("unknown acquisition `{acq_name}`; valid: {}", valid.join(", ")))
    })?;
    if let Some(g) = src.raw("init_strat", "generator") {
        if !GENERATORS.iter().any(|n| n.eq_ignore_ascii_case(&g)) {
            return Err(Error::config("generator", format!("unknown generator `{g}`; valid: {}", GENERATORS.join(", "))));
        }
    }

    let mut cfg = StrategyConfig::new(domain, model, acq);
    cfg.init_trials = src.or("init_strat", "n_trials", cfg.init_trials)?;
    cfg.adaptive_trials = src.or("opt_strat", "n_trials", cfg.adaptive_trials)?;
    cfg.refit_every = src.or("opt_strat", "refit_every", cfg.refit_every)?;
    let seed: Option<u64> = src.parsed("opt_strat", "seed")?;
    cfg.seed = seed.unwrap_or(0);

    cfg.acq.target = src.or("common", "target", cfg.acq.target)?;
    cfg.acq.confidence_mult = src.or("acqf", "confidence_mult", cfg.acq.confidence_mult)?;
    cfg.acq.candidate_count = src.or("acqf", "candidate_count", cfg.acq.candidate_count)?;
    cfg.acq.noisy_heuristic = src.flag("acqf", "noisy_heuristic", cfg.acq.noisy_heuristic)?;
    cfg.acq.noise_sd = src.or("acqf", "noise_sd", cfg.acq.noise_sd)?;
    if !(cfg.acq.target > 0.0 && cfg.acq.target < 1.0) {
        return Err(Error::config("target", format!("must lie in (0, 1), got {}", cfg.acq.target)));
    }

    cfg.fit.cold.iters = src.or("model", "fit_iters", cfg.fit.cold.iters)?;
    cfg.fit.warm.iters = src.or("model", "refit_iters", cfg.fit.warm.iters)?;
    let lr = src.or("model", "learning_rate", cfg.fit.cold.learning_rate)?;
    cfg.fit.cold.learning_rate = lr;
    cfg.fit.warm.learning_rate = lr;
    cfg.monotonic.n_inducing = src.or("model", "n_inducing", cfg.monotonic.n_inducing)?;
    cfg.monotonic.n_draw = src.or("model", "n_draw", cfg.monotonic.n_draw)?;
    cfg.monotonic.n_keep = src.or("model", "n_keep", cfg.monotonic.n_keep)?;

    cfg.validate()?;
    Ok((cfg, seed))
}

fn test_function(b: &BenchmarkSection) -> Result<TestFunction> {
    TestFunction::by_name(&b.test_function, b.beta, b.table.as_deref())
}

/// Parses an experiment config into a validated strategy.
pub fn parse_config(text: &str) -> Result<StrategyConfig> {
    let src = load(text)?;
    let bench = parse_benchmark(&src)?;
    Ok(build(&src, bench.as_ref())?.0)
}

pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let src = load(text)?;
    let benchmark = parse_benchmark(&src)?;
    let (strategy, seed) = build(&src, benchmark.as_ref())?;
    Ok(ExperimentConfig {
        strategy,
        seed,
        benchmark,
    })
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    parse_experiment(&std::fs::read_to_string(path)?)
}

impl ExperimentConfig {
    /// Benchmark configuration; requires a `[benchmark]` section.
    pub fn benchmark_config(&self) -> Result<BenchmarkConfig> {
        let b = self
            .benchmark
            .as_ref()
            .ok_or_else(|| Error::config("benchmark", "missing [benchmark] section"))?;
        let tf = test_function(b)?;
        let strat = &self.strategy;
        if strat.domain.dim() != tf.domain.dim() {
            return Err(Error::config(
                "lb",
                format!("{} dimensions but {} expects {}", strat.domain.dim(), tf.name, tf.domain.dim()),
            ));
        }
        let checkpoints = b
            .checkpoints
            .clone()
            .unwrap_or_else(|| default_checkpoints(strat.init_trials, strat.total_trials()));
        let cfg = BenchmarkConfig {
            test_function: tf,
            strategy: strat.clone(),
            replications: b.replications,
            eval_grid_n: b.eval_grid_n,
            checkpoints,
            base_seed: b.seed,
            workers: b.workers,
            interior_only: b.interior_only,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FLAGSHIP: &str = "\
[common]
parnames = [context, intensity]
lb = [-1, -1]
ub = [1, 1]
target = 0.75
intensity_dim = 1

[init_strat]
n_trials = 5
generator = SobolGenerator

[opt_strat]
n_trials = 145
model = MonotonicRBF
acqf = LSE
";

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn flagship_config() {
        let c = parse_config(FLAGSHIP).unwrap();
        assert_eq!(c.model_kind, ModelKind::MonotonicRbf);
        assert_eq!(c.acq.kind, AcquisitionKind::Lse);
        assert_eq!(c.acq.target, 0.75);
        assert_eq!(c.total_trials(), 150);
        assert_eq!(c.domain.names, vec!["context", "intensity"]);
        assert_eq!(c.domain.intensity_dim, 1);
        assert_eq!(c.refit_every, 1);
        assert_eq!(c.acq.confidence_mult, 3.84);
    }

    #[test]
    fn keys_are_case_insensitive() {
        let text = FLAGSHIP.replace("model =", "MODEL =").replace("[common]", "[Common]");
        assert_eq!(parse_config(&text).unwrap(), parse_config(FLAGSHIP).unwrap());
    }

    #[test]
    fn degenerate_bounds_name_dimension() {
        let text = FLAGSHIP.replace("lb = [-1, -1]", "lb = [0, 0]").replace("ub = [1, 1]", "ub = [0, 1]");
        let e = parse_config(&text).unwrap_err();
        assert!(e.to_string().contains("dimension 0"), "{e}");
        assert_eq!(key_of(e), "lb");
    }

    #[test]
    fn unknown_acquisition_lists_names() {
        let e = parse_config(&FLAGSHIP.replace("acqf = LSE", "acqf = EI")).unwrap_err();
        let msg = e.to_string();
        for k in AcquisitionKind::ALL {
            assert!(msg.contains(k.name()), "{msg}");
        }
        assert_eq!(key_of(e), "acqf");
    }

    #[test]
    fn missing_and_malformed_keys() {
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("model = MonotonicRBF\n", "")).unwrap_err()), "model");
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("model = MonotonicRBF", "model = GP")).unwrap_err()), "model");
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("lb = [-1, -1]\n", "")).unwrap_err()), "lb");
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("n_trials = 5", "n_trials = five")).unwrap_err()), "n_trials");
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("ub = [1, 1]", "ub = [1, 1, 1]")).unwrap_err()), "ub");
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("target = 0.75", "target = 1.5")).unwrap_err()), "target");
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("SobolGenerator", "Random")).unwrap_err()), "generator");
        assert_eq!(key_of(parse_config(&FLAGSHIP.replace("[context, intensity]", "[a]")).unwrap_err()), "parnames");
    }

    #[test]
    fn list_syntax() {
        assert_eq!(parse_list("[a, b]").unwrap(), vec!["a", "b"]);
        assert_eq!(parse_list("1,2").unwrap(), vec!["1", "2"]);
        assert!(parse_list("[]").unwrap().is_empty());
        assert!(parse_list("[1, 2").is_err());
        assert!(parse_list("[1,,2]").is_err());
    }

    #[test]
    fn optional_sections_override_defaults() {
        let text = format!(
            "{FLAGSHIP}seed = 9\n\n[acqf]\nconfidence_mult = 2.0\nnoisy_heuristic = true\n\n[model]\nn_draw = 64\nn_keep = 8\nrefit_iters = 20\n"
        );
        let e = parse_experiment(&text).unwrap();
        assert_eq!(e.seed, Some(9));
        assert_eq!(e.strategy.seed, 9);
        assert_eq!(e.strategy.acq.confidence_mult, 2.0);
        assert!(e.strategy.acq.noisy_heuristic);
        assert_eq!((e.strategy.monotonic.n_draw, e.strategy.monotonic.n_keep), (64, 8));
        assert_eq!(e.strategy.fit.warm.iters, 20);
        let bad = format!("{FLAGSHIP}\n[model]\nn_draw = 4\nn_keep = 8\n");
        assert!(parse_config(&bad).is_err());
    }

    #[test]
    fn benchmark_section() {
        let text = format!("{FLAGSHIP}\n[benchmark]\ntest_function = f_det\nreplications = 3\ncheckpoints = [10, 150]\ninterior_only = yes\n");
        let e = parse_experiment(&text).unwrap();
        let b = e.benchmark_config().unwrap();
        assert_eq!(b.test_function.name, "det");
        assert_eq!(b.replications, 3);
        assert_eq!(b.checkpoints, vec![10, 150]);
        assert!(b.interior_only);
        assert!(parse_experiment(FLAGSHIP).unwrap().benchmark_config().is_err());

        // Bounds may come from the test function.
        let no_bounds = text.replace("lb = [-1, -1]\n", "").replace("ub = [1, 1]\n", "");
        let e = parse_experiment(&no_bounds).unwrap();
        assert_eq!(e.strategy.domain, TestFunction::detection().domain);

        let out_of_range = text.replace("[10, 150]", "[10, 151]");
        let e = parse_experiment(&out_of_range).unwrap().benchmark_config().unwrap_err();
        assert_eq!(key_of(e), "checkpoints");
        let e = parse_experiment(&text.replace("f_det", "f_nope")).unwrap_err();
        assert_eq!(key_of(e), "test_function");
    }
}
