//! Test functions, error estimation and repeated-trial experiments.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{learn_with_tree_adaptation, TreeAdaptationParams};
use crate::basis::{PolynomialBasis, ProductMeasure};
use crate::error::{Error, Result};
use crate::learner::{learn, LearnReport, LearnerConfig};
use crate::network::TreeTensorNetwork;
use crate::oracle::{Function, Oracle};
use crate::rng::{derive_seed, stream, StreamRng, TAG_TEST, TAG_TREE, TAG_TRIAL};
use crate::tree::DimensionTree;

/// The benchmark functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum TestFunction {
    /// Polynomial potential of degree 4 on ℝ^d with the standard Gaussian measure.
    HenonHeiles { d: usize, sigma: f64 },
    /// 1/(10 + 2x₁ + x₃ + 2x₄ − x₅)² on [−1,1]⁶.
    Anisotropic6,
    /// Sum of d/2 bivariate blocks on disjoint pairs, on [−1,1]^d.
    SumBivariate { d: usize },
    /// Sum of d−2 trivariate blocks on overlapping triples, on [−1,1]^d.
    SumTrivariate { d: usize },
}

impl TestFunction {
    pub fn henon_heiles(d: usize, sigma: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidArgument(format!("henon-heiles needs d >= 2, got {d}")));
        }
        Ok(TestFunction::HenonHeiles { d, sigma })
    }

    pub fn sum_bivariate(d: usize) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::InvalidArgument(format!("sum-bivariate needs an even d, got {d}")));
        }
        Ok(TestFunction::SumBivariate { d })
    }

    pub fn sum_trivariate(d: usize) -> Result<Self> {
        if d < 4 {
            return Err(Error::InvalidArgument(format!("sum-trivariate needs d >= 4, got {d}")));
        }
        Ok(TestFunction::SumTrivariate { d })
    }

    /// Looks a function up by its command-line name. `dim` is ignored for
    /// anisotropic6.
    pub fn from_name(name: &str, dim: Option<usize>) -> Result<Self> {
        match name {
            "henon-heiles" => TestFunction::henon_heiles(dim.unwrap_or(8), 0.2),
            "anisotropic6" => match dim {
                None | Some(6) => Ok(TestFunction::Anisotropic6),
                Some(d) => Err(Error::InvalidArgument(format!("anisotropic6 has dimension 6, got {d}"))),
            },
            "sum-bivariate" => TestFunction::sum_bivariate(dim.unwrap_or(8)),
            "sum-trivariate" => TestFunction::sum_trivariate(dim.unwrap_or(8)),
            _ => Err(Error::InvalidArgument(format!("unknown function '{name}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::HenonHeiles { .. } => "henon-heiles",
            TestFunction::Anisotropic6 => "anisotropic6",
            TestFunction::SumBivariate { .. } => "sum-bivariate",
            TestFunction::SumTrivariate { .. } => "sum-trivariate",
        }
    }

    pub fn measure(&self) -> ProductMeasure {
        let d = Function::dim(self);
        match self {
            TestFunction::HenonHeiles { .. } => ProductMeasure::gaussian(d),
            _ => ProductMeasure::uniform(d, -1.0, 1.0),
        }
        .expect("valid measure")
    }

    /// Maximal leaf degree used when none is configured.
    pub fn default_degree(&self) -> usize {
        match self {
            TestFunction::HenonHeiles { .. } => 15,
            TestFunction::Anisotropic6 => 20,
            TestFunction::SumBivariate { .. } => 3,
            TestFunction::SumTrivariate { .. } => 2,
        }
    }

    /// Whether leaf degrees are selected adaptively by default.
    pub fn default_adaptive_basis(&self) -> bool {
        matches!(self, TestFunction::HenonHeiles { .. } | TestFunction::Anisotropic6)
    }

    pub fn leaf_families(&self, degree: usize) -> Vec<PolynomialBasis> {
        self.measure()
            .marginals()
            .iter()
            .map(|m| PolynomialBasis::for_measure(*m, degree))
            .collect()
    }

    pub fn oracle(&self) -> Oracle {
        Oracle::new(Arc::new(*self))
    }
}

impl Function for TestFunction {
    fn dim(&self) -> usize {
        match *self {
            TestFunction::HenonHeiles { d, .. } | TestFunction::SumBivariate { d } | TestFunction::SumTrivariate { d } => d,
            TestFunction::Anisotropic6 => 6,
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            TestFunction::HenonHeiles { sigma, .. } => {
                let quad: f64 = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
                let mut cubic = 0.0;
                let mut quartic = 0.0;
                for w in x.windows(2) {
                    cubic += w[0] * w[1] * w[1] - w[0] * w[0] * w[0];
                    let s = w[0] * w[0] + w[1] * w[1];
                    quartic += s * s;
                }
                quad + sigma * cubic + sigma / 16.0 * quartic
            }
            TestFunction::Anisotropic6 => {
                let s = 10.0 + 2.0 * x[0] + x[2] + 2.0 * x[3] - x[4];
                1.0 / (s * s)
            }
            TestFunction::SumBivariate { .. } => x
                .chunks_exact(2)
                .map(|c| {
                    let p = c[0] * c[1];
                    1.0 + p + p * p + p * p * p
                })
                .sum(),
            TestFunction::SumTrivariate { .. } => x
                .windows(3)
                .map(|w| {
                    let p = w[0] * w[1] * w[2];
                    1.0 + p + p * p
                })
                .sum(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestError {
    pub value: f64,
    /// False when u vanished on the test sample and the error is absolute.
    pub relative: bool,
}

/// Root-mean-square error of `network` against `oracle` on `n_test` draws
/// from the leaf measures, relative to the RMS of u unless `absolute` is set.
pub fn test_error(
    oracle: &Oracle,
    network: &TreeTensorNetwork,
    n_test: usize,
    absolute: bool,
    rng: &mut StreamRng,
) -> Result<TestError> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("n_test must be positive".into()));
    }
    let measure = ProductMeasure::new(network.leaf_bases().iter().map(|b| b.measure()).collect())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for _ in 0..n_test {
        let x = measure.sample(rng);
        let u = oracle.eval_uncounted(&x);
        let v = network.evaluate(&x)?;
        num += (u - v) * (u - v);
        den += u * u;
    }
    if absolute || den == 0.0 {
        Ok(TestError {
            value: (num / n_test as f64).sqrt(),
            relative: false,
        })
    } else {
        Ok(TestError {
            value: (num / den).sqrt(),
            relative: true,
        })
    }
}

/// Nearest-rank p-th percentile (0 < p ≤ 100) of `values`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TreeMode {
    Balanced,
    /// A random binary tree per trial.
    Random,
    /// A random balanced binary tree per trial.
    RandomBalanced,
    /// Tree learned by stochastic pairing.
    Adaptive,
    /// Node variable sets read from a JSON file (array of 0-based arrays).
    File(PathBuf),
}

impl FromStr for TreeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(TreeMode::Balanced),
            "rt" => Ok(TreeMode::Random),
            "rbt" => Ok(TreeMode::RandomBalanced),
            "slo" => Ok(TreeMode::Adaptive),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(TreeMode::File(PathBuf::from(p))),
                _ => Err(Error::InvalidArgument(format!("unknown tree mode '{s}'"))),
            },
        }
    }
}

impl TryFrom<String> for TreeMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TreeMode> for String {
    fn from(m: TreeMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for TreeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeMode::Balanced => write!(f, "balanced"),
            TreeMode::Random => write!(f, "rt"),
            TreeMode::RandomBalanced => write!(f, "rbt"),
            TreeMode::Adaptive => write!(f, "slo"),
            TreeMode::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub function: TestFunction,
    /// Maximal leaf degree; the function's default when absent.
    pub degree: Option<usize>,
    pub tolerances: Vec<f64>,
    pub tree: TreeMode,
    pub trials: usize,
    pub n_test: usize,
    pub absolute_error: bool,
    pub seed: u64,
    /// Worker threads for trials; 0 uses the global pool.
    pub threads: usize,
    pub learner: LearnerConfig,
    pub adaptation: TreeAdaptationParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::for_function(TestFunction::HenonHeiles { d: 8, sigma: 0.2 })
    }
}

impl ExperimentConfig {
    pub fn for_function(function: TestFunction) -> Self {
        ExperimentConfig {
            function,
            degree: None,
            tolerances: vec![1e-6],
            tree: TreeMode::Balanced,
            trials: 10,
            n_test: 1000,
            absolute_error: false,
            seed: 0,
            threads: 0,
            learner: LearnerConfig {
                adaptive_basis: function.default_adaptive_basis(),
                ..LearnerConfig::default()
            },
            adaptation: TreeAdaptationParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("trials and n_test must be positive".into()));
        }
        if self.tolerances.is_empty() || self.tolerances.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidArgument("tolerances must lie in (0, 1)".into()));
        }
        self.learner.validate()
    }

    pub fn degree(&self) -> usize {
        self.degree.unwrap_or_else(|| self.function.default_degree())
    }

    /// Seed of trial t; independent of the number of trials.
    pub fn trial_seed(&self, tolerance_index: usize, trial: usize) -> u64 {
        derive_seed(self.seed, &[TAG_TRIAL, tolerance_index as u64, trial as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub error: Option<TestError>,
    pub storage: usize,
    pub n: u64,
    pub n_optim: u64,
    pub n_total: u64,
    /// Node variable sets of the tree used.
    pub tree: Vec<Vec<usize>>,
    /// Selected leaf degrees, by variable.
    pub degrees: Vec<usize>,
    pub report: Option<LearnReport>,
    pub failure: Option<String>,
    pub wall_time: f64,
}

impl TrialResult {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Quantiles> {
        if values.is_empty() {
            return None;
        }
        Some(Quantiles {
            q10: quantile(values, 10.0),
            q50: quantile(values, 50.0),
            q90: quantile(values, 90.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSummary {
    pub tolerance: f64,
    pub trials: Vec<TrialResult>,
    pub failed: usize,
    /// Quantiles over successful trials.
    pub log_error: Option<Quantiles>,
    pub storage: Option<Quantiles>,
    pub n: Option<Quantiles>,
    pub n_total: Option<Quantiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ToleranceSummary>,
}

impl BenchmarkReport {
    pub fn all_succeeded(&self) -> bool {
        self.rows.iter().all(|r| r.failed == 0)
    }

    /// The report with wall-clock times zeroed, for comparing runs.
    pub fn without_timing(&self) -> BenchmarkReport {
        let mut out = self.clone();
        for row in &mut out.rows {
            for t in &mut row.trials {
                t.wall_time = 0.0;
                t.report = t.report.as_ref().map(|r| r.without_timing());
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "tol",
            "log_err_q10",
            "log_err_q50",
            "log_err_q90",
            "S_q10",
            "S_q50",
            "S_q90",
            "n_q10",
            "n_q50",
            "n_q90",
            "n_total_q10",
            "n_total_q50",
            "n_total_q90",
            "failed",
        ])?;
        let cell = |q: &Option<Quantiles>| -> [String; 3] {
            match q {
                Some(q) => [q.q10.to_string(), q.q50.to_string(), q.q90.to_string()],
                None => [String::new(), String::new(), String::new()],
            }
        };
        for row in &self.rows {
            let mut rec = vec![row.tolerance.to_string()];
            rec.extend(cell(&row.log_error));
            rec.extend(cell(&row.storage));
            rec.extend(cell(&row.n));
            rec.extend(cell(&row.n_total));
            rec.push(row.failed.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Loads node variable sets for a fixed tree.
pub fn read_tree_file(path: &std::path::Path, d: usize) -> Result<DimensionTree> {
    let text = std::fs::read_to_string(path)?;
    let sets: Vec<Vec<usize>> = serde_json::from_str(&text)?;
    DimensionTree::validate(d, &sets)
}

/// One learning run plus its test error; also returns the network.
pub fn run_trial(
    config: &ExperimentConfig,
    tolerance: f64,
    trial: usize,
    seed: u64,
) -> (TrialResult, Option<TreeTensorNetwork>) {
    let start = Instant::now();
    let oracle = config.function.oracle();
    let families = config.function.leaf_families(config.degree());
    let learner = LearnerConfig {
        tolerance,
        ..config.learner.clone()
    };
    let d = families.len();
    let mut tree_rng = stream(seed, &[TAG_TREE]);
    let outcome = match &config.tree {
        TreeMode::Adaptive => learn_with_tree_adaptation(&oracle, &families, &learner, &config.adaptation, seed)
            .map(|(_, net, rep)| (net, rep)),
        mode => {
            let tree = match mode {
                TreeMode::Balanced => DimensionTree::balanced_binary(d),
                TreeMode::Random => DimensionTree::random_binary(d, &mut tree_rng),
                TreeMode::RandomBalanced => DimensionTree::random_balanced(d, &mut tree_rng),
                TreeMode::File(p) => read_tree_file(p, d),
                TreeMode::Adaptive => unreachable!(),
            };
            tree.and_then(|t| learn(&oracle, &t, &families, &learner, seed))
        }
    };
    let mut result = TrialResult {
        trial,
        seed,
        error: None,
        storage: 0,
        n: 0,
        n_optim: 0,
        n_total: 0,
        tree: Vec::new(),
        degrees: Vec::new(),
        report: None,
        failure: None,
        wall_time: 0.0,
    };
    let network = match outcome {
        Ok((net, rep)) => {
            let mut test_rng = stream(seed, &[TAG_TEST]);
            match test_error(&oracle, &net, config.n_test, config.absolute_error, &mut test_rng) {
                Ok(e) => result.error = Some(e),
                Err(e) => result.failure = Some(e.to_string()),
            }
            result.storage = rep.storage;
            result.n = rep.n;
            result.n_optim = rep.n_optim;
            result.n_total = rep.n_total;
            result.tree = net.tree().node_sets();
            result.degrees = net.leaf_bases().iter().map(|b| b.degree()).collect();
            result.report = Some(rep);
            Some(net)
        }
        Err(e) => {
            result.failure = Some(e.to_string());
            None
        }
    };
    result.wall_time = start.elapsed().as_secs_f64();
    (result, network)
}

fn summarize(tolerance: f64, trials: Vec<TrialResult>) -> ToleranceSummary {
    let ok: Vec<&TrialResult> = trials.iter().filter(|t| t.succeeded()).collect();
    let col = |f: &dyn Fn(&TrialResult) -> f64| -> Option<Quantiles> {
        Quantiles::of(&ok.iter().map(|t| f(t)).collect::<Vec<_>>())
    };
    ToleranceSummary {
        tolerance,
        failed: trials.len() - ok.len(),
        log_error: col(&|t| t.error.map_or(f64::NAN, |e| e.value.log10())),
        storage: col(&|t| t.storage as f64),
        n: col(&|t| t.n as f64),
        n_total: col(&|t| t.n_total as f64),
        trials,
    }
}

/// Runs every (tolerance, trial) pair; failed trials are recorded, not fatal.
pub fn run_trials(config: &ExperimentConfig) -> Result<BenchmarkReport> {
    run_experiment(config).map(|(report, _)| report)
}

/// Like [`run_trials`], also returning the network of trial 0 at each tolerance.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(BenchmarkReport, Vec<Option<TreeTensorNetwork>>)> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..config.tolerances.len())
        .flat_map(|k| (0..config.trials).map(move |t| (k, t)))
        .collect();
    let work = || -> Vec<(TrialResult, Option<TreeTensorNetwork>)> {
        jobs.par_iter()
            .map(|&(k, t)| {
                let (res, net) = run_trial(config, config.tolerances[k], t, config.trial_seed(k, t));
                (res, if t == 0 { net } else { None })
            })
            .collect()
    };
    let results = if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(work)
    } else {
        work()
    };
    let mut rows: Vec<Vec<TrialResult>> = vec![Vec::new(); config.tolerances.len()];
    let mut models = vec![None; config.tolerances.len()];
    for ((k, t), (r, net)) in jobs.iter().zip(results) {
        rows[*k].push(r);
        if *t == 0 {
            models[*k] = net;
        }
    }
    let report = BenchmarkReport {
        config: config.clone(),
        rows: rows
            .into_iter()
            .zip(&config.tolerances)
            .map(|(trials, &tol)| summarize(tol, trials))
            .collect(),
    };
    Ok((report, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn henon_heiles_values() {
        let f = TestFunction::henon_heiles(8, 0.2).unwrap();
        assert_eq!(f.eval(&[0.0; 8]), 0.0);
        let mut e1 = [0.0; 8];
        e1[0] = 1.0;
        assert_abs_diff_eq!(f.eval(&e1), 0.3125, epsilon = 1e-15);
        assert!(TestFunction::henon_heiles(1, 0.2).is_err());
    }

    #[test]
    fn anisotropic_values() {
        let f = TestFunction::Anisotropic6;
        assert_abs_diff_eq!(f.eval(&[0.0; 6]), 0.01, epsilon = 1e-17);
        assert_abs_diff_eq!(f.eval(&[1.0, 0.0, 1.0, 1.0, -1.0, 0.0]), 1.0 / 256.0, epsilon = 1e-17);
    }

    #[test]
    fn block_sums() {
        let b = TestFunction::sum_bivariate(8).unwrap();
        assert_eq!(b.eval(&[1.0; 8]), 16.0);
        assert_eq!(b.eval(&[0.0; 8]), 4.0);
        assert!(TestFunction::sum_bivariate(7).is_err());
        let t = TestFunction::sum_trivariate(19).unwrap();
        assert_eq!(t.eval(&[0.0; 19]), 17.0);
        assert!(TestFunction::sum_trivariate(3).is_err());
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0, 10.0, 9.0, 8.0, 7.0, 6.0];
        assert_eq!(quantile(&v, 10.0), 1.0);
        assert_eq!(quantile(&v, 50.0), 5.0);
        assert_eq!(quantile(&v, 90.0), 9.0);
        let q = Quantiles::of(&[2.5]).unwrap();
        assert_eq!((q.q10, q.q50, q.q90), (2.5, 2.5, 2.5));
    }

    #[test]
    fn tree_modes_parse() {
        for s in ["balanced", "rt", "rbt", "slo", "file:/tmp/t.json"] {
            assert_eq!(s.parse::<TreeMode>().unwrap().to_string(), s);
        }
        assert!("file:".parse::<TreeMode>().is_err());
        assert!("star".parse::<TreeMode>().is_err());
    }

    #[test]
    fn exact_network_has_zero_error() {
        let f = TestFunction::sum_bivariate(2).unwrap();
        let oracle = f.oracle();
        let config = LearnerConfig {
            tolerance: 1e-12,
            adaptive_basis: false,
            ..LearnerConfig::default()
        };
        let tree = DimensionTree::balanced_binary(2).unwrap();
        let (net, _) = learn(&oracle, &tree, &f.leaf_families(3), &config, 3).unwrap();
        let e = test_error(&oracle, &net, 200, false, &mut stream(1, &[])).unwrap();
        assert!(e.relative && e.value < 1e-12, "{e:?}");
    }

    #[test]
    fn zero_function_falls_back_to_absolute_error() {
        let oracle = Oracle::from_fn(2, |_| 0.0);
        let tree = DimensionTree::balanced_binary(2).unwrap();
        let fam = vec![PolynomialBasis::legendre(1, -1.0, 1.0).unwrap(); 2];
        let (net, _) = learn(&oracle, &tree, &fam, &LearnerConfig::default(), 0).unwrap();
        let e = test_error(&oracle, &net, 10, false, &mut stream(1, &[])).unwrap();
        assert!(!e.relative);
        assert_eq!(e.value, 0.0);
    }
}
