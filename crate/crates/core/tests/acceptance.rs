//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Failures are reported but only make the process exit non-zero when
//! ACCEPTANCE_STRICT=1 is set.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use ttnpca::adaptation::{estimate_rank, RankParams};
use ttnpca::basis::{MarginalMeasure, PolynomialBasis, ProductMeasure};
use ttnpca::bench::{run_trials, BenchmarkReport, ExperimentConfig, TestFunction, ToleranceSummary, TreeMode};
use ttnpca::boosted::{draw_stable_sample, greedy_subsample, min_sample_count, Projector, StabilityParams};
use ttnpca::learner::{learn, LearnerConfig};
use ttnpca::oracle::Oracle;
use ttnpca::pca::{adaptive_principal_subspace, left_singular, project_fiber, subspace_distance, truncated_svd};
use ttnpca::rng::stream;
use ttnpca::sampling::{density, sample_leaf};
use ttnpca::space::{FeatureSpace, Subspace};
use ttnpca::tree::DimensionTree;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn medians(row: &ToleranceSummary) -> (f64, f64, f64) {
    let q = |x: &Option<ttnpca::bench::Quantiles>| x.map_or(f64::NAN, |q| q.q50);
    (q(&row.log_error), q(&row.storage), q(&row.n))
}

fn henon_heiles() -> Outcome {
    let f = TestFunction::henon_heiles(8, 0.2).unwrap();
    let mut c = ExperimentConfig::for_function(f);
    c.degree = Some(15);
    c.tolerances = vec![1e-14];
    c.learner.adaptive_pca = false;
    c.learner.adaptive_basis = true;
    c.tree = TreeMode::Balanced;
    c.trials = 10;
    let report = run_trials(&c).unwrap();
    let row = &report.rows[0];
    let (log_err, storage, n) = medians(row);
    let degrees_ok = row.failed == 0 && row.trials.iter().all(|t| t.degrees.iter().all(|&p| (4..=6).contains(&p)));
    let slowest = row.trials.iter().map(|t| t.wall_time).fold(0.0, f64::max);
    let checks = [
        log_err <= -10.0,
        (350.0..=700.0).contains(&storage),
        (450.0..=1500.0).contains(&n),
        degrees_ok,
        slowest <= 300.0,
    ];
    outcome(
        checks.iter().all(|c| *c),
        format!(
            "median log10 error {log_err:.2} (<= -10: {}), median storage {storage} (in [350,700]: {}), \
             median n {n} (in [450,1500]: {}), leaf degrees 5±1 in every trial: {}, slowest trial {slowest:.1}s",
            checks[0], checks[1], checks[2], checks[3]
        ),
    )
}

fn anisotropic() -> Outcome {
    let start = Instant::now();
    let mut c = ExperimentConfig::for_function(TestFunction::Anisotropic6);
    c.tolerances = vec![1e-2, 1e-3, 1e-4];
    c.learner.adaptive_pca = true;
    c.trials = 10;
    let report = run_trials(&c).unwrap();
    let bands = [(269.0, 357.0), (395.0, 556.0), (557.0, 717.0)];
    let mut pass = report.all_succeeded();
    let mut parts = Vec::new();
    for (row, (lo, hi)) in report.rows.iter().zip(bands) {
        let (log_err, _, n) = medians(row);
        let err_ok = log_err <= row.tolerance.log10();
        let n_ok = n >= lo / 3.0 && n <= hi * 3.0;
        pass &= err_ok && n_ok;
        parts.push(format!("eps {:e}: log10 error {log_err:.2}, n {n}", row.tolerance));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= 600.0;
    outcome(pass, format!("{}; total {secs:.1}s", parts.join("; ")))
}

fn block_pairing(tree: &[Vec<usize>]) -> bool {
    [[0, 1], [2, 3], [4, 5], [6, 7]].iter().all(|b| tree.iter().any(|s| s == b))
}

fn tree_adaptation() -> Outcome {
    let f = TestFunction::sum_bivariate(8).unwrap();
    let run = |mode: TreeMode| -> BenchmarkReport {
        let mut c = ExperimentConfig::for_function(f);
        c.tolerances = vec![1e-14];
        c.tree = mode;
        c.trials = 10;
        c.adaptation.rank.tolerance = 1e-2;
        c.adaptation.pairing.gamma1 = 6.0;
        c.adaptation.pairing.gamma2 = 6.0;
        c.adaptation.pairing.iterations = Some(16);
        run_trials(&c).unwrap()
    };
    let slo = run(TreeMode::Adaptive);
    let rt = run(TreeMode::Random);
    let (log_err, _, n_slo) = medians(&slo.rows[0]);
    let (_, _, n_rt) = medians(&rt.rows[0]);
    let blocks = slo.rows[0].trials.iter().filter(|t| block_pairing(&t.tree)).count();
    let pass = slo.rows[0].failed == 0 && log_err <= -12.0 && n_slo <= n_rt && blocks >= 6;
    outcome(
        pass,
        format!(
            "s-LO median log10 error {log_err:.2}, median n {n_slo} vs RT {n_rt} (RT failures {}), block pairing in {blocks}/10",
            rt.rows[0].failed
        ),
    )
}

fn pca_equivalence() -> Outcome {
    let mut worst_angle: f64 = 0.0;
    let mut worst_tail: f64 = 0.0;
    let mut rng = stream(404, &[]);
    for inst in 0..20u64 {
        let degree = rng.random_range(1..8usize);
        let k = rng.random_range(1..4usize);
        let freqs: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
        let oracle = Oracle::from_fn(2, move |x| {
            freqs.iter().enumerate().map(|(j, w)| (w * x[0]).sin() * ((j + 1) as f64 * x[1]).cos()).sum()
        });
        let space = FeatureSpace::leaf(0, PolynomialBasis::legendre(degree, -1.0, 1.0).unwrap());
        let m = space.dim();
        let params = StabilityParams::default();
        let n = min_sample_count(m, params.delta, params.eta).max(m);
        let sample = draw_stable_sample(&space, n, &params, &mut stream(inst, &[1])).unwrap();
        let projector = Projector::new(&sample).unwrap();
        let mut col_rng = stream(inst, &[2]);
        let ps = adaptive_principal_subspace(m, 1e-6, 24, || {
            let xc = [0.0, col_rng.random_range(-1.0..1.0)];
            project_fiber(&oracle, &sample, &projector, &xc)
        })
        .unwrap();
        let (_, u) = truncated_svd(&ps.matrix, ps.rank).unwrap();
        worst_angle = worst_angle.max(subspace_distance(&ps.basis, &u));
        let residual = &ps.matrix - &ps.basis * (ps.basis.transpose() * &ps.matrix);
        let (sigma, _) = left_singular(&ps.matrix);
        let tail: f64 = sigma.iter().skip(ps.rank).map(|s| s * s).sum();
        let scale = ps.matrix.norm_squared().max(f64::MIN_POSITIVE);
        worst_tail = worst_tail.max((residual.norm_squared() - tail).abs() / scale);
    }
    outcome(
        worst_angle < 1e-10 && worst_tail <= 1e-10,
        format!("20 instances: max subspace distance {worst_angle:.2e}, max tail identity gap {worst_tail:.2e}"),
    )
}

fn stability() -> Outcome {
    let params = StabilityParams::default();
    let mut eig_ok = true;
    let mut worst_repro: f64 = 0.0;
    let mut rng = stream(505, &[]);
    let mut samples = 0;
    for inst in 0..30u64 {
        let degree = rng.random_range(1..10usize);
        let space = if inst % 3 == 2 {
            let a = Arc::new(Subspace::full(FeatureSpace::leaf(0, PolynomialBasis::hermite(2))));
            let b = Arc::new(Subspace::full(FeatureSpace::leaf(1, PolynomialBasis::legendre(2, -1.0, 1.0).unwrap())));
            FeatureSpace::product(vec![a, b]).unwrap()
        } else if inst % 3 == 1 {
            FeatureSpace::leaf(0, PolynomialBasis::hermite(degree))
        } else {
            FeatureSpace::leaf(0, PolynomialBasis::legendre(degree, -1.0, 1.0).unwrap())
        };
        let m = space.dim();
        let n = min_sample_count(m, params.delta, params.eta).max(m);
        let drawn = draw_stable_sample(&space, n, &params, &mut stream(inst, &[])).unwrap();
        let reduced = greedy_subsample(&drawn, params.delta, m);
        for s in [&drawn, &reduced] {
            let e = s.gram().symmetric_eigen().eigenvalues;
            eig_ok &= e.min() >= 0.1 - 1e-12 && e.max() <= 1.9 + 1e-12;
            samples += 1;
        }
        let coeffs: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| -> f64 { space.eval_full(x).iter().zip(&coeffs).map(|(p, c)| p * c).sum() };
        let values: Vec<f64> = (0..reduced.len())
            .map(|i| {
                let mut x = vec![0.0; 2];
                reduced.embed(i, &mut x);
                f(&x)
            })
            .collect();
        let projector = Projector::new(&reduced).unwrap();
        let got = projector.project(&values).unwrap();
        let measure = ProductMeasure::new(vec![MarginalMeasure::Gaussian, MarginalMeasure::Uniform { a: -1.0, b: 1.0 }])
            .unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..100 {
            let x = measure.sample(&mut rng);
            let approx: f64 = space.eval_full(&x).iter().zip(&got).map(|(p, c)| p * c).sum();
            num += (approx - f(&x)).powi(2);
            den += f(&x).powi(2);
        }
        worst_repro = worst_repro.max((num / den).sqrt());
    }
    let count = min_sample_count(10, 0.9, 0.01);
    outcome(
        eig_ok && worst_repro <= 1e-12 && count == 25,
        format!(
            "{samples} accepted samples with eig(G) in [0.1,1.9]: {eig_ok}; worst reproduction {worst_repro:.2e}; \
             min_sample_count(10,0.9,0.01) = {count}"
        ),
    )
}

/// Monomial coefficients of the orthonormal Legendre polynomials on [-1,1].
fn legendre_monomials(j: usize) -> Vec<f64> {
    let raw: Vec<f64> = match j {
        0 => vec![1.0],
        1 => vec![0.0, 1.0],
        2 => vec![-0.5, 0.0, 1.5],
        3 => vec![0.0, -1.5, 0.0, 2.5],
        4 => vec![3.0 / 8.0, 0.0, -30.0 / 8.0, 0.0, 35.0 / 8.0],
        _ => unreachable!(),
    };
    let s = ((2 * j + 1) as f64).sqrt();
    raw.iter().map(|c| c * s).collect()
}

/// CDF of (1/m) Σ φ_j² · ½ on [-1,1], integrated exactly term by term.
fn exact_cdf(m: usize, x: f64) -> f64 {
    let mut poly = vec![0.0; 2 * m];
    for j in 0..m {
        let p = legendre_monomials(j);
        for (a, pa) in p.iter().enumerate() {
            for (b, pb) in p.iter().enumerate() {
                poly[a + b] += pa * pb / (2.0 * m as f64);
            }
        }
    }
    poly.iter()
        .enumerate()
        .map(|(k, c)| c * (x.powi(k as i32 + 1) - (-1.0f64).powi(k as i32 + 1)) / (k + 1) as f64)
        .sum()
}

fn sampling() -> Outcome {
    let mut worst_ks: f64 = 0.0;
    for (i, m) in [1usize, 2, 5].into_iter().enumerate() {
        let basis = PolynomialBasis::legendre(m - 1, -1.0, 1.0).unwrap();
        let mut rng = stream(606, &[i as u64]);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_leaf(&basis, &mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (k, &x) in xs.iter().enumerate() {
            let f = exact_cdf(m, x);
            ks = ks.max((f - k as f64 / n as f64).abs()).max(((k + 1) as f64 / n as f64 - f).abs());
        }
        worst_ks = worst_ks.max(ks);
    }
    // Composite Simpson on a fine grid, independent of the library quadrature.
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| -> f64 {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
        }
        s * h / 3.0
    };
    let mut worst_mass: f64 = 0.0;
    for basis in [
        PolynomialBasis::legendre(0, -1.0, 1.0).unwrap(),
        PolynomialBasis::legendre(1, -1.0, 1.0).unwrap(),
        PolynomialBasis::legendre(4, -1.0, 1.0).unwrap(),
        PolynomialBasis::hermite(5),
        PolynomialBasis::hermite(15),
    ] {
        let space = FeatureSpace::leaf(0, basis);
        let dens = density(&space);
        let measure = basis.measure();
        let (a, b) = match measure {
            MarginalMeasure::Uniform { a, b } => (a, b),
            MarginalMeasure::Gaussian => (-40.0, 40.0),
        };
        let mass = simpson(&|x| dens.value_full(&[x]) * measure.pdf(x), a, b);
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    outcome(
        worst_ks < 0.01 && worst_mass <= 1e-8,
        format!("max KS statistic {worst_ks:.4} over m in {{1,2,5}}; max |mass - 1| {worst_mass:.2e}"),
    )
}

fn symbolic_ranks() -> Outcome {
    let params = RankParams {
        tolerance: 1e-2,
        ..RankParams::default()
    };
    let separable = Oracle::from_fn(4, |x| (1.0 + 0.5 * x[0]) * (2.0 + x[1] * x[1]) * x[2].exp() * (3.0 + x[3]));
    let bivariate = TestFunction::sum_bivariate(8).unwrap().oracle();
    let aniso = TestFunction::Anisotropic6.oracle();
    let uniform4 = ProductMeasure::uniform(4, -1.0, 1.0).unwrap();
    let uniform8 = ProductMeasure::uniform(8, -1.0, 1.0).unwrap();
    let uniform6 = ProductMeasure::uniform(6, -1.0, 1.0).unwrap();
    let cases: [(&str, &Oracle, &ProductMeasure, Vec<usize>, usize); 4] = [
        ("separable {1,2}", &separable, &uniform4, vec![0, 1], 1),
        ("sum_bivariate {1,2}", &bivariate, &uniform8, vec![0, 1], 2),
        ("sum_bivariate {1}", &bivariate, &uniform8, vec![0], 4),
        ("anisotropic6 {2}", &aniso, &uniform6, vec![1], 1),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, oracle, measure, alpha, expected) in cases {
        let hits = (0..10u64)
            .filter(|&s| {
                estimate_rank(oracle, measure, &alpha, &params, &mut stream(707, &[s])).unwrap().rank == expected
            })
            .count();
        pass &= hits >= 9;
        parts.push(format!("{name} = {expected} in {hits}/10"));
    }
    outcome(pass, parts.join(", "))
}

fn determinism() -> Outcome {
    let f = TestFunction::Anisotropic6;
    let tree = DimensionTree::balanced_binary(6).unwrap();
    let config = LearnerConfig {
        tolerance: 1e-4,
        ..LearnerConfig::default()
    };
    let learn_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (net, report) = learn(&f.oracle(), &tree, &f.leaf_families(20), &config, 99).unwrap();
            (net.to_json_string(), serde_json::to_string(&report.without_timing()).unwrap())
        })
    };
    let learn_same = learn_with(1) == learn_with(4);

    let mut c = ExperimentConfig::for_function(TestFunction::sum_bivariate(4).unwrap());
    c.tolerances = vec![1e-8];
    c.tree = TreeMode::Adaptive;
    c.trials = 4;
    c.seed = 2024;
    let bench_with = |threads: usize| {
        let mut c = c.clone();
        c.threads = threads;
        let mut r = run_trials(&c).unwrap().without_timing();
        r.config.threads = 0;
        r.to_json_string().unwrap()
    };
    let bench_same = bench_with(1) == bench_with(3);
    outcome(
        learn_same && bench_same,
        format!("learn report and network identical across 1/4 threads: {learn_same}; benchmark report identical across 1/3 threads: {bench_same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 Henon-Heiles reproduction", henon_heiles),
        ("2 anisotropic error control", anisotropic),
        ("3 tree adaptation", tree_adaptation),
        ("4 empirical PCA equivalence", pca_equivalence),
        ("5 stability suite", stability),
        ("6 sampling correctness", sampling),
        ("7 symbolic ranks", symbolic_ranks),
        ("8 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("{verdict} criterion {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
