use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use ttnpca::adaptation::{estimate_rank, RankParams};
use ttnpca::bench::{run_experiment, ExperimentConfig, TestFunction, TreeMode};
use ttnpca::rng::stream;

#[derive(Parser)]
#[command(name = "ttnpca", version, about = "Tree tensor network approximation of test functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn approximations over repeated trials and report statistics.
    Approximate(ApproximateArgs),
    /// Estimate the rank of a test function for one variable subset.
    Rank(RankArgs),
}

#[derive(clap::Args)]
struct ApproximateArgs {
    /// JSON experiment configuration; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// henon-heiles, anisotropic6, sum-bivariate or sum-trivariate.
    #[arg(long)]
    function: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// Target relative tolerance; a comma-separated list runs each in turn.
    #[arg(long, value_delimiter = ',')]
    tol: Option<Vec<f64>>,
    /// Maximal polynomial degree of the leaf bases.
    #[arg(long)]
    degree: Option<usize>,
    /// balanced, rt, rbt, slo or file:PATH.
    #[arg(long)]
    tree: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trials (0 uses all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, value_enum)]
    adaptive_pca: Option<Switch>,
    #[arg(long, value_enum)]
    adaptive_basis: Option<Switch>,
    /// Coarse tolerance of the rank estimates used by tree adaptation.
    #[arg(long)]
    tol_coarse: Option<f64>,
    /// Write the network of trial 0 at the last tolerance.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write quantiles per tolerance as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the full report, including every trial, as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RankArgs {
    #[arg(long)]
    function: String,
    #[arg(long)]
    dim: Option<usize>,
    /// Variables of the subset, 1-based and comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    alpha: Vec<usize>,
    #[arg(long, default_value_t = 1e-2)]
    tol_coarse: f64,
    #[arg(long, default_value_t = 30)]
    points: usize,
    #[arg(long, default_value_t = 30)]
    max_columns: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn experiment_config(args: &ApproximateArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if args.function.is_some() || args.dim.is_some() {
        let name = args.function.as_deref().unwrap_or(config.function.name());
        let function = TestFunction::from_name(name, args.dim)?;
        if function != config.function {
            config.learner.adaptive_basis = function.default_adaptive_basis();
            config.function = function;
        }
    }
    if let Some(t) = &args.tol {
        config.tolerances = t.clone();
    }
    if let Some(p) = args.degree {
        config.degree = Some(p);
    }
    if let Some(t) = &args.tree {
        config.tree = t.parse::<TreeMode>()?;
    }
    if let Some(n) = args.trials {
        config.trials = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.threads {
        config.threads = n;
    }
    if let Some(n) = args.n_test {
        config.n_test = n;
    }
    if let Some(s) = args.adaptive_pca {
        config.learner.adaptive_pca = s.into();
    }
    if let Some(s) = args.adaptive_basis {
        config.learner.adaptive_basis = s.into();
    }
    if let Some(t) = args.tol_coarse {
        config.adaptation.rank.tolerance = t;
    }
    config.validate()?;
    Ok(config)
}

fn approximate(args: ApproximateArgs) -> anyhow::Result<bool> {
    let config = experiment_config(&args)?;
    let (report, models) = run_experiment(&config)?;
    for row in &report.rows {
        let median = |q: &Option<ttnpca::bench::Quantiles>| q.map_or(f64::NAN, |q| q.q50);
        println!(
            "tol {:e}: median log10 error {:.2}, storage {}, n {}, n_total {}, failed {}/{}",
            row.tolerance,
            median(&row.log_error),
            median(&row.storage),
            median(&row.n),
            median(&row.n_total),
            row.failed,
            row.trials.len()
        );
        for t in row.trials.iter().filter(|t| !t.succeeded()) {
            eprintln!("trial {} failed: {}", t.trial, t.failure.as_deref().unwrap_or(""));
        }
    }
    if let Some(path) = &args.report {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(file)?;
    }
    if let Some(path) = &args.json {
        fs::write(path, report.to_json_string()?).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.out {
        match models.last().and_then(|m| m.as_ref()) {
            Some(net) => fs::write(path, net.to_json_string()).with_context(|| format!("writing {}", path.display()))?,
            None => eprintln!("no model written: trial 0 failed"),
        }
    }
    Ok(report.all_succeeded())
}

fn rank(args: RankArgs) -> anyhow::Result<bool> {
    let function = TestFunction::from_name(&args.function, args.dim)?;
    let d = ttnpca::oracle::Function::dim(&function);
    let mut alpha = Vec::with_capacity(args.alpha.len());
    for &v in &args.alpha {
        if v == 0 || v > d {
            bail!("variable {v} is outside 1..={d}");
        }
        alpha.push(v - 1);
    }
    let params = RankParams {
        tolerance: args.tol_coarse,
        points: args.points,
        max_columns: args.max_columns,
    };
    let oracle = function.oracle();
    let est = estimate_rank(&oracle, &function.measure(), &alpha, &params, &mut stream(args.seed, &[]))?;
    let out = json!({
        "function": function.name(),
        "alpha": est.vars.iter().map(|v| v + 1).collect::<Vec<_>>(),
        "rank": est.rank,
        "evaluations": est.evaluations,
        "tol_coarse": est.tolerance,
        "coarse": est.coarse,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Approximate(a) => approximate(a),
        Command::Rank(a) => rank(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
