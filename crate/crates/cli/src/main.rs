mod envspec;
mod svg;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use counterfact_core::data::{parse_multilabel_svmlight, synthetic_multilabel, SyntheticMultilabel};
use counterfact_core::estimators::{capped_ips_value, ips_value, mlips_refit, snips_value};
use counterfact_core::experiments::{
    bench_csv, bench_orderings, halving_fractions, reference_target, synthetic_multiclass_logs,
    BenchOptions, Method, SyntheticMulticlass, BENCH_EPOCHS,
};
use counterfact_core::learning::{TrainConfig, DEFAULT_CAPS, DEFAULT_LAMBDAS};
use counterfact_core::theory::mse_reduction_experiment;
use counterfact_core::{benchmark, gradient_comparison, BanditDataset, Policy, SurrogateOptions};
use serde::Serialize;

use envspec::EnvSpec;

/// Below this predicted gap an environment is reported as degenerate.
const DEGENERATE_GAP: f64 = 1e-12;
const MIN_REPLICATIONS: usize = 100;
const MIN_WIN_RATE: f64 = 0.7;
const MIN_SEED_SHARE: f64 = 0.7;

#[derive(Parser)]
#[command(name = "counterfact", version, about = "Off-policy evaluation experiments with surrogate propensities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo check of the MSE reduction on a finite environment.
    Theorem(TheoremArgs),
    /// Gradient accuracy of IPS versus MLIPS on subsamples.
    Gradcompare(GradArgs),
    /// Policy-learning benchmark on a supervised multilabel dataset.
    Bench(BenchArgs),
    /// Fit the surrogate logging policy to a bandit dataset.
    Fit(FitArgs),
    /// Evaluate a target policy on a bandit dataset.
    Evaluate(EvalArgs),
    /// Write a synthetic dataset or environment.
    Synth(SynthArgs),
}

#[derive(clap::Args)]
struct Common {
    /// Master seed for every random choice.
    #[arg(long)]
    seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TheoremArgs {
    #[command(flatten)]
    common: Common,
    /// Environment JSON file; the built-in canonical environment when omitted.
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
}

#[derive(clap::Args)]
struct GradArgs {
    #[command(flatten)]
    common: Common,
    /// Bandit dataset (JSON Lines); a synthetic logistic-logged set when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Records in the synthetic dataset.
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    /// Target policy JSON; a policy trained by IPS on the full data when omitted.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Either a count k meaning 2^{-1/2} .. 2^{-k/2}, or a comma-separated list.
    #[arg(long, default_value = "8")]
    fractions: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Ridge penalty of the surrogate fitted on each subsample.
    #[arg(long, default_value_t = 1e-6)]
    l2: f64,
    /// Also write an SVG plot of mean distance against fraction.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Exit with status 1 unless MLIPS is at least as close at the two smallest
    /// fractions and wins 70% of trials at the smallest.
    #[arg(long)]
    check: bool,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Multilabel svmlight file; a synthetic dataset when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Feature dimension (inferred from the file when omitted).
    #[arg(long)]
    p: Option<usize>,
    /// Label count (inferred from the file when omitted).
    #[arg(long)]
    labels: Option<usize>,
    /// Rows of the synthetic dataset.
    #[arg(long, default_value_t = 5000)]
    rows: usize,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',', default_value = "IPS,POEM,Norm-POEM,MLIPS,MLPOEM,ML-Norm-POEM,IPS-Uniform")]
    methods: Vec<String>,
    /// Number of runs; run i uses seed `seed + i`.
    #[arg(long, default_value_t = 10)]
    runs: u64,
    /// Hyperparameter grid as `M=10,100;lambda=0.01,1`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = BENCH_EPOCHS)]
    epochs: usize,
    /// Exit with status 1 unless the expected method orderings hold.
    #[arg(long)]
    check: bool,
}

#[derive(clap::Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Bandit dataset (JSON Lines).
    #[arg(long)]
    data: PathBuf,
    /// Fixed ridge penalty; chosen by cross-validation when omitted.
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Ips,
    Capped,
    Snips,
    Mlips,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Bandit dataset (JSON Lines).
    #[arg(long)]
    data: PathBuf,
    /// Target policy JSON.
    #[arg(long)]
    policy: PathBuf,
    /// Estimator to compute; may be repeated.
    #[arg(long = "estimator", required = true)]
    estimators: Vec<EstimatorArg>,
    /// Weight cap for the capped estimator.
    #[arg(long, default_value_t = 100.0)]
    cap: f64,
    /// Fit the surrogate on the dataset, required for MLIPS.
    #[arg(long)]
    fit_surrogate: bool,
    /// Fixed ridge penalty for the surrogate; cross-validated when omitted.
    #[arg(long)]
    l2: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Logistic-logged multiclass bandit logs (JSON Lines).
    Multiclass,
    /// Supervised multilabel rows (svmlight).
    Multilabel,
    /// The canonical environment specification (JSON).
    Env,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Records or rows to generate.
    #[arg(long)]
    n: Option<usize>,
    /// For multiclass logs, also write the true logging policy here.
    #[arg(long)]
    logging_out: Option<PathBuf>,
}

/// A failure that maps to exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

enum Status {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Theorem(a) => theorem(a),
        Command::Gradcompare(a) => gradcompare(a),
        Command::Bench(a) => bench(a),
        Command::Fit(a) => fit(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    use counterfact_core::Error as E;
    if e.downcast_ref::<Usage>().is_some() || e.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    match e.downcast_ref::<E>() {
        Some(
            E::DimensionMismatch { .. }
            | E::InvalidAction { .. }
            | E::InvalidPropensity { .. }
            | E::InvalidArgument(_)
            | E::EmptyDataset
            | E::Parse { .. }
            | E::Io(_)
            | E::Json(_),
        ) => 2,
        Some(_) => 1,
        None if e.downcast_ref::<io::Error>().is_some() => 2,
        None => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("COUNTERFACT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("COUNTERFACT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn write_output(out: Option<&Path>, contents: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, contents).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(contents.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn read_dataset(path: &Path) -> anyhow::Result<BanditDataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BanditDataset::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct TheoremOutput {
    #[serde(flatten)]
    report: counterfact_core::TheoremCheckReport,
    gap_positive: bool,
    ci_contains_prediction: bool,
    degenerate: bool,
    passed: bool,
}

fn theorem(a: TheoremArgs) -> anyhow::Result<Status> {
    if a.reps < MIN_REPLICATIONS {
        return Err(usage(format!("--reps must be at least {MIN_REPLICATIONS}, got {}", a.reps)));
    }
    let spec = match &a.env {
        Some(path) => read_json::<EnvSpec>(path)?,
        None => EnvSpec::canonical(),
    };
    let (env, target) = spec.build().map_err(|e| usage(format!("{e:#}")))?;
    let report = mse_reduction_experiment(&env, &target, a.n, a.reps, a.common.seed)?;
    let degenerate = report.var_pi_over_n <= DEGENERATE_GAP;
    let gap_positive = report.gap_positive();
    let ci_contains_prediction = report.ci_contains_prediction();
    let passed = degenerate || (gap_positive && ci_contains_prediction);
    let output = TheoremOutput {
        report,
        gap_positive,
        ci_contains_prediction,
        degenerate,
        passed,
    };
    write_output(a.common.out.as_deref(), &json(&output)?)?;
    Ok(if passed { Status::Ok } else { Status::CheckFailed })
}

fn parse_fractions(raw: &str) -> anyhow::Result<Vec<f64>> {
    let raw = raw.trim();
    if let Ok(k) = raw.parse::<usize>() {
        if k == 0 {
            return Err(usage("--fractions count must be positive"));
        }
        return Ok(halving_fractions(k));
    }
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("bad fraction {t:?}")))
        })
        .collect()
}

fn gradcompare(a: GradArgs) -> anyhow::Result<Status> {
    let fractions = parse_fractions(&a.fractions)?;
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let seed = a.common.seed;
    let logs = match &a.data {
        Some(path) => read_dataset(path)?,
        None => {
            let spec = SyntheticMulticlass {
                n: a.n,
                ..SyntheticMulticlass::default()
            };
            synthetic_multiclass_logs(&spec, seed)?.0
        }
    };
    let target: Policy = match &a.target {
        Some(path) => read_json(path)?,
        None => reference_target(&logs, 5, seed)?,
    };
    let cmp = gradient_comparison(&logs, &target, &fractions, a.trials, &SurrogateOptions::fixed(a.l2), seed)?;
    write_output(a.common.out.as_deref(), &cmp.to_csv())?;
    if let Some(path) = &a.svg {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let series = [
            svg::Series {
                name: "IPS",
                color: "#d62728",
                points: cmp.fractions.iter().map(|f| (f.fraction, mean(&f.ips))).collect(),
            },
            svg::Series {
                name: "MLIPS",
                color: "#1f77b4",
                points: cmp.fractions.iter().map(|f| (f.fraction, mean(&f.mlips))).collect(),
            },
        ];
        let chart = svg::line_chart("Gradient estimation error", "fraction of data", "mean distance", &series);
        std::fs::write(path, chart).with_context(|| format!("writing {}", path.display()))?;
    }
    if a.check {
        let check = cmp.check(MIN_WIN_RATE);
        eprintln!(
            "check: fractions {:?}, mean not worse {:?}, win rate {:.2}: {}",
            check.smallest,
            check.mean_not_worse,
            check.win_rate,
            if check.passed { "pass" } else { "fail" }
        );
        if !check.passed {
            return Ok(Status::CheckFailed);
        }
    }
    Ok(Status::Ok)
}

fn parse_grid(raw: &str) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let (mut caps, mut lambdas) = (DEFAULT_CAPS.to_vec(), DEFAULT_LAMBDAS.to_vec());
    for part in raw.split(';').filter(|p| !p.trim().is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("grid entry {part:?} is not key=values")))?;
        let values = values
            .split(',')
            .map(|v| match v.trim() {
                "inf" => Ok(f64::INFINITY),
                t => t.parse::<f64>().map_err(|_| usage(format!("bad grid value {t:?}"))),
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        match key.trim() {
            "M" => caps = values,
            "lambda" => lambdas = values,
            k => return Err(usage(format!("unknown grid key {k:?}; expected M or lambda"))),
        }
    }
    Ok((caps, lambdas))
}

fn bench(a: BenchArgs) -> anyhow::Result<Status> {
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>().map_err(|e| usage(e.to_string())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if a.runs == 0 {
        return Err(usage("--runs must be positive"));
    }
    let (caps, lambdas) = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => (DEFAULT_CAPS.to_vec(), DEFAULT_LAMBDAS.to_vec()),
    };
    let seed = a.common.seed;
    let (sup, name) = match &a.data {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let sup = parse_multilabel_svmlight(BufReader::new(file), a.p, a.labels)?;
            let name = path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
            (sup, name)
        }
        None => {
            let spec = SyntheticMultilabel {
                rows: a.rows,
                ..SyntheticMultilabel::default()
            };
            (synthetic_multilabel(&spec, seed)?, "synthetic".to_string())
        }
    };
    let opts = BenchOptions {
        methods,
        seeds: (0..a.runs).map(|i| seed.wrapping_add(i)).collect(),
        caps,
        lambdas,
        folds: a.folds,
        base: TrainConfig {
            epochs: a.epochs,
            ..TrainConfig::default()
        },
        ..BenchOptions::default()
    };
    let rows = benchmark(&sup, &name, &opts)?;
    write_output(a.common.out.as_deref(), &bench_csv(&rows))?;
    if a.check {
        let checks = bench_orderings(&rows, MIN_SEED_SHARE);
        for c in &checks {
            eprintln!("check: {}: {}", c.describe(), if c.passed { "pass" } else { "fail" });
        }
        if checks.is_empty() || checks.iter().any(|c| !c.passed) {
            return Ok(Status::CheckFailed);
        }
    }
    Ok(Status::Ok)
}

fn surrogate_options(l2: Option<f64>, folds: usize, seed: u64) -> SurrogateOptions {
    SurrogateOptions {
        l2_penalty: l2,
        folds,
        seed,
        ..SurrogateOptions::default()
    }
}

fn fit(a: FitArgs) -> anyhow::Result<Status> {
    let logs = read_dataset(&a.data)?;
    let result = counterfact_core::fit_surrogate(&logs, &surrogate_options(a.l2, a.folds, a.common.seed))?;
    write_output(a.common.out.as_deref(), &json(&result)?)?;
    Ok(Status::Ok)
}

fn evaluate(a: EvalArgs) -> anyhow::Result<Status> {
    if a.estimators.iter().any(|e| matches!(e, EstimatorArg::Mlips)) && !a.fit_surrogate {
        return Err(usage("the mlips estimator needs --fit-surrogate"));
    }
    let logs = read_dataset(&a.data)?;
    let target: Policy = read_json(&a.policy)?;
    let mut reports = Vec::with_capacity(a.estimators.len());
    for est in &a.estimators {
        let report = match est {
            EstimatorArg::Ips => ips_value(&logs, &target)?,
            EstimatorArg::Capped => capped_ips_value(&logs, &target, a.cap)?,
            EstimatorArg::Snips => snips_value(&logs, &target)?,
            EstimatorArg::Mlips => {
                let opts = surrogate_options(a.l2, 5, a.common.seed);
                mlips_refit(&logs, &target, &opts)?.0
            }
        };
        reports.push(report);
    }
    write_output(a.common.out.as_deref(), &json(&reports)?)?;
    Ok(Status::Ok)
}

fn synth(a: SynthArgs) -> anyhow::Result<Status> {
    let seed = a.common.seed;
    let contents = match a.kind {
        SynthKind::Multiclass => {
            let spec = SyntheticMulticlass {
                n: a.n.unwrap_or(SyntheticMulticlass::default().n),
                ..SyntheticMulticlass::default()
            };
            let (logs, logging) = synthetic_multiclass_logs(&spec, seed)?;
            if let Some(path) = &a.logging_out {
                let policy: Policy = logging.into();
                std::fs::write(path, json(&policy)?).with_context(|| format!("writing {}", path.display()))?;
            }
            logs.to_jsonl_string()
        }
        SynthKind::Multilabel => {
            let spec = SyntheticMultilabel {
                rows: a.n.unwrap_or(SyntheticMultilabel::default().rows),
                ..SyntheticMultilabel::default()
            };
            synthetic_multilabel(&spec, seed)?.to_svmlight()
        }
        SynthKind::Env => {
            if a.n.is_some() || a.logging_out.is_some() {
                return Err(usage("--n and --logging-out do not apply to --kind env"));
            }
            json(&EnvSpec::canonical())?
        }
    };
    write_output(a.common.out.as_deref(), &contents)?;
    Ok(Status::Ok)
}
