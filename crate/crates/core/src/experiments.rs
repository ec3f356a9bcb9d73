//! Experiment drivers: gradient-estimation accuracy under subsampling and the
//! supervised-to-bandit policy-learning benchmark.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{Action, ActionSpace, BanditDataset, ContextFeatures, LoggedInteraction};
use crate::data::{
    expected_hamming_loss, supervised_to_bandit, train_logging_policy, train_test_split,
    SupervisedDataset, DEFAULT_LOGGING_FRACTION, DEFAULT_REPLICATIONS, DEFAULT_TEST_FRACTION,
};
use crate::error::{Error, Result};
use crate::learning::{
    adagrad_train, cross_validate, objective_gradient, Objective, PropensitySource, TrainConfig,
    DEFAULT_CAPS, DEFAULT_LAMBDAS,
};
use crate::numeric::{distance, dot, mean, sample_variance};
use crate::policy::{sigmoid, ActionPolicy, Policy, SoftmaxLinearPolicy};
use crate::rng::{derive_seed, derived_rng, permutation};
use crate::surrogate::{fit_surrogate, SurrogateOptions};

/// `2^{-k/2}` for `k = 1..=k_max`.
pub fn halving_fractions(k_max: usize) -> Vec<f64> {
    (1..=k_max).map(|k| 2f64.powf(-(k as f64) / 2.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionTrials {
    pub fraction: f64,
    pub size: usize,
    /// Distance of each trial's IPS gradient to the full-data gradient.
    pub ips: Vec<f64>,
    pub mlips: Vec<f64>,
}

impl FractionTrials {
    /// Share of trials where the surrogate-propensity gradient is closer.
    pub fn mlips_win_rate(&self) -> f64 {
        let wins = self.ips.iter().zip(&self.mlips).filter(|(i, m)| m < i).count();
        wins as f64 / self.ips.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientComparison {
    pub full_gradient: Vec<f64>,
    pub fractions: Vec<FractionTrials>,
}

impl GradientComparison {
    pub const CSV_HEADER: &'static str = "fraction,estimator,mean_dist,std_dist,trials";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for f in &self.fractions {
            for (name, d) in [("ips", &f.ips), ("mlips", &f.mlips)] {
                out.push_str(&format!(
                    "{},{name},{},{},{}\n",
                    f.fraction,
                    mean(d),
                    sample_variance(d).sqrt(),
                    d.len()
                ));
            }
        }
        out
    }
}

/// Compares IPS and MLIPS estimates of the uncapped, unregularized IPS
/// objective gradient at `target` on subsamples drawn without replacement.
/// The reference is the full-data IPS gradient with logged propensities.
pub fn gradient_comparison(
    dataset: &BanditDataset,
    target: &Policy,
    fractions: &[f64],
    trials: usize,
    surrogate: &SurrogateOptions,
    seed: u64,
) -> Result<GradientComparison> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let ips_config = TrainConfig {
        cap: f64::INFINITY,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let full_gradient = objective_gradient(dataset, target, &ips_config)?;
    let n = dataset.len();
    let mut sizes = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("fraction {f} outside (0, 1]")));
        }
        let size = (f * n as f64).round() as usize;
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "fraction {f} of {n} records leaves {size} < 2"
            )));
        }
        sizes.push(size);
    }
    let jobs: Vec<(usize, usize)> = (0..fractions.len())
        .flat_map(|fi| (0..trials).map(move |t| (fi, t)))
        .collect();
    let dists: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(fi, t)| {
            let trial_seed = derive_seed(derive_seed(seed, fi as u64), t as u64);
            let mut idx = permutation(n, trial_seed);
            idx.truncate(sizes[fi]);
            idx.sort_unstable();
            let sub = dataset.subset(&idx)?;
            let g_ips = objective_gradient(&sub, target, &ips_config)?;
            let opts = SurrogateOptions {
                seed: trial_seed,
                ..surrogate.clone()
            };
            let fit = fit_surrogate(&sub, &opts)?;
            let ml_config = TrainConfig {
                propensity_source: PropensitySource::surrogate(fit),
                ..ips_config.clone()
            };
            let g_ml = objective_gradient(&sub, target, &ml_config)?;
            Ok((distance(&g_ips, &full_gradient), distance(&g_ml, &full_gradient)))
        })
        .collect::<Result<_>>()?;
    let fractions = fractions
        .iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            let chunk = &dists[fi * trials..(fi + 1) * trials];
            FractionTrials {
                fraction,
                size: sizes[fi],
                ips: chunk.iter().map(|d| d.0).collect(),
                mlips: chunk.iter().map(|d| d.1).collect(),
            }
        })
        .collect();
    Ok(GradientComparison {
        full_gradient,
        fractions,
    })
}

/// Outcome of the small-sample gradient accuracy check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// Fractions examined, smallest first.
    pub smallest: Vec<f64>,
    /// Whether the mean MLIPS distance is at most the IPS distance at each.
    pub mean_not_worse: Vec<bool>,
    /// Share of per-trial wins for MLIPS at the smallest fraction.
    pub win_rate: f64,
    pub passed: bool,
}

impl GradientComparison {
    /// Checks the two smallest fractions on mean distance and the smallest
    /// one on per-trial win rate.
    pub fn check(&self, min_win_rate: f64) -> GradientCheck {
        let mut order: Vec<&FractionTrials> = self.fractions.iter().collect();
        order.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
        order.truncate(2);
        let mean_not_worse: Vec<bool> = order.iter().map(|f| mean(&f.mlips) <= mean(&f.ips)).collect();
        let win_rate = order.first().map_or(0.0, |f| f.mlips_win_rate());
        GradientCheck {
            smallest: order.iter().map(|f| f.fraction).collect(),
            passed: !order.is_empty() && mean_not_worse.iter().all(|&b| b) && win_rate >= min_win_rate,
            mean_not_worse,
            win_rate,
        }
    }
}

/// Options for [`synthetic_multiclass_logs`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMulticlass {
    pub n: usize,
    pub m: usize,
    /// Number of context segments, encoded as indicators against segment 0.
    pub segments: usize,
    /// Number of standard normal context coordinates.
    pub continuous: usize,
    /// Scale of the logging policy's weights.
    pub logging_scale: f64,
    /// Scale of the planted reward weights.
    pub reward_scale: f64,
}

impl SyntheticMulticlass {
    /// Context dimension: constant, segment indicators, continuous block.
    pub fn p(&self) -> usize {
        self.segments + self.continuous
    }
}

impl Default for SyntheticMulticlass {
    fn default() -> Self {
        Self {
            n: 20_000,
            m: 4,
            segments: 6,
            continuous: 0,
            logging_scale: 0.7,
            reward_scale: 1.5,
        }
    }
}

/// Logs from a softmax-linear logging policy over contexts made of a
/// constant, a uniformly drawn segment indicator and Gaussian coordinates.
/// Rewards are `sigmoid(theta_a . x)` for planted per-action `theta_a`.
/// Returns the logs and the true logging policy.
pub fn synthetic_multiclass_logs(
    spec: &SyntheticMulticlass,
    seed: u64,
) -> Result<(BanditDataset, SoftmaxLinearPolicy)> {
    if spec.m < 2 || spec.segments < 1 {
        return Err(Error::InvalidArgument("need m >= 2 and at least one segment".into()));
    }
    let p = spec.p();
    let mut prng = derived_rng(seed, 0);
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut prng);
        z * scale
    };
    let logging_w: Vec<f64> = (0..(spec.m - 1) * p).map(|_| normal(spec.logging_scale)).collect();
    let theta: Vec<Vec<f64>> = (0..spec.m)
        .map(|_| (0..p).map(|_| normal(spec.reward_scale)).collect())
        .collect();
    let logging = SoftmaxLinearPolicy::new(spec.m, p, logging_w)?;
    let row_seed = derive_seed(seed, 1);
    let records = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(row_seed, i as u64);
            let mut x = vec![0.0; p];
            x[0] = 1.0;
            let segment = rng.random_range(0..spec.segments);
            if segment > 0 {
                x[segment] = 1.0;
            }
            for v in &mut x[spec.segments..] {
                *v = StandardNormal.sample(&mut rng);
            }
            let action = logging.sample_action(&x, &mut rng)?;
            let Action::Class(a) = action else { unreachable!() };
            let reward = sigmoid(dot(&theta[a], &x));
            Ok(LoggedInteraction {
                propensity: logging.propensity(&x, &action)?,
                x: ContextFeatures::new(x)?,
                action,
                reward,
            })
        })
        .collect::<Result<_>>()?;
    Ok((
        BanditDataset::new(records, ActionSpace::Multiclass { m: spec.m }, p)?,
        logging,
    ))
}

/// A reasonably accurate target for gradient comparisons: a few epochs of
/// uncapped IPS ascent on the full logs from the zero policy.
pub fn reference_target(dataset: &BanditDataset, epochs: usize, seed: u64) -> Result<Policy> {
    let config = TrainConfig {
        cap: f64::INFINITY,
        lambda: 0.0,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let init = Policy::zeros(dataset.action_space(), dataset.p());
    Ok(adagrad_train(dataset, &init, &config)?.params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "IPS")]
    Ips,
    #[serde(rename = "POEM")]
    Poem,
    #[serde(rename = "Norm-POEM")]
    NormPoem,
    #[serde(rename = "MLIPS")]
    Mlips,
    #[serde(rename = "MLPOEM")]
    Mlpoem,
    #[serde(rename = "ML-Norm-POEM")]
    MlNormPoem,
    #[serde(rename = "IPS-Uniform")]
    IpsUniform,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ips,
        Method::Poem,
        Method::NormPoem,
        Method::Mlips,
        Method::Mlpoem,
        Method::MlNormPoem,
        Method::IpsUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ips => "IPS",
            Method::Poem => "POEM",
            Method::NormPoem => "Norm-POEM",
            Method::Mlips => "MLIPS",
            Method::Mlpoem => "MLPOEM",
            Method::MlNormPoem => "ML-Norm-POEM",
            Method::IpsUniform => "IPS-Uniform",
        }
    }

    pub fn uses_surrogate(self) -> bool {
        matches!(self, Method::Mlips | Method::Mlpoem | Method::MlNormPoem)
    }

    /// Hyperparameter grid for this method over a base config whose
    /// propensity source is replaced according to the method.
    pub fn grid(self, base: &TrainConfig, caps: &[f64], lambdas: &[f64], source: PropensitySource) -> Vec<TrainConfig> {
        let base = TrainConfig {
            propensity_source: source,
            ..base.clone()
        };
        let unregularized = |objective| {
            vec![TrainConfig {
                cap: f64::INFINITY,
                lambda: 0.0,
                objective,
                ..base.clone()
            }]
        };
        match self {
            Method::Ips | Method::Mlips | Method::IpsUniform => unregularized(Objective::Poem),
            Method::Poem | Method::Mlpoem => TrainConfig::grid(
                &TrainConfig {
                    objective: Objective::Poem,
                    ..base
                },
                caps,
                lambdas,
            ),
            Method::NormPoem | Method::MlNormPoem => TrainConfig::grid(
                &TrainConfig {
                    objective: Objective::NormPoem,
                    ..base
                },
                &[f64::INFINITY],
                lambdas,
            ),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Training epochs per benchmark fit, kept small so ten seeds of the full
/// grid finish in minutes on one core.
pub const BENCH_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub caps: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub folds: usize,
    /// Training hyperparameters other than cap, lambda and source.
    pub base: TrainConfig,
    pub logging_fraction: f64,
    pub replications: usize,
    pub test_fraction: f64,
    pub surrogate: SurrogateOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            seeds: (0..10).collect(),
            caps: DEFAULT_CAPS.to_vec(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            folds: 5,
            base: TrainConfig {
                epochs: BENCH_EPOCHS,
                ..TrainConfig::default()
            },
            logging_fraction: DEFAULT_LOGGING_FRACTION,
            replications: DEFAULT_REPLICATIONS,
            test_fraction: DEFAULT_TEST_FRACTION,
            surrogate: SurrogateOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    pub test_hamming_loss: f64,
    pub selected: TrainConfig,
}

pub const BENCH_CSV_HEADER: &str = "dataset,method,seed,test_hamming_loss";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.dataset, r.method, r.seed, r.test_hamming_loss));
    }
    out
}

/// Runs the full pipeline for each seed: split, logging policy on a small
/// fraction of the training rows, simulated bandit feedback, cross-validated
/// training per method, and expected test Hamming loss.
pub fn benchmark(sup: &SupervisedDataset, dataset_name: &str, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.methods.is_empty() || opts.seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one method and one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let (train, test) = train_test_split(sup, opts.test_fraction, derive_seed(seed, 0))?;
        let logging = train_logging_policy(&train, opts.logging_fraction, derive_seed(seed, 1))?;
        let logs = supervised_to_bandit(&train, &logging, opts.replications, derive_seed(seed, 2))?;
        rows.extend(train_methods(&logs, &test, dataset_name, seed, opts)?);
    }
    Ok(rows)
}

/// Trains every configured method on one set of logs and scores each on
/// `test`. This is the per-seed inner step of [`benchmark`].
pub fn train_methods(
    logs: &BanditDataset,
    test: &SupervisedDataset,
    dataset_name: &str,
    seed: u64,
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    let surrogate = if opts.methods.iter().any(|m| m.uses_surrogate()) {
        let s_opts = SurrogateOptions {
            seed: derive_seed(seed, 3),
            ..opts.surrogate.clone()
        };
        Some(fit_surrogate(logs, &s_opts)?)
    } else {
        None
    };
    let init = Policy::zeros(logs.action_space(), logs.p());
    let base = TrainConfig {
        seed: derive_seed(seed, 4),
        ..opts.base.clone()
    };
    let mut rows = Vec::with_capacity(opts.methods.len());
    for &method in &opts.methods {
        let source = match method {
            Method::IpsUniform => PropensitySource::Uniform,
            m if m.uses_surrogate() => PropensitySource::surrogate(surrogate.clone().expect("fitted above")),
            _ => PropensitySource::Logged,
        };
        let grid = method.grid(&base, &opts.caps, &opts.lambdas, source);
        let selected = if grid.len() == 1 {
            grid[0].clone()
        } else {
            cross_validate(logs, &init, &grid, opts.folds, derive_seed(seed, 5))?.best
        };
        let trained = adagrad_train(logs, &init, &selected)?;
        let policy = trained
            .params
            .as_multilabel()
            .ok_or_else(|| Error::InvalidArgument("benchmark expects a multilabel dataset".into()))?;
        rows.push(BenchRow {
            dataset: dataset_name.to_string(),
            method,
            seed,
            test_hamming_loss: expected_hamming_loss(policy, test)?,
            selected,
        });
    }
    Ok(rows)
}

/// Mean test loss per method, in the order methods first appear.
pub fn mean_loss_by_method(rows: &[BenchRow]) -> Vec<(Method, f64)> {
    let mut order: Vec<Method> = Vec::new();
    for r in rows {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.test_hamming_loss).collect();
            (m, mean(&v))
        })
        .collect()
}

/// One pairwise ordering between benchmark methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub better: Method,
    /// Methods expected to have higher loss than `better`.
    pub worse: Vec<Method>,
    /// `better` must have strictly lower loss rather than lower or equal.
    pub strict: bool,
    pub mean_holds: bool,
    pub seeds_holding: usize,
    pub seeds: usize,
    pub passed: bool,
}

impl OrderingCheck {
    pub fn describe(&self) -> String {
        let rel = if self.strict { "<" } else { "<=" };
        let rhs: Vec<&str> = self.worse.iter().map(|m| m.name()).collect();
        format!(
            "{} {rel} {}: mean {}, {}/{} seeds",
            self.better,
            rhs.join(" and "),
            if self.mean_holds { "holds" } else { "fails" },
            self.seeds_holding,
            self.seeds
        )
    }
}

fn loss_of(rows: &[BenchRow], method: Method, seed: u64) -> Option<f64> {
    rows.iter()
        .find(|r| r.method == method && r.seed == seed)
        .map(|r| r.test_hamming_loss)
}

/// Evaluates the expected orderings: MLIPS no worse than IPS, MLPOEM no worse
/// than POEM, and IPS-Uniform strictly worse than both IPS and MLIPS. Each
/// must hold on the mean and in at least `min_share` of the seeds. Orderings
/// whose methods are missing from `rows` are skipped.
pub fn bench_orderings(rows: &[BenchRow], min_share: f64) -> Vec<OrderingCheck> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let means = mean_loss_by_method(rows);
    let mean_of = |m: Method| means.iter().find(|(k, _)| *k == m).map(|(_, v)| *v);
    // (lower-loss method, higher-loss methods, strict)
    let specs = [
        (Method::Mlips, vec![Method::Ips], false),
        (Method::Mlpoem, vec![Method::Poem], false),
        (Method::Ips, vec![Method::IpsUniform], true),
        (Method::Mlips, vec![Method::IpsUniform], true),
    ];
    let cmp = |a: f64, b: f64, strict: bool| if strict { a < b } else { a <= b };
    specs
        .into_iter()
        .filter_map(|(better, worse, strict)| {
            let mb = mean_of(better)?;
            let mw: Vec<f64> = worse.iter().map(|&w| mean_of(w)).collect::<Option<_>>()?;
            let mean_holds = mw.iter().all(|&w| cmp(mb, w, strict));
            let seeds_holding = seeds
                .iter()
                .filter(|&&s| {
                    let Some(b) = loss_of(rows, better, s) else { return false };
                    worse.iter().all(|&w| loss_of(rows, w, s).is_some_and(|l| cmp(b, l, strict)))
                })
                .count();
            let passed = mean_holds && seeds_holding as f64 >= min_share * seeds.len() as f64;
            Some(OrderingCheck {
                better,
                worse,
                strict,
                mean_holds,
                seeds_holding,
                seeds: seeds.len(),
                passed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_multilabel, SyntheticMultilabel};
    use crate::policy::MultiLabelProductPolicy;

    #[test]
    fn fractions_follow_half_powers() {
        let f = halving_fractions(4);
        assert!((f[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((f[1] - 0.5).abs() < 1e-15);
        assert!((f[3] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn full_fraction_ips_distance_is_zero() {
        let (logs, logging) = synthetic_multiclass_logs(
            &SyntheticMulticlass {
                n: 400,
                ..SyntheticMulticlass::default()
            },
            1,
        )
        .unwrap();
        let target: Policy = logging.into();
        let cmp = gradient_comparison(&logs, &target, &[1.0, 0.5], 3, &SurrogateOptions::fixed(1e-4), 2).unwrap();
        assert!(cmp.fractions[0].ips.iter().all(|d| *d == 0.0));
        assert_eq!(cmp.fractions[1].size, 200);
        let csv = cmp.to_csv();
        assert!(csv.starts_with("fraction,estimator,mean_dist,std_dist,trials\n1,ips,0,0,3\n"));
        assert_eq!(csv.lines().count(), 5);
        let again = gradient_comparison(&logs, &target, &[1.0, 0.5], 3, &SurrogateOptions::fixed(1e-4), 2).unwrap();
        assert_eq!(cmp, again);
    }

    #[test]
    fn tiny_fraction_is_rejected() {
        let (logs, logging) = synthetic_multiclass_logs(
            &SyntheticMulticlass {
                n: 10,
                ..SyntheticMulticlass::default()
            },
            1,
        )
        .unwrap();
        let target: Policy = logging.into();
        assert!(gradient_comparison(&logs, &target, &[0.1], 2, &SurrogateOptions::fixed(0.1), 0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("SNIPS".parse::<Method>().is_err());
    }

    #[test]
    fn zero_rewards_make_methods_tie() {
        let sup = synthetic_multilabel(
            &SyntheticMultilabel {
                rows: 200,
                labels: 2,
                p: 3,
                ..SyntheticMultilabel::default()
            },
            9,
        )
        .unwrap();
        let logging = train_logging_policy(&sup, 0.5, 1).unwrap();
        let logs = supervised_to_bandit(&sup, &logging, 1, 2).unwrap();
        let logs = logs.with_rewards(vec![0.0; logs.len()]).unwrap();
        let opts = BenchOptions {
            caps: vec![10.0],
            lambdas: vec![1e-2, 1.0],
            folds: 2,
            base: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            surrogate: SurrogateOptions::fixed(1e-2),
            ..BenchOptions::default()
        };
        let rows = train_methods(&logs, &sup, "degenerate", 0, &opts).unwrap();
        assert_eq!(rows.len(), Method::ALL.len());
        let untrained = expected_hamming_loss(&MultiLabelProductPolicy::zeros(2, 3), &sup).unwrap();
        for r in &rows {
            assert_eq!(r.test_hamming_loss, untrained, "{}", r.method);
        }
    }

    #[test]
    fn small_benchmark_runs_and_is_deterministic() {
        let sup = synthetic_multilabel(
            &SyntheticMultilabel {
                rows: 300,
                labels: 2,
                p: 3,
                ..SyntheticMultilabel::default()
            },
            4,
        )
        .unwrap();
        let opts = BenchOptions {
            seeds: vec![1],
            caps: vec![10.0],
            lambdas: vec![1e-2],
            folds: 2,
            base: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            logging_fraction: 0.2,
            surrogate: SurrogateOptions::fixed(1e-3),
            ..BenchOptions::default()
        };
        let a = benchmark(&sup, "tiny", &opts).unwrap();
        let b = benchmark(&sup, "tiny", &opts).unwrap();
        assert_eq!(a, b);
        let csv = bench_csv(&a);
        assert!(csv.starts_with("dataset,method,seed,test_hamming_loss\ntiny,IPS,1,"));
        assert_eq!(mean_loss_by_method(&a).len(), Method::ALL.len());
    }
}
