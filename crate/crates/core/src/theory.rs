//! Numerical checks of the asymptotic theory behind surrogate-propensity IPS.
//!
//! Population quantities on a [`SyntheticEnvironment`] are exact sums over
//! (context, action) pairs weighted by `lambda_c * mu(a|x_c; beta*)`. Only the
//! replication experiments sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{sample_logs, true_value, Action, SyntheticEnvironment};
use crate::error::{Error, Result};
use crate::estimators::{ips_value, mlips_value};
use crate::numeric::{mean, median, percentile, sample_variance};
use crate::policy::{ActionPolicy, SoftmaxLinearPolicy};
use crate::rng::{derive_seed, derived_rng};
use crate::surrogate::{fit_mle, score, score_jacobian, weighted_fisher_information, FitOptions};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const MIN_REPLICATIONS: usize = 100;
/// Largest tolerated share of replications whose MLE fit did not converge.
pub const MAX_UNCONVERGED_SHARE: f64 = 0.01;

/// `pi(a|x) / mu(a|x; beta) * r - V`.
pub fn deviation<P: ActionPolicy + ?Sized>(
    x: &[f64],
    a: usize,
    r: f64,
    beta: &SoftmaxLinearPolicy,
    target: &P,
    v: f64,
) -> Result<f64> {
    let act = Action::Class(a);
    Ok(target.propensity(x, &act)? / beta.propensity(x, &act)? * r - v)
}

/// Gradient of [`deviation`] in `beta`. Block k is `pi r (mu_k - 1{a=k}) / mu_a * x`.
pub fn deviation_gradient<P: ActionPolicy + ?Sized>(
    x: &[f64],
    a: usize,
    r: f64,
    beta: &SoftmaxLinearPolicy,
    target: &P,
) -> Result<Vec<f64>> {
    let mu = beta.probabilities(x)?;
    let pr = target.propensity(x, &Action::Class(a))? * r;
    let p = beta.p();
    let mut g = Vec::with_capacity(beta.num_params());
    for k in 0..beta.m() - 1 {
        let ind = if k == a { 1.0 } else { 0.0 };
        let coef = pr * (mu[k] - ind) / mu[a];
        g.extend(x.iter().take(p).map(|xi| coef * xi));
    }
    Ok(g)
}

/// Hessian of [`deviation`] in `beta`. With `e_j = exp(beta_j . x)` and
/// `Z = sum_j e_j`, block (j, k) is
/// `pi r x x^T [(1{j=k} - 1{k=a}) e_j + 1{j=k=a} Z - 1{a=j} e_k] / e_a`.
pub fn deviation_hessian<P: ActionPolicy + ?Sized>(
    x: &[f64],
    a: usize,
    r: f64,
    beta: &SoftmaxLinearPolicy,
    target: &P,
) -> Result<DMatrix<f64>> {
    // Ratios e_j / e_a and Z / e_a equal mu_j / mu_a and 1 / mu_a.
    let mu = beta.probabilities(x)?;
    let pr = target.propensity(x, &Action::Class(a))? * r;
    let p = beta.p();
    let d = beta.num_params();
    let ind = |u: usize, v: usize| if u == v { 1.0 } else { 0.0 };
    Ok(DMatrix::from_fn(d, d, |row, col| {
        let (j, u) = (row / p, row % p);
        let (k, v) = (col / p, col % p);
        let bracket = (ind(j, k) - ind(k, a)) * mu[j] + ind(j, k) * ind(k, a) - ind(a, j) * mu[k];
        pr * x[u] * x[v] * bracket / mu[a]
    }))
}

/// One support point of the joint (context, action) law under the logging policy.
#[derive(Clone, Debug)]
struct Point {
    context: usize,
    action: usize,
    weight: f64,
}

fn support(env: &SyntheticEnvironment) -> Result<Vec<Point>> {
    let mut pts = Vec::new();
    for (c, x) in env.contexts().iter().enumerate() {
        let mu = env.logging().probabilities(x)?;
        for (a, q) in mu.iter().enumerate() {
            pts.push(Point {
                context: c,
                action: a,
                weight: env.probabilities()[c] * q,
            });
        }
    }
    Ok(pts)
}

/// Population objects needed for `Pi = c^T I^{-1} S` at the true logging parameters.
#[derive(Clone, Debug)]
pub struct PiModel {
    env: SyntheticEnvironment,
    target_probs: Vec<Vec<f64>>,
    pub value: f64,
    /// `c = E[D_V S]`.
    pub coupling: DVector<f64>,
    pub fisher: DMatrix<f64>,
    /// `I^{-1} c`.
    pub direction: DVector<f64>,
}

impl PiModel {
    pub fn new<P: ActionPolicy + ?Sized>(env: &SyntheticEnvironment, target: &P) -> Result<Self> {
        let beta = env.logging();
        let value = true_value(env, target)?;
        let target_probs: Vec<Vec<f64>> = env
            .contexts()
            .iter()
            .map(|x| {
                (0..env.m())
                    .map(|a| target.propensity(x, &Action::Class(a)))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        let weighted: Vec<(&[f64], f64)> = env
            .contexts()
            .iter()
            .zip(env.probabilities())
            .map(|(x, &w)| (x.as_slice(), w))
            .collect();
        let fisher = weighted_fisher_information(beta, &weighted)?;
        let mut coupling = DVector::zeros(beta.num_params());
        for pt in support(env)? {
            let x = &env.contexts()[pt.context];
            let s = DVector::from_vec(score(beta, pt.action, x)?);
            let dv = deviation(x, pt.action, env.reward(pt.context, pt.action), beta, target, value)?;
            coupling += s * (pt.weight * dv);
        }
        let direction = solve_fisher(&fisher, &coupling)?;
        Ok(Self {
            env: env.clone(),
            target_probs,
            value,
            coupling,
            fisher,
            direction,
        })
    }

    /// `D_V` at a support point.
    pub fn deviation_at(&self, context: usize, action: usize) -> Result<f64> {
        let x = &self.env.contexts()[context];
        let mu = self.env.logging().propensity(x, &Action::Class(action))?;
        Ok(self.target_probs[context][action] / mu * self.env.reward(context, action) - self.value)
    }

    /// `Pi(r, a, x)` for a context vector and action.
    pub fn pi(&self, x: &[f64], action: usize) -> Result<f64> {
        let s = score(self.env.logging(), action, x)?;
        Ok(self.direction.iter().zip(&s).map(|(a, b)| a * b).sum())
    }

    /// `Var(Pi) = c^T I^{-1} c`, the closed form of `E[Pi^2]` when `E[Pi] = 0`.
    pub fn variance(&self) -> f64 {
        self.coupling.dot(&self.direction)
    }

    fn env(&self) -> &SyntheticEnvironment {
        &self.env
    }
}

fn solve_fisher(fisher: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = fisher.amax();
    let eig = fisher.clone().symmetric_eigen();
    if !(scale > 0.0) || eig.eigenvalues.min() <= 1e-12 * scale {
        return Err(Error::SingularFisher);
    }
    let ch = fisher.clone().cholesky().ok_or(Error::SingularFisher)?;
    Ok(ch.solve(rhs))
}

/// `Pi` at `(x, a)` for the environment's logging parameters.
pub fn pi_statistic<P: ActionPolicy + ?Sized>(
    env: &SyntheticEnvironment,
    target: &P,
    x: &[f64],
    action: usize,
) -> Result<f64> {
    PiModel::new(env, target)?.pi(x, action)
}

/// Largest absolute error of each enumerated identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    /// `|E[S]|_inf`.
    pub mean_score: f64,
    /// `|E[S S^T] - I|_inf`.
    pub fisher_outer: f64,
    /// `|E[dS/dbeta] + I|_inf`.
    pub fisher_jacobian: f64,
    /// `|E[dD/dbeta] + E[D S]|_inf`.
    pub deviation_gradient: f64,
    /// `|E[D]|`.
    pub mean_deviation: f64,
    /// `|E[Pi]|`.
    pub mean_pi: f64,
    /// `|E[D Pi] - E[Pi^2]|`.
    pub deviation_pi: f64,
    /// `|E[Pi^2] - Var(Pi)|` with `Var(Pi)` from the closed form.
    pub pi_variance: f64,
    pub var_pi: f64,
}

impl IdentityReport {
    pub fn max_error(&self) -> f64 {
        [
            self.mean_score,
            self.fisher_outer,
            self.fisher_jacobian,
            self.deviation_gradient,
            self.mean_deviation,
            self.mean_pi,
            self.deviation_pi,
            self.pi_variance,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn identity_suite<P: ActionPolicy + ?Sized>(env: &SyntheticEnvironment, target: &P) -> Result<IdentityReport> {
    let model = PiModel::new(env, target)?;
    let beta = env.logging();
    let d = beta.num_params();
    let mut es = DVector::<f64>::zeros(d);
    let mut ess = DMatrix::<f64>::zeros(d, d);
    let mut ejac = DMatrix::<f64>::zeros(d, d);
    let mut edg = DVector::<f64>::zeros(d);
    let mut eds = DVector::<f64>::zeros(d);
    let (mut ed, mut epi, mut edpi, mut epi2) = (0.0, 0.0, 0.0, 0.0);
    for pt in support(env)? {
        let x = &env.contexts()[pt.context];
        let r = env.reward(pt.context, pt.action);
        let s = DVector::from_vec(score(beta, pt.action, x)?);
        let dv = model.deviation_at(pt.context, pt.action)?;
        let pi = model.pi(x, pt.action)?;
        let w = pt.weight;
        es += &s * w;
        ess += (&s * s.transpose()) * w;
        ejac += score_jacobian(beta, x)? * w;
        edg += DVector::from_vec(deviation_gradient(x, pt.action, r, beta, target)?) * w;
        eds += &s * (w * dv);
        ed += w * dv;
        epi += w * pi;
        edpi += w * dv * pi;
        epi2 += w * pi * pi;
    }
    let var_pi = model.variance();
    Ok(IdentityReport {
        mean_score: es.amax(),
        fisher_outer: (ess - &model.fisher).amax(),
        fisher_jacobian: (ejac + &model.fisher).amax(),
        deviation_gradient: (edg + eds).amax(),
        mean_deviation: ed.abs(),
        mean_pi: epi.abs(),
        deviation_pi: (edpi - epi2).abs(),
        pi_variance: (epi2 - var_pi).abs(),
        var_pi,
    })
}

/// Max of `|E[S S^T] - I|` and `|E[dS/dbeta] + I|` by enumeration.
pub fn fisher_identity_check(env: &SyntheticEnvironment) -> Result<f64> {
    // A uniform target keeps PiModel well defined whatever the rewards.
    let target = SoftmaxLinearPolicy::zeros(env.m(), env.p());
    let rep = identity_suite(env, &target)?;
    Ok(rep.fisher_outer.max(rep.fisher_jacobian))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub n: usize,
    pub replications: usize,
    pub true_value: f64,
    pub mse_ips: f64,
    pub mse_mlips: f64,
    pub var_pi: f64,
    pub var_pi_over_n: f64,
    pub observed_gap: f64,
    pub gap_ci: (f64, f64),
    pub mean_ips: f64,
    pub mean_mlips: f64,
    /// Monte Carlo standard error of `mean_mlips`.
    pub mlips_std_error: f64,
    pub unconverged: usize,
}

impl TheoremCheckReport {
    pub const CSV_HEADER: &'static str = "n,replications,true_value,mse_ips,mse_mlips,var_pi_over_n,observed_gap,gap_ci_lo,gap_ci_hi,mean_mlips,mlips_std_error,unconverged";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.replications,
            self.true_value,
            self.mse_ips,
            self.mse_mlips,
            self.var_pi_over_n,
            self.observed_gap,
            self.gap_ci.0,
            self.gap_ci.1,
            self.mean_mlips,
            self.mlips_std_error,
            self.unconverged
        )
    }

    pub fn gap_positive(&self) -> bool {
        self.observed_gap > 0.0
    }

    pub fn ci_contains_prediction(&self) -> bool {
        self.gap_ci.0 <= self.var_pi_over_n && self.var_pi_over_n <= self.gap_ci.1
    }

    pub fn mlips_unbiased_within(&self, k: f64) -> bool {
        (self.mean_mlips - self.true_value).abs() <= k * self.mlips_std_error
    }
}

/// Percentile bootstrap interval for the mean of `diffs`.
pub fn bootstrap_mean_ci(diffs: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let n = diffs.len();
    let mut rng = derived_rng(seed, 0);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let draw: Vec<f64> = (0..n).map(|_| diffs[rng.random_range(0..n)]).collect();
            mean(&draw)
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (percentile(&means, tail), percentile(&means, 1.0 - tail))
}

/// Replicated comparison of IPS (true propensities) and MLIPS (surrogate
/// refitted without penalty on each replication's logs).
pub fn mse_reduction_experiment<P: ActionPolicy + Sync + ?Sized>(
    env: &SyntheticEnvironment,
    target: &P,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<TheoremCheckReport> {
    if replications < MIN_REPLICATIONS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_REPLICATIONS} replications are required, got {replications}"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let model = PiModel::new(env, target)?;
    let v = model.value;
    let runs: Vec<(f64, f64, bool)> = (0..replications)
        .into_par_iter()
        .map(|i| {
            let logs = sample_logs(env, n, derive_seed(seed, i as u64))?;
            let ips = ips_value(&logs, target)?.value;
            let fit = fit_mle(&logs, &FitOptions::default())?;
            let ml = mlips_value(&logs, target, &fit.beta_hat)?.value;
            Ok((ips, ml, fit.converged))
        })
        .collect::<Result<_>>()?;
    let unconverged = runs.iter().filter(|r| !r.2).count();
    if unconverged as f64 > MAX_UNCONVERGED_SHARE * replications as f64 {
        return Err(Error::TooManyUnconverged {
            unconverged,
            total: replications,
        });
    }
    let ips: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let ml: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let se_ips: Vec<f64> = ips.iter().map(|e| (e - v).powi(2)).collect();
    let se_ml: Vec<f64> = ml.iter().map(|e| (e - v).powi(2)).collect();
    let diffs: Vec<f64> = se_ips.iter().zip(&se_ml).map(|(a, b)| a - b).collect();
    let gap_ci = bootstrap_mean_ci(&diffs, BOOTSTRAP_RESAMPLES, 0.95, derive_seed(seed, u64::MAX));
    let var_pi = model.variance();
    Ok(TheoremCheckReport {
        n,
        replications,
        true_value: v,
        mse_ips: mean(&se_ips),
        mse_mlips: mean(&se_ml),
        var_pi,
        var_pi_over_n: var_pi / n as f64,
        observed_gap: mean(&diffs),
        gap_ci,
        mean_ips: mean(&ips),
        mean_mlips: mean(&ml),
        mlips_std_error: (sample_variance(&ml) / replications as f64).sqrt(),
        unconverged,
    })
}

/// Per-sample-size medians of the MLE expansion residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub n: usize,
    /// Median of `|(beta_hat - beta*) - I^{-1} mean(S)|`.
    pub median_residual: f64,
    /// Median of `|I^{-1} mean(S)|`.
    pub median_leading_norm: f64,
    /// Median of `|V_ml - V - [(V_ips - V) - c^T (beta_hat - beta*)]|`.
    pub median_decomposition_residual: f64,
    /// Median of `|c^T (beta_hat - beta*)|`.
    pub median_first_order: f64,
    /// Componentwise mean of the leading term across seeds.
    pub mean_leading: Vec<f64>,
    /// Componentwise standard error of the leading term across seeds.
    pub leading_std_error: Vec<f64>,
    pub used: usize,
    pub unconverged: usize,
}

/// Residual, leading-term norm, decomposition error, first-order term and leading components for one seed.
type SeedStats = (f64, f64, f64, f64, Vec<f64>);

pub fn mle_expansion_check<P: ActionPolicy + Sync + ?Sized>(
    env: &SyntheticEnvironment,
    target: &P,
    n_list: &[usize],
    seeds: usize,
    seed: u64,
) -> Result<Vec<ExpansionRow>> {
    let model = PiModel::new(env, target)?;
    let beta = model.env().logging().clone();
    let ch = model.fisher.clone().cholesky().ok_or(Error::SingularFisher)?;
    n_list
        .iter()
        .enumerate()
        .map(|(ni, &n)| {
            let per_seed: Vec<Option<SeedStats>> = (0..seeds)
                .into_par_iter()
                .map(|s| {
                    let logs = sample_logs(env, n, derive_seed(derive_seed(seed, ni as u64), s as u64))?;
                    let fit = fit_mle(&logs, &FitOptions::default())?;
                    if !fit.converged {
                        return Ok(None);
                    }
                    let mut mean_s = DVector::<f64>::zeros(beta.num_params());
                    for r in logs.records() {
                        let Action::Class(a) = r.action else { unreachable!() };
                        mean_s += DVector::from_vec(score(&beta, a, &r.x)?);
                    }
                    mean_s /= n as f64;
                    let leading = ch.solve(&mean_s);
                    let delta = DVector::from_column_slice(fit.beta_hat.params())
                        - DVector::from_column_slice(beta.params());
                    let residual = (&delta - &leading).norm();
                    let first = model.coupling.dot(&delta);
                    let ips = ips_value(&logs, target)?.value;
                    let ml = mlips_value(&logs, target, &fit.beta_hat)?.value;
                    let decomp = (ml - model.value) - ((ips - model.value) - first);
                    Ok(Some((residual, leading.norm(), decomp.abs(), first.abs(), leading.iter().cloned().collect())))
                })
                .collect::<Result<_>>()?;
            let used: Vec<_> = per_seed.iter().flatten().collect();
            let col = |f: fn(&SeedStats) -> f64| -> f64 {
                median(&used.iter().map(|u| f(u)).collect::<Vec<_>>())
            };
            let d = beta.num_params();
            let comp: Vec<Vec<f64>> = (0..d).map(|k| used.iter().map(|u| u.4[k]).collect()).collect();
            Ok(ExpansionRow {
                n,
                median_residual: col(|u| u.0),
                median_leading_norm: col(|u| u.1),
                median_decomposition_residual: col(|u| u.2),
                median_first_order: col(|u| u.3),
                mean_leading: comp.iter().map(|c| mean(c)).collect(),
                leading_std_error: comp
                    .iter()
                    .map(|c| (sample_variance(c) / c.len().max(1) as f64).sqrt())
                    .collect(),
                used: used.len(),
                unconverged: seeds - used.len(),
            })
        })
        .collect()
}

/// The reference environment for the replication experiments: three
/// contexts `(1, t)` with `t` in {-1, 0, 1}, three actions, rewards in [0, 1].
pub fn canonical_env() -> SyntheticEnvironment {
    let contexts = [-1.0, 0.0, 1.0]
        .iter()
        .map(|t| crate::bandit::ContextFeatures::new(vec![1.0, *t]).expect("finite"))
        .collect();
    let logging = SoftmaxLinearPolicy::new(3, 2, vec![0.5, -0.8, -0.3, 0.6]).expect("shape");
    let rewards = vec![
        vec![0.9, 0.2, 0.5],
        vec![0.1, 0.7, 0.3],
        vec![0.6, 0.4, 0.95],
    ];
    SyntheticEnvironment::new(contexts, vec![0.3, 0.4, 0.3], rewards, logging).expect("valid environment")
}

/// Target policy paired with [`canonical_env`]; it differs from the logging policy.
pub fn canonical_target() -> SoftmaxLinearPolicy {
    SoftmaxLinearPolicy::new(3, 2, vec![-0.5, 1.0, 0.8, -0.4]).expect("shape")
}

/// Sampled version of `E[S S^T] = I`: returns the largest absolute entry
/// error and the largest error measured in Monte Carlo standard errors.
pub fn sampled_fisher_check(env: &SyntheticEnvironment, n: usize, seed: u64) -> Result<(f64, f64)> {
    let logs = sample_logs(env, n, seed)?;
    let beta = env.logging();
    let weighted: Vec<(&[f64], f64)> = env
        .contexts()
        .iter()
        .zip(env.probabilities())
        .map(|(x, &w)| (x.as_slice(), w))
        .collect();
    let fisher = weighted_fisher_information(beta, &weighted)?;
    let d = beta.num_params();
    // Per-entry samples of S S^T; compare their means with I.
    let mut worst_ratio: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let scores: Vec<Vec<f64>> = logs
        .records()
        .iter()
        .map(|r| {
            let Action::Class(a) = r.action else { unreachable!() };
            score(beta, a, &r.x)
        })
        .collect::<Result<_>>()?;
    for u in 0..d {
        for v in 0..d {
            let vals: Vec<f64> = scores.iter().map(|s| s[u] * s[v]).collect();
            let se = (sample_variance(&vals) / n as f64).sqrt();
            let err = (mean(&vals) - fisher[(u, v)]).abs();
            worst_abs = worst_abs.max(err);
            if se > 0.0 {
                worst_ratio = worst_ratio.max(err / se);
            }
        }
    }
    Ok((worst_abs, worst_ratio))
}
