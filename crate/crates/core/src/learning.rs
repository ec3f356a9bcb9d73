//! Counterfactual policy learning with variance-regularized objectives.
//!
//! Every objective here is a function of the per-record weights
//! `w_i = pi(a_i|x_i) / q_i`, where `q_i` comes from the configured
//! [`PropensitySource`]. Since `q_i` does not depend on the target
//! parameters, `dw_i = w_i * grad log pi(a_i|x_i)` and the analytic gradients
//! follow by the chain rule. Records whose weight sits at the cap contribute
//! nothing to the gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{ActionSpace, BanditDataset};
use crate::error::{Error, Result};
use crate::numeric::{mean, norm, pairwise_sum, sample_variance, PROPENSITY_FLOOR};
use crate::policy::{ActionPolicy, Policy};
use crate::rng::{complement, derive_seed, kfold, permutation};
use crate::surrogate::FitResult;

pub const DEFAULT_CAPS: [f64; 3] = [10.0, 100.0, 1000.0];
pub const DEFAULT_LAMBDAS: [f64; 5] = [1e-6, 1e-4, 1e-2, 1e-1, 1.0];
pub const ADAGRAD_EPS: f64 = 1e-8;

/// Where the denominators of the importance weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PropensitySource {
    Logged,
    Surrogate { fit: Box<FitResult> },
    /// `1 / |A|`, which reduces weighting to `|A| pi(a|x)`.
    Uniform,
}

impl PropensitySource {
    pub fn surrogate(fit: FitResult) -> Self {
        Self::Surrogate { fit: Box::new(fit) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Poem,
    NormPoem,
}

mod cap_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight cap `M`; `null` in JSON means no cap.
    #[serde(rename = "M", with = "cap_serde")]
    pub cap: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub step_size: f64,
    pub epochs: usize,
    pub seed: u64,
    pub propensity_source: PropensitySource,
    #[serde(default)]
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cap: 100.0,
            lambda: 0.0,
            batch_size: 100,
            step_size: 1.0,
            epochs: 40,
            seed: 0,
            propensity_source: PropensitySource::Logged,
            objective: Objective::Poem,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cap > 1.0) {
            return Err(Error::InvalidArgument(format!("M must exceed 1, got {}", self.cap)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!("step size must be >= 0, got {}", self.step_size)));
        }
        Ok(())
    }

    /// Cartesian product of caps and lambdas over a base config, caps outermost.
    pub fn grid(base: &TrainConfig, caps: &[f64], lambdas: &[f64]) -> Vec<TrainConfig> {
        caps.iter()
            .flat_map(|&cap| {
                lambdas.iter().map(move |&lambda| TrainConfig {
                    cap,
                    lambda,
                    ..base.clone()
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub params: Policy,
    /// Full-data objective after each epoch.
    pub objective_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub config: TrainConfig,
}

impl TrainedPolicy {
    /// CSV trace with columns `epoch,objective,grad_norm`; epochs count from 1.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,objective,grad_norm\n");
        for (e, (o, g)) in self.objective_trace.iter().zip(&self.grad_norm_trace).enumerate() {
            out.push_str(&format!("{},{o},{g}\n", e + 1));
        }
        out
    }
}

/// Importance-weight denominators `q_i` for the given source.
pub fn propensity_denominators(dataset: &BanditDataset, source: &PropensitySource) -> Result<Vec<f64>> {
    match source {
        PropensitySource::Logged => Ok(dataset.records().iter().map(|r| r.propensity).collect()),
        PropensitySource::Uniform => {
            let q = match dataset.action_space() {
                ActionSpace::Multiclass { m } => 1.0 / m as f64,
                ActionSpace::Multilabel { labels } => 0.5f64.powi(labels as i32),
            };
            Ok(vec![q; dataset.len()])
        }
        PropensitySource::Surrogate { fit } => dataset
            .records()
            .par_iter()
            .map(|r| Ok(fit.beta_hat.propensity(&r.x, &r.action)?.max(PROPENSITY_FLOOR)))
            .collect(),
    }
}

/// Weights, rewards and (optionally) per-record log-policy gradients for a
/// subset of records.
struct Batch {
    w: Vec<f64>,
    r: Vec<f64>,
    g: Option<Vec<Vec<f64>>>,
}

fn batch(
    dataset: &BanditDataset,
    q: &[f64],
    target: &Policy,
    idx: &[usize],
    with_grad: bool,
) -> Result<Batch> {
    let recs = dataset.records();
    let mut w = Vec::with_capacity(idx.len());
    let mut r = Vec::with_capacity(idx.len());
    let mut g = with_grad.then(|| Vec::with_capacity(idx.len()));
    for &i in idx {
        let rec = &recs[i];
        w.push(target.propensity(&rec.x, &rec.action)? / q[i]);
        r.push(rec.reward);
        if let Some(g) = g.as_mut() {
            g.push(target.log_propensity_gradient(&rec.x, &rec.action)?);
        }
    }
    Ok(Batch { w, r, g })
}

fn poem_parts(b: &Batch, cap: f64, lambda: f64) -> Result<(f64, Option<Vec<f64>>)> {
    let n = b.w.len();
    if n < 2 {
        return Err(Error::InvalidArgument("objective needs at least 2 records".into()));
    }
    let nf = n as f64;
    let u: Vec<f64> = b.w.iter().zip(&b.r).map(|(w, r)| w.min(cap) * r).collect();
    let u_bar = mean(&u);
    let var = sample_variance(&u);
    let sd = (var / nf).sqrt();
    let value = u_bar - lambda * sd;
    let Some(gs) = &b.g else {
        return Ok((value, None));
    };
    let d = gs.first().map_or(0, Vec::len);
    let mut grad = vec![0.0; d];
    // d(u_bar) = (1/n) sum du_i;  d(sd) = sum (u_i - u_bar) du_i / ((n - 1) n sd).
    let var_coef = if sd > 0.0 { lambda / ((nf - 1.0) * nf * sd) } else { 0.0 };
    for i in 0..n {
        if b.w[i] >= cap {
            continue;
        }
        let coef = b.w[i] * b.r[i] * (1.0 / nf - var_coef * (u[i] - u_bar));
        for (gk, sk) in grad.iter_mut().zip(&gs[i]) {
            *gk += coef * sk;
        }
    }
    Ok((value, Some(grad)))
}

fn normpoem_parts(b: &Batch, lambda: f64) -> Result<(f64, Option<Vec<f64>>)> {
    let n = b.w.len();
    let nf = n as f64;
    let sw = pairwise_sum(&b.w);
    if !(sw > 0.0) {
        return Err(Error::UndefinedEstimator(
            "self-normalized estimate needs a positive weight sum".into(),
        ));
    }
    let wr: Vec<f64> = b.w.iter().zip(&b.r).map(|(w, r)| w * r).collect();
    let v = pairwise_sum(&wr) / sw;
    let sq: Vec<f64> = b.w.iter().zip(&b.r).map(|(w, r)| ((r - v) * w).powi(2)).collect();
    let c = pairwise_sum(&sq);
    // std = sqrt(c / n) / (sw / n) = sqrt(n c) / sw
    let std = (nf * c).sqrt() / sw;
    let value = v - lambda * std / nf.sqrt();
    let Some(gs) = &b.g else {
        return Ok((value, None));
    };
    let d = gs.first().map_or(0, Vec::len);
    // Gradient of v: sum_i (r_i - v) dw_i / sw.
    let mut dv = vec![0.0; d];
    let mut dsw = vec![0.0; d];
    for i in 0..n {
        let dw = b.w[i];
        for k in 0..d {
            let t = dw * gs[i][k];
            dv[k] += (b.r[i] - v) * t;
            dsw[k] += t;
        }
    }
    for x in &mut dv {
        *x /= sw;
    }
    if lambda == 0.0 || c == 0.0 {
        return Ok((value, Some(dv)));
    }
    // dc = sum_i [ -2 (r_i - v) w_i^2 dv + 2 (r_i - v)^2 w_i dw_i ]
    let s1: f64 = b.w.iter().zip(&b.r).map(|(w, r)| (r - v) * w * w).sum();
    let mut dc: Vec<f64> = dv.iter().map(|x| -2.0 * s1 * x).collect();
    for i in 0..n {
        let coef = 2.0 * (b.r[i] - v).powi(2) * b.w[i] * b.w[i];
        for k in 0..d {
            dc[k] += coef * gs[i][k];
        }
    }
    // d std = std (dc / (2c) - dsw / sw); the penalty is lambda std / sqrt(n).
    let pen = lambda * std / nf.sqrt();
    let grad = (0..d)
        .map(|k| dv[k] - pen * (dc[k] / (2.0 * c) - dsw[k] / sw))
        .collect();
    Ok((value, Some(grad)))
}

fn evaluate(
    dataset: &BanditDataset,
    q: &[f64],
    target: &Policy,
    config: &TrainConfig,
    idx: &[usize],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let b = batch(dataset, q, target, idx, with_grad)?;
    match config.objective {
        Objective::Poem => poem_parts(&b, config.cap, config.lambda),
        Objective::NormPoem => normpoem_parts(&b, config.lambda),
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Capped estimate minus `lambda * sqrt(var_hat / n)`.
pub fn poem_objective(
    dataset: &BanditDataset,
    target: &Policy,
    cap: f64,
    lambda: f64,
    source: &PropensitySource,
) -> Result<f64> {
    let config = TrainConfig {
        cap,
        lambda,
        propensity_source: source.clone(),
        objective: Objective::Poem,
        ..TrainConfig::default()
    };
    objective_value(dataset, target, &config)
}

/// Self-normalized estimate minus `lambda * std / sqrt(n)`.
pub fn normpoem_objective(
    dataset: &BanditDataset,
    target: &Policy,
    lambda: f64,
    source: &PropensitySource,
) -> Result<f64> {
    let config = TrainConfig {
        cap: f64::INFINITY,
        lambda,
        propensity_source: source.clone(),
        objective: Objective::NormPoem,
        ..TrainConfig::default()
    };
    objective_value(dataset, target, &config)
}

pub fn objective_value(dataset: &BanditDataset, target: &Policy, config: &TrainConfig) -> Result<f64> {
    config.validate()?;
    let q = propensity_denominators(dataset, &config.propensity_source)?;
    Ok(evaluate(dataset, &q, target, config, &all(dataset.len()), false)?.0)
}

pub fn objective_gradient(dataset: &BanditDataset, target: &Policy, config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let q = propensity_denominators(dataset, &config.propensity_source)?;
    Ok(evaluate(dataset, &q, target, config, &all(dataset.len()), true)?
        .1
        .expect("gradient requested"))
}

/// Splits a shuffled order into batches, folding a short tail into the
/// previous batch so every batch has at least two records.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Mini-batch AdaGrad ascent: `w <- w + eta g / sqrt(G + eps)`.
pub fn adagrad_train(dataset: &BanditDataset, init: &Policy, config: &TrainConfig) -> Result<TrainedPolicy> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 records".into()));
    }
    if init.action_space() != dataset.action_space() || init.p() != dataset.p() {
        return Err(Error::InvalidArgument(
            "initial policy does not match the dataset's action space or dimension".into(),
        ));
    }
    let q = propensity_denominators(dataset, &config.propensity_source)?;
    let n = dataset.len();
    let mut params = init.params().to_vec();
    let mut accum = vec![0.0; params.len()];
    let mut policy = init.clone();
    let mut objective_trace = Vec::with_capacity(config.epochs);
    let mut grad_norm_trace = Vec::with_capacity(config.epochs);
    let full = all(n);

    for epoch in 0..config.epochs {
        let order = permutation(n, derive_seed(config.seed, epoch as u64));
        for (bi, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            let (_, g) = evaluate(dataset, &q, &policy, config, idx, true)?;
            let g = g.expect("gradient requested");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { epoch, batch: bi });
            }
            for ((w, a), gk) in params.iter_mut().zip(accum.iter_mut()).zip(&g) {
                *a += gk * gk;
                *w += config.step_size * gk / (*a + ADAGRAD_EPS).sqrt();
            }
            policy = policy.with_params(params.clone())?;
        }
        let (obj, g) = evaluate(dataset, &q, &policy, config, &full, true)?;
        objective_trace.push(obj);
        grad_norm_trace.push(norm(&g.expect("gradient requested")));
    }
    Ok(TrainedPolicy {
        params: policy,
        objective_trace,
        grad_norm_trace,
        config: config.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best_index: usize,
    pub best: TrainConfig,
    /// Mean held-out capped estimate per grid entry.
    pub scores: Vec<f64>,
}

/// k-fold selection over `grid`. Each config is trained on k-1 folds from
/// `init` and scored on the held-out fold by the unregularized capped
/// estimator with the config's own cap and propensity source.
pub fn cross_validate(
    dataset: &BanditDataset,
    init: &Policy,
    grid: &[TrainConfig],
    folds: usize,
    seed: u64,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    if folds < 2 || dataset.len() < folds {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= folds <= n, got folds = {folds}, n = {}",
            dataset.len()
        )));
    }
    for c in grid {
        c.validate()?;
    }
    let parts = kfold(dataset.len(), folds, seed);
    let splits: Vec<(BanditDataset, BanditDataset)> = parts
        .iter()
        .map(|held| {
            Ok((
                dataset.subset(&complement(dataset.len(), held))?,
                dataset.subset(held)?,
            ))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let fold_scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (train, test) = &splits[f];
            let trained = adagrad_train(train, init, &grid[c])?;
            let q = propensity_denominators(test, &grid[c].propensity_source)?;
            let b = batch(test, &q, &trained.params, &all(test.len()), false)?;
            let u: Vec<f64> = b.w.iter().zip(&b.r).map(|(w, r)| w.min(grid[c].cap) * r).collect();
            Ok(mean(&u))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = (0..grid.len())
        .map(|c| mean(&fold_scores[c * folds..(c + 1) * folds]))
        .collect();
    let mut best = 0;
    for c in 1..grid.len() {
        let (a, b) = (&grid[c], &grid[best]);
        let better = scores[c] > scores[best]
            || (scores[c] == scores[best]
                && (a.lambda < b.lambda || (a.lambda == b.lambda && a.cap < b.cap)));
        if better {
            best = c;
        }
    }
    Ok(CvOutcome {
        best_index: best,
        best: grid[best].clone(),
        scores,
    })
}
