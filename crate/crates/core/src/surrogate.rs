//! Maximum-likelihood surrogate logging policies.
//!
//! The multinomial model has a closed-form score and Fisher information, so
//! fits use damped Newton steps on the penalized mean log-likelihood
//! `(1/n) sum_i log mu(a_i|x_i; beta) - l2/2 |beta|^2`. Above
//! [`NEWTON_MAX_DIM`] parameters the fit falls back to gradient ascent with a
//! backtracking line search. Multilabel product policies are fitted head by
//! head as binary (m = 2) models.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{Action, ActionSpace, BanditDataset, ContextFeatures};
use crate::error::{Error, Result};
use crate::numeric::{dot, mean, norm};
use crate::policy::{ActionPolicy, MultiLabelProductPolicy, Policy, SoftmaxLinearPolicy};
use crate::rng::{complement, kfold};

pub const NEWTON_MAX_DIM: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Fits whose parameter norm exceeds this are stopped and reported unconverged.
pub const MAX_PARAM_NORM: f64 = 1e3;
pub const DEFAULT_L2_GRID: [f64; 7] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: Policy,
    /// Penalized mean log-likelihood at `beta_hat`.
    pub final_objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub l2_penalty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub l2_penalty: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2_penalty: 0.0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// How the surrogate's L2 penalty is chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOptions {
    /// Fixed penalty; `None` selects one by k-fold cross-validation over `grid`.
    pub l2_penalty: Option<f64>,
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SurrogateOptions {
    fn default() -> Self {
        Self {
            l2_penalty: None,
            grid: DEFAULT_L2_GRID.to_vec(),
            folds: 5,
            seed: 0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SurrogateOptions {
    pub fn fixed(l2_penalty: f64) -> Self {
        Self {
            l2_penalty: Some(l2_penalty),
            ..Self::default()
        }
    }
}

/// `(1/n) sum_i log mu(a_i|x_i)` with propensities floored at 1e-300.
pub fn log_likelihood<P: ActionPolicy + ?Sized>(policy: &P, dataset: &BanditDataset) -> Result<f64> {
    let terms: Vec<f64> = dataset
        .records()
        .iter()
        .map(|r| policy.log_propensity(&r.x, &r.action))
        .collect::<Result<_>>()?;
    Ok(mean(&terms))
}

/// Score `S(a, x; beta) = d log mu(a|x; beta) / d beta`; block k is `(1{a=k} - mu(k|x)) x`.
pub fn score(beta: &SoftmaxLinearPolicy, a: usize, x: &[f64]) -> Result<Vec<f64>> {
    beta.log_propensity_gradient(x, &Action::Class(a))
}

/// Closed-form Jacobian `dS/dbeta` at `x`; it does not depend on the action.
/// Block (j, k) is `-mu_j (1{j=k} - mu_k) x x^T`.
pub fn score_jacobian(beta: &SoftmaxLinearPolicy, x: &[f64]) -> Result<DMatrix<f64>> {
    let probs = beta.probabilities(x)?;
    let (k1, p) = (beta.m() - 1, beta.p());
    let d = k1 * p;
    Ok(DMatrix::from_fn(d, d, |r, c| {
        let (j, u) = (r / p, r % p);
        let (k, v) = (c / p, c % p);
        let ind = if j == k { 1.0 } else { 0.0 };
        -probs[j] * (ind - probs[k]) * x[u] * x[v]
    }))
}

/// Mean over `contexts` of the per-context Fisher information.
pub fn fisher_information(
    beta: &SoftmaxLinearPolicy,
    contexts: &[ContextFeatures],
) -> Result<DMatrix<f64>> {
    if contexts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let w = 1.0 / contexts.len() as f64;
    let weighted: Vec<(&[f64], f64)> = contexts.iter().map(|x| (x.as_slice(), w)).collect();
    weighted_fisher_information(beta, &weighted)
}

/// `sum_c weight_c * I(x_c)`, the population Fisher matrix for a finite context law.
pub fn weighted_fisher_information(
    beta: &SoftmaxLinearPolicy,
    contexts: &[(&[f64], f64)],
) -> Result<DMatrix<f64>> {
    let d = beta.num_params();
    let mut acc = vec![0.0; d * d];
    for &(x, w) in contexts {
        let f = beta.fisher_at(x)?;
        for (a, b) in acc.iter_mut().zip(&f) {
            *a += w * b;
        }
    }
    Ok(DMatrix::from_row_slice(d, d, &acc))
}

struct Design<'a> {
    xs: Vec<&'a [f64]>,
    classes: Vec<usize>,
    m: usize,
    p: usize,
}

impl Design<'_> {
    fn n(&self) -> f64 {
        self.xs.len() as f64
    }

    fn objective(&self, w: &[f64], l2: f64) -> Result<f64> {
        let pol = SoftmaxLinearPolicy::new(self.m, self.p, w.to_vec())?;
        let mut s = 0.0;
        for (x, &k) in self.xs.iter().zip(&self.classes) {
            s += pol.log_propensity(x, &Action::Class(k))?;
        }
        Ok(s / self.n() - 0.5 * l2 * dot(w, w))
    }

    fn gradient(&self, w: &[f64], l2: f64) -> Result<Vec<f64>> {
        let pol = SoftmaxLinearPolicy::new(self.m, self.p, w.to_vec())?;
        let mut g = vec![0.0; w.len()];
        for (x, &k) in self.xs.iter().zip(&self.classes) {
            let s = pol.log_propensity_gradient(x, &Action::Class(k))?;
            for (gi, si) in g.iter_mut().zip(&s) {
                *gi += si;
            }
        }
        let n = self.n();
        Ok(g.iter().zip(w).map(|(gi, wi)| gi / n - l2 * wi).collect())
    }

    /// Negative Hessian of the objective: mean Fisher plus `l2 I`.
    fn curvature(&self, w: &[f64], l2: f64) -> Result<DMatrix<f64>> {
        let pol = SoftmaxLinearPolicy::new(self.m, self.p, w.to_vec())?;
        let d = w.len();
        let mut acc = vec![0.0; d * d];
        for x in &self.xs {
            let f = pol.fisher_at(x)?;
            for (a, b) in acc.iter_mut().zip(&f) {
                *a += b;
            }
        }
        let n = self.n();
        let mut h = DMatrix::from_row_slice(d, d, &acc) / n;
        for i in 0..d {
            h[(i, i)] += l2;
        }
        Ok(h)
    }
}

struct RawFit {
    weights: Vec<f64>,
    objective: f64,
    gradient_norm: f64,
    iterations: usize,
    converged: bool,
    /// Objective after every accepted step, starting with the initial point.
    trace: Vec<f64>,
}

fn solve_spd(h: &DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_column_slice(g);
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut hj = h.clone();
        for i in 0..h.nrows() {
            hj[(i, i)] += jitter;
        }
        if let Some(ch) = hj.cholesky() {
            let sol = ch.solve(&rhs);
            if sol.iter().all(|v| v.is_finite()) {
                return Some(sol.iter().cloned().collect());
            }
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    None
}

fn ascend(design: &Design<'_>, init: Vec<f64>, opts: &FitOptions) -> Result<RawFit> {
    let use_newton = init.len() <= NEWTON_MAX_DIM;
    ascend_with(design, init, opts, use_newton)
}

fn ascend_with(
    design: &Design<'_>,
    init: Vec<f64>,
    opts: &FitOptions,
    use_newton: bool,
) -> Result<RawFit> {
    let l2 = opts.l2_penalty;
    let mut w = init;
    let mut f = design.objective(&w, l2)?;
    let mut g = design.gradient(&w, l2)?;
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;
    // Step length memory for the gradient fallback.
    let mut gd_step = 1.0;

    while iterations < opts.max_iter {
        let gnorm = norm(&g);
        if gnorm <= opts.tol {
            converged = true;
            break;
        }
        let (dir, mut t) = if use_newton {
            match solve_spd(&design.curvature(&w, l2)?, &g) {
                Some(d) => (d, 1.0),
                None => (g.clone(), gd_step),
            }
        } else {
            (g.clone(), gd_step)
        };
        let slope = dot(&g, &dir);
        // Close to the optimum, objective changes fall below rounding and the
        // Armijo test becomes noise. A candidate whose objective ties within
        // rounding is then judged by whether it shrinks the gradient.
        let tie_band = 64.0 * f64::EPSILON * f.abs().max(1.0);
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = w.iter().zip(&dir).map(|(wi, di)| wi + t * di).collect();
            let fc = design.objective(&cand, l2)?;
            if fc.is_finite() {
                if (fc - f).abs() <= tie_band {
                    let gc = design.gradient(&cand, l2)?;
                    if norm(&gc) < gnorm {
                        accepted = Some((cand, fc));
                        break;
                    }
                } else if fc >= f + 1e-4 * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            break;
        };
        if !use_newton {
            gd_step = (t * 2.0).min(1e6);
        }
        w = cand;
        f = fc;
        iterations += 1;
        trace.push(f);
        let wn = norm(&w);
        if wn > MAX_PARAM_NORM {
            for wi in &mut w {
                *wi *= MAX_PARAM_NORM / wn;
            }
            f = design.objective(&w, l2)?;
            g = design.gradient(&w, l2)?;
            diverged = true;
            break;
        }
        g = design.gradient(&w, l2)?;
    }
    let gradient_norm = norm(&g);
    if !diverged && gradient_norm <= opts.tol {
        converged = true;
    }
    Ok(RawFit {
        weights: w,
        objective: f,
        gradient_norm,
        iterations,
        converged: converged && !diverged,
        trace,
    })
}

fn softmax_design(dataset: &BanditDataset, m: usize) -> Result<Design<'_>> {
    let mut classes = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        match r.action {
            Action::Class(k) if k < m => classes.push(k),
            ref a => {
                return Err(Error::InvalidAction {
                    action: a.to_string(),
                    space: dataset.action_space().to_string(),
                })
            }
        }
    }
    Ok(Design {
        xs: dataset.records().iter().map(|r| r.x.as_slice()).collect(),
        classes,
        m,
        p: dataset.p(),
    })
}

/// Design of head `j`: class 0 is label 1 so that `P(class 0) = sigmoid(w_j . x)`.
fn head_design(dataset: &BanditDataset, j: usize) -> Result<Design<'_>> {
    let mut classes = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        match &r.action {
            Action::Labels(y) => classes.push(if y[j] == 1 { 0 } else { 1 }),
            a => {
                return Err(Error::InvalidAction {
                    action: a.to_string(),
                    space: dataset.action_space().to_string(),
                })
            }
        }
    }
    Ok(Design {
        xs: dataset.records().iter().map(|r| r.x.as_slice()).collect(),
        classes,
        m: 2,
        p: dataset.p(),
    })
}

fn check_opts(opts: &FitOptions) -> Result<()> {
    if !(opts.l2_penalty >= 0.0) || !opts.l2_penalty.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "l2 penalty must be finite and >= 0, got {}",
            opts.l2_penalty
        )));
    }
    Ok(())
}

/// Maximises the penalized mean log-likelihood of the logging family matching
/// the dataset's action space, starting from zero parameters.
pub fn fit_mle(dataset: &BanditDataset, opts: &FitOptions) -> Result<FitResult> {
    check_opts(opts)?;
    match dataset.action_space() {
        ActionSpace::Multiclass { m } => {
            let design = softmax_design(dataset, m)?;
            let raw = ascend(&design, vec![0.0; (m - 1) * dataset.p()], opts)?;
            Ok(FitResult {
                beta_hat: SoftmaxLinearPolicy::new(m, dataset.p(), raw.weights)?.into(),
                final_objective: raw.objective,
                gradient_norm: raw.gradient_norm,
                iterations: raw.iterations,
                converged: raw.converged,
                l2_penalty: opts.l2_penalty,
            })
        }
        ActionSpace::Multilabel { labels } => {
            let p = dataset.p();
            let heads: Vec<RawFit> = (0..labels)
                .map(|j| {
                    let design = head_design(dataset, j)?;
                    ascend(&design, vec![0.0; p], opts)
                })
                .collect::<Result<_>>()?;
            let weights: Vec<f64> = heads.iter().flat_map(|h| h.weights.clone()).collect();
            let grad_sq: f64 = heads.iter().map(|h| h.gradient_norm.powi(2)).sum();
            Ok(FitResult {
                beta_hat: MultiLabelProductPolicy::new(labels, p, weights)?.into(),
                final_objective: heads.iter().map(|h| h.objective).sum(),
                gradient_norm: grad_sq.sqrt(),
                iterations: heads.iter().map(|h| h.iterations).max().unwrap_or(0),
                converged: heads.iter().all(|h| h.converged),
                l2_penalty: opts.l2_penalty,
            })
        }
    }
}

/// Objective values after each accepted optimizer step (multiclass only).
pub fn fit_trace(dataset: &BanditDataset, opts: &FitOptions) -> Result<Vec<f64>> {
    check_opts(opts)?;
    let ActionSpace::Multiclass { m } = dataset.action_space() else {
        return Err(Error::InvalidArgument("trace is available for multiclass fits".into()));
    };
    let design = softmax_design(dataset, m)?;
    Ok(ascend(&design, vec![0.0; (m - 1) * dataset.p()], opts)?.trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Selection {
    pub best: f64,
    pub grid: Vec<f64>,
    /// Mean held-out log-likelihood per grid value.
    pub scores: Vec<f64>,
}

/// Picks the grid penalty with the best mean held-out log-likelihood; ties go
/// to the earlier (smaller) grid value.
pub fn select_l2_by_cv(
    dataset: &BanditDataset,
    grid: &[f64],
    folds: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<L2Selection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty penalty grid".into()));
    }
    if folds < 2 || dataset.len() < folds {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= folds <= n, got folds = {folds}, n = {}",
            dataset.len()
        )));
    }
    let parts = kfold(dataset.len(), folds, seed);
    let splits: Vec<(BanditDataset, BanditDataset)> = parts
        .iter()
        .map(|held| {
            let train = dataset.subset(&complement(dataset.len(), held))?;
            let test = dataset.subset(held)?;
            Ok((train, test))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..folds).map(move |f| (g, f)))
        .collect();
    let fold_scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let opts = FitOptions {
                l2_penalty: grid[g],
                tol,
                max_iter,
            };
            let fit = fit_mle(&splits[f].0, &opts)?;
            log_likelihood(&fit.beta_hat, &splits[f].1)
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = (0..grid.len())
        .map(|g| mean(&fold_scores[g * folds..(g + 1) * folds]))
        .collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if scores[g] > scores[best] {
            best = g;
        }
    }
    Ok(L2Selection {
        best: grid[best],
        grid: grid.to_vec(),
        scores,
    })
}

/// Fits the surrogate, choosing the penalty by cross-validation unless fixed.
pub fn fit_surrogate(dataset: &BanditDataset, opts: &SurrogateOptions) -> Result<FitResult> {
    let l2 = match opts.l2_penalty {
        Some(l2) => l2,
        None => {
            select_l2_by_cv(dataset, &opts.grid, opts.folds, opts.seed, opts.tol, opts.max_iter)?
                .best
        }
    };
    fit_mle(
        dataset,
        &FitOptions {
            l2_penalty: l2,
            tol: opts.tol,
            max_iter: opts.max_iter,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{sample_logs, LoggedInteraction, SyntheticEnvironment};
    use crate::policy::enumerate_actions;
    use crate::rng::derived_rng;
    use astro_float::{BigFloat, Consts, RoundingMode};
    use rand::Rng as _;

    fn ctx(v: &[f64]) -> ContextFeatures {
        ContextFeatures::new(v.to_vec()).unwrap()
    }

    fn dataset(rows: &[(Vec<f64>, usize)], m: usize) -> BanditDataset {
        let p = rows[0].0.len();
        let records = rows
            .iter()
            .map(|(x, a)| LoggedInteraction {
                x: ctx(x),
                action: Action::Class(*a),
                reward: 0.0,
                propensity: 1.0 / m as f64,
            })
            .collect();
        BanditDataset::new(records, ActionSpace::Multiclass { m }, p).unwrap()
    }

    #[test]
    fn uniform_log_likelihood() {
        let d = dataset(&[(vec![1.0], 0), (vec![2.0], 1), (vec![-1.0], 1)], 2);
        let ll = log_likelihood(&SoftmaxLinearPolicy::zeros(2, 1), &d).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_record_log_likelihood() {
        // Logits (log 9 + log 0.5, log 0.5, 0)... choose mu(0|x) = 0.9 with classes 1 and 2 equal.
        let w0 = (0.9f64 / 0.05).ln();
        let pol = SoftmaxLinearPolicy::new(3, 1, vec![w0, 0.0]).unwrap();
        let d = dataset(&[(vec![1.0], 0)], 3);
        assert!((log_likelihood(&pol, &d).unwrap() - 0.9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_likelihood_matches_high_precision_oracle() {
        const P: usize = 256;
        let rm = RoundingMode::ToEven;
        let mut cc = Consts::new().unwrap();
        let mut rng = derived_rng(11, 0);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pol = SoftmaxLinearPolicy::new(3, 2, w.clone()).unwrap();
        let rows: Vec<(Vec<f64>, usize)> = (0..30)
            .map(|_| (vec![1.0, rng.random_range(-2.0..2.0)], rng.random_range(0..3)))
            .collect();
        let d = dataset(&rows, 3);
        let mut total = BigFloat::from_f64(0.0, P);
        for (x, a) in &rows {
            let e: Vec<BigFloat> = (0..2)
                .map(|k| {
                    let z = w[2 * k] * x[0];
                    let z = BigFloat::from_f64(z, P)
                        .add(&BigFloat::from_f64(w[2 * k + 1], P).mul(&BigFloat::from_f64(x[1], P), P, rm), P, rm);
                    z.exp(P, rm, &mut cc)
                })
                .collect();
            let one = BigFloat::from_f64(1.0, P);
            let denom = e[0].add(&e[1], P, rm).add(&one, P, rm);
            let num = if *a < 2 { e[*a].clone() } else { one };
            total = total.add(&num.div(&denom, P, rm).ln(P, rm, &mut cc), P, rm);
        }
        let want: f64 = format!("{}", total.div(&BigFloat::from_f64(30.0, P), P, rm))
            .parse()
            .unwrap();
        let got = log_likelihood(&pol, &d).unwrap();
        assert!(((got - want) / want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn score_hand_value_and_zero_mean() {
        let beta = SoftmaxLinearPolicy::zeros(2, 1);
        assert_eq!(score(&beta, 0, &[1.0]).unwrap(), vec![0.5]);
        let beta = SoftmaxLinearPolicy::new(4, 2, vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1]).unwrap();
        let x = [1.0, 0.8];
        let probs = beta.probabilities(&x).unwrap();
        let mut acc = vec![0.0; 6];
        for a in 0..4 {
            crate::numeric::axpy(&mut acc, probs[a], &score(&beta, a, &x).unwrap());
        }
        assert!(norm(&acc) < 1e-15);
    }

    #[test]
    fn score_jacobian_matches_finite_differences() {
        let mut rng = derived_rng(12, 0);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = SoftmaxLinearPolicy::new(3, 3, w.clone()).unwrap();
        let x = [1.0, -0.4, 0.9];
        let jac = score_jacobian(&beta, &x).unwrap();
        let h = 1e-6;
        for a in 0..3 {
            for c in 0..6 {
                let mut up = w.clone();
                up[c] += h;
                let mut dn = w.clone();
                dn[c] -= h;
                let su = score(&beta.with_weights(up).unwrap(), a, &x).unwrap();
                let sd = score(&beta.with_weights(dn).unwrap(), a, &x).unwrap();
                for r in 0..6 {
                    let fd = (su[r] - sd[r]) / (2.0 * h);
                    assert!((fd - jac[(r, c)]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn fisher_binary_symmetric_case() {
        let i = fisher_information(&SoftmaxLinearPolicy::zeros(2, 1), &[ctx(&[1.0])]).unwrap();
        assert_eq!(i[(0, 0)], 0.25);
    }

    #[test]
    fn fisher_equals_outer_product_of_scores() {
        let mut rng = derived_rng(13, 0);
        for _ in 0..10 {
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let beta = SoftmaxLinearPolicy::new(4, 2, w).unwrap();
            let contexts: Vec<_> = (0..5)
                .map(|_| ctx(&[1.0, rng.random_range(-2.0..2.0)]))
                .collect();
            let fisher = fisher_information(&beta, &contexts).unwrap();
            let mut oracle = DMatrix::<f64>::zeros(6, 6);
            for x in &contexts {
                for a in enumerate_actions(beta.action_space()) {
                    let Action::Class(k) = a else { unreachable!() };
                    let s = DVector::from_vec(score(&beta, k, x).unwrap());
                    let q = beta.propensity(x, &a).unwrap();
                    oracle += (&s * s.transpose()) * (q / contexts.len() as f64);
                }
            }
            assert!((fisher - oracle).amax() <= 1e-10);
        }
    }

    #[test]
    fn fisher_is_positive_semidefinite() {
        let mut rng = derived_rng(14, 0);
        for _ in 0..50 {
            let m = rng.random_range(2..5);
            let p = rng.random_range(1..4);
            let w: Vec<f64> = (0..(m - 1) * p).map(|_| rng.random_range(-3.0..3.0)).collect();
            let beta = SoftmaxLinearPolicy::new(m, p, w).unwrap();
            let n = rng.random_range(1..6);
            let contexts: Vec<_> = (0..n)
                .map(|_| ctx(&(0..p).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()))
                .collect();
            let fisher = fisher_information(&beta, &contexts).unwrap();
            assert!((&fisher - fisher.transpose()).amax() < 1e-14);
            let eig = fisher.symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn balanced_data_fits_zero() {
        let d = dataset(&[(vec![1.0], 0), (vec![1.0], 1), (vec![1.0], 1), (vec![1.0], 0)], 2);
        let fit = fit_mle(&d, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.beta_hat.params()[0].abs() <= 1e-8);
    }

    #[test]
    fn intercept_only_fit_recovers_log_odds() {
        let d = dataset(&[(vec![1.0], 0), (vec![1.0], 0), (vec![1.0], 0), (vec![1.0], 1)], 2);
        let fit = fit_mle(&d, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.beta_hat.params()[0] - 3f64.ln()).abs() <= 1e-6);
        assert!(fit.gradient_norm <= DEFAULT_TOL);
    }

    fn env_with(beta: Vec<f64>) -> SyntheticEnvironment {
        let contexts = vec![ctx(&[1.0, -1.0]), ctx(&[1.0, 0.0]), ctx(&[1.0, 1.0]), ctx(&[1.0, 2.0])];
        let logging = SoftmaxLinearPolicy::new(3, 2, beta).unwrap();
        SyntheticEnvironment::new(contexts, vec![0.25; 4], vec![vec![0.0; 3]; 4], logging).unwrap()
    }

    #[test]
    fn fit_is_consistent() {
        let truth = vec![0.5, -0.8, -0.3, 0.6];
        let env = env_with(truth.clone());
        let data = sample_logs(&env, 20_000, 3).unwrap();
        let fit = fit_mle(&data, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(crate::numeric::distance(fit.beta_hat.params(), &truth) <= 0.1);
    }

    #[test]
    fn converged_fit_satisfies_first_order_condition() {
        let env = env_with(vec![0.2, 0.4, -0.6, 0.1]);
        let data = sample_logs(&env, 3000, 8).unwrap();
        let fit = fit_mle(&data, &FitOptions::default()).unwrap();
        let beta = fit.beta_hat.as_softmax().unwrap();
        let mut acc = vec![0.0; 4];
        for r in data.records() {
            let Action::Class(a) = r.action else { unreachable!() };
            crate::numeric::axpy(&mut acc, 1.0 / data.len() as f64, &score(beta, a, &r.x).unwrap());
        }
        assert!(norm(&acc) <= DEFAULT_TOL);
    }

    #[test]
    fn optimizer_steps_never_decrease_objective() {
        let env = env_with(vec![1.5, -2.0, -1.0, 1.0]);
        for (seed, l2) in [(1, 0.0), (2, 1e-3), (3, 0.5)] {
            let data = sample_logs(&env, 400, seed).unwrap();
            let trace = fit_trace(&data, &FitOptions { l2_penalty: l2, ..Default::default() }).unwrap();
            assert!(trace.len() > 1);
            for w in trace.windows(2) {
                // Steps may tie within rounding once the optimum is reached.
                assert!(w[1] >= w[0] - 1e-13, "{} < {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn separable_data_reports_divergence() {
        // Every record picks class 0 and the only feature is tiny, so the
        // gradient is still large when the parameter norm crosses the cap.
        let d = dataset(&[(vec![1e-3], 0), (vec![1e-3], 0), (vec![1e-3], 0)], 2);
        let fit = fit_mle(&d, &FitOptions { max_iter: 10_000, ..Default::default() }).unwrap();
        assert!(!fit.converged);
        assert!((norm(fit.beta_hat.params()) - MAX_PARAM_NORM).abs() < 1e-9);
    }

    #[test]
    fn max_iter_exhaustion_is_unconverged() {
        let env = env_with(vec![0.5, -0.8, -0.3, 0.6]);
        let data = sample_logs(&env, 500, 1).unwrap();
        let fit = fit_mle(&data, &FitOptions { max_iter: 1, ..Default::default() }).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(!fit.converged);
    }

    #[test]
    fn gradient_fallback_reaches_newton_solution() {
        let env = env_with(vec![0.5, -0.8, -0.3, 0.6]);
        let data = sample_logs(&env, 500, 4).unwrap();
        let design = softmax_design(&data, 3).unwrap();
        let opts = FitOptions { l2_penalty: 1e-2, tol: 1e-9, max_iter: 50_000 };
        let newton = ascend_with(&design, vec![0.0; 4], &opts, true).unwrap();
        let gd = ascend_with(&design, vec![0.0; 4], &opts, false).unwrap();
        assert!(newton.converged && gd.converged);
        assert!(newton.iterations < gd.iterations);
        assert!(crate::numeric::distance(&gd.weights, &newton.weights) < 1e-6);
    }

    #[test]
    fn multilabel_fit_matches_per_head_binary_fit() {
        let labels = 2;
        let truth = MultiLabelProductPolicy::new(labels, 2, vec![0.8, -1.0, -0.5, 0.7]).unwrap();
        let mut rng = derived_rng(15, 0);
        let records: Vec<_> = (0..2000)
            .map(|_| {
                let x = vec![1.0, rng.random_range(-2.0..2.0)];
                let a = truth.sample_action(&x, &mut rng).unwrap();
                let q = truth.propensity(&x, &a).unwrap();
                LoggedInteraction { x: ctx(&x), action: a, reward: 0.0, propensity: q }
            })
            .collect();
        let data = BanditDataset::new(records, ActionSpace::Multilabel { labels }, 2).unwrap();
        let fit = fit_mle(&data, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(crate::numeric::distance(fit.beta_hat.params(), truth.params()) < 0.25);
        let ll = log_likelihood(&fit.beta_hat, &data).unwrap();
        assert!((ll - fit.final_objective).abs() < 1e-12);
    }

    #[test]
    fn cross_validated_penalty_is_from_grid() {
        let env = env_with(vec![0.5, -0.8, -0.3, 0.6]);
        let data = sample_logs(&env, 600, 2).unwrap();
        let sel = select_l2_by_cv(&data, &DEFAULT_L2_GRID, 5, 7, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(DEFAULT_L2_GRID.contains(&sel.best));
        assert_eq!(sel.scores.len(), DEFAULT_L2_GRID.len());
        let again = select_l2_by_cv(&data, &DEFAULT_L2_GRID, 5, 7, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sel, again);
        assert!(select_l2_by_cv(&data, &[], 5, 7, 1e-8, 10).is_err());
        let fit = fit_surrogate(&data, &SurrogateOptions::default()).unwrap();
        let opts = SurrogateOptions { seed: 7, ..SurrogateOptions::default() };
        assert_eq!(fit_surrogate(&data, &opts).unwrap().l2_penalty, sel.best);
        assert_eq!(fit.l2_penalty, select_l2_by_cv(&data, &DEFAULT_L2_GRID, 5, 0, 1e-8, 200).unwrap().best);
    }
}
