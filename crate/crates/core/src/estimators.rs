//! Off-policy value estimators over logged bandit feedback.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::BanditDataset;
use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum, sample_variance, PROPENSITY_FLOOR};
use crate::policy::ActionPolicy;
use crate::surrogate::{fit_surrogate, FitResult, SurrogateOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ips,
    CappedIps,
    Snips,
    Mlips,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ips => "ips",
            Self::CappedIps => "capped_ips",
            Self::Snips => "snips",
            Self::Mlips => "mlips",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator_kind: EstimatorKind,
    pub value: f64,
    pub n: usize,
    /// Bessel-corrected sample variance of the per-record terms `w_i r_i`.
    pub empirical_variance: f64,
    pub per_record_weights: Vec<f64>,
    /// Records whose surrogate propensity fell below the floor.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged_records: Vec<usize>,
}

impl EstimatorReport {
    fn from_weights(
        kind: EstimatorKind,
        dataset: &BanditDataset,
        weights: Vec<f64>,
        flagged_records: Vec<usize>,
    ) -> Self {
        let terms: Vec<f64> = weights
            .iter()
            .zip(dataset.records())
            .map(|(w, r)| w * r.reward)
            .collect();
        Self {
            estimator_kind: kind,
            value: mean(&terms),
            n: dataset.len(),
            empirical_variance: sample_variance(&terms),
            per_record_weights: weights,
            flagged_records,
        }
    }
}

pub const CSV_HEADER: &str = "estimator,value,n,empirical_variance";

/// Writes one CSV row per report under [`CSV_HEADER`].
pub fn write_csv<W: Write>(mut w: W, reports: &[EstimatorReport]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.estimator_kind, r.value, r.n, r.empirical_variance)?;
    }
    Ok(())
}

fn nonempty(dataset: &BanditDataset) -> Result<()> {
    if dataset.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

/// Importance weights `pi(a_i|x_i) / mu_i` against the logged propensities.
pub fn importance_weights<P: ActionPolicy + Sync + ?Sized>(
    dataset: &BanditDataset,
    target: &P,
) -> Result<Vec<f64>> {
    dataset
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            if !(r.propensity > 0.0) {
                return Err(Error::InvalidPropensity {
                    index: i,
                    value: r.propensity,
                });
            }
            Ok(target.propensity(&r.x, &r.action)? / r.propensity)
        })
        .collect()
}

pub fn ips_value<P: ActionPolicy + Sync + ?Sized>(
    dataset: &BanditDataset,
    target: &P,
) -> Result<EstimatorReport> {
    nonempty(dataset)?;
    let w = importance_weights(dataset, target)?;
    Ok(EstimatorReport::from_weights(EstimatorKind::Ips, dataset, w, vec![]))
}

fn check_cap(cap: f64) -> Result<()> {
    if cap > 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("weight cap must exceed 1, got {cap}")))
    }
}

/// IPS with weights `min{cap, rho_i}`; `cap` may be infinite.
pub fn capped_ips_value<P: ActionPolicy + Sync + ?Sized>(
    dataset: &BanditDataset,
    target: &P,
    cap: f64,
) -> Result<EstimatorReport> {
    check_cap(cap)?;
    nonempty(dataset)?;
    let w = importance_weights(dataset, target)?
        .into_iter()
        .map(|rho| rho.min(cap))
        .collect();
    Ok(EstimatorReport::from_weights(EstimatorKind::CappedIps, dataset, w, vec![]))
}

fn snips_parts(rewards: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    let sw = pairwise_sum(weights);
    if !(sw > 0.0) {
        return Err(Error::UndefinedEstimator(
            "self-normalized estimate needs a positive weight sum".into(),
        ));
    }
    let swr: Vec<f64> = weights.iter().zip(rewards).map(|(w, r)| w * r).collect();
    Ok((pairwise_sum(&swr) / sw, sw))
}

pub fn snips_value<P: ActionPolicy + Sync + ?Sized>(
    dataset: &BanditDataset,
    target: &P,
) -> Result<EstimatorReport> {
    nonempty(dataset)?;
    let w = importance_weights(dataset, target)?;
    let (value, _) = snips_parts(&dataset.rewards(), &w)?;
    let mut report = EstimatorReport::from_weights(EstimatorKind::Snips, dataset, w, vec![]);
    report.value = value;
    Ok(report)
}

/// Self-normalized value and its empirical standard deviation from raw
/// weights and rewards: `sqrt((1/n) sum (r_i - V)^2 w_i^2) / ((1/n) sum w_i)`.
pub fn snips_moments(rewards: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    let n = rewards.len() as f64;
    let (v, sw) = snips_parts(rewards, weights)?;
    let sq: Vec<f64> = weights
        .iter()
        .zip(rewards)
        .map(|(w, r)| ((r - v) * w).powi(2))
        .collect();
    Ok((v, (pairwise_sum(&sq) / n).sqrt() / (sw / n)))
}

pub fn snips_std<P: ActionPolicy + Sync + ?Sized>(dataset: &BanditDataset, target: &P) -> Result<f64> {
    nonempty(dataset)?;
    let w = importance_weights(dataset, target)?;
    Ok(snips_moments(&dataset.rewards(), &w)?.1)
}

/// Terms `u_i = min{cap, rho_i} r_i`, their mean, and their Bessel variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PoemVariance {
    pub u: Vec<f64>,
    pub u_bar: f64,
    pub var_hat: f64,
}

pub fn poem_variance<P: ActionPolicy + Sync + ?Sized>(
    dataset: &BanditDataset,
    target: &P,
    cap: f64,
) -> Result<PoemVariance> {
    check_cap(cap)?;
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument(
            "variance needs at least 2 records".into(),
        ));
    }
    let u: Vec<f64> = importance_weights(dataset, target)?
        .into_iter()
        .zip(dataset.records())
        .map(|(rho, r)| rho.min(cap) * r.reward)
        .collect();
    Ok(PoemVariance {
        u_bar: mean(&u),
        var_hat: sample_variance(&u),
        u,
    })
}

/// IPS with the logged propensities replaced by a surrogate's.
/// Surrogate propensities below the floor are raised to it and flagged.
pub fn mlips_value<P, S>(dataset: &BanditDataset, target: &P, surrogate: &S) -> Result<EstimatorReport>
where
    P: ActionPolicy + Sync + ?Sized,
    S: ActionPolicy + Sync + ?Sized,
{
    nonempty(dataset)?;
    let pairs: Vec<(f64, bool)> = dataset
        .records()
        .par_iter()
        .map(|r| {
            let q = surrogate.propensity(&r.x, &r.action)?;
            let flagged = !(q >= PROPENSITY_FLOOR);
            let q = if flagged { PROPENSITY_FLOOR } else { q };
            Ok((target.propensity(&r.x, &r.action)? / q, flagged))
        })
        .collect::<Result<_>>()?;
    let flagged = pairs
        .iter()
        .enumerate()
        .filter_map(|(i, &(_, f))| f.then_some(i))
        .collect();
    let w = pairs.into_iter().map(|(w, _)| w).collect();
    Ok(EstimatorReport::from_weights(EstimatorKind::Mlips, dataset, w, flagged))
}

/// MLIPS with the surrogate fitted on the evaluation records themselves.
pub fn mlips_refit<P: ActionPolicy + Sync + ?Sized>(
    dataset: &BanditDataset,
    target: &P,
    opts: &SurrogateOptions,
) -> Result<(EstimatorReport, FitResult)> {
    let fit = fit_surrogate(dataset, opts)?;
    let report = mlips_value(dataset, target, &fit.beta_hat)?;
    Ok((report, fit))
}
