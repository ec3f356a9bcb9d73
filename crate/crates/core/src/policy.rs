//! Parametric policies: the multinomial softmax-linear family with the last
//! class pinned to a zero logit, and a product of independent binary logistic
//! heads for multilabel actions.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bandit::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::numeric::{dot, PROPENSITY_FLOOR};
use crate::rng::{rng_from_seed, Rng};

/// Common interface of every policy used as logger, surrogate or target.
///
/// Parameters are exposed as one flattened vector so that score functions,
/// Fisher matrices and training work on plain `Vec<f64>`s.
pub trait ActionPolicy {
    fn action_space(&self) -> ActionSpace;
    /// Feature dimension.
    fn p(&self) -> usize;
    fn params(&self) -> &[f64];
    fn propensity(&self, x: &[f64], a: &Action) -> Result<f64>;
    fn log_propensity(&self, x: &[f64], a: &Action) -> Result<f64>;
    /// `d log pi(a|x) / d params`, laid out like [`ActionPolicy::params`].
    fn log_propensity_gradient(&self, x: &[f64], a: &Action) -> Result<Vec<f64>>;
    fn sample_action(&self, x: &[f64], rng: &mut Rng) -> Result<Action>;

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Index drawn from `probs` given a uniform variate `u` in [0, 1).
pub(crate) fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &q) in probs.iter().enumerate() {
        if q > 0.0 {
            last_positive = k;
        }
        acc += q;
        if u < acc {
            return k;
        }
    }
    last_positive
}

fn check_dim(x: &[f64], p: usize) -> Result<()> {
    if x.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: x.len(),
        });
    }
    Ok(())
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(z))`, stable for large `|z|`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[derive(Deserialize)]
struct RawSoftmax {
    m: usize,
    p: usize,
    weights: Vec<f64>,
}

/// `mu(a|x) = exp(x.beta_a) / (sum_{l<m-1} exp(x.beta_l) + 1)` with the last
/// class's parameter block pinned at zero and not stored.
///
/// `weights` holds the `(m-1) x p` free blocks row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSoftmax")]
pub struct SoftmaxLinearPolicy {
    m: usize,
    p: usize,
    weights: Vec<f64>,
}

impl TryFrom<RawSoftmax> for SoftmaxLinearPolicy {
    type Error = Error;
    fn try_from(r: RawSoftmax) -> Result<Self> {
        Self::new(r.m, r.p, r.weights)
    }
}

impl SoftmaxLinearPolicy {
    pub fn new(m: usize, p: usize, weights: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!("m must be >= 2, got {m}")));
        }
        if weights.len() != (m - 1) * p {
            return Err(Error::DimensionMismatch {
                expected: (m - 1) * p,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite".into()));
        }
        Ok(Self { m, p, weights })
    }

    pub fn zeros(m: usize, p: usize) -> Self {
        Self::new(m, p, vec![0.0; (m - 1) * p]).expect("valid shape")
    }

    /// Builds a policy from its `m - 1` free rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidArgument("ragged weight rows".into()));
        }
        Self::new(rows.len() + 1, p, rows.concat())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Free parameter block `k < m - 1`.
    pub fn block(&self, k: usize) -> &[f64] {
        &self.weights[k * self.p..(k + 1) * self.p]
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.m, self.p, weights)
    }

    /// Logits `x.beta_k` for all `m` classes, the last being zero.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x, self.p)?;
        let mut z: Vec<f64> = (0..self.m - 1).map(|k| dot(self.block(k), x)).collect();
        z.push(0.0);
        Ok(z)
    }

    /// All `m` propensities, evaluated with max-logit shifting.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
        if probs.iter().any(|q| !q.is_finite()) {
            return Err(Error::NumericOverflow(format!("softmax of logits {z:?}")));
        }
        Ok(probs)
    }

    fn class(&self, a: &Action) -> Result<usize> {
        match *a {
            Action::Class(k) if k < self.m => Ok(k),
            _ => Err(Error::InvalidAction {
                action: a.to_string(),
                space: ActionSpace::Multiclass { m: self.m }.to_string(),
            }),
        }
    }

    /// Per-context Fisher information `(diag(q) - q q^T) (x) x x^T` over the free blocks.
    pub fn fisher_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let probs = self.probabilities(x)?;
        let (k1, p) = (self.m - 1, self.p);
        let d = k1 * p;
        let mut out = vec![0.0; d * d];
        for j in 0..k1 {
            for k in 0..k1 {
                let coef = (if j == k { 1.0 } else { 0.0 } - probs[j]) * probs[k];
                if coef == 0.0 {
                    continue;
                }
                for u in 0..p {
                    for v in 0..p {
                        out[(j * p + u) * d + k * p + v] = coef * x[u] * x[v];
                    }
                }
            }
        }
        Ok(out)
    }
}

impl ActionPolicy for SoftmaxLinearPolicy {
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Multiclass { m: self.m }
    }

    fn p(&self) -> usize {
        self.p
    }

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn propensity(&self, x: &[f64], a: &Action) -> Result<f64> {
        let k = self.class(a)?;
        Ok(self.probabilities(x)?[k])
    }

    fn log_propensity(&self, x: &[f64], a: &Action) -> Result<f64> {
        let k = self.class(a)?;
        let z = self.logits(x)?;
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        Ok((z[k] - lse).max(PROPENSITY_FLOOR.ln()))
    }

    fn log_propensity_gradient(&self, x: &[f64], a: &Action) -> Result<Vec<f64>> {
        let k_obs = self.class(a)?;
        let probs = self.probabilities(x)?;
        let mut g = vec![0.0; (self.m - 1) * self.p];
        for k in 0..self.m - 1 {
            let coef = if k == k_obs { 1.0 } else { 0.0 } - probs[k];
            for (gi, xi) in g[k * self.p..(k + 1) * self.p].iter_mut().zip(x) {
                *gi = coef * xi;
            }
        }
        Ok(g)
    }

    fn sample_action(&self, x: &[f64], rng: &mut Rng) -> Result<Action> {
        let probs = self.probabilities(x)?;
        Ok(Action::Class(sample_categorical(&probs, rng.random::<f64>())))
    }
}

#[derive(Deserialize)]
struct RawMultiLabel {
    #[serde(rename = "L")]
    labels: usize,
    p: usize,
    weights: Vec<f64>,
}

/// `L` independent logistic heads: `P(y_j = 1 | x) = sigmoid(w_j . x)` and the
/// joint propensity of a tuple is the product of the per-label probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMultiLabel")]
pub struct MultiLabelProductPolicy {
    #[serde(rename = "L")]
    labels: usize,
    p: usize,
    weights: Vec<f64>,
}

impl TryFrom<RawMultiLabel> for MultiLabelProductPolicy {
    type Error = Error;
    fn try_from(r: RawMultiLabel) -> Result<Self> {
        Self::new(r.labels, r.p, r.weights)
    }
}

impl MultiLabelProductPolicy {
    pub fn new(labels: usize, p: usize, weights: Vec<f64>) -> Result<Self> {
        if labels < 1 {
            return Err(Error::InvalidArgument("need at least one label".into()));
        }
        if weights.len() != labels * p {
            return Err(Error::DimensionMismatch {
                expected: labels * p,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite".into()));
        }
        Ok(Self { labels, p, weights })
    }

    pub fn zeros(labels: usize, p: usize) -> Self {
        Self::new(labels, p, vec![0.0; labels * p]).expect("valid shape")
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn head(&self, j: usize) -> &[f64] {
        &self.weights[j * self.p..(j + 1) * self.p]
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.labels, self.p, weights)
    }

    /// `P(y_j = 1 | x)` for every head.
    pub fn marginals(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x, self.p)?;
        Ok((0..self.labels)
            .map(|j| sigmoid(dot(self.head(j), x)))
            .collect())
    }

    fn labels_of<'a>(&self, a: &'a Action) -> Result<&'a [u8]> {
        match a {
            Action::Labels(y) if y.len() == self.labels && y.iter().all(|&b| b <= 1) => Ok(y),
            _ => Err(Error::InvalidAction {
                action: a.to_string(),
                space: ActionSpace::Multilabel {
                    labels: self.labels,
                }
                .to_string(),
            }),
        }
    }

    /// Product over heads of the Bernoulli probability of `y_j`.
    pub fn joint_label_propensity(&self, x: &[f64], y: &[u8]) -> Result<f64> {
        check_dim(x, self.p)?;
        if y.len() != self.labels {
            return Err(Error::DimensionMismatch {
                expected: self.labels,
                got: y.len(),
            });
        }
        let mut prob = 1.0;
        for (j, &bit) in y.iter().enumerate() {
            let z = dot(self.head(j), x);
            prob *= if bit == 1 { sigmoid(z) } else { sigmoid(-z) };
        }
        Ok(prob)
    }
}

impl ActionPolicy for MultiLabelProductPolicy {
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Multilabel {
            labels: self.labels,
        }
    }

    fn p(&self) -> usize {
        self.p
    }

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn propensity(&self, x: &[f64], a: &Action) -> Result<f64> {
        let y = self.labels_of(a)?;
        self.joint_label_propensity(x, y)
    }

    fn log_propensity(&self, x: &[f64], a: &Action) -> Result<f64> {
        let y = self.labels_of(a)?;
        check_dim(x, self.p)?;
        let mut s = 0.0;
        for (j, &bit) in y.iter().enumerate() {
            let z = dot(self.head(j), x);
            s += if bit == 1 { log_sigmoid(z) } else { log_sigmoid(-z) };
        }
        Ok(s.max(PROPENSITY_FLOOR.ln()))
    }

    fn log_propensity_gradient(&self, x: &[f64], a: &Action) -> Result<Vec<f64>> {
        let y = self.labels_of(a)?;
        let q = self.marginals(x)?;
        let mut g = vec![0.0; self.labels * self.p];
        for j in 0..self.labels {
            let coef = y[j] as f64 - q[j];
            for (gi, xi) in g[j * self.p..(j + 1) * self.p].iter_mut().zip(x) {
                *gi = coef * xi;
            }
        }
        Ok(g)
    }

    fn sample_action(&self, x: &[f64], rng: &mut Rng) -> Result<Action> {
        let q = self.marginals(x)?;
        Ok(Action::Labels(
            q.iter()
                .map(|&qj| u8::from(rng.random::<f64>() < qj))
                .collect(),
        ))
    }
}

/// Either policy family, serialized as `{kind, m | L, p, weights}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Policy {
    Softmax(SoftmaxLinearPolicy),
    Multilabel(MultiLabelProductPolicy),
}

impl Policy {
    /// Zero-parameter policy for an action space (uniform over classes, 1/2 per label).
    pub fn zeros(space: ActionSpace, p: usize) -> Self {
        match space {
            ActionSpace::Multiclass { m } => Policy::Softmax(SoftmaxLinearPolicy::zeros(m, p)),
            ActionSpace::Multilabel { labels } => {
                Policy::Multilabel(MultiLabelProductPolicy::zeros(labels, p))
            }
        }
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Ok(match self {
            Policy::Softmax(s) => Policy::Softmax(s.with_weights(params)?),
            Policy::Multilabel(s) => Policy::Multilabel(s.with_weights(params)?),
        })
    }

    pub fn as_softmax(&self) -> Option<&SoftmaxLinearPolicy> {
        match self {
            Policy::Softmax(s) => Some(s),
            Policy::Multilabel(_) => None,
        }
    }

    pub fn as_multilabel(&self) -> Option<&MultiLabelProductPolicy> {
        match self {
            Policy::Multilabel(s) => Some(s),
            Policy::Softmax(_) => None,
        }
    }
}

impl From<SoftmaxLinearPolicy> for Policy {
    fn from(p: SoftmaxLinearPolicy) -> Self {
        Policy::Softmax(p)
    }
}

impl From<MultiLabelProductPolicy> for Policy {
    fn from(p: MultiLabelProductPolicy) -> Self {
        Policy::Multilabel(p)
    }
}

macro_rules! delegate {
    ($self:ident, $inner:ident => $e:expr) => {
        match $self {
            Policy::Softmax($inner) => $e,
            Policy::Multilabel($inner) => $e,
        }
    };
}

impl ActionPolicy for Policy {
    fn action_space(&self) -> ActionSpace {
        delegate!(self, p => p.action_space())
    }
    fn p(&self) -> usize {
        delegate!(self, p => ActionPolicy::p(p))
    }
    fn params(&self) -> &[f64] {
        delegate!(self, p => p.params())
    }
    fn propensity(&self, x: &[f64], a: &Action) -> Result<f64> {
        delegate!(self, p => p.propensity(x, a))
    }
    fn log_propensity(&self, x: &[f64], a: &Action) -> Result<f64> {
        delegate!(self, p => p.log_propensity(x, a))
    }
    fn log_propensity_gradient(&self, x: &[f64], a: &Action) -> Result<Vec<f64>> {
        delegate!(self, p => p.log_propensity_gradient(x, a))
    }
    fn sample_action(&self, x: &[f64], rng: &mut Rng) -> Result<Action> {
        delegate!(self, p => p.sample_action(x, rng))
    }
}

/// Draws one action with a fresh generator seeded by `seed`.
pub fn sample_action_seeded<P: ActionPolicy + ?Sized>(
    policy: &P,
    x: &[f64],
    seed: u64,
) -> Result<Action> {
    policy.sample_action(x, &mut rng_from_seed(seed))
}

/// Enumerates every action of a (small) action space.
pub fn enumerate_actions(space: ActionSpace) -> Vec<Action> {
    match space {
        ActionSpace::Multiclass { m } => (0..m).map(Action::Class).collect(),
        ActionSpace::Multilabel { labels } => (0..1usize << labels)
            .map(|bits| Action::Labels((0..labels).map(|j| ((bits >> j) & 1) as u8).collect()))
            .collect(),
    }
}
