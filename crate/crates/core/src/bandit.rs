//! Logged bandit feedback: contexts, actions, datasets and finite synthetic
//! environments with exact value computation.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_categorical, ActionPolicy, SoftmaxLinearPolicy};
use crate::rng::rng_from_seed;

/// Dense feature row of a context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ContextFeatures(Vec<f64>);

impl ContextFeatures {
    pub fn new(coordinates: Vec<f64>) -> Result<Self> {
        if let Some(v) = coordinates.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "context coordinate {v} is not finite"
            )));
        }
        Ok(Self(coordinates))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for ContextFeatures {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ContextFeatures {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ContextFeatures> for Vec<f64> {
    fn from(c: ContextFeatures) -> Vec<f64> {
        c.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionSpace {
    /// `m` mutually exclusive classes, indexed `0..m`.
    Multiclass { m: usize },
    /// `L` independent binary labels; an action is a 0/1 tuple of length `L`.
    Multilabel {
        #[serde(rename = "L")]
        labels: usize,
    },
}

impl ActionSpace {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActionSpace::Multiclass { m } if m < 2 => Err(Error::InvalidArgument(format!(
                "multiclass action space needs m >= 2, got {m}"
            ))),
            ActionSpace::Multilabel { labels } if labels < 1 => Err(Error::InvalidArgument(
                "multilabel action space needs L >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Number of distinct actions (`m`, or `2^L` saturating).
    pub fn num_actions(&self) -> f64 {
        match *self {
            ActionSpace::Multiclass { m } => m as f64,
            ActionSpace::Multilabel { labels } => 2f64.powi(labels as i32),
        }
    }

    pub fn contains(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionSpace::Multiclass { m }, Action::Class(k)) => k < m,
            (ActionSpace::Multilabel { labels }, Action::Labels(y)) => {
                y.len() == *labels && y.iter().all(|&b| b <= 1)
            }
            _ => false,
        }
    }

    pub fn check(&self, action: &Action) -> Result<()> {
        if self.contains(action) {
            Ok(())
        } else {
            Err(Error::InvalidAction {
                action: action.to_string(),
                space: self.to_string(),
            })
        }
    }
}

impl fmt::Display for ActionSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionSpace::Multiclass { m } => write!(f, "multiclass(m={m})"),
            ActionSpace::Multilabel { labels } => write!(f, "multilabel(L={labels})"),
        }
    }
}

/// A logged action: a class index or a binary label tuple.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Class(usize),
    Labels(Vec<u8>),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Class(k) => write!(f, "{k}"),
            Action::Labels(y) => write!(f, "{y:?}"),
        }
    }
}

/// One record `(x, a, r, mu(a|x))` of logged feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedInteraction {
    pub x: ContextFeatures,
    pub action: Action,
    pub reward: f64,
    pub propensity: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    p: usize,
    action_space: ActionSpace,
}

/// A nonempty, dimensionally consistent batch of logged interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct BanditDataset {
    records: Vec<LoggedInteraction>,
    action_space: ActionSpace,
    p: usize,
}

impl BanditDataset {
    pub fn new(
        records: Vec<LoggedInteraction>,
        action_space: ActionSpace,
        p: usize,
    ) -> Result<Self> {
        action_space.validate()?;
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, r) in records.iter().enumerate() {
            if r.x.dim() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: r.x.dim(),
                });
            }
            action_space.check(&r.action)?;
            if !(r.propensity > 0.0 && r.propensity <= 1.0) {
                return Err(Error::InvalidPropensity {
                    index: i,
                    value: r.propensity,
                });
            }
            if !r.reward.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "reward at record {i} is not finite"
                )));
            }
        }
        Ok(Self {
            records,
            action_space,
            p,
        })
    }

    pub fn records(&self) -> &[LoggedInteraction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }

    /// Same records with rewards replaced.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: rewards.len(),
            });
        }
        let records = self
            .records
            .iter()
            .zip(rewards)
            .map(|(r, reward)| LoggedInteraction { reward, ..r.clone() })
            .collect();
        Self::new(records, self.action_space, self.p)
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, self.action_space, self.p)
    }

    /// Records in `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: order.len(),
            });
        }
        self.subset(order)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            p: self.p,
            action_space: self.action_space,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty(),
            Err(_) => true,
        });
        let (_, first) = lines.next().ok_or(Error::EmptyDataset)?;
        let header: Header = serde_json::from_str(&first?).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let rec: LoggedInteraction =
                serde_json::from_str(&line?).map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            records.push(rec);
        }
        Self::new(records, header.action_space, header.p)
    }
}

/// A finite environment: contexts with probabilities, a deterministic reward
/// table and the true logging policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvironment {
    contexts: Vec<ContextFeatures>,
    probabilities: Vec<f64>,
    /// `rewards[c][a]` is `r(a, x_c)`.
    rewards: Vec<Vec<f64>>,
    logging: SoftmaxLinearPolicy,
}

impl SyntheticEnvironment {
    pub fn new(
        contexts: Vec<ContextFeatures>,
        probabilities: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        logging: SoftmaxLinearPolicy,
    ) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if probabilities.len() != contexts.len() || rewards.len() != contexts.len() {
            return Err(Error::DimensionMismatch {
                expected: contexts.len(),
                got: probabilities.len().min(rewards.len()),
            });
        }
        if probabilities.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
            return Err(Error::InvalidArgument(
                "context probabilities must be nonnegative".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "context probabilities sum to {total}, not 1"
            )));
        }
        for x in &contexts {
            if x.dim() != logging.p() {
                return Err(Error::DimensionMismatch {
                    expected: logging.p(),
                    got: x.dim(),
                });
            }
        }
        for row in &rewards {
            if row.len() != logging.m() {
                return Err(Error::DimensionMismatch {
                    expected: logging.m(),
                    got: row.len(),
                });
            }
            if row.iter().any(|r| !r.is_finite()) {
                return Err(Error::InvalidArgument("reward table must be finite".into()));
            }
        }
        Ok(Self {
            contexts,
            probabilities,
            rewards,
            logging,
        })
    }

    pub fn contexts(&self) -> &[ContextFeatures] {
        &self.contexts
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn reward(&self, context: usize, action: usize) -> f64 {
        self.rewards[context][action]
    }

    pub fn reward_table(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn logging(&self) -> &SoftmaxLinearPolicy {
        &self.logging
    }

    pub fn m(&self) -> usize {
        self.logging.m()
    }

    pub fn p(&self) -> usize {
        self.logging.p()
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::Multiclass { m: self.m() }
    }

    /// Same environment with the reward table replaced.
    pub fn with_rewards(&self, rewards: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(
            self.contexts.clone(),
            self.probabilities.clone(),
            rewards,
            self.logging.clone(),
        )
    }

    /// Same environment with the logging parameters replaced.
    pub fn with_logging(&self, logging: SoftmaxLinearPolicy) -> Result<Self> {
        Self::new(
            self.contexts.clone(),
            self.probabilities.clone(),
            self.rewards.clone(),
            logging,
        )
    }
}

/// Exact `V = sum_x lambda(x) sum_a pi(a|x) r(a, x)`.
pub fn true_value<P: ActionPolicy + ?Sized>(env: &SyntheticEnvironment, target: &P) -> Result<f64> {
    if target.p() != env.p() {
        return Err(Error::DimensionMismatch {
            expected: env.p(),
            got: target.p(),
        });
    }
    if target.action_space() != env.action_space() {
        return Err(Error::InvalidArgument(format!(
            "target acts on {}, environment on {}",
            target.action_space(),
            env.action_space()
        )));
    }
    let mut v = 0.0;
    for (c, x) in env.contexts.iter().enumerate() {
        let mut inner = 0.0;
        for a in 0..env.m() {
            inner += target.propensity(x, &Action::Class(a))? * env.rewards[c][a];
        }
        v += env.probabilities[c] * inner;
    }
    Ok(v)
}

/// Draw `n` logged interactions: `x ~ lambda`, `a ~ mu(.|x; beta*)`, `r = r(a, x)`.
pub fn sample_logs(env: &SyntheticEnvironment, n: usize, seed: u64) -> Result<BanditDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    // Propensity rows per context are fixed; compute once.
    let probs: Vec<Vec<f64>> = env
        .contexts
        .iter()
        .map(|x| env.logging.probabilities(x))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let c = sample_categorical(&env.probabilities, rng.random::<f64>());
        let a = sample_categorical(&probs[c], rng.random::<f64>());
        records.push(LoggedInteraction {
            x: env.contexts[c].clone(),
            action: Action::Class(a),
            reward: env.rewards[c][a],
            propensity: probs[c][a],
        });
    }
    BanditDataset::new(records, env.action_space(), env.p())
}
