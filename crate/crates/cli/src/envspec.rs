use anyhow::{ensure, Context};
use counterfact_core::policy::SoftmaxLinearPolicy;
use counterfact_core::theory::{canonical_env, canonical_target};
use counterfact_core::{ActionPolicy, ContextFeatures, SyntheticEnvironment};
use serde::{Deserialize, Serialize};

/// Finite environment description read by `theorem`.
///
/// `rewards[c][a]` is the reward of action `a` in context `c`. Both policies
/// are flat softmax weight vectors of length `(m - 1) * p`, one block of `p`
/// per non-reference action, where `m` is the reward row length and `p` the
/// context length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub contexts: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
    pub rewards: Vec<Vec<f64>>,
    pub logging: Vec<f64>,
    pub target: Vec<f64>,
}

impl EnvSpec {
    pub fn canonical() -> Self {
        let env = canonical_env();
        Self {
            contexts: env.contexts().iter().map(|c| c.as_slice().to_vec()).collect(),
            probabilities: env.probabilities().to_vec(),
            rewards: env.reward_table().to_vec(),
            logging: env.logging().params().to_vec(),
            target: canonical_target().params().to_vec(),
        }
    }

    pub fn build(&self) -> anyhow::Result<(SyntheticEnvironment, SoftmaxLinearPolicy)> {
        ensure!(!self.contexts.is_empty(), "environment needs at least one context");
        ensure!(!self.rewards.is_empty(), "environment needs a reward table");
        let m = self.rewards[0].len();
        let p = self.contexts[0].len();
        let logging = SoftmaxLinearPolicy::new(m, p, self.logging.clone()).context("logging weights")?;
        let target = SoftmaxLinearPolicy::new(m, p, self.target.clone()).context("target weights")?;
        let contexts = self
            .contexts
            .iter()
            .map(|c| ContextFeatures::new(c.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let env = SyntheticEnvironment::new(contexts, self.probabilities.clone(), self.rewards.clone(), logging)?;
        Ok((env, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_spec_rebuilds_the_canonical_environment() {
        let (env, target) = EnvSpec::canonical().build().unwrap();
        assert_eq!(env.reward_table(), canonical_env().reward_table());
        assert_eq!(target, canonical_target());
        let json = serde_json::to_string(&EnvSpec::canonical()).unwrap();
        let back: EnvSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, EnvSpec::canonical());
    }

    #[test]
    fn unknown_keys_and_bad_shapes_are_rejected() {
        assert!(serde_json::from_str::<EnvSpec>(r#"{"contexts":[],"probabilities":[],"rewards":[],"logging":[],"target":[],"x":1}"#).is_err());
        let mut spec = EnvSpec::canonical();
        spec.target.pop();
        assert!(spec.build().is_err());
    }
}
