//! Off-policy evaluation and learning for contextual bandits with
//! maximum-likelihood surrogate propensities.

// Negated comparisons are used so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod data;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod learning;
pub mod numeric;
pub mod policy;
pub mod rng;
pub mod surrogate;
pub mod theory;

pub use bandit::{
    sample_logs, true_value, Action, ActionSpace, BanditDataset, ContextFeatures,
    LoggedInteraction, SyntheticEnvironment,
};
pub use data::{SupervisedDataset, SupervisedRow};
pub use error::{Error, Result};
pub use estimators::{EstimatorKind, EstimatorReport};
pub use experiments::{benchmark, gradient_comparison, BenchOptions, GradientComparison, Method};
pub use learning::{adagrad_train, Objective, PropensitySource, TrainConfig, TrainedPolicy};
pub use policy::{ActionPolicy, MultiLabelProductPolicy, Policy, SoftmaxLinearPolicy};
pub use surrogate::{fit_mle, fit_surrogate, FitOptions, FitResult, SurrogateOptions};
pub use theory::{mse_reduction_experiment, PiModel, TheoremCheckReport};
