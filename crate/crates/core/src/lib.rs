//! Resource estimation for relational query plans.
//!
//! Per-operator CPU time and logical I/O are predicted with boosted regression
//! trees (MART). Each operator type also carries a handful of *combined*
//! models that divide the target by an asymptotic scaling function of one or
//! two features; at estimation time the model whose training ranges best
//! cover the incoming feature values is chosen, which lets estimates
//! extrapolate to inputs far larger than anything seen in training.
//!
//! The crate is organised bottom-up:
//!
//! * [`plan`]: plan trees, the line-delimited JSON corpus format, pipelines.
//! * [`features`]: feature extraction and the feature-dependency table.
//! * [`gbrt`]: the boosted-tree learner.
//! * [`scaling`]: scaling-function forms and least-squares form selection.
//! * [`registry`]: model families, runtime model selection, the `QRES` codec.
//! * [`workload`]: a synthetic plan generator with analytic cost oracles.
//! * [`eval`]: error metrics and the optimizer/linear baselines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod features;
pub mod gbrt;
pub mod plan;
pub mod registry;
pub mod scaling;
pub mod workload;

pub use error::{Error, Result};
pub use features::{extract_features, CardinalitySource, FeatureId, FeatureVector};
pub use gbrt::{MartModel, TrainConfig};
pub use plan::{OperatorType, PlanNode, QueryPlan, ResourceKind, TableMeta};
pub use registry::{CombinedModel, Model, ModelRegistry, RegistryConfig};
pub use scaling::{ScalingForm, ScalingKind};
