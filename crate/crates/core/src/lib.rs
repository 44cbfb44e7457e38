//! Local surrogate explanations for tabular classifiers, with auditing of
//! how well an explanation preserves the black-box's group fairness and a
//! fairness-preserving variant of the surrogate objective.
//!
//! The pipeline: load or synthesize a [`dataset::TabularDataset`], wrap a
//! [`blackbox::BlackBoxModel`], draw a [`neighborhood::Neighborhood`] around
//! an instance, and fit either the vanilla surrogate
//! ([`surrogate::lime_explain`]) or the fair one ([`fair::fair_lime_explain`]).
//! [`metrics`] compares the two sides; [`experiments`] runs the boundary and
//! perturbation-count studies.

pub mod blackbox;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod fair;
pub mod metrics;
pub mod neighborhood;
pub mod rng;
pub mod surrogate;

pub use blackbox::{BlackBoxModel, ModelKind};
pub use dataset::{SyntheticConfig, TabularDataset};
pub use error::{Error, Result};
pub use fair::FairObjectiveConfig;
pub use metrics::{MetricError, MetricKind};
pub use neighborhood::{KernelConfig, Neighborhood};
pub use surrogate::{Explanation, LinearSurrogate};
