//! Closed-loop evaluation of models on scripted duplex episodes.

pub mod agent;
pub mod metrics;
pub mod report;

pub use agent::{ModelAgent, ReplayAgent};
pub use metrics::{episode_metrics, EpisodeMetrics, Turn};
pub use report::{compare_models, evaluate, Comparison, EvalOptions, MetricReport, Ratio, Suite, TaskSummary, COMPARISON_TASKS};

use crate::model::ModelError;
use crate::sim::SimError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation: {0}")]
    Config(String),
    #[error("malformed report: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;
