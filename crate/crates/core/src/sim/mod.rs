//! Synthetic duplex micro-world: scenes, scripted users, gold rollouts and datasets.

pub mod dataset;
pub mod rollout;
pub mod script;
pub mod words;
pub mod world;

pub use dataset::{encode_episode, eval_seed, gen_dataset, DataToken, Dataset, DatasetEpisode, TaskMix};
pub use rollout::{Agent, Episode, EpisodeTrace, Event, OracleAgent, Observation, TickRecord, MAX_TICKS};
pub use script::{derive_seed, EpisodeScript, Query, Sim, TaskKind, Utterance};
pub use words::{Action, Color, Defect, Status, Words};
pub use world::{observe_image, oracle_policy, Cell, Illegal, Object, Unreachable, WorldState};

use crate::codec::CodecError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown task kind `{0}`")]
    UnknownTask(String),
    #[error("task mix has no positive weight")]
    ZeroMix,
    #[error("bad task mix: {0}")]
    Mix(String),
    #[error("simulator configuration: {0}")]
    Config(String),
    #[error("no admissible scene for {task} after {attempts} attempts")]
    NoScene { task: &'static str, attempts: usize },
    #[error("agent failed at tick {tick}: {message}")]
    Agent { tick: usize, message: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, SimError>;
