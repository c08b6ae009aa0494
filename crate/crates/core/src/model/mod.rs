//! Two-expert transformer sharing one attention stream.

pub mod cache;
pub mod config;
pub mod container;
pub mod dense;
pub mod params;
pub mod sample;
pub mod sequence;
pub mod stream;
pub mod vocab;

pub use cache::{CacheEntry, UnifiedKVCache};
pub use config::{BlockGeometry, ModelConfig};
pub use params::{Expert, Layer, Linear, LoraAdapter, Model, ParamInfo, ParamKind, Routing};
pub use sample::sample_segment;
pub use sequence::{forward_sequence, history_mask, SeqToken};
pub use stream::{forward_token, ForwardTrace};
pub use vocab::{route, ExpertId, Modality, ModalityTag, VocabLayout, VocabSizes, VocabSlice};

use crate::num::NumError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("sequencing error: expected position {expected}, got {found}")]
    Sequencing { expected: usize, found: usize },
    #[error("token {token} is outside the vocabulary of {expert}")]
    Vocab { token: usize, expert: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error(transparent)]
    Container(#[from] container::ContainerError),
}
