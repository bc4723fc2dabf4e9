//! Gaze-supervised attention for text tasks.
//!
//! A text saliency model (embeddings, BiLSTM, Transformer encoder) predicts a
//! per-token distribution `u` over a sentence. `u` rescales Luong attention
//! scores inside two task networks, a GRU paraphrase generator and a BiLSTM
//! deletion-based sentence compressor, so the task loss also trains the
//! saliency model. The crate also carries a surrogate reading simulator for
//! synthetic gaze supervision, corpus readers, evaluation metrics and the
//! checkpoint container.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod gaze_synth;
pub mod joint;
mod layers;
pub mod metrics;
pub mod numeric;
pub mod paragen;
pub mod sentcomp;
pub mod toy;
pub mod trace;
pub mod tsm;

pub use attention::{AblationMode, SaliencySource};
pub use checkpoint::{Checkpoint, Stage, Task};
pub use config::{ConfigRecord, FlatConfig};
pub use error::{Error, Result};
pub use paragen::{JointRun, ParagenConfig, ParagenModel, SentencePair};
pub use sentcomp::{DeletionExample, SentcompConfig, SentcompModel};
pub use trace::AttentionTrace;
pub use tsm::{SaliencyDistribution, TsmConfig, TsmModel};
