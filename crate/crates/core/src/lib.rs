//! Named-entity recognition toolkit: a toy hashing encoder, three prediction
//! heads (token classifier, linear-chain CRF, span classifier), ensemble
//! combiners and a strict micro-F1 scorer.

pub mod bio;
pub mod checkpoint;
pub mod combiners;
pub mod corpus;
pub mod crf_head;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod math;
pub mod meta;
pub mod model;
pub mod scorer;
pub mod seq_head;
pub mod span_head;
pub mod synth;
pub mod trainer;

pub use bio::{Tag, TagSequence, Tagset};
pub use combiners::{majority_vote, union};
pub use corpus::{Mention, PredictionSet, Sample};
pub use encoder::{EmbeddingMatrix, TokenEncoder, ToyEncoderConfig, ToyEncoderParams};
pub use error::{Error, Result};
pub use exec::Execution;
pub use meta::{meta_filter, MetaModel};
pub use model::{Gradients, ModelKind, NerModel};
pub use scorer::{score, Metrics};
pub use span_head::SpanConfig;
pub use trainer::{train, OptimizerKind, TrainConfig};
