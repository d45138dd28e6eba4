//! Masked-diffusion LM inference with entropy-triggered KV-cache refresh.
//!
//! The [`decoding::Generator`] runs sliding-window parallel unmasking over a
//! small bidirectional transformer ([`model`]). Each step a
//! [`policy::CachePolicy`] chooses between a full forward pass and a partial
//! one that recomputes only a subset of positions; [`policy::EntropyCache`]
//! makes that choice from the entropy of the tokens it just decoded.

pub mod decoding;
pub mod error;
pub mod harness;
pub mod mathcore;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod timing;
pub mod tokenizer;
pub mod weightsio;

pub use decoding::{run_generation, DecodeConfig, GenerationOutput, Generator, SequenceState};
pub use error::{Error, Result};
pub use harness::{OutputFormat, RunReport, RunSpec};
pub use mathcore::{Matrix, ProbabilityVector};
pub use metrics::{StepRecord, TraceSummary};
pub use model::{init_weights, KVCacheSet, ModelConfig, ModelWeights};
pub use policy::{CachePolicy, Mode, PolicyKind, PolicySpec, StepPlan};
pub use timing::PhaseTimes;
