//! Scheduled early-exit decoding for interleaved text/speech token streams.
//!
//! The crate bundles a small seeded decoder-only transformer ([`backbone`])
//! whose KV cache tracks per-position depth ([`cache`]), the text/speech
//! interleave state machine ([`interleave`]), exit policies with exact depth
//! arithmetic ([`policy`]), distilled per-layer LM heads ([`heads`]), the
//! decoding loop with KV backfill ([`engine`]) and an experiment driver
//! ([`harness`]).

pub mod backbone;
pub mod cache;
pub mod config;
pub mod container;
pub mod digest;
pub mod engine;
pub mod error;
pub mod harness;
pub mod heads;
pub mod interleave;
pub mod math;
pub mod policy;
pub mod prompts;
pub mod rng;
pub mod sampling;

pub use backbone::Backbone;
pub use cache::KvCache;
pub use config::{ModelConfig, TokenId};
pub use engine::{generate, generate_with_cache, reference_decode, teacher_forced_trace, GenerationResult, StopReason};
pub use error::{Error, Result};
pub use heads::{HeadSet, TrainHyper};
pub use interleave::{InterleaveState, Modality};
pub use policy::{DepthDecision, ExitPolicy, PolicyStack, SparkVariant};
pub use sampling::SamplingConfig;

/// Version string stamped into every emitted artifact.
pub const ARTIFACT_VERSION: &str = concat!("sparkee ", env!("CARGO_PKG_VERSION"));
