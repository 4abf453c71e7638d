//! KV-cache compression for transformer decoding, evaluated by trace replay.
//!
//! The pipeline for the `d2o` policy:
//!
//! 1. [`layer_policy`] measures each layer's prompt attention density and
//!    gives dense layers a larger cache budget than sparse ones.
//! 2. [`eviction`] keeps attention sinks, the top-N tokens by accumulated
//!    attention, and a recent window, per (layer, head).
//! 3. [`merge`] matches every evicted key to its nearest conserved key and,
//!    when the similarity clears an EMA threshold, folds the evicted pair
//!    into it with softmax weights.
//!
//! [`harness`] replays an [`trace::AttentionTrace`] under any policy next to
//! an uncompressed reference and reports memory and output drift.

pub mod config;
pub mod error;
pub mod eviction;
pub mod harness;
pub mod layer_policy;
pub mod linalg;
pub mod merge;
pub mod trace;

pub use config::{CachePolicyConfig, Policy, ThresholdScope};
pub use error::{Error, Result, TraceParseError};
pub use eviction::{CacheState, EvictionOutcome, ScoreMode};
pub use harness::{
    compare_on, compare_policies, comparison_csv, density_report, run_replay, run_replay_path,
    DecisionEvent, ReplayOutput, ReplayReport,
};
pub use layer_policy::{DensityClass, DensityReport, LayerBudget};
pub use linalg::Matrix;
pub use merge::MergeEvent;
pub use trace::{generate_synthetic, read_trace, write_trace, AttentionTrace, SyntheticConfig};
