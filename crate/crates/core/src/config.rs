use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cache management policy selected for a replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// No compression.
    Full,
    /// Last `S` tokens only.
    LocalWindow,
    /// `T` sink tokens plus the last `S - T`.
    Streaming,
    /// Sinks, top-N by cumulative attention, recent window; uniform budgets.
    H2o,
    /// Like `H2o` but ranks by mean attention (cumulative / observations).
    /// An approximation of RoCo, not a reproduction.
    Roco,
    /// Variance-gated layer budgets plus eviction with EMA-thresholded merging.
    D2o,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Full,
        Policy::LocalWindow,
        Policy::Streaming,
        Policy::H2o,
        Policy::Roco,
        Policy::D2o,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::LocalWindow => "local_window",
            Policy::Streaming => "streaming",
            Policy::H2o => "h2o",
            Policy::Roco => "roco",
            Policy::D2o => "d2o",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown policy {s:?} (expected one of full, local_window, streaming, h2o, roco, d2o)"
                ))
            })
    }
}

/// Which cache states share one EMA similarity threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    Head,
    Layer,
}

impl FromStr for ThresholdScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "head" => Ok(ThresholdScope::Head),
            "layer" => Ok(ThresholdScope::Layer),
            other => Err(Error::config(format!(
                "unknown threshold scope {other:?} (expected head or layer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachePolicyConfig {
    pub policy: Policy,
    /// Base budget as a fraction of the prompt length, in `(0, 1]`.
    pub ratio: f64,
    /// Important-to-recent split `N:M` of the non-sink budget.
    pub important_ratio: u32,
    pub recent_ratio: u32,
    /// Number of attention-sink tokens `T`.
    pub sinks: usize,
    /// Density gate `g`: layers with variance at or below it get `alpha * S`.
    pub gate: f64,
    pub alpha: f64,
    /// EMA smoothing constant for the merge threshold.
    pub beta: f64,
    pub merge_enabled: bool,
    pub threshold_scope: ThresholdScope,
    pub seed: Option<u64>,
}

impl Default for CachePolicyConfig {
    fn default() -> Self {
        Self {
            policy: Policy::D2o,
            ratio: 0.2,
            important_ratio: 3,
            recent_ratio: 1,
            sinks: 4,
            gate: 100.0,
            alpha: 2.0,
            beta: 0.7,
            merge_enabled: true,
            threshold_scope: ThresholdScope::Head,
            seed: None,
        }
    }
}

impl CachePolicyConfig {
    pub fn with_policy(policy: Policy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!(
                "ratio r must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.important_ratio == 0 || self.recent_ratio == 0 {
            return Err(Error::config(format!(
                "N:M ratio must be two positive integers, got {}:{}",
                self.important_ratio, self.recent_ratio
            )));
        }
        if !self.gate.is_finite() {
            return Err(Error::config("gate g must be finite"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(Error::config(format!(
                "alpha must be >= 1, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Whether the replay should run the merge pipeline after evictions.
    pub fn merges(&self) -> bool {
        self.policy == Policy::D2o && self.merge_enabled
    }
}
