//! Dynamic token merging.
//!
//! Evicted keys are matched to their most similar conserved key by cosine
//! similarity. An EMA threshold over the observed best similarities decides
//! whether each evicted pair is folded back into its match or dropped for
//! good. Recalled pairs are merged with softmax weights over
//! `{self-similarity 1} ∪ {u_ij}`, shared between keys and values.

use std::collections::BTreeMap;
use std::f64::consts::E;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eviction::{CacheState, EvictionOutcome};
use crate::linalg::{self, Matrix};

/// Cosine similarities between evicted rows and conserved rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// `L_e x L_c`.
    pub u: Matrix,
    /// Best conserved index per evicted row, ties to the lowest index.
    pub argmax: Vec<usize>,
    pub max: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.argmax.len()
    }

    pub fn is_empty(&self) -> bool {
        self.argmax.is_empty()
    }
}

pub fn match_nearest(evicted: &Matrix, conserved: &Matrix) -> Result<SimilarityMatrix> {
    if conserved.rows() == 0 {
        return Err(Error::contract(
            "match_nearest needs at least one conserved key",
        ));
    }
    if evicted.rows() > 0 && evicted.cols() != conserved.cols() {
        return Err(Error::contract(
            "evicted and conserved keys differ in width",
        ));
    }
    let lc = conserved.rows();
    let mut data = Vec::with_capacity(evicted.rows() * lc);
    let mut argmax = Vec::with_capacity(evicted.rows());
    let mut max = Vec::with_capacity(evicted.rows());
    for e in evicted.row_iter() {
        let start = data.len();
        data.extend(
            conserved
                .row_iter()
                .map(|c| linalg::cosine_similarity(e, c)),
        );
        let row = &data[start..];
        let (best, &value) =
            row.iter().enumerate().fold(
                (0, &row[0]),
                |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc },
            );
        argmax.push(best);
        max.push(value);
    }
    Ok(SimilarityMatrix {
        u: Matrix::new(evicted.rows(), lc, data)?,
        argmax,
        max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdPhase {
    /// One batch of evictions right after prompt encoding.
    Prompt,
    /// A single eviction during decoding.
    Generation,
}

/// EMA threshold update.
///
/// Prompt phase initializes `tau` to the mean of the row maxima and leaves it
/// unset when nothing was evicted. Generation phase applies
/// `tau = beta * max + (1 - beta) * tau_prev`; if `tau_prev` is unset it is
/// initialized from the single row instead.
pub fn update_threshold(
    prev: Option<f64>,
    sims: &SimilarityMatrix,
    beta: f64,
    phase: ThresholdPhase,
) -> Result<Option<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::contract(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    match phase {
        ThresholdPhase::Prompt => {
            if prev.is_some() {
                return Err(Error::contract(
                    "prompt-phase threshold is already initialized",
                ));
            }
            Ok(mean_of_maxima(&sims.max))
        }
        ThresholdPhase::Generation => {
            if sims.len() != 1 {
                return Err(Error::contract(format!(
                    "generation-phase threshold expects one evicted row, got {}",
                    sims.len()
                )));
            }
            let current = sims.max[0];
            Ok(Some(match prev {
                Some(tau) => ema_step(tau, current, beta),
                None => current,
            }))
        }
    }
}

fn mean_of_maxima(maxima: &[f64]) -> Option<f64> {
    if maxima.is_empty() {
        None
    } else {
        Some(maxima.iter().sum::<f64>() / maxima.len() as f64)
    }
}

#[inline]
fn ema_step(prev: f64, current: f64, beta: f64) -> f64 {
    beta * current + (1.0 - beta) * prev
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MergeChoice {
    /// Fold into conserved row `target`.
    Merge {
        target: usize,
    },
    Discard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeDecision {
    pub choices: Vec<MergeChoice>,
    pub tau: Option<f64>,
}

/// Recall iff the best similarity is at least `tau`. With no threshold
/// (nothing evicted yet) every row is discarded.
pub fn decide(sims: &SimilarityMatrix, tau: Option<f64>) -> MergeDecision {
    let choices = sims
        .argmax
        .iter()
        .zip(&sims.max)
        .map(|(&target, &m)| match tau {
            Some(t) if m >= t => MergeChoice::Merge { target },
            _ => MergeChoice::Discard,
        })
        .collect();
    MergeDecision { choices, tau }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeGroup {
    pub target: usize,
    pub conserved_weight: f64,
    /// `(evicted row, weight)` in ascending evicted-row order.
    pub members: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeWeights {
    /// One group per targeted conserved row, ascending by target.
    pub groups: Vec<MergeGroup>,
}

/// Softmax weights over the conserved row's self-similarity (`e = exp(1)`)
/// and each recalled row's `exp(u_ij)`.
pub fn merge_weights(sims: &SimilarityMatrix, decisions: &MergeDecision) -> Result<MergeWeights> {
    if decisions.choices.len() != sims.len() {
        return Err(Error::contract(
            "decision count does not match similarity rows",
        ));
    }
    let mut recalled: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, choice) in decisions.choices.iter().enumerate() {
        if let MergeChoice::Merge { target } = *choice {
            if target >= sims.u.cols() {
                return Err(Error::contract(format!(
                    "merge target {target} out of range"
                )));
            }
            recalled.entry(target).or_default().push(i);
        }
    }
    let groups = recalled
        .into_iter()
        .map(|(target, rows)| {
            let exps: Vec<f64> = rows.iter().map(|&i| sims.u.get(i, target).exp()).collect();
            let z = exps.iter().sum::<f64>() + E;
            MergeGroup {
                target,
                conserved_weight: E / z,
                members: rows
                    .into_iter()
                    .zip(exps)
                    .map(|(i, x)| (i, x / z))
                    .collect(),
            }
        })
        .collect();
    Ok(MergeWeights { groups })
}

/// Blends recalled rows into their targets: `k_c <- w_c k_c + sum_i w_i k_i`,
/// with identical weights on the value rows.
pub fn apply_merge(
    state: &mut CacheState,
    outcome: &EvictionOutcome,
    weights: &MergeWeights,
) -> Result<()> {
    let (keys, values) = state.kv_mut();
    for g in &weights.groups {
        if g.target >= keys.rows() {
            return Err(Error::contract(format!(
                "merge target {} outside the cache",
                g.target
            )));
        }
        if let Some(&(i, _)) = g.members.iter().find(|(i, _)| *i >= outcome.len()) {
            return Err(Error::contract(format!(
                "evicted row {i} outside the outcome"
            )));
        }
        blend(keys.row_mut(g.target), g, &outcome.keys);
        blend(values.row_mut(g.target), g, &outcome.values);
    }
    Ok(())
}

fn blend(row: &mut [f64], group: &MergeGroup, evicted: &Matrix) {
    for (c, x) in row.iter_mut().enumerate() {
        let mut acc = group.conserved_weight * *x;
        for &(i, w) in &group.members {
            acc += w * evicted.get(i, c);
        }
        *x = acc;
    }
}

/// One logged merge-or-discard decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeEvent {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub evicted_origin: usize,
    /// Origin id of the best-matching conserved row.
    pub target_origin: usize,
    pub max_similarity: f64,
    pub tau: Option<f64>,
    pub merged: bool,
}

/// Everything computed for one head between eviction and merge, so that a
/// shared (per-layer) threshold can be resolved before deciding.
#[derive(Debug, Clone)]
pub struct PendingMerge {
    pub sims: SimilarityMatrix,
    pub outcome: EvictionOutcome,
}

impl PendingMerge {
    pub fn new(state: &CacheState, outcome: EvictionOutcome) -> Result<Option<Self>> {
        if outcome.is_empty() {
            return Ok(None);
        }
        let sims = match_nearest(&outcome.keys, state.keys())?;
        Ok(Some(Self { sims, outcome }))
    }

    /// Decide against `tau`, merge into `state`, and describe what happened.
    pub fn finish(
        self,
        state: &mut CacheState,
        tau: Option<f64>,
        step: usize,
        layer: usize,
        head: usize,
    ) -> Result<Vec<MergeEvent>> {
        let decision = decide(&self.sims, tau);
        let weights = merge_weights(&self.sims, &decision)?;
        let events = decision
            .choices
            .iter()
            .enumerate()
            .map(|(i, c)| MergeEvent {
                step,
                layer,
                head,
                evicted_origin: self.outcome.origin_ids[i],
                target_origin: state.origin_ids()[self.sims.argmax[i]],
                max_similarity: self.sims.max[i],
                tau,
                merged: matches!(c, MergeChoice::Merge { .. }),
            })
            .collect();
        apply_merge(state, &self.outcome, &weights)?;
        Ok(events)
    }
}

/// Mean of row maxima pooled over several heads' prompt evictions.
pub fn pooled_prompt_threshold(pending: &[&SimilarityMatrix]) -> Option<f64> {
    let all: Vec<f64> = pending.iter().flat_map(|s| s.max.iter().copied()).collect();
    mean_of_maxima(&all)
}

/// Merge pipeline for a single cache with its own threshold.
pub fn merge_evicted(
    state: &mut CacheState,
    outcome: EvictionOutcome,
    beta: f64,
    phase: ThresholdPhase,
    step: usize,
    layer: usize,
    head: usize,
) -> Result<Vec<MergeEvent>> {
    let Some(pending) = PendingMerge::new(state, outcome)? else {
        return Ok(Vec::new());
    };
    let tau = update_threshold(state.tau, &pending.sims, beta, phase)?;
    state.tau = tau;
    pending.finish(state, tau, step, layer, head)
}
