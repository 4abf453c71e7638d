//! End-to-end trace replay under a cache policy, plus the comparison and
//! density tables built on top of it.
//!
//! Every policy is replayed alongside an uncompressed reference computed
//! from the same trace, so each generation step yields an output drift
//! (L2 distance between compressed and full attention outputs) and a
//! retained attention mass (share of the full softmax mass that lands on
//! tokens still in the cache).
//!
//! Layers are independent during replay (traces carry fixed Q/K/V), so each
//! layer runs as its own lane on the rayon pool. Heads within a layer are
//! stepped in head order so a per-layer merge threshold is well defined.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CachePolicyConfig, Policy, ThresholdScope};
use crate::error::{Error, Result};
use crate::eviction::{init_prompt_scores, CacheState, ScoreMode};
use crate::layer_policy::{self, DensityClass, DensityReport, LayerBudget};
use crate::linalg;
use crate::merge::{self, MergeEvent, PendingMerge, ThresholdPhase};
use crate::trace::{read_trace, AttentionTrace};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub total_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub density: f64,
    pub class: DensityClass,
    pub budget: LayerBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    /// Generation step, starting at 1.
    pub step: usize,
    /// Token position of the step's query.
    pub position: usize,
    /// Cache entries per layer after the step, summed over heads.
    pub entries_per_layer: Vec<usize>,
    pub total_entries: usize,
    pub mean_retained_mass: f64,
    pub mean_drift: f64,
    pub max_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub final_entries: usize,
    pub evictions: usize,
    pub merges: usize,
    pub discards: usize,
    pub final_tau: Option<f64>,
    pub mean_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    /// Entries right after prompt-time eviction.
    pub prompt_entries: usize,
    pub peak_total_entries: usize,
    pub final_total_entries: usize,
    /// `sum over layers of budget * heads`; absent when some layer never compresses.
    pub steady_state_entries: Option<usize>,
    /// Entries an uncompressed cache holds at the end of the trace.
    pub full_cache_entries: usize,
    /// `1 - final_total_entries / full_cache_entries`.
    pub memory_reduction: f64,
    pub mean_drift: f64,
    pub max_drift: f64,
    pub mean_retained_mass: f64,
    pub min_retained_mass: f64,
    pub evictions: usize,
    pub merges: usize,
    pub discards: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTiming {
    pub prompt: Duration,
    pub generation: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub policy: Policy,
    pub config: CachePolicyConfig,
    pub trace: TraceSummary,
    pub layers: Vec<LayerSummary>,
    pub steps: Vec<StepRecord>,
    pub heads: Vec<HeadSummary>,
    pub summary: ReplaySummary,
    /// Wall-clock timings are kept out of the serialized report so that
    /// identical inputs give byte-identical JSON.
    #[serde(skip)]
    pub timing: PhaseTiming,
}

/// Eviction decisions of one cache for one step (`step == 0` is the prompt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecisionEvent {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub evicted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub report: ReplayReport,
    pub decisions: Vec<DecisionEvent>,
    pub merges: Vec<MergeEvent>,
    /// Attention outputs, indexed `[layer * heads + head][step - 1]`.
    pub outputs: Vec<Vec<Vec<f64>>>,
}

/// Serializes events as JSON lines.
pub fn to_jsonl<T: Serialize>(events: &[T]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

struct HeadLane {
    state: CacheState,
    evictions: usize,
    merges: usize,
    discards: usize,
    drifts: Vec<f64>,
    retained: Vec<f64>,
    outputs: Vec<Vec<f64>>,
}

struct LayerLane {
    layer: usize,
    heads: Vec<HeadLane>,
    shared_tau: Option<f64>,
    entries: Vec<usize>,
    prompt_entries: usize,
    decisions: Vec<DecisionEvent>,
    merges: Vec<MergeEvent>,
}

fn score_mode(policy: Policy) -> ScoreMode {
    match policy {
        Policy::Roco => ScoreMode::Mean,
        _ => ScoreMode::Cumulative,
    }
}

impl LayerLane {
    fn tally(&mut self, head: usize, events: Vec<MergeEvent>) {
        for e in &events {
            if e.merged {
                self.heads[head].merges += 1;
            } else {
                self.heads[head].discards += 1;
            }
        }
        self.merges.extend(events);
    }

    fn prompt_phase(&mut self, trace: &AttentionTrace, config: &CachePolicyConfig) -> Result<()> {
        let l = trace.prompt_len;
        let mut pending = Vec::with_capacity(trace.num_heads);
        for (head, lane) in self.heads.iter_mut().enumerate() {
            let h = trace.head(self.layer, head);
            let scores = init_prompt_scores(trace, self.layer, head)?;
            let outcome = lane
                .state
                .evict_prompt(&h.k.head_rows(l), &h.v.head_rows(l), &scores)?;
            lane.evictions += outcome.len();
            if !outcome.is_empty() {
                self.decisions.push(DecisionEvent {
                    step: 0,
                    layer: self.layer,
                    head,
                    evicted: outcome.origin_ids.clone(),
                });
            }
            pending.push(if config.merges() {
                PendingMerge::new(&lane.state, outcome)?
            } else {
                None
            });
        }
        self.prompt_entries = self.heads.iter().map(|h| h.state.len()).sum();
        if !config.merges() {
            return Ok(());
        }

        if config.threshold_scope == ThresholdScope::Layer {
            let sims: Vec<_> = pending.iter().flatten().map(|p| &p.sims).collect();
            self.shared_tau = merge::pooled_prompt_threshold(&sims);
        }
        for (head, p) in pending.into_iter().enumerate() {
            let Some(p) = p else { continue };
            let state = &mut self.heads[head].state;
            let tau = match config.threshold_scope {
                ThresholdScope::Head => merge::update_threshold(
                    state.tau,
                    &p.sims,
                    config.beta,
                    ThresholdPhase::Prompt,
                )?,
                ThresholdScope::Layer => self.shared_tau,
            };
            state.tau = tau;
            let events = p.finish(state, tau, 0, self.layer, head)?;
            self.tally(head, events);
        }
        if config.threshold_scope == ThresholdScope::Layer {
            let tau = self.shared_tau;
            self.heads.iter_mut().for_each(|h| h.state.tau = tau);
        }
        Ok(())
    }

    fn generation_phase(
        &mut self,
        trace: &AttentionTrace,
        config: &CachePolicyConfig,
    ) -> Result<()> {
        let d = trace.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        for pos in trace.prompt_len..trace.total_len {
            let step = pos - trace.prompt_len + 1;
            for head in 0..self.heads.len() {
                let h = trace.head(self.layer, head);
                let lane = &mut self.heads[head];
                let q = h.q.row(pos);
                let r = lane
                    .state
                    .step_generation(q, h.k.row(pos), h.v.row(pos), pos)?;

                // uncompressed reference over tokens 0..=pos
                let mut full: Vec<f64> = (0..=pos)
                    .map(|j| linalg::dot(q, h.k.row(j)) * scale)
                    .collect();
                linalg::softmax_in_place(&mut full);
                let mut reference = vec![0.0; d];
                for (j, w) in full.iter().enumerate() {
                    for (o, x) in reference.iter_mut().zip(h.v.row(j)) {
                        *o += w * x;
                    }
                }
                lane.drifts.push(linalg::l2_distance(&r.output, &reference));
                let kept: f64 = r.attended.iter().map(|&j| full[j]).sum();
                lane.retained.push(kept.min(1.0));
                lane.outputs.push(r.output);

                if r.outcome.is_empty() {
                    continue;
                }
                lane.evictions += r.outcome.len();
                self.decisions.push(DecisionEvent {
                    step,
                    layer: self.layer,
                    head,
                    evicted: r.outcome.origin_ids.clone(),
                });
                if !config.merges() {
                    continue;
                }
                let Some(p) = PendingMerge::new(&lane.state, r.outcome)? else {
                    continue;
                };
                let prev = match config.threshold_scope {
                    ThresholdScope::Head => lane.state.tau,
                    ThresholdScope::Layer => self.shared_tau,
                };
                let tau = merge::update_threshold(
                    prev,
                    &p.sims,
                    config.beta,
                    ThresholdPhase::Generation,
                )?;
                if config.threshold_scope == ThresholdScope::Layer {
                    self.shared_tau = tau;
                }
                lane.state.tau = tau;
                let events = p.finish(&mut lane.state, tau, step, self.layer, head)?;
                self.tally(head, events);
                if config.threshold_scope == ThresholdScope::Layer {
                    self.heads.iter_mut().for_each(|h| h.state.tau = tau);
                }
            }
            self.entries
                .push(self.heads.iter().map(|h| h.state.len()).sum());
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Replays `trace` under `config`.
pub fn run_replay(trace: &AttentionTrace, config: &CachePolicyConfig) -> Result<ReplayOutput> {
    config.validate()?;
    trace.validate()?;
    let densities = layer_policy::compute_densities(trace)?;
    let budgets = layer_policy::resolve_policy_budgets(&densities, config, trace.prompt_len)?;
    let mode = score_mode(config.policy);

    let mut lanes: Vec<LayerLane> = budgets
        .iter()
        .map(|b| LayerLane {
            layer: b.layer,
            heads: (0..trace.num_heads)
                .map(|_| HeadLane {
                    state: CacheState::new(*b, trace.head_dim, mode),
                    evictions: 0,
                    merges: 0,
                    discards: 0,
                    drifts: Vec::with_capacity(trace.gen_len()),
                    retained: Vec::with_capacity(trace.gen_len()),
                    outputs: Vec::with_capacity(trace.gen_len()),
                })
                .collect(),
            shared_tau: None,
            entries: Vec::with_capacity(trace.gen_len()),
            prompt_entries: 0,
            decisions: Vec::new(),
            merges: Vec::new(),
        })
        .collect();

    let started = Instant::now();
    lanes
        .par_iter_mut()
        .map(|lane| lane.prompt_phase(trace, config))
        .collect::<Result<()>>()?;
    let prompt_time = started.elapsed();
    let started = Instant::now();
    lanes
        .par_iter_mut()
        .map(|lane| lane.generation_phase(trace, config))
        .collect::<Result<()>>()?;
    let generation_time = started.elapsed();

    Ok(assemble(
        trace,
        config,
        &densities,
        budgets,
        lanes,
        PhaseTiming {
            prompt: prompt_time,
            generation: generation_time,
        },
    ))
}

fn assemble(
    trace: &AttentionTrace,
    config: &CachePolicyConfig,
    densities: &[f64],
    budgets: Vec<LayerBudget>,
    lanes: Vec<LayerLane>,
    timing: PhaseTiming,
) -> ReplayOutput {
    let gen_len = trace.gen_len();
    let heads_n = trace.num_heads;

    let mut steps = Vec::with_capacity(gen_len);
    for s in 0..gen_len {
        let entries_per_layer: Vec<usize> = lanes.iter().map(|l| l.entries[s]).collect();
        let drifts: Vec<f64> = lanes
            .iter()
            .flat_map(|l| l.heads.iter().map(move |h| h.drifts[s]))
            .collect();
        let retained: Vec<f64> = lanes
            .iter()
            .flat_map(|l| l.heads.iter().map(move |h| h.retained[s]))
            .collect();
        steps.push(StepRecord {
            step: s + 1,
            position: trace.prompt_len + s,
            total_entries: entries_per_layer.iter().sum(),
            entries_per_layer,
            mean_retained_mass: mean(&retained),
            mean_drift: mean(&drifts),
            max_drift: drifts.iter().copied().fold(0.0, f64::max),
        });
    }

    let mut heads = Vec::with_capacity(trace.num_layers * heads_n);
    let mut all_drift = Vec::new();
    let mut all_retained = Vec::new();
    let (mut evictions, mut merges, mut discards) = (0, 0, 0);
    for lane in &lanes {
        for (head, h) in lane.heads.iter().enumerate() {
            heads.push(HeadSummary {
                layer: lane.layer,
                head,
                final_entries: h.state.len(),
                evictions: h.evictions,
                merges: h.merges,
                discards: h.discards,
                final_tau: h.state.tau,
                mean_drift: mean(&h.drifts),
            });
            all_drift.extend_from_slice(&h.drifts);
            all_retained.extend_from_slice(&h.retained);
            evictions += h.evictions;
            merges += h.merges;
            discards += h.discards;
        }
    }

    let prompt_entries: usize = lanes.iter().map(|l| l.prompt_entries).sum();
    let final_total_entries: usize = lanes
        .iter()
        .flat_map(|l| l.heads.iter().map(|h| h.state.len()))
        .sum();
    let peak_total_entries = steps
        .iter()
        .map(|s| s.total_entries)
        .chain(std::iter::once(prompt_entries))
        .max()
        .unwrap_or(prompt_entries);
    let steady_state_entries = budgets
        .iter()
        .all(|b| !b.effectively_full)
        .then(|| budgets.iter().map(|b| b.size * heads_n).sum());
    let full_cache_entries = trace.total_len * trace.num_layers * heads_n;

    let summary = ReplaySummary {
        prompt_entries,
        peak_total_entries,
        final_total_entries,
        steady_state_entries,
        full_cache_entries,
        memory_reduction: 1.0 - final_total_entries as f64 / full_cache_entries as f64,
        mean_drift: mean(&all_drift),
        max_drift: all_drift.iter().copied().fold(0.0, f64::max),
        mean_retained_mass: if all_retained.is_empty() {
            1.0
        } else {
            mean(&all_retained)
        },
        min_retained_mass: all_retained.iter().copied().fold(1.0, f64::min),
        evictions,
        merges,
        discards,
    };

    let layers = budgets
        .iter()
        .zip(densities)
        .map(|(b, &d)| LayerSummary {
            layer: b.layer,
            density: d,
            class: DensityClass::classify(d, config.gate),
            budget: *b,
        })
        .collect();

    let mut decisions = Vec::new();
    let mut merge_log = Vec::new();
    let mut outputs = Vec::with_capacity(heads.len());
    for lane in lanes {
        decisions.extend(lane.decisions);
        merge_log.extend(lane.merges);
        outputs.extend(lane.heads.into_iter().map(|h| h.outputs));
    }
    decisions.sort_by_key(|d| (d.step, d.layer, d.head));
    merge_log.sort_by_key(|m| (m.step, m.layer, m.head));

    ReplayOutput {
        report: ReplayReport {
            policy: config.policy,
            config: config.clone(),
            trace: TraceSummary {
                model_name: trace.model_name.clone(),
                num_layers: trace.num_layers,
                num_heads: heads_n,
                head_dim: trace.head_dim,
                prompt_len: trace.prompt_len,
                total_len: trace.total_len,
            },
            layers,
            steps,
            heads,
            summary,
            timing,
        },
        decisions,
        merges: merge_log,
        outputs,
    }
}

/// Reads a trace file and replays it.
pub fn run_replay_path(path: impl AsRef<Path>, config: &CachePolicyConfig) -> Result<ReplayOutput> {
    let trace = read_trace(path)?;
    run_replay(&trace, config)
}

/// One row of a policy comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub result: std::result::Result<ReplaySummary, String>,
}

/// Column order of [`comparison_csv`].
pub const COMPARISON_COLUMNS: [&str; 14] = [
    "policy",
    "status",
    "prompt_entries",
    "peak_total_entries",
    "final_total_entries",
    "full_cache_entries",
    "memory_reduction",
    "mean_drift",
    "max_drift",
    "mean_retained_mass",
    "evictions",
    "merges",
    "discards",
    "error",
];

/// Replays every config against one trace. A failing config yields an
/// error row; the others still run.
pub fn compare_on(
    trace: &AttentionTrace,
    configs: &[CachePolicyConfig],
) -> Result<Vec<ComparisonRow>> {
    if configs.is_empty() {
        return Err(Error::Usage(
            "compare needs at least one policy config".into(),
        ));
    }
    Ok(configs
        .iter()
        .map(|c| ComparisonRow {
            policy: c.policy,
            result: run_replay(trace, c)
                .map(|o| o.report.summary)
                .map_err(|e| e.to_string()),
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_COLUMNS)?;
    for row in rows {
        let record: Vec<String> = match &row.result {
            Ok(s) => vec![
                row.policy.to_string(),
                "ok".into(),
                s.prompt_entries.to_string(),
                s.peak_total_entries.to_string(),
                s.final_total_entries.to_string(),
                s.full_cache_entries.to_string(),
                s.memory_reduction.to_string(),
                s.mean_drift.to_string(),
                s.max_drift.to_string(),
                s.mean_retained_mass.to_string(),
                s.evictions.to_string(),
                s.merges.to_string(),
                s.discards.to_string(),
                String::new(),
            ],
            Err(e) => {
                let mut r = vec![row.policy.to_string(), "error".into()];
                r.extend(std::iter::repeat_n(String::new(), 11));
                r.push(e.clone());
                r
            }
        };
        w.write_record(&record)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Serialize(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Comparison table for a trace file, as CSV.
pub fn compare_policies(
    trace_path: impl AsRef<Path>,
    configs: &[CachePolicyConfig],
) -> Result<String> {
    if configs.is_empty() {
        return Err(Error::Usage(
            "compare needs at least one policy config".into(),
        ));
    }
    let trace = read_trace(trace_path)?;
    comparison_csv(&compare_on(&trace, configs)?)
}

/// Per-layer density table for a trace file.
pub fn density_report(trace_path: impl AsRef<Path>, gate: f64) -> Result<DensityReport> {
    let trace = read_trace(trace_path)?;
    layer_policy::density_report(&trace, gate)
}
