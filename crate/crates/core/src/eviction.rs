//! Token-level eviction: attention sinks, top-N important tokens by
//! accumulated attention, and a recent window.
//!
//! Cache rows are always kept in original token order, so the sink segment
//! is the leading `sinks` rows and the recent window is the trailing
//! `recent` rows. Everything in between is the important segment.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::layer_policy::LayerBudget;
use crate::linalg::{self, Matrix};
use crate::trace::AttentionTrace;

/// How entries are ranked for eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Accumulated attention.
    Cumulative,
    /// Accumulated attention divided by the number of queries that saw the entry.
    Mean,
}

/// Per-(layer, head) compressed cache.
#[derive(Debug, Clone)]
pub struct CacheState {
    keys: Matrix,
    values: Matrix,
    attn_score: Vec<f64>,
    observations: Vec<u32>,
    origin_ids: Vec<usize>,
    /// EMA similarity threshold, unset until the first eviction is merged.
    pub tau: Option<f64>,
    budget: LayerBudget,
    mode: ScoreMode,
    sinks_present: usize,
    step: usize,
}

/// Rows removed from the cache by one eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionOutcome {
    pub keys: Matrix,
    pub values: Matrix,
    pub origin_ids: Vec<usize>,
}

impl EvictionOutcome {
    pub fn empty(head_dim: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, head_dim),
            values: Matrix::zeros(0, head_dim),
            origin_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.origin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_ids.is_empty()
    }
}

/// Result of one generation step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub outcome: EvictionOutcome,
    /// Attention output of the step's query over the cache (before eviction).
    pub output: Vec<f64>,
    /// Origin ids the query attended over, aligned with `weights`.
    pub attended: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Column sums of the causal prompt attention for one head.
pub fn init_prompt_scores(trace: &AttentionTrace, layer: usize, head: usize) -> Result<Vec<f64>> {
    Ok(linalg::column_sums(&trace.prompt_attention(layer, head)?))
}

fn rank_desc(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Row indices conserved at prompt time: the first `sinks`, the `important`
/// highest-priority rows of `[sinks, len - recent)` and the last `recent`,
/// in ascending order. Ties go to the lower index.
pub fn select_prompt_rows(priority: &[f64], budget: &LayerBudget) -> Vec<usize> {
    let len = priority.len();
    if budget.effectively_full || budget.size >= len {
        return (0..len).collect();
    }
    let middle_end = len - budget.recent;
    let mut middle: Vec<usize> = (budget.sinks..middle_end).collect();
    middle.sort_by(|&a, &b| rank_desc(priority, a, b));
    middle.truncate(budget.important);
    middle.sort_unstable();

    let mut keep: Vec<usize> = (0..budget.sinks).collect();
    keep.extend(middle);
    keep.extend(middle_end..len);
    keep
}

impl CacheState {
    pub fn new(budget: LayerBudget, head_dim: usize, mode: ScoreMode) -> Self {
        Self {
            keys: Matrix::zeros(0, head_dim),
            values: Matrix::zeros(0, head_dim),
            attn_score: Vec::new(),
            observations: Vec::new(),
            origin_ids: Vec::new(),
            tau: None,
            budget,
            mode,
            sinks_present: 0,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.origin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_ids.is_empty()
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn attn_score(&self) -> &[f64] {
        &self.attn_score
    }

    pub fn origin_ids(&self) -> &[usize] {
        &self.origin_ids
    }

    pub fn budget(&self) -> &LayerBudget {
        &self.budget
    }

    /// Number of generation steps taken.
    pub fn step(&self) -> usize {
        self.step
    }

    pub(crate) fn kv_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.keys, &mut self.values)
    }

    fn priority(&self) -> Vec<f64> {
        match self.mode {
            ScoreMode::Cumulative => self.attn_score.clone(),
            ScoreMode::Mean => self
                .attn_score
                .iter()
                .zip(&self.observations)
                .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
                .collect(),
        }
    }

    /// Prompt-time eviction over the full prompt K/V.
    ///
    /// `scores` are the accumulated prompt attention of each token; row `j`
    /// of a causal prompt is observed by `L - j` queries.
    pub fn evict_prompt(
        &mut self,
        keys: &Matrix,
        values: &Matrix,
        scores: &[f64],
    ) -> Result<EvictionOutcome> {
        if !self.is_empty() {
            return Err(Error::contract("evict_prompt on a non-empty cache"));
        }
        let len = scores.len();
        if len == 0 || keys.rows() != len || values.rows() != len {
            return Err(Error::contract(format!(
                "prompt K/V rows ({}, {}) must equal score length {len} > 0",
                keys.rows(),
                values.rows()
            )));
        }
        if keys.cols() != self.keys.cols() || values.cols() != self.values.cols() {
            return Err(Error::contract(
                "prompt K/V width does not match the cache head_dim",
            ));
        }
        if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::contract(
                "attention scores must be finite and non-negative",
            ));
        }

        self.attn_score = scores.to_vec();
        self.observations = (0..len).map(|j| (len - j) as u32).collect();
        let keep = select_prompt_rows(&self.priority(), &self.budget);
        let mut kept = vec![false; len];
        keep.iter().for_each(|&i| kept[i] = true);
        let dropped: Vec<usize> = (0..len).filter(|&i| !kept[i]).collect();

        self.keys = keys.select_rows(&keep);
        self.values = values.select_rows(&keep);
        self.attn_score = keep.iter().map(|&i| scores[i]).collect();
        self.observations = keep.iter().map(|&i| self.observations[i]).collect();
        self.origin_ids = keep;
        self.sinks_present = self.budget.sinks.min(len);

        Ok(EvictionOutcome {
            keys: keys.select_rows(&dropped),
            values: values.select_rows(&dropped),
            origin_ids: dropped,
        })
    }

    /// One decoding step: append `(k, v)` for token `origin`, attend with `q`,
    /// accumulate scores, and evict at most one entry if over budget.
    pub fn step_generation(
        &mut self,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        origin: usize,
    ) -> Result<StepResult> {
        if self.is_empty() {
            return Err(Error::contract("step_generation before evict_prompt"));
        }
        if q.len() != self.keys.cols() {
            return Err(Error::contract("query width does not match head_dim"));
        }
        if self.origin_ids.last().is_some_and(|&last| origin <= last) {
            return Err(Error::contract(format!(
                "token {origin} appended after token {}",
                self.origin_ids.last().unwrap()
            )));
        }
        self.keys.push_row(k)?;
        self.values.push_row(v)?;
        self.attn_score.push(0.0);
        self.observations.push(0);
        self.origin_ids.push(origin);
        self.step += 1;

        let scale = 1.0 / (q.len() as f64).sqrt();
        let mut weights: Vec<f64> = self
            .keys
            .row_iter()
            .map(|key| linalg::dot(q, key) * scale)
            .collect();
        linalg::softmax_in_place(&mut weights);

        let mut output = vec![0.0; self.values.cols()];
        for (w, value) in weights.iter().zip(self.values.row_iter()) {
            for (o, x) in output.iter_mut().zip(value) {
                *o += w * x;
            }
        }
        for ((s, n), w) in self
            .attn_score
            .iter_mut()
            .zip(&mut self.observations)
            .zip(&weights)
        {
            *s += w;
            *n += 1;
        }
        let attended = self.origin_ids.clone();

        let outcome = if !self.budget.effectively_full && self.len() > self.budget.size {
            self.evict_one()?
        } else {
            EvictionOutcome::empty(self.keys.cols())
        };

        Ok(StepResult {
            outcome,
            output,
            attended,
            weights,
        })
    }

    fn evict_one(&mut self) -> Result<EvictionOutcome> {
        let start = self.sinks_present;
        let end = self.len().saturating_sub(self.budget.recent);
        if start >= end {
            return Err(Error::contract(format!(
                "no evictable entry: {} rows, {} sinks, {} recent",
                self.len(),
                start,
                self.budget.recent
            )));
        }
        let priority = self.priority();
        let victim = (start..end)
            .min_by(|&a, &b| priority[a].total_cmp(&priority[b]).then(a.cmp(&b)))
            .expect("non-empty range");
        let key = self.keys.remove_row(victim);
        let value = self.values.remove_row(victim);
        self.attn_score.remove(victim);
        self.observations.remove(victim);
        let origin = self.origin_ids.remove(victim);
        Ok(EvictionOutcome {
            keys: Matrix::new(1, key.len(), key)?,
            values: Matrix::new(1, value.len(), value)?,
            origin_ids: vec![origin],
        })
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::trace::{generate_synthetic, HeadTensors};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn budget(size: usize, sinks: usize, important: usize, recent: usize) -> LayerBudget {
        LayerBudget {
            layer: 0,
            size,
            sinks,
            important,
            recent,
            effectively_full: false,
        }
    }

    /// Sort the middle segment by score and take the top N.
    fn conserved_oracle(scores: &[f64], t: usize, n: usize, m: usize) -> Vec<usize> {
        let len = scores.len();
        let mut middle: Vec<(f64, usize)> = (t..len - m).map(|i| (scores[i], i)).collect();
        // stable sort keeps lower indices first among equal scores
        middle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut out: Vec<usize> = (0..t).collect();
        out.extend(middle.iter().take(n).map(|&(_, i)| i));
        out.extend(len - m..len);
        out.sort_unstable();
        out
    }

    fn ramp(len: usize, dim: usize) -> Matrix {
        Matrix::new(len, dim, (0..len * dim).map(|x| x as f64 * 0.1).collect()).unwrap()
    }

    #[test]
    fn worked_prompt_example() {
        let scores = [0.0, 5.0, 1.0, 4.0, 9.0, 2.0, 0.0, 0.0];
        let b = budget(5, 1, 2, 2);
        assert_eq!(select_prompt_rows(&scores, &b), vec![0, 1, 4, 6, 7]);
        assert_eq!(conserved_oracle(&scores, 1, 2, 2), vec![0, 1, 4, 6, 7]);

        let k = ramp(8, 2);
        let mut state = CacheState::new(b, 2, ScoreMode::Cumulative);
        let out = state.evict_prompt(&k, &k, &scores).unwrap();
        assert_eq!(state.origin_ids(), &[0, 1, 4, 6, 7]);
        assert_eq!(out.origin_ids, vec![2, 3, 5]);
        assert_eq!(out.keys.row(1), k.row(3));
        assert_eq!(state.attn_score(), &[0.0, 5.0, 9.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let scores = [1.0, 3.0, 3.0, 3.0, 1.0];
        assert_eq!(
            select_prompt_rows(&scores, &budget(3, 1, 1, 1)),
            vec![0, 1, 4]
        );
    }

    #[test]
    fn full_budget_is_identity() {
        let k = ramp(6, 3);
        let mut full = budget(6, 1, 3, 2);
        full.effectively_full = true;
        let mut state = CacheState::new(full, 3, ScoreMode::Cumulative);
        let out = state.evict_prompt(&k, &k, &[1.0; 6]).unwrap();
        assert!(out.is_empty());
        assert_eq!(state.keys(), &k);
    }

    fn one_head(seed: u64, prompt: usize, gen: usize) -> (AttentionTrace, HeadTensors) {
        let t = generate_synthetic(seed, 1, 1, 4, prompt, gen).unwrap();
        let h = t.head(0, 0).clone();
        (t, h)
    }

    #[test]
    fn prompt_scores_basics() {
        let (t, _) = one_head(2, 1, 1);
        assert_eq!(init_prompt_scores(&t, 0, 0).unwrap(), vec![1.0]);
        let (t, h) = one_head(3, 12, 1);
        let s = init_prompt_scores(&t, 0, 0).unwrap();
        assert!((s.iter().sum::<f64>() - 12.0).abs() < 1e-9);
        // brute force: materialize every row of A_p
        for j in 0..12 {
            let mut col = 0.0;
            for i in j..12 {
                let logits: Vec<f64> = (0..=i)
                    .map(|c| linalg::dot(h.q.row(i), h.k.row(c)) / 2.0)
                    .collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                col += logits[j].exp() / z;
            }
            assert!((col - s[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_to_first_scores() {
        let c = 12.0;
        let q = Matrix::from_rows(&[[c, 0.0], [c, 0.0], [c, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[[c, 0.0], [0.0, c], [0.0, -c]]).unwrap();
        let t = AttentionTrace {
            model_name: "x".into(),
            flags: 0,
            num_layers: 1,
            num_heads: 1,
            head_dim: 2,
            prompt_len: 3,
            total_len: 3,
            heads: vec![HeadTensors { q, v: k.clone(), k }],
        };
        let s = init_prompt_scores(&t, 0, 0).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && s[1] < 1e-12 && s[2] < 1e-12);
    }

    fn run_steps(
        state: &mut CacheState,
        h: &HeadTensors,
        from: usize,
        to: usize,
    ) -> Vec<StepResult> {
        (from..to)
            .map(|t| {
                state
                    .step_generation(h.q.row(t), h.k.row(t), h.v.row(t), t)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn growth_then_steady_state() {
        let (t, h) = one_head(4, 20, 10);
        let b = budget(8, 2, 4, 2);
        let mut state = CacheState::new(b, 4, ScoreMode::Cumulative);
        let prompt_k = h.k.head_rows(20);
        let prompt_v = h.v.head_rows(20);
        let scores = init_prompt_scores(&t, 0, 0).unwrap();
        state.evict_prompt(&prompt_k, &prompt_v, &scores).unwrap();
        assert_eq!(state.len(), 8);
        for r in run_steps(&mut state, &h, 20, 30) {
            assert_eq!(r.outcome.len(), 1);
            assert_eq!(state.len(), 8);
        }

        // below budget: grows by one, nothing evicted
        let mut roomy = CacheState::new(budget(19, 2, 13, 4), 4, ScoreMode::Cumulative);
        let k6 = h.k.head_rows(6);
        let v6 = h.v.head_rows(6);
        roomy.evict_prompt(&k6, &v6, &scores[..6]).unwrap();
        let r = roomy
            .step_generation(h.q.row(6), h.k.row(6), h.v.row(6), 6)
            .unwrap();
        assert!(r.outcome.is_empty());
        assert_eq!(roomy.len(), 7);
    }

    /// Full attention of query `t` over keys `0..=t`.
    fn full_attention(h: &HeadTensors, t: usize) -> Vec<f64> {
        let d = h.q.cols();
        let logits: Vec<f64> = (0..=t)
            .map(|j| linalg::dot(h.q.row(t), h.k.row(j)) / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; d];
        for (j, w) in e.iter().enumerate() {
            for c in 0..d {
                out[c] += w / z * h.v.get(j, c);
            }
        }
        out
    }

    #[test]
    fn unbounded_cache_matches_full_attention() {
        let (t, h) = one_head(8, 15, 12);
        let mut b = budget(15, 4, 8, 3);
        b.effectively_full = true;
        let mut state = CacheState::new(b, 4, ScoreMode::Cumulative);
        let scores = init_prompt_scores(&t, 0, 0).unwrap();
        state
            .evict_prompt(&h.k.head_rows(15), &h.v.head_rows(15), &scores)
            .unwrap();
        for (i, r) in run_steps(&mut state, &h, 15, 27).into_iter().enumerate() {
            let expected = full_attention(&h, 15 + i);
            assert!(linalg::l2_distance(&r.output, &expected) < 1e-9);
            assert!(r.outcome.is_empty());
        }
    }

    #[test]
    fn step_errors() {
        let mut s = CacheState::new(budget(3, 1, 1, 1), 2, ScoreMode::Cumulative);
        assert!(s
            .step_generation(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 0)
            .is_err());
        let k = ramp(2, 2);
        s.evict_prompt(&k, &k, &[1.0, 1.0]).unwrap();
        assert!(s.evict_prompt(&k, &k, &[1.0, 1.0]).is_err());
        assert!(s
            .step_generation(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 1)
            .is_err());
    }

    #[test]
    fn mean_mode_ranks_by_average() {
        // token 1 has a larger sum but far more observations than token 2
        let scores = [0.0, 3.0, 2.5, 0.0, 0.0];
        let b = budget(3, 1, 1, 1);
        let k = ramp(5, 2);
        let mut cum = CacheState::new(b, 2, ScoreMode::Cumulative);
        cum.evict_prompt(&k, &k, &scores).unwrap();
        assert_eq!(cum.origin_ids(), &[0, 1, 4]);
        let mut mean = CacheState::new(b, 2, ScoreMode::Mean);
        mean.evict_prompt(&k, &k, &scores).unwrap();
        // 3.0 / 4 = 0.75 vs 2.5 / 3 = 0.833
        assert_eq!(mean.origin_ids(), &[0, 2, 4]);
    }

    proptest! {
        #[test]
        fn prompt_selection_matches_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = rng.random_range(4..=64usize);
            let t = rng.random_range(0..=3usize.min(len - 3));
            let m = rng.random_range(1..=(len - t - 2).max(1));
            let n = rng.random_range(1..=(len - t - m - 1).max(1));
            // coarse values so ties actually happen
            let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0..8) as f64 * 0.5).collect();
            let b = budget(t + n + m, t, n, m);
            prop_assert_eq!(select_prompt_rows(&scores, &b), conserved_oracle(&scores, t, n, m));
        }

        #[test]
        fn generation_invariants(seed in 0u64..500) {
            let (t, h) = one_head(seed, 24, 20);
            let b = budget(10, 2, 5, 3);
            let mut state = CacheState::new(b, 4, ScoreMode::Cumulative);
            let scores = init_prompt_scores(&t, 0, 0).unwrap();
            state.evict_prompt(&h.k.head_rows(24), &h.v.head_rows(24), &scores).unwrap();
            for step in 24..44 {
                let before: Vec<(usize, f64)> = state.origin_ids().iter().copied().zip(state.attn_score().iter().copied()).collect();
                let r = state.step_generation(h.q.row(step), h.k.row(step), h.v.row(step), step).unwrap();
                prop_assert_eq!(state.len(), 10);
                prop_assert!(state.origin_ids().windows(2).all(|w| w[0] < w[1]));
                prop_assert!(state.origin_ids().starts_with(&[0, 1]));
                let evicted = r.outcome.origin_ids[0];
                let recent: Vec<usize> = r.attended[r.attended.len() - 3..].to_vec();
                prop_assert!(!recent.contains(&evicted));
                for (o, s) in before {
                    if let Some(pos) = state.origin_ids().iter().position(|&x| x == o) {
                        prop_assert!(state.attn_score()[pos] >= s);
                    }
                }
                prop_assert!(state.attn_score().iter().all(|&s| s >= 0.0));
            }
        }
    }
}
