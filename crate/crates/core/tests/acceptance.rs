//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line to
//! stderr (bypassing libtest capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use kvcomp_core::eviction::{CacheState, ScoreMode};
use kvcomp_core::harness::to_jsonl;
use kvcomp_core::layer_policy::{compute_densities, DensityClass, LayerBudget};
use kvcomp_core::merge::{decide, match_nearest, merge_weights, SimilarityMatrix};
use kvcomp_core::{generate_synthetic, run_replay, CachePolicyConfig, Matrix, Policy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRANSPARENCY_TOL: f64 = 1e-9;
const TRANSPARENCY_TIME_LIMIT: Duration = Duration::from_secs(10);
const ORACLE_INSTANCES: usize = 200;
const ARGMAX_TIE_TOL: f64 = 1e-12;
const WEIGHT_GROUPS: usize = 1000;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const DEGENERATION_TRACES: u64 = 50;
const DRIFT_TRACES: u64 = 20;
const DRIFT_PASS_FRACTION: f64 = 0.8;

// Shipped synthetic family.
const LAYERS: usize = 4;
const HEADS: usize = 4;
const HEAD_DIM: usize = 16;
const PROMPT_LEN: usize = 192;
const GEN_LEN: usize = 64;

fn record(name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn d2o(ratio: f64, alpha: f64) -> CachePolicyConfig {
    CachePolicyConfig {
        ratio,
        alpha,
        ..Default::default()
    }
}

#[test]
fn full_budget_transparency() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut traces = 0;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = rng.random_range(1..=48usize);
        let gen = rng.random_range(1..=(64 - prompt).min(16));
        let t = generate_synthetic(
            seed,
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            8,
            prompt,
            gen,
        )
        .unwrap();
        assert!(t.total_len <= 64);
        let full = run_replay(&t, &CachePolicyConfig::with_policy(Policy::Full)).unwrap();
        let comp = run_replay(&t, &d2o(1.0, 1.0)).unwrap();
        for (a, b) in full.outputs.iter().zip(&comp.outputs) {
            for (x, y) in a.iter().zip(b) {
                let d = x
                    .iter()
                    .zip(y)
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(d);
            }
        }
        worst = worst.max(comp.report.summary.max_drift);
        traces += 1;
    }
    let elapsed = start.elapsed();
    record(
        "full-budget transparency",
        worst <= TRANSPARENCY_TOL && elapsed < TRANSPARENCY_TIME_LIMIT,
        &format!("{traces} traces, max L2 {worst:.3e} (tol {TRANSPARENCY_TOL:e}), {elapsed:?}"),
    );
}

#[test]
fn steady_state_budget() {
    let t = generate_synthetic(7, LAYERS, HEADS, HEAD_DIM, PROMPT_LEN, GEN_LEN).unwrap();
    assert_eq!(t.total_len, 256);
    let mut details = Vec::new();
    let mut pass = true;
    for cfg in [
        d2o(0.2, 2.0),
        CachePolicyConfig {
            ratio: 0.2,
            ..CachePolicyConfig::with_policy(Policy::H2o)
        },
    ] {
        let out = run_replay(&t, &cfg).unwrap();
        let r = &out.report;
        let expected: usize = r.layers.iter().map(|l| l.budget.size * HEADS).sum();
        pass &= r.layers.iter().all(|l| !l.budget.effectively_full);
        // budgets are reached at prompt time, so every step must sit exactly on them
        for s in &r.steps {
            for (l, &e) in s.entries_per_layer.iter().enumerate() {
                pass &= e == r.layers[l].budget.size * HEADS;
            }
        }
        for h in &r.heads {
            pass &= h.final_entries == r.layers[h.layer].budget.size;
        }
        let sum = &r.summary;
        pass &= sum.final_total_entries == expected && sum.steady_state_entries == Some(expected);
        pass &= sum.memory_reduction == 1.0 - expected as f64 / sum.full_cache_entries as f64;
        details.push(format!(
            "{}: {} of {} entries, memory reduction {:.4}",
            cfg.policy, sum.final_total_entries, sum.full_cache_entries, sum.memory_reduction
        ));
    }
    record("steady-state budget", pass, &details.join("; "));
}

/// Brute force: sort the middle segment by score, take N.
fn prompt_oracle(scores: &[f64], t: usize, n: usize, m: usize) -> Vec<usize> {
    let len = scores.len();
    let mut middle: Vec<usize> = (t..len - m).collect();
    middle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = (0..t)
        .chain(middle.into_iter().take(n))
        .chain(len - m..len)
        .collect();
    keep.sort_unstable();
    keep
}

#[test]
fn eviction_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..ORACLE_INSTANCES {
        let len = rng.random_range(4..=64usize);
        let t = rng.random_range(0..=4usize.min(len - 3));
        let m = rng.random_range(1..=(len - t - 2));
        let n = rng.random_range(1..=(len - t - m - 1));
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.3) {
                    1.0
                } else {
                    rng.random_range(0.0..5.0)
                }
            })
            .collect();
        let keys = Matrix::new(len, 3, (0..len * 3).map(|i| i as f64).collect()).unwrap();
        let budget = LayerBudget {
            layer: 0,
            size: t + n + m,
            sinks: t,
            important: n,
            recent: m,
            effectively_full: false,
        };
        let mut state = CacheState::new(budget, 3, ScoreMode::Cumulative);
        let out = state.evict_prompt(&keys, &keys, &scores).unwrap();
        let expected = prompt_oracle(&scores, t, n, m);
        let evicted_expected: Vec<usize> = (0..len).filter(|i| !expected.contains(i)).collect();
        if state.origin_ids() != expected.as_slice() || out.origin_ids != evicted_expected {
            mismatches += 1;
        }
    }
    record(
        "eviction oracle equivalence",
        mismatches == 0,
        &format!("{ORACLE_INSTANCES} instances, {mismatches} mismatches"),
    );
}

#[test]
fn nearest_neighbor_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut rows = 0;
    for _ in 0..ORACLE_INSTANCES {
        let le = rng.random_range(1..=12usize);
        let lc = rng.random_range(1..=12usize);
        let d = rng.random_range(1..=8usize);
        let mut gen = |r: usize| {
            Matrix::new(
                r,
                d,
                (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let e = gen(le);
        let c = gen(lc);
        let sims = match_nearest(&e, &c).unwrap();
        for i in 0..le {
            let u: Vec<f64> = (0..lc)
                .map(|j| {
                    let mut dot = 0.0;
                    let mut ne = 0.0;
                    let mut nc = 0.0;
                    for k in 0..d {
                        dot += e.get(i, k) * c.get(j, k);
                        ne += e.get(i, k).powi(2);
                        nc += c.get(j, k).powi(2);
                    }
                    (dot / (ne.sqrt() * nc.sqrt())).clamp(-1.0, 1.0)
                })
                .collect();
            let mut best = 0;
            for j in 1..lc {
                if u[j] > u[best] {
                    best = j;
                }
            }
            let got = sims.argmax[i];
            if got != best && (u[got] - u[best]).abs() > ARGMAX_TIE_TOL {
                mismatches += 1;
            }
            rows += 1;
        }
    }
    record(
        "nearest-neighbor oracle equivalence",
        mismatches == 0,
        &format!("{ORACLE_INSTANCES} instances ({rows} evicted rows), {mismatches} mismatches"),
    );
}

/// Refolds each cache's logged similarity stream and compares tau bit for bit.
fn refold(beta: f64) -> (usize, usize, bool) {
    let t = generate_synthetic(11, 3, 2, HEAD_DIM, 128, 48).unwrap();
    let cfg = CachePolicyConfig {
        beta,
        ..d2o(0.2, 2.0)
    };
    let out = run_replay(&t, &cfg).unwrap();
    let mut streams: BTreeMap<(usize, usize), Vec<_>> = BTreeMap::new();
    for e in &out.merges {
        streams.entry((e.layer, e.head)).or_default().push(e);
    }
    let mut checked = 0;
    let mut mismatches = 0;
    let mut discard_rule = true;
    for events in streams.values() {
        let prompt: Vec<f64> = events
            .iter()
            .filter(|e| e.step == 0)
            .map(|e| e.max_similarity)
            .collect();
        let mut tau = if prompt.is_empty() {
            None
        } else {
            Some(prompt.iter().sum::<f64>() / prompt.len() as f64)
        };
        let mut last_step = None;
        for e in events {
            if e.step > 0 {
                assert_ne!(last_step, Some(e.step), "one eviction per step");
                last_step = Some(e.step);
                tau = Some(match tau {
                    Some(prev) => beta * e.max_similarity + (1.0 - beta) * prev,
                    None => e.max_similarity,
                });
            }
            checked += 1;
            if e.tau.map(f64::to_bits) != tau.map(f64::to_bits) {
                mismatches += 1;
            }
            discard_rule &= e.merged == (e.max_similarity >= e.tau.unwrap());
        }
        let final_tau = out
            .report
            .heads
            .iter()
            .find(|h| (h.layer, h.head) == (events[0].layer, events[0].head))
            .unwrap()
            .final_tau;
        if final_tau.map(f64::to_bits) != tau.map(f64::to_bits) {
            mismatches += 1;
        }
        if beta == 0.0 {
            let tau0 = events[0].tau;
            discard_rule &= events.iter().all(|e| e.tau == tau0);
        }
        if beta == 1.0 {
            discard_rule &= events
                .iter()
                .filter(|e| e.step > 0)
                .all(|e| e.tau == Some(e.max_similarity) && e.merged);
        }
    }
    (checked, mismatches, discard_rule)
}

#[test]
fn ema_recurrence() {
    let mut pass = true;
    let mut details = Vec::new();
    for beta in [0.7, 0.0, 1.0, 0.5, 0.9] {
        let (checked, mismatches, rules) = refold(beta);
        pass &= mismatches == 0 && rules && checked > 0;
        details.push(format!(
            "beta={beta}: {checked} events, {mismatches} mismatches"
        ));
    }
    record("EMA recurrence", pass, &details.join("; "));
}

#[test]
fn merge_weight_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut dominance = true;
    for _ in 0..WEIGHT_GROUPS {
        let n = rng.random_range(1..=16usize);
        let u: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.05) {
                    1.0
                } else {
                    rng.random_range(-1.0..=1.0)
                }
            })
            .collect();
        let sims = SimilarityMatrix {
            u: Matrix::new(n, 1, u.clone()).unwrap(),
            argmax: vec![0; n],
            max: u,
        };
        let w = merge_weights(&sims, &decide(&sims, Some(-1.0))).unwrap();
        let g = &w.groups[0];
        let total = g.conserved_weight + g.members.iter().map(|m| m.1).sum::<f64>();
        worst = worst.max((total - 1.0).abs());
        dominance &= g.members.iter().all(|&(_, we)| g.conserved_weight >= we);
    }
    record(
        "merge-weight normalization",
        worst <= WEIGHT_SUM_TOL && dominance,
        &format!("{WEIGHT_GROUPS} groups, max |sum-1| {worst:.3e}, conserved weight dominant: {dominance}"),
    );
}

#[test]
fn d2o_degenerates_to_h2o() {
    let mut identical = 0;
    for seed in 0..DEGENERATION_TRACES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let prompt = rng.random_range(40..=96usize);
        let gen = rng.random_range(4..=24usize);
        let t = generate_synthetic(
            seed,
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            8,
            prompt,
            gen,
        )
        .unwrap();
        let ratio = rng.random_range(0.15..0.6);
        let h2o = CachePolicyConfig {
            ratio,
            ..CachePolicyConfig::with_policy(Policy::H2o)
        };
        let d = CachePolicyConfig {
            ratio,
            alpha: 1.0,
            merge_enabled: false,
            ..Default::default()
        };
        let a = to_jsonl(&run_replay(&t, &h2o).unwrap().decisions).unwrap();
        let b = to_jsonl(&run_replay(&t, &d).unwrap().decisions).unwrap();
        if a == b && !a.is_empty() {
            identical += 1;
        }
    }
    record(
        "d2o -> h2o degeneration",
        identical == DEGENERATION_TRACES as usize,
        &format!("{identical}/{DEGENERATION_TRACES} decision logs byte-identical"),
    );
}

#[test]
fn density_gate_behavior() {
    let gate = CachePolicyConfig::default().gate;
    let mut ok = 0;
    let seeds = 10u64;
    let mut sample = String::new();
    for seed in 0..seeds {
        let t = generate_synthetic(seed, LAYERS, HEADS, HEAD_DIM, PROMPT_LEN, GEN_LEN).unwrap();
        let d = compute_densities(&t).unwrap();
        let classes: Vec<_> = d.iter().map(|&x| DensityClass::classify(x, gate)).collect();
        if classes[0] == DensityClass::Dense && classes[1..].contains(&DensityClass::Sparse) {
            ok += 1;
        }
        if seed == 0 {
            sample = d
                .iter()
                .map(|x| format!("{x:.1}"))
                .collect::<Vec<_>>()
                .join(", ");
        }
    }
    record(
        "density-gate behavior",
        ok == seeds,
        &format!("{ok}/{seeds} traces: layer 0 dense and a deeper layer sparse at g={gate} (seed 0 F_d: [{sample}])"),
    );
}

#[test]
fn drift_ordering() {
    let mut ordered = 0;
    let mut table = String::from("seed,d2o,h2o,local_window\n");
    for seed in 0..DRIFT_TRACES {
        let t = generate_synthetic(seed, LAYERS, HEADS, HEAD_DIM, PROMPT_LEN, GEN_LEN).unwrap();
        let drift = |p: Policy| {
            let cfg = CachePolicyConfig {
                ratio: 0.2,
                ..CachePolicyConfig::with_policy(p)
            };
            run_replay(&t, &cfg).unwrap().report.summary.mean_drift
        };
        let (a, b, c) = (
            drift(Policy::D2o),
            drift(Policy::H2o),
            drift(Policy::LocalWindow),
        );
        if a <= b && b <= c {
            ordered += 1;
        }
        table.push_str(&format!("{seed},{a:.6},{b:.6},{c:.6}\n"));
    }
    let _ = std::io::stderr().write_all(table.as_bytes());
    let fraction = ordered as f64 / DRIFT_TRACES as f64;
    record(
        "drift ordering",
        fraction >= DRIFT_PASS_FRACTION,
        &format!(
            "d2o <= h2o <= local_window on {ordered}/{DRIFT_TRACES} traces (need {:.0}%)",
            100.0 * DRIFT_PASS_FRACTION
        ),
    );
}
