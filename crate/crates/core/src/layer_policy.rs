//! Layer-level budget allocation.
//!
//! Each layer's attention density is measured as the population variance of
//! the column sums of its head-averaged causal prompt attention. Dense
//! layers (variance at or below the gate `g`) get the enlarged budget
//! `alpha * S`; sparse layers get the base budget `S = round(r * L_prompt)`.

use serde::Serialize;

use crate::config::{CachePolicyConfig, Policy};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityClass {
    Dense,
    Sparse,
}

impl DensityClass {
    pub fn classify(density: f64, gate: f64) -> Self {
        if density <= gate {
            DensityClass::Dense
        } else {
            DensityClass::Sparse
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DensityClass::Dense => "dense",
            DensityClass::Sparse => "sparse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityReport {
    pub gate: f64,
    pub densities: Vec<f64>,
    pub classes: Vec<DensityClass>,
}

impl DensityReport {
    pub fn new(densities: Vec<f64>, gate: f64) -> Self {
        let classes = densities
            .iter()
            .map(|&d| DensityClass::classify(d, gate))
            .collect();
        Self {
            gate,
            densities,
            classes,
        }
    }

    /// CSV with header `layer,f_d,classification`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "f_d", "classification"])?;
        for (layer, (d, c)) in self.densities.iter().zip(&self.classes).enumerate() {
            w.write_record([layer.to_string(), d.to_string(), c.name().to_string()])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Serialize(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Attention density `F_d` of one layer.
pub fn compute_density(trace: &AttentionTrace, layer: usize) -> Result<f64> {
    trace.check_layer(layer)?;
    let l = trace.prompt_len;
    let mut mean = Matrix::zeros(l, l);
    for head in 0..trace.num_heads {
        let a = trace.prompt_attention(layer, head)?;
        for (m, v) in mean.data_mut().iter_mut().zip(a.data()) {
            *m += v;
        }
    }
    let inv = 1.0 / trace.num_heads as f64;
    mean.scale(inv);
    linalg::column_sum_variance(&mean)
}

pub fn compute_densities(trace: &AttentionTrace) -> Result<Vec<f64>> {
    (0..trace.num_layers)
        .map(|l| compute_density(trace, l))
        .collect()
}

pub fn density_report(trace: &AttentionTrace, gate: f64) -> Result<DensityReport> {
    Ok(DensityReport::new(compute_densities(trace)?, gate))
}

/// Resolved cache budget of one layer: `size == sinks + important + recent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerBudget {
    pub layer: usize,
    pub size: usize,
    pub sinks: usize,
    pub important: usize,
    pub recent: usize,
    /// The budget covers the whole prompt; the layer is never compressed.
    pub effectively_full: bool,
}

impl LayerBudget {
    /// A budget that never evicts.
    pub fn unbounded(layer: usize, prompt_len: usize, sinks: usize) -> Self {
        let sinks = sinks.min(prompt_len);
        Self {
            layer,
            size: prompt_len,
            sinks,
            important: 0,
            recent: prompt_len - sinks,
            effectively_full: true,
        }
    }
}

/// Splits `remaining` into `(important, recent)` in the ratio
/// `important_ratio : recent_ratio` by largest remainder, ties to important.
/// When `remaining >= 2` both parts are at least 1.
pub fn split_important_recent(
    remaining: usize,
    important_ratio: u32,
    recent_ratio: u32,
) -> (usize, usize) {
    let total = (important_ratio + recent_ratio) as u64;
    let num_n = remaining as u64 * important_ratio as u64;
    let num_m = remaining as u64 * recent_ratio as u64;
    let (mut n, rem_n) = ((num_n / total) as usize, num_n % total);
    let (mut m, rem_m) = ((num_m / total) as usize, num_m % total);
    if n + m < remaining {
        if rem_n >= rem_m {
            n += 1;
        } else {
            m += 1;
        }
    }
    if remaining >= 2 {
        if m == 0 {
            m = 1;
            n -= 1;
        } else if n == 0 {
            n = 1;
            m -= 1;
        }
    }
    (n, m)
}

/// `S = round(r * L_prompt)`.
pub fn base_budget(ratio: f64, prompt_len: usize) -> usize {
    (ratio * prompt_len as f64).round() as usize
}

fn split_layer(
    layer: usize,
    size: usize,
    prompt_len: usize,
    config: &CachePolicyConfig,
) -> Result<LayerBudget> {
    if size >= prompt_len {
        return Ok(LayerBudget::unbounded(layer, prompt_len, config.sinks));
    }
    if size < config.sinks + 2 {
        return Err(Error::config(format!(
            "layer {layer}: budget {size} cannot hold {} sink tokens plus one important and one recent token",
            config.sinks
        )));
    }
    let (important, recent) = split_important_recent(
        size - config.sinks,
        config.important_ratio,
        config.recent_ratio,
    );
    Ok(LayerBudget {
        layer,
        size,
        sinks: config.sinks,
        important,
        recent,
        effectively_full: false,
    })
}

/// Variance-gated budgets: dense layers get `min(round(alpha * S), L_prompt)`,
/// sparse layers get `S`. Sinks are never scaled by `alpha`.
pub fn resolve_budgets(
    densities: &[f64],
    config: &CachePolicyConfig,
    prompt_len: usize,
) -> Result<Vec<LayerBudget>> {
    config.validate()?;
    if prompt_len == 0 {
        return Err(Error::contract("prompt_len must be >= 1"));
    }
    let base = base_budget(config.ratio, prompt_len);
    densities
        .iter()
        .enumerate()
        .map(|(layer, &d)| {
            let size = match DensityClass::classify(d, config.gate) {
                DensityClass::Dense => {
                    ((config.alpha * base as f64).round() as usize).min(prompt_len)
                }
                DensityClass::Sparse => base,
            };
            split_layer(layer, size, prompt_len, config)
        })
        .collect()
}

/// Budgets for any policy. Baselines ignore densities, `alpha` and the gate.
pub fn resolve_policy_budgets(
    densities: &[f64],
    config: &CachePolicyConfig,
    prompt_len: usize,
) -> Result<Vec<LayerBudget>> {
    config.validate()?;
    let layers = densities.len();
    let base = base_budget(config.ratio, prompt_len);
    match config.policy {
        Policy::D2o => resolve_budgets(densities, config, prompt_len),
        Policy::Full => Ok((0..layers)
            .map(|l| LayerBudget::unbounded(l, prompt_len, config.sinks))
            .collect()),
        Policy::H2o | Policy::Roco => (0..layers)
            .map(|l| split_layer(l, base, prompt_len, config))
            .collect(),
        Policy::LocalWindow => (0..layers)
            .map(|layer| {
                if base >= prompt_len {
                    return Ok(LayerBudget::unbounded(layer, prompt_len, 0));
                }
                if base == 0 {
                    return Err(Error::config("local window budget rounds to zero tokens"));
                }
                Ok(LayerBudget {
                    layer,
                    size: base,
                    sinks: 0,
                    important: 0,
                    recent: base,
                    effectively_full: false,
                })
            })
            .collect(),
        Policy::Streaming => (0..layers)
            .map(|layer| {
                if base >= prompt_len {
                    return Ok(LayerBudget::unbounded(layer, prompt_len, config.sinks));
                }
                if base < config.sinks + 1 {
                    return Err(Error::config(format!(
                        "streaming budget {base} cannot hold {} sinks plus one recent token",
                        config.sinks
                    )));
                }
                Ok(LayerBudget {
                    layer,
                    size: base,
                    sinks: config.sinks,
                    important: 0,
                    recent: base - config.sinks,
                    effectively_full: false,
                })
            })
            .collect(),
    }
}
