//! Seeded synthetic traces from a tiny random-weight causal transformer.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`)
//! with standard normal draws from `rand_distr::StandardNormal`; both are
//! fixed algorithms, so a seed reproduces the same trace on every platform.
//!
//! Per layer the generator draws `W_Q`, `W_K`, `W_V`, `W_O` with entries
//! `N(0, 1/d_model)`, projects the residual stream into per-head Q/K/V, and
//! feeds the causal attention output back through `W_O` with an RMS-normed
//! residual update. Two depth-dependent knobs make deep layers look unlike
//! shallow ones:
//!
//! * a first-token logit boost (`sink_bias * depth`) written into the last
//!   channel of every head: `q[i][last] = 1` and `k[0][last] = sqrt(D) * boost`,
//!   `k[j][last] = 0` for `j > 0`, which adds exactly `boost` to every
//!   query's logit on token 0;
//! * a query temperature `1 + sharpening * depth`.
//!
//! `depth` runs linearly from 0 at layer 0 to 1 at the last layer, so layer 0
//! carries no sink and comparatively flat attention. No positional encoding
//! is applied.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AttentionTrace, HeadTensors};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// First-token logit boost applied at the deepest layer.
pub const DEFAULT_SINK_BIAS: f64 = 8.0;
pub const DEFAULT_SHARPENING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub sink_bias: f64,
    pub sharpening: f64,
}

impl SyntheticConfig {
    pub fn new(
        seed: u64,
        layers: usize,
        heads: usize,
        head_dim: usize,
        prompt_len: usize,
        gen_len: usize,
    ) -> Self {
        Self {
            seed,
            layers,
            heads,
            head_dim,
            prompt_len,
            gen_len,
            sink_bias: DEFAULT_SINK_BIAS,
            sharpening: DEFAULT_SHARPENING,
        }
    }

    pub fn generate(&self) -> Result<AttentionTrace> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("prompt_len", self.prompt_len),
            ("gen_len", self.gen_len),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("synthetic {name} must be >= 1")));
            }
        }
        if !self.sink_bias.is_finite() || !self.sharpening.is_finite() {
            return Err(Error::contract("sink_bias and sharpening must be finite"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total_len = self.prompt_len + self.gen_len;
        let hd = self.head_dim;
        let d_model = self.heads * hd;
        let sqrt_d = (hd as f64).sqrt();

        let mut x = gaussian(&mut rng, total_len, d_model, 1.0);
        let mut heads = Vec::with_capacity(self.layers * self.heads);

        for layer in 0..self.layers {
            let depth = if self.layers == 1 {
                0.0
            } else {
                layer as f64 / (self.layers - 1) as f64
            };
            let w_scale = 1.0 / (d_model as f64).sqrt();
            let wq = gaussian(&mut rng, d_model, d_model, w_scale);
            let wk = gaussian(&mut rng, d_model, d_model, w_scale);
            let wv = gaussian(&mut rng, d_model, d_model, w_scale);
            let wo = gaussian(&mut rng, d_model, d_model, w_scale);

            let q_all = linalg::matmul(&x, &wq)?;
            let k_all = linalg::matmul(&x, &wk)?;
            let v_all = linalg::matmul(&x, &wv)?;

            let boost = self.sink_bias * depth;
            let temperature = 1.0 + self.sharpening * depth;
            let mut attn_out = Matrix::zeros(total_len, d_model);

            for h in 0..self.heads {
                let mut q = column_block(&q_all, h * hd, hd);
                let mut k = column_block(&k_all, h * hd, hd);
                let v = column_block(&v_all, h * hd, hd);
                q.scale(temperature);
                if boost != 0.0 {
                    let last = hd - 1;
                    for i in 0..total_len {
                        q.set(i, last, 1.0);
                        k.set(i, last, 0.0);
                    }
                    k.set(0, last, sqrt_d * boost);
                }

                let probs = linalg::causal_softmax(&linalg::scaled_scores(&q, &k)?)?;
                let out = linalg::matmul(&probs, &v)?;
                for i in 0..total_len {
                    attn_out.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(out.row(i));
                }
                heads.push(HeadTensors { q, k, v });
            }

            let mixed = linalg::matmul(&attn_out, &wo)?;
            for i in 0..total_len {
                let row = x.row_mut(i);
                for (r, m) in row.iter_mut().zip(mixed.row(i)) {
                    *r += m;
                }
                let rms = (row.iter().map(|v| v * v).sum::<f64>() / d_model as f64).sqrt();
                if rms > 0.0 {
                    row.iter_mut().for_each(|v| *v /= rms);
                }
            }
        }

        Ok(AttentionTrace {
            model_name: format!("synthetic-seed{}", self.seed),
            flags: 0,
            num_layers: self.layers,
            num_heads: self.heads,
            head_dim: hd,
            prompt_len: self.prompt_len,
            total_len,
            heads,
        })
    }
}

/// Convenience wrapper using the default sink bias and sharpening.
pub fn generate_synthetic(
    seed: u64,
    layers: usize,
    heads: usize,
    head_dim: usize,
    prompt_len: usize,
    gen_len: usize,
) -> Result<AttentionTrace> {
    SyntheticConfig::new(seed, layers, heads, head_dim, prompt_len, gen_len).generate()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix::new(rows, cols, data).expect("gaussian samples are finite")
}

fn column_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * width);
    for r in m.row_iter() {
        data.extend_from_slice(&r[start..start + width]);
    }
    Matrix::new(m.rows(), width, data).expect("slice of a valid matrix")
}
