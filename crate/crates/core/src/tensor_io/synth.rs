//! Seeded synthetic dumps with planted relevant prompt tokens.
//!
//! Every logit starts as `N(0, noise_sigma)`. In a contextual head, keys in
//! the prompt body (all prompt positions except the trailing `recent_len`)
//! additionally receive `cross_offset` plus a persistent per-token effect
//! `N(0, token_sigma)`, and planted keys receive `boost`. Heads not listed
//! as contextual are pure noise.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DType, Dump, HeadLocator, LogitTensor, VectorTensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitLayout {
    /// `[n, n]` causal square.
    #[default]
    Full,
    /// `[n - m, n]`: generation query rows only.
    GenerationRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualHead {
    pub layer: usize,
    pub head: usize,
    /// Added to planted keys' logits.
    pub boost: f64,
    /// Added to every prompt-body key's logits.
    #[serde(default)]
    pub cross_offset: f64,
}

impl ContextualHead {
    pub fn new(head: HeadLocator, boost: f64, cross_offset: f64) -> Self {
        Self {
            layer: head.layer,
            head: head.head,
            boost,
            cross_offset,
        }
    }

    pub fn locator(&self) -> HeadLocator {
        HeadLocator::new(self.layer, self.head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub total_len: usize,
    pub noise_sigma: f64,
    /// Spread of the persistent per-token offset in contextual heads.
    pub token_sigma: f64,
    /// Trailing prompt positions that behave like generated tokens.
    pub recent_len: usize,
    pub planted: Vec<usize>,
    pub contextual: Vec<ContextualHead>,
    pub dtype: DType,
    pub layout: LogitLayout,
    pub keys: bool,
    pub values: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            model_name: "synthetic".into(),
            num_layers: 2,
            num_heads: 2,
            head_dim: 16,
            prompt_len: 48,
            total_len: 64,
            noise_sigma: 1.0,
            token_sigma: 0.5,
            recent_len: 8,
            planted: Vec::new(),
            contextual: Vec::new(),
            dtype: DType::Float32,
            layout: LogitLayout::Full,
            keys: true,
            values: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(invalid("layers, heads and head_dim must be positive"));
        }
        if self.prompt_len == 0 || self.prompt_len > self.total_len {
            return Err(invalid(format!(
                "need 0 < prompt_len <= total_len, got {} / {}",
                self.prompt_len, self.total_len
            )));
        }
        if self.recent_len > self.prompt_len {
            return Err(invalid("recent_len exceeds prompt_len"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be positive"));
        }
        if !(self.token_sigma >= 0.0 && self.token_sigma.is_finite()) {
            return Err(invalid("token_sigma must be non-negative"));
        }
        if let Some(&i) = self.planted.iter().find(|&&i| i >= self.prompt_len) {
            return Err(invalid(format!(
                "planted index {i} is not a prompt position (prompt_len {})",
                self.prompt_len
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &self.contextual {
            if c.layer >= self.num_layers || c.head >= self.num_heads {
                return Err(invalid(format!("contextual head {} out of range", c.locator())));
            }
            if !seen.insert(c.locator()) {
                return Err(invalid(format!("contextual head {} listed twice", c.locator())));
            }
            if !(c.boost >= 0.0 && c.boost.is_finite()) {
                return Err(invalid(format!(
                    "boost for {} must be a non-negative finite value, got {}",
                    c.locator(),
                    c.boost
                )));
            }
            if !c.cross_offset.is_finite() {
                return Err(invalid("cross_offset must be finite"));
            }
        }
        Ok(())
    }
}

/// What the generator planted, for checking recovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub planted: Vec<usize>,
    pub contextual: Vec<ContextualHead>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub dump: Dump,
    pub truth: GroundTruth,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates a deterministic dump for `seed`.
///
/// Each head draws from its own random stream, so a head's tensors do not
/// depend on which other heads are contextual.
pub fn synth_logits(config: &SynthConfig, seed: u64) -> Result<Synthetic> {
    config.validate()?;
    let (m, n) = (config.prompt_len, config.total_len);
    let body_end = m - config.recent_len;
    let planted: BTreeSet<usize> = config.planted.iter().copied().collect();
    let dtype = config.dtype;

    let mut dump = Dump::empty(
        config.model_name.clone(),
        config.num_layers,
        config.num_heads,
        config.head_dim,
        m,
        n,
    );
    dump.dtype = dtype;

    for layer in 0..config.num_layers {
        for h in 0..config.num_heads {
            let head = HeadLocator::new(layer, h);
            let index = (layer * config.num_heads + h) as u64;
            let profile = config.contextual.iter().find(|c| c.locator() == head);

            let mut rng = stream(seed, 3 * index);
            let key_bias: Vec<f64> = (0..n)
                .map(|key| match profile {
                    Some(p) => {
                        let mut b = 0.0;
                        if key < body_end {
                            b += p.cross_offset + config.token_sigma * normal(&mut rng);
                        }
                        if planted.contains(&key) {
                            b += p.boost;
                        }
                        b
                    }
                    None => 0.0,
                })
                .collect();

            let first_row = match config.layout {
                LogitLayout::Full => 0,
                LogitLayout::GenerationRows => m,
            };
            let mut data = vec![0.0; (n - first_row) * n];
            for query in first_row..n {
                let row = &mut data[(query - first_row) * n..][..n];
                for (key, slot) in row.iter_mut().enumerate().take(query + 1) {
                    let z = config.noise_sigma * normal(&mut rng) + key_bias[key];
                    *slot = dtype.quantize(z);
                }
            }
            dump.logits
                .insert(head, LogitTensor::from_rows(head, m, n, first_row, data)?);

            let gaussian_rows = |stream_index: u64| {
                let mut rng = stream(seed, stream_index);
                let data: Vec<f64> = (0..n * config.head_dim)
                    .map(|_| dtype.quantize(normal(&mut rng)))
                    .collect();
                VectorTensor::new(head, config.head_dim, data)
            };
            if config.keys {
                dump.keys.insert(head, gaussian_rows(3 * index + 1)?);
            }
            if config.values {
                dump.values.insert(head, gaussian_rows(3 * index + 2)?);
            }
        }
    }

    Ok(Synthetic {
        dump,
        truth: GroundTruth {
            seed,
            planted: planted.into_iter().collect(),
            contextual: config.contextual.clone(),
        },
    })
}
