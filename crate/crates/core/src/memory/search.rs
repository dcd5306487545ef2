//! Brute-force recovery of a `(layers, N, d, h)` configuration from
//! published multi-head / reuse totals.
//!
//! Used for table rows whose model configuration is not public. For every
//! `(d, h, N)` in the space the layer count is pinned by the multi-head
//! total, so only the two nearest integer layer counts are scored.

use super::{model_total_bytes, reduction_percent, ByteUnit, ModelPreset};
use crate::attention::Mechanism;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchTarget {
    pub mha: (f64, ByteUnit),
    pub reuse: (f64, ByteUnit),
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub head_dims: Vec<u64>,
    pub max_heads: u64,
    pub max_tokens: u64,
    pub max_layers: u64,
    pub bytes_per_element: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            head_dims: vec![32, 40, 64, 80, 96, 128, 160],
            max_heads: 32,
            max_tokens: 4096,
            max_layers: 64,
            bytes_per_element: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub preset: ModelPreset,
    pub mha_bytes: u64,
    pub reuse_bytes: u64,
    pub reduction: f64,
    /// Sum of relative errors of both totals plus the reduction error in
    /// fractional points; lower is better.
    pub score: f64,
    /// All three values round to the targets at two decimals (+-0.01).
    pub reproduces: bool,
}

/// Best `top` configurations in `space` for `target`, best first.
pub fn search_layer_config(target: &SearchTarget, space: &SearchSpace, top: usize) -> Result<Vec<SearchHit>> {
    if space.head_dims.is_empty() || space.max_heads == 0 || space.max_tokens == 0 || space.max_layers == 0 {
        return Err(Error::Parameter("empty search space".into()));
    }
    let target_mha = target.mha.0 * target.mha.1.factor();
    let mut hits: Vec<SearchHit> = Vec::new();
    for &d in &space.head_dims {
        for h in 1..=space.max_heads {
            for n in 1..=space.max_tokens {
                let per_layer = 4 * h * (n * n + n * d) * space.bytes_per_element;
                let est = target_mha / per_layer as f64;
                if est < 0.5 {
                    break;
                }
                let lo = (est.floor() as u64).max(1);
                for layers in [lo, lo + 1] {
                    if layers > space.max_layers {
                        continue;
                    }
                    let preset = ModelPreset::new("candidate", layers, n, d, h, space.bytes_per_element);
                    let hit = score(&preset, target)?;
                    insert_ranked(&mut hits, hit, top);
                }
            }
        }
    }
    Ok(hits)
}

fn score(preset: &ModelPreset, target: &SearchTarget) -> Result<SearchHit> {
    let mha_bytes = model_total_bytes(preset, Mechanism::MultiHead)?;
    let reuse_bytes = model_total_bytes(preset, Mechanism::Reuse)?;
    let reduction = reduction_percent(preset.tokens, preset.head_dim, preset.heads)?;
    let mha = mha_bytes as f64 / target.mha.1.factor();
    let reuse = reuse_bytes as f64 / target.reuse.1.factor();
    let rel = |got: f64, want: f64| (got - want).abs() / want;
    let within = |got: f64, want: f64| (got - want).abs() <= 0.01 + 1e-9;
    Ok(SearchHit {
        preset: preset.clone(),
        mha_bytes,
        reuse_bytes,
        reduction,
        score: rel(mha, target.mha.0) + rel(reuse, target.reuse.0) + (reduction - target.reduction).abs() / 100.0,
        reproduces: within(mha, target.mha.0) && within(reuse, target.reuse.0) && within(reduction, target.reduction),
    })
}

fn rank_key(h: &SearchHit) -> (f64, u64, u64, u64, u64) {
    let p = &h.preset;
    (h.score, p.layers, p.tokens, p.head_dim, p.heads)
}

fn insert_ranked(hits: &mut Vec<SearchHit>, hit: SearchHit, top: usize) {
    if top == 0 {
        return;
    }
    let key = rank_key(&hit);
    let pos = hits
        .iter()
        .position(|h| rank_key(h).partial_cmp(&key) == Some(std::cmp::Ordering::Greater))
        .unwrap_or(hits.len());
    if pos < top {
        hits.insert(pos, hit);
        hits.truncate(top);
    }
}
