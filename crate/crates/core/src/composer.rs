//! Composite-token construction and layer-adaptive budgets.
//!
//! Each kv-head ranks context tokens independently; slot `k` of a layer is
//! the "composite token" made of every head's `k`-th best token. Layers
//! compete for a global budget through the head-marginalized slot scores,
//! and because those rows are non-increasing, every layer keeps a prefix
//! of its slots.

use crate::error::{Error, Result};
use crate::model::{KVCache, LayerCache};
use crate::numerics::{argsort_desc, desc_then_index, retained_count};
use crate::scoring::{AggOp, ScoreStage, ScoreTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeIndex {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    /// Per (layer, head) descending permutation, `[L × H_kv × N]`.
    pub idx: Vec<usize>,
    /// Scores in permuted order, `[L × H_kv × N]`.
    pub s_prime: Vec<f64>,
}

impl CompositeIndex {
    pub fn order(&self, l: usize, h: usize) -> &[usize] {
        let start = (l * self.heads + h) * self.tokens;
        &self.idx[start..start + self.tokens]
    }

    pub fn sorted_scores(&self, l: usize, h: usize) -> &[f64] {
        let start = (l * self.heads + h) * self.tokens;
        &self.s_prime[start..start + self.tokens]
    }
}

pub fn composite_indices(s: &ScoreTensor) -> Result<CompositeIndex> {
    if s.stage != ScoreStage::Final {
        return Err(Error::shape("composite indices need final scores"));
    }
    let mut idx = Vec::with_capacity(s.values.len());
    let mut s_prime = Vec::with_capacity(s.values.len());
    for l in 0..s.layers {
        for h in 0..s.heads {
            let row = s.row(l, h);
            let order = argsort_desc(row);
            s_prime.extend(order.iter().map(|&c| row[c]));
            idx.extend(order);
        }
    }
    Ok(CompositeIndex {
        layers: s.layers,
        heads: s.heads,
        tokens: s.tokens,
        idx,
        s_prime,
    })
}

/// Head-marginalized composite slot scores, `[L × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub layers: usize,
    pub tokens: usize,
    pub values: Vec<f64>,
}

impl LayerImportance {
    pub fn new(layers: usize, tokens: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * tokens {
            return Err(Error::shape(format!(
                "{} values for a {layers}x{tokens} importance table",
                values.len()
            )));
        }
        Ok(Self { layers, tokens, values })
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.values[l * self.tokens..(l + 1) * self.tokens]
    }
}

pub fn layer_importance(ci: &CompositeIndex, op: AggOp) -> LayerImportance {
    let mut values = Vec::with_capacity(ci.layers * ci.tokens);
    for l in 0..ci.layers {
        for k in 0..ci.tokens {
            values.push(op.reduce((0..ci.heads).map(|h| ci.sorted_scores(l, h)[k])));
        }
    }
    LayerImportance {
        layers: ci.layers,
        tokens: ci.tokens,
        values,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetAllocation {
    pub r_target: f64,
    pub b_total: usize,
    pub per_layer: Vec<usize>,
}

/// Keeps the top `⌊(1-r)·L·N⌋` entries of the global pool of slot scores.
/// Ties: higher score, then lower layer, then lower slot.
pub fn allocate_budgets(importance: &LayerImportance, r_target: f64) -> Result<BudgetAllocation> {
    if !(0.0..=1.0).contains(&r_target) {
        return Err(Error::config(format!("compression ratio {r_target} outside [0, 1]")));
    }
    let (l, n) = (importance.layers, importance.tokens);
    let b_total = retained_count(r_target, l * n);
    // Flat pool index p = layer * N + slot, so index order is (layer, slot).
    let mut pool: Vec<usize> = (0..l * n).collect();
    let key = |p: usize| (importance.values[p], p);
    if b_total < pool.len() && b_total > 0 {
        pool.select_nth_unstable_by(b_total - 1, |&a, &b| desc_then_index(key(a), key(b)));
    }
    let mut per_layer = vec![0; l];
    for &p in pool.iter().take(b_total) {
        per_layer[p / n] += 1;
    }
    Ok(BudgetAllocation {
        r_target,
        b_total,
        per_layer,
    })
}

/// Original context index behind every retained slot: `[layer][head][slot]`.
pub type Provenance = Vec<Vec<Vec<usize>>>;

/// A compacted cache with uniform rows per head inside each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    pub cache: KVCache,
    pub provenance: Provenance,
    /// Length of the context the cache was compressed from.
    pub context_len: usize,
}

impl CompressedCache {
    pub fn budgets(&self) -> Vec<usize> {
        self.cache.lens()
    }

    pub fn kept_tokens(&self) -> usize {
        self.budgets().iter().sum()
    }
}

/// Gathers the rows named by `selection[layer][head]` out of a full
/// (uncompressed) cache. Each layer must keep the same count on every head.
pub fn gather_selection(cache: &KVCache, selection: &Provenance, context_len: usize) -> Result<CompressedCache> {
    if selection.len() != cache.num_layers() {
        return Err(Error::shape(format!(
            "selection covers {} layers, cache has {}",
            selection.len(),
            cache.num_layers()
        )));
    }
    let layers = cache
        .layers()
        .iter()
        .zip(selection)
        .map(|(layer, rows)| {
            if layer.len() != context_len {
                return Err(Error::invariant("compaction expects an uncompressed cache"));
            }
            layer.gather(rows)
        })
        .collect::<Result<Vec<LayerCache>>>()?;
    Ok(CompressedCache {
        cache: KVCache::from_layers(layers),
        provenance: selection.clone(),
        context_len,
    })
}

/// Wraps a full cache with identity provenance.
pub fn uncompressed(cache: KVCache) -> CompressedCache {
    let provenance = cache
        .layers()
        .iter()
        .map(|l| vec![(0..l.len()).collect(); l.kv_heads()])
        .collect();
    let context_len = cache.lens().into_iter().max().unwrap_or(0);
    CompressedCache {
        cache,
        provenance,
        context_len,
    }
}

pub fn compact_cache(cache: &KVCache, ci: &CompositeIndex, alloc: &BudgetAllocation) -> Result<CompressedCache> {
    if alloc.per_layer.len() != ci.layers || cache.num_layers() != ci.layers {
        return Err(Error::shape("allocation, index and cache disagree on layer count"));
    }
    let mut selection = Vec::with_capacity(ci.layers);
    for (l, &budget) in alloc.per_layer.iter().enumerate() {
        if budget > ci.tokens {
            return Err(Error::invariant(format!(
                "layer {l} budget {budget} exceeds context length {}",
                ci.tokens
            )));
        }
        if cache.layer(l).kv_heads() != ci.heads {
            return Err(Error::shape(format!("layer {l} head count mismatch")));
        }
        selection.push(
            (0..ci.heads)
                .map(|h| ci.order(l, h)[..budget].to_vec())
                .collect(),
        );
    }
    gather_selection(cache, &selection, ci.tokens)
}

/// Per-(layer, kv-head) keep masks for the unstructured variant.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaskSet {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    masks: Vec<bool>,
}

impl HeadMaskSet {
    pub fn all_true(layers: usize, heads: usize, tokens: usize) -> Self {
        Self {
            layers,
            heads,
            tokens,
            masks: vec![true; layers * heads * tokens],
        }
    }

    pub fn from_masks(layers: usize, heads: usize, tokens: usize, masks: Vec<bool>) -> Result<Self> {
        if masks.len() != layers * heads * tokens {
            return Err(Error::shape("mask length does not match its shape"));
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            masks,
        })
    }

    pub fn mask(&self, l: usize, h: usize) -> &[bool] {
        let start = (l * self.heads + h) * self.tokens;
        &self.masks[start..start + self.tokens]
    }

    pub fn raw(&self) -> &[bool] {
        &self.masks
    }

    pub fn kept_per_head(&self) -> Vec<usize> {
        self.masks
            .chunks(self.tokens.max(1))
            .map(|m| m.iter().filter(|&&k| k).count())
            .collect()
    }

    pub fn total_kept(&self) -> usize {
        self.masks.iter().filter(|&&k| k).count()
    }
}

/// Keeps the top `⌊(1-r)·L·H_kv·N⌋` (layer, head, token) entries of a global
/// pool. Ties: higher score, then lower layer, head, token.
pub fn unstructured_compress(s: &ScoreTensor, r_target: f64) -> Result<HeadMaskSet> {
    if s.stage != ScoreStage::Final {
        return Err(Error::shape("unstructured selection needs final scores"));
    }
    if !(0.0..=1.0).contains(&r_target) {
        return Err(Error::config(format!("compression ratio {r_target} outside [0, 1]")));
    }
    let total = s.values.len();
    let keep = retained_count(r_target, total);
    let mut pool: Vec<usize> = (0..total).collect();
    if keep > 0 && keep < total {
        pool.select_nth_unstable_by(keep - 1, |&a, &b| {
            desc_then_index((s.values[a], a), (s.values[b], b))
        });
    }
    let mut masks = vec![false; total];
    for &p in pool.iter().take(keep) {
        masks[p] = true;
    }
    HeadMaskSet::from_masks(s.layers, s.heads, s.tokens, masks)
}
