//! Structured eviction baselines. Every selector returns the same count on
//! every head of a layer, so results plug into [`gather_selection`].
//!
//! [`gather_selection`]: crate::composer::gather_selection

use crate::composer::Provenance;
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Model, Token};
use crate::numerics::{desc_then_index, retained_count, SeededRng};
use crate::scoring::AttentionCapture;

pub const DEFAULT_SINKS: usize = 4;
pub const DEFAULT_SNAP_WINDOW: usize = 8;
pub const DEFAULT_PYRAMID_SHAPE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselinePolicy {
    Streaming { sinks: usize },
    Tova,
    Snapkv { window: usize },
    Pyramid { window: usize, shape: f64 },
    /// Uniformly random tokens per layer (shared by all heads); control arm.
    Random { seed: u64 },
}

impl BaselinePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselinePolicy::Streaming { sinks: 0 } => {
                Err(Error::config("streaming needs at least one sink token"))
            }
            BaselinePolicy::Snapkv { window } | BaselinePolicy::Pyramid { window, .. } if window == 0 => {
                Err(Error::config("observation window must be at least 1"))
            }
            BaselinePolicy::Pyramid { shape, .. } if !(shape.is_finite() && shape >= 0.0) => {
                Err(Error::config("pyramid shape must be finite and non-negative"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselinePolicy::Streaming { .. } => "streaming",
            BaselinePolicy::Tova => "tova",
            BaselinePolicy::Snapkv { .. } => "snapkv",
            BaselinePolicy::Pyramid { .. } => "pyramid",
            BaselinePolicy::Random { .. } => "random",
        }
    }
}

/// `⌊(1-r)·L·N⌋` split evenly over layers; the remainder goes to the lowest
/// layers, one token each.
pub fn uniform_budgets(layers: usize, context_len: usize, r: f64) -> Vec<usize> {
    let total = retained_count(r, layers * context_len);
    let (base, extra) = (total / layers, total % layers);
    (0..layers).map(|l| base + usize::from(l < extra)).collect()
}

/// Attention sinks plus a recency window, ascending.
pub fn streaming_select(n: usize, budget: usize, sinks: usize) -> Result<Vec<usize>> {
    if budget < sinks {
        return Err(Error::config(format!("budget {budget} is below the {sinks} sink tokens")));
    }
    if budget > n {
        return Err(Error::config(format!("budget {budget} exceeds context length {n}")));
    }
    let recent = budget - sinks;
    Ok((0..sinks).chain(n - recent..n).collect())
}

/// Online eviction replayed over a full prefill record: tokens join one at
/// a time, and while the set is over budget the token with the lowest
/// attention from the newest query (renormalized over the surviving set and
/// averaged over the layer's query heads) leaves. Ties evict the higher
/// index.
pub fn tova_from_record(record: &AttentionRecord, layer: usize, budget: usize) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::config("TOVA budget must be at least 1"));
    }
    if record.first_row() != 0 {
        return Err(Error::usage("TOVA replay needs every prefill row"));
    }
    let n = record.len();
    let heads = record.q_heads();
    let mut kept: Vec<usize> = Vec::with_capacity(budget + 1);
    for t in 0..n {
        kept.push(t);
        if kept.len() <= budget {
            continue;
        }
        let mut score = vec![0.0; kept.len()];
        for h in 0..heads {
            let row = record.row(layer, h, t);
            let z: f64 = kept.iter().map(|&j| row[j]).sum();
            for (s, &j) in score.iter_mut().zip(&kept) {
                *s += if z > 0.0 { row[j] / z } else { 0.0 };
            }
        }
        let mut victim = 0;
        for i in 1..kept.len() {
            // Lowest score; on a tie prefer evicting the later token.
            if score[i] <= score[victim] {
                victim = i;
            }
        }
        kept.remove(victim);
    }
    Ok(kept)
}

pub fn tova_select(model: &Model, context: &[Token], budgets: &[usize]) -> Result<Vec<Vec<usize>>> {
    let pre = model.prefill(context)?;
    if budgets.len() != model.config().layers {
        return Err(Error::shape("one TOVA budget per layer required"));
    }
    budgets
        .iter()
        .enumerate()
        .map(|(l, &b)| tova_from_record(&pre.attention, l, b))
        .collect()
}

/// Per kv-head: each context token is scored by its largest attention from
/// any of the last `window` rows (query heads of a group averaged); the
/// window itself is always kept and the best `budget - window` earlier
/// tokens fill the rest. Output per head is sorted ascending.
pub fn snapkv_select(cap: &AttentionCapture, layer: usize, budget: usize, window: usize) -> Result<Vec<Vec<usize>>> {
    let n = cap.context_len;
    if window > n || window > cap.task_tokens {
        return Err(Error::config(format!(
            "window {window} exceeds the context ({n}) or the captured rows ({})",
            cap.task_tokens
        )));
    }
    if budget < window {
        return Err(Error::config(format!("budget {budget} is below the window {window}")));
    }
    if budget > n {
        return Err(Error::config(format!("budget {budget} exceeds context length {n}")));
    }
    let g = cap.group_size();
    let m = cap.task_tokens;
    let prefix = n - window;
    let mut out = Vec::with_capacity(cap.kv_heads);
    for kv in 0..cap.kv_heads {
        let scores: Vec<f64> = (0..prefix)
            .map(|c| {
                (m - window..m)
                    .map(|mi| (0..g).map(|gi| cap.at(layer, kv * g + gi, c, mi)).sum::<f64>() / g as f64)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut order: Vec<usize> = (0..prefix).collect();
        order.sort_by(|&a, &b| desc_then_index((scores[a], a), (scores[b], b)));
        let mut keep: Vec<usize> = order[..budget - window].to_vec();
        keep.extend(prefix..n);
        keep.sort_unstable();
        out.push(keep);
    }
    Ok(out)
}

/// Linearly decreasing per-layer budgets summing to `⌊(1-r)·L·N⌋`, each in
/// `[1, N]`. `shape = 0` is uniform; larger values tilt budget toward the
/// lower layers. Fractional parts go to the largest remainders, lower layer
/// first on ties.
pub fn pyramid_budgets(layers: usize, context_len: usize, r: f64, shape: f64) -> Result<Vec<usize>> {
    if !(shape.is_finite() && shape >= 0.0) {
        return Err(Error::config("pyramid shape must be finite and non-negative"));
    }
    let total = retained_count(r, layers * context_len);
    let floor = 1usize;
    if total < layers * floor {
        return Err(Error::config(format!(
            "budget {total} cannot give each of {layers} layers {floor} token"
        )));
    }
    let weights: Vec<f64> = (0..layers)
        .map(|l| {
            let pos = if layers > 1 {
                1.0 - 2.0 * l as f64 / (layers - 1) as f64
            } else {
                0.0
            };
            (1.0 + shape * pos).max(1e-9)
        })
        .collect();

    // Water-filling: find the level λ with Σ clamp(λ·w_ℓ, floor, N) = total.
    // The left end of the bisection never overshoots the total.
    let filled = |lambda: f64| -> Vec<f64> {
        weights
            .iter()
            .map(|w| (lambda * w).clamp(floor as f64, context_len as f64))
            .collect()
    };
    let min_w = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, context_len as f64 / min_w);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid).iter().sum::<f64>() <= total as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let ideal = filled(lo);

    let mut budgets: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut short = total.saturating_sub(budgets.iter().sum());
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&a, &b| desc_then_index((ideal[a].fract(), a), (ideal[b].fract(), b)));
    while short > 0 {
        let before = short;
        for &l in &order {
            if short > 0 && budgets[l] < context_len {
                budgets[l] += 1;
                short -= 1;
            }
        }
        if short == before {
            return Err(Error::config("pyramid budgets cannot absorb the total"));
        }
    }
    Ok(budgets)
}

/// `budget` tokens per layer drawn uniformly without replacement, shared
/// by all heads of the layer.
pub fn random_select(n: usize, budgets: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::new(seed);
    budgets
        .iter()
        .map(|&b| {
            let mut pick = rng.sample_distinct(n, b.min(n));
            pick.sort_unstable();
            pick
        })
        .collect()
}

/// Replicates one per-layer token list onto every kv-head.
pub fn broadcast_heads(per_layer: Vec<Vec<usize>>, kv_heads: usize) -> Provenance {
    per_layer.into_iter().map(|rows| vec![rows; kv_heads]).collect()
}
