//! Hand-built two-layer induction model.
//!
//! Residual channels: `CUR` (one-hot current token), `PREV` (one-hot of the
//! preceding token, written by layer 0), `OUT` (value-token logits, written
//! by layer 1) and a constant `BIAS` channel. Query head 0 of layer 0 is a
//! previous-token head driven purely by rotary phase; query head 0 of
//! layer 1 matches its current token against cached `PREV` channels in the
//! unrotated head dimensions and copies the matched value token. Query
//! head 1 of each layer is inert (zero query, zero output).
//!
//! Tokens `0..vocab/2` are keys, `vocab/2..vocab` are values.

use super::{LayerWeights, Model, ModelConfig, DEFAULT_MAX_CONTEXT, DEFAULT_ROPE_BASE};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const ROTARY_DIMS: usize = 16;
/// Minimum pre-softmax logit gap between the intended key and any other.
const SATURATION: f64 = 40.0;

/// Token layout of the induction vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InductionLayout {
    pub vocab: usize,
}

impl InductionLayout {
    pub fn key_tokens(&self) -> std::ops::Range<usize> {
        0..self.vocab / 2
    }

    pub fn value_tokens(&self) -> std::ops::Range<usize> {
        self.vocab / 2..self.vocab
    }
}

/// Smallest score deficit `Σ_f (1 - cos(θ_f (Δ - 1)))` over offsets
/// `Δ ∈ [0, max_offset]`, `Δ ≠ 1`.
fn min_phase_deficit(inv_freq: &[f64], max_offset: usize) -> f64 {
    (0..=max_offset)
        .filter(|&delta| delta != 1)
        .map(|delta| {
            let u = delta as f64 - 1.0;
            inv_freq.iter().map(|&t| 1.0 - (t * u).cos()).sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn construct_induction_model(num_pairs: usize, vocab: usize) -> Result<Model> {
    if num_pairs == 0 || vocab < 2 || vocab / 2 < num_pairs || vocab - vocab / 2 < 1 {
        return Err(Error::config(format!(
            "vocab {vocab} cannot hold {num_pairs} distinct keys plus values"
        )));
    }
    // 2·num_pairs + 1 prompt tokens must fit the context.
    if 2 * num_pairs + 1 > DEFAULT_MAX_CONTEXT {
        return Err(Error::config(format!("{num_pairs} pairs exceed the context")));
    }
    let v = vocab;
    let (cur, prev, out, bias) = (0, v, 2 * v, 3 * v);
    let mut head_dim = (ROTARY_DIMS + v).max((3 * v + 2) / 2);
    head_dim += head_dim % 2;
    let d = 2 * head_dim;

    let config = ModelConfig {
        layers: 2,
        q_heads: 2,
        kv_heads: 1,
        d_model: d,
        head_dim,
        vocab: v,
        seed: 0,
        rope_base: DEFAULT_ROPE_BASE,
        rotary_dims: Some(ROTARY_DIMS),
        max_context: DEFAULT_MAX_CONTEXT,
    };
    config.validate()?;

    let mut embed = Matrix::zeros(v, d);
    for t in 0..v {
        embed.set(t, cur + t, 1.0);
        embed.set(t, bias, 1.0);
    }

    let inv_freq: Vec<f64> = (0..ROTARY_DIMS / 2)
        .map(|f| DEFAULT_ROPE_BASE.powf(-((2 * f) as f64) / ROTARY_DIMS as f64))
        .collect();
    let deficit = min_phase_deficit(&inv_freq, config.max_context);
    let sqrt_dh = (head_dim as f64).sqrt();
    // score(Δ) = s/√d_h · Σ_f cos(θ_f (Δ-1)); peak at Δ = 1.
    let prev_scale = SATURATION / deficit * sqrt_dh;

    // Layer 0: previous-token head.
    let mut l0 = LayerWeights::zeros(&config);
    for (f, &theta) in inv_freq.iter().enumerate() {
        l0.wk.set(bias, 2 * f, 1.0);
        l0.wq.set(bias, 2 * f, prev_scale * theta.cos());
        l0.wq.set(bias, 2 * f + 1, -prev_scale * theta.sin());
    }
    for t in 0..v {
        l0.wv.set(cur + t, t, 1.0);
        l0.wo.set(t, prev + t, 1.0);
    }

    // Layer 1: match current token against PREV, copy the value token.
    let mut l1 = LayerWeights::zeros(&config);
    for t in 0..v {
        l1.wq.set(cur + t, ROTARY_DIMS + t, SATURATION * sqrt_dh);
        l1.wk.set(prev + t, ROTARY_DIMS + t, 1.0);
        l1.wv.set(cur + t, t, 1.0);
    }
    let layout = InductionLayout { vocab: v };
    for t in layout.value_tokens() {
        l1.wo.set(t, out + t, 1.0);
    }

    let mut unembed = Matrix::zeros(d, v);
    for t in 0..v {
        unembed.set(out + t, t, 1.0);
    }

    Model::from_weights(config, embed, vec![l0, l1], unembed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Token;
    use crate::numerics::{argmax, SeededRng};

    fn recall(model: &Model, prompt: &[Token]) -> Token {
        argmax(&model.prefill(prompt).unwrap().logits) as Token
    }

    /// Random `[a1 b1 … ak bk aq]` prompt and the dictionary answer.
    fn prompt(rng: &mut SeededRng, k: usize, vocab: usize) -> (Vec<Token>, Token) {
        let layout = InductionLayout { vocab };
        let keys = rng.sample_distinct(layout.key_tokens().len(), k);
        let vals = rng.sample_distinct(layout.value_tokens().len(), k);
        let mut p = Vec::new();
        let mut dict = std::collections::HashMap::new();
        for (a, b) in keys.iter().zip(&vals) {
            let (a, b) = (*a as Token, (layout.value_tokens().start + b) as Token);
            p.extend([a, b]);
            dict.insert(a, b);
        }
        let q = keys[rng.below(k)] as Token;
        p.push(q);
        (p, dict[&q])
    }

    #[test]
    fn single_pair() {
        let m = construct_induction_model(1, 8).unwrap();
        assert_eq!(recall(&m, &[1, 5, 1]), 5);
    }

    #[test]
    fn previous_token_head_is_saturated() {
        let m = construct_induction_model(8, 32).unwrap();
        let mut rng = SeededRng::new(0);
        let (p, _) = prompt(&mut rng, 8, 32);
        let out = m.prefill(&p).unwrap();
        for pos in 1..p.len() {
            let row = out.attention.row(0, 0, pos);
            assert!(row[pos - 1] > 1.0 - 1e-9, "pos {pos}: {}", row[pos - 1]);
        }
    }

    #[test]
    fn eight_pairs_recall_third_key() {
        let m = construct_induction_model(8, 32).unwrap();
        let mut rng = SeededRng::new(21);
        let keys = rng.sample_distinct(16, 8);
        let vals = rng.sample_distinct(16, 8);
        let mut p: Vec<Token> = Vec::new();
        for (a, b) in keys.iter().zip(&vals) {
            p.extend([*a as Token, (16 + b) as Token]);
        }
        p.push(keys[2] as Token);
        assert_eq!(recall(&m, &p), (16 + vals[2]) as Token);
    }

    #[test]
    fn full_cache_recall_is_perfect() {
        let m = construct_induction_model(8, 32).unwrap();
        let mut rng = SeededRng::new(99);
        for _ in 0..100 {
            let (p, answer) = prompt(&mut rng, 8, 32);
            assert_eq!(recall(&m, &p), answer);
        }
    }

    #[test]
    fn infeasible_sizes_rejected() {
        assert!(construct_induction_model(0, 8).is_err());
        assert!(construct_induction_model(5, 8).is_err());
    }
}
