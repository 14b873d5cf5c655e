//! Attention-based token importance.
//!
//! Captured attention `A[ℓ, h_q, c, m]` (task token `m` onto context token
//! `c`) is reduced over task tokens, then over the query heads of each GQA
//! group, and finally each kv-head score gets the cross-head mean added.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PrefillOutput, Token};
use crate::numerics::{l2_norm, vecmat_into};

pub const DEFAULT_OBSERVATION_WINDOW: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSet {
    /// Known downstream task token sequences, each appended to the context.
    TaskAware(Vec<Vec<Token>>),
    /// The context scores itself: its last `window` tokens act as queries.
    TaskAgnostic { window: usize },
}

impl TaskSet {
    pub fn agnostic() -> Self {
        TaskSet::TaskAgnostic {
            window: DEFAULT_OBSERVATION_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggOp {
    Max,
    Avg,
}

impl AggOp {
    pub fn reduce(self, xs: impl IntoIterator<Item = f64>) -> f64 {
        match self {
            AggOp::Max => xs.into_iter().fold(f64::NEG_INFINITY, f64::max),
            AggOp::Avg => {
                let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
                sum / n as f64
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AggOp::Max => "max",
            AggOp::Avg => "avg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormVariant {
    #[serde(rename = "none")]
    None,
    /// Weight by the raw value norm `‖v_c‖`.
    #[serde(rename = "v-norm")]
    VNorm,
    /// Weight by the projected norm `‖v_c W^O_h‖`.
    #[serde(rename = "vo-norm")]
    VoNorm,
}

impl NormVariant {
    pub fn name(self) -> &'static str {
        match self {
            NormVariant::None => "none",
            NormVariant::VNorm => "v-norm",
            NormVariant::VoNorm => "vo-norm",
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationChoice {
    pub task: AggOp,
    pub group: AggOp,
    pub head: AggOp,
    #[serde(default = "default_norm")]
    pub norm: NormVariant,
    #[serde(default = "default_true")]
    pub mean_augment: bool,
}

fn default_norm() -> NormVariant {
    NormVariant::None
}

impl Default for AggregationChoice {
    /// Max over task tokens, average everywhere else, mean augmentation on.
    fn default() -> Self {
        Self {
            task: AggOp::Max,
            group: AggOp::Avg,
            head: AggOp::Avg,
            norm: NormVariant::None,
            mean_augment: true,
        }
    }
}

impl AggregationChoice {
    /// All 8 operator triples × mean on/off × 3 norm variants.
    pub fn ablation_grid() -> Vec<AggregationChoice> {
        let ops = [AggOp::Max, AggOp::Avg];
        let mut out = Vec::with_capacity(48);
        for task in ops {
            for group in ops {
                for head in ops {
                    for mean_augment in [true, false] {
                        for norm in [NormVariant::None, NormVariant::VNorm, NormVariant::VoNorm] {
                            out.push(AggregationChoice {
                                task,
                                group,
                                head,
                                norm,
                                mean_augment,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Short file-system friendly tag, e.g. `max-avg-avg_mean-on_none`.
    pub fn slug(&self) -> String {
        format!(
            "{}-{}-{}_mean-{}_{}",
            self.task.name(),
            self.group.name(),
            self.head.name(),
            if self.mean_augment { "on" } else { "off" },
            self.norm.name()
        )
    }
}

impl fmt::Display for AggregationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Agg({},{},{}), mean={}, norm={}",
            self.task.name(),
            self.group.name(),
            self.head.name(),
            if self.mean_augment { "on" } else { "off" },
            self.norm.name()
        )
    }
}

/// Attention of `M` task tokens onto `N` context tokens, plus value norms.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub layers: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub context_len: usize,
    pub task_tokens: usize,
    /// `[L × H_q × N × M]`
    pub attention: Vec<f64>,
    /// `‖v_c‖`, `[L × H_kv × N]`
    pub value_norms: Vec<f64>,
    /// `‖v_c W^O_h‖`, `[L × H_q × N]`
    pub projected_norms: Vec<f64>,
}

impl AttentionCapture {
    #[inline]
    pub fn at(&self, l: usize, h: usize, c: usize, m: usize) -> f64 {
        self.attention[((l * self.q_heads + h) * self.context_len + c) * self.task_tokens + m]
    }

    pub fn value_norm(&self, l: usize, kv_head: usize, c: usize) -> f64 {
        self.value_norms[(l * self.kv_heads + kv_head) * self.context_len + c]
    }

    pub fn projected_norm(&self, l: usize, q_head: usize, c: usize) -> f64 {
        self.projected_norms[(l * self.q_heads + q_head) * self.context_len + c]
    }

    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }
}

/// Value norms of the first `n` cached positions of a prefill.
fn value_norms(model: &Model, pre: &PrefillOutput, n: usize) -> (Vec<f64>, Vec<f64>) {
    let cfg = model.config();
    let dh = cfg.head_dim;
    let mut raw = Vec::with_capacity(cfg.layers * cfg.kv_heads * n);
    let mut projected = Vec::with_capacity(cfg.layers * cfg.q_heads * n);
    let mut buf = vec![0.0; cfg.d_model];
    for (l, w) in model.layer_weights().iter().enumerate() {
        let layer = pre.cache.layer(l);
        for g in 0..cfg.kv_heads {
            raw.extend((0..n).map(|c| l2_norm(layer.value_row(g, c))));
        }
        for h in 0..cfg.q_heads {
            let wo = w.head_output(h, dh);
            let g = cfg.kv_head_of(h);
            for c in 0..n {
                vecmat_into(layer.value_row(g, c), &wo, &mut buf);
                projected.push(l2_norm(&buf));
            }
        }
    }
    (raw, projected)
}

/// Builds a capture from a prefill whose recorded rows include query
/// positions `query_rows`, keeping only the first `context_len` key columns.
fn capture_rows(
    model: &Model,
    pre: &PrefillOutput,
    context_len: usize,
    query_rows: std::ops::Range<usize>,
) -> Vec<f64> {
    let cfg = model.config();
    let m = query_rows.len();
    let mut a = vec![0.0; cfg.layers * cfg.q_heads * context_len * m];
    for l in 0..cfg.layers {
        for h in 0..cfg.q_heads {
            for (mi, pos) in query_rows.clone().enumerate() {
                let row = pre.attention.row(l, h, pos);
                for (c, &w) in row.iter().take(context_len).enumerate() {
                    a[((l * cfg.q_heads + h) * context_len + c) * m + mi] = w;
                }
            }
        }
    }
    a
}

/// Task-agnostic capture from an existing prefill of the context alone.
pub fn capture_from_prefill(model: &Model, pre: &PrefillOutput, window: usize) -> Result<AttentionCapture> {
    let cfg = model.config();
    let n = pre.attention.len();
    if window == 0 {
        return Err(Error::usage("observation window must be at least 1"));
    }
    if window > n {
        return Err(Error::usage(format!(
            "observation window {window} exceeds context length {n}"
        )));
    }
    if pre.attention.first_row() > n - window {
        return Err(Error::usage("prefill did not record the observation window"));
    }
    let attention = capture_rows(model, pre, n, n - window..n);
    let (value_norms, projected_norms) = value_norms(model, pre, n);
    Ok(AttentionCapture {
        layers: cfg.layers,
        q_heads: cfg.q_heads,
        kv_heads: cfg.kv_heads,
        context_len: n,
        task_tokens: window,
        attention,
        value_norms,
        projected_norms,
    })
}

pub fn collect_attention(model: &Model, context: &[Token], task_set: &TaskSet) -> Result<AttentionCapture> {
    let n = context.len();
    if n == 0 {
        return Err(Error::usage("context must not be empty"));
    }
    match task_set {
        TaskSet::TaskAgnostic { window } => {
            if *window == 0 {
                return Err(Error::usage("observation window must be at least 1"));
            }
            let pre = model.prefill_recording(context, n.saturating_sub(*window))?;
            capture_from_prefill(model, &pre, *window)
        }
        TaskSet::TaskAware(tasks) => {
            if tasks.is_empty() || tasks.iter().any(Vec::is_empty) {
                return Err(Error::usage("task-aware scoring needs non-empty tasks"));
            }
            let cfg = model.config();
            let m_total: usize = tasks.iter().map(Vec::len).sum();
            let mut attention = vec![0.0; cfg.layers * cfg.q_heads * n * m_total];
            let mut norms = None;
            let mut m_off = 0;
            for task in tasks {
                let seq: Vec<Token> = context.iter().chain(task).copied().collect();
                let pre = model.prefill_recording(&seq, n)?;
                let part = capture_rows(model, &pre, n, n..seq.len());
                let mt = task.len();
                for lh in 0..cfg.layers * cfg.q_heads {
                    for c in 0..n {
                        let src = &part[(lh * n + c) * mt..(lh * n + c + 1) * mt];
                        let dst = (lh * n + c) * m_total + m_off;
                        attention[dst..dst + mt].copy_from_slice(src);
                    }
                }
                m_off += mt;
                if norms.is_none() {
                    norms = Some(value_norms(model, &pre, n));
                }
            }
            let (value_norms, projected_norms) = norms.expect("at least one task");
            Ok(AttentionCapture {
                layers: cfg.layers,
                q_heads: cfg.q_heads,
                kv_heads: cfg.kv_heads,
                context_len: n,
                task_tokens: m_total,
                attention,
                value_norms,
                projected_norms,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreStage {
    AggTask,
    AggGroup,
    Final,
}

/// Scores indexed `[layer][head][context token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub stage: ScoreStage,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub values: Vec<f64>,
}

impl ScoreTensor {
    pub fn new(stage: ScoreStage, layers: usize, heads: usize, tokens: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * heads * tokens {
            return Err(Error::shape(format!(
                "{} scores for a {layers}x{heads}x{tokens} tensor",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invariant("scores must be finite and non-negative"));
        }
        Ok(Self {
            stage,
            layers,
            heads,
            tokens,
            values,
        })
    }

    #[inline]
    pub fn get(&self, l: usize, h: usize, c: usize) -> f64 {
        self.values[(l * self.heads + h) * self.tokens + c]
    }

    pub fn row(&self, l: usize, h: usize) -> &[f64] {
        let start = (l * self.heads + h) * self.tokens;
        &self.values[start..start + self.tokens]
    }
}

pub fn aggregate_task(cap: &AttentionCapture, op: AggOp, norm: NormVariant) -> Result<ScoreTensor> {
    if cap.task_tokens == 0 {
        return Err(Error::usage("capture holds no task tokens"));
    }
    let (n, m) = (cap.context_len, cap.task_tokens);
    let g = cap.group_size();
    let mut values = Vec::with_capacity(cap.layers * cap.q_heads * n);
    for l in 0..cap.layers {
        for h in 0..cap.q_heads {
            for c in 0..n {
                let weight = match norm {
                    NormVariant::None => 1.0,
                    NormVariant::VNorm => cap.value_norm(l, h / g, c),
                    NormVariant::VoNorm => cap.projected_norm(l, h, c),
                };
                values.push(op.reduce((0..m).map(|mi| cap.at(l, h, c, mi) * weight)));
            }
        }
    }
    ScoreTensor::new(ScoreStage::AggTask, cap.layers, cap.q_heads, n, values)
}

pub fn aggregate_group(s: &ScoreTensor, kv_heads: usize, op: AggOp) -> Result<ScoreTensor> {
    if s.stage != ScoreStage::AggTask {
        return Err(Error::shape("group aggregation expects task-aggregated scores"));
    }
    if kv_heads == 0 || !s.heads.is_multiple_of(kv_heads) {
        return Err(Error::shape(format!(
            "{} query heads do not split into {kv_heads} groups",
            s.heads
        )));
    }
    let g = s.heads / kv_heads;
    let mut values = Vec::with_capacity(s.layers * kv_heads * s.tokens);
    for l in 0..s.layers {
        for kv in 0..kv_heads {
            for c in 0..s.tokens {
                values.push(op.reduce((0..g).map(|gi| s.get(l, kv * g + gi, c))));
            }
        }
    }
    ScoreTensor::new(ScoreStage::AggGroup, s.layers, kv_heads, s.tokens, values)
}

/// Adds the cross-head mean to every head's score when `enabled`.
pub fn augment_mean(s: &ScoreTensor, enabled: bool) -> Result<ScoreTensor> {
    if s.stage != ScoreStage::AggGroup {
        return Err(Error::shape("mean augmentation expects group-aggregated scores"));
    }
    let mut values = s.values.clone();
    if enabled {
        for l in 0..s.layers {
            for c in 0..s.tokens {
                let mean = (0..s.heads).map(|h| s.get(l, h, c)).sum::<f64>() / s.heads as f64;
                for h in 0..s.heads {
                    values[(l * s.heads + h) * s.tokens + c] += mean;
                }
            }
        }
    }
    ScoreTensor::new(ScoreStage::Final, s.layers, s.heads, s.tokens, values)
}

/// All three scoring stages for one capture.
#[derive(Debug, Clone)]
pub struct ScoreStages {
    pub agg_task: ScoreTensor,
    pub agg_group: ScoreTensor,
    pub scores: ScoreTensor,
}

pub fn score_capture(cap: &AttentionCapture, choice: &AggregationChoice) -> Result<ScoreStages> {
    let agg_task = aggregate_task(cap, choice.task, choice.norm)?;
    let agg_group = aggregate_group(&agg_task, cap.kv_heads, choice.group)?;
    let scores = augment_mean(&agg_group, choice.mean_augment)?;
    Ok(ScoreStages {
        agg_task,
        agg_group,
        scores,
    })
}
