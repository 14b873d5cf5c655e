//! End-to-end compression: prefill the context once, score it, then cut the
//! cache at any ratio with KVCompose, the unstructured variant, or one of
//! the baselines.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    broadcast_heads, pyramid_budgets, random_select, snapkv_select, streaming_select, tova_from_record,
    uniform_budgets, BaselinePolicy, DEFAULT_PYRAMID_SHAPE, DEFAULT_SINKS, DEFAULT_SNAP_WINDOW,
};
use crate::composer::{
    allocate_budgets, compact_cache, composite_indices, gather_selection, layer_importance, unstructured_compress,
    CompositeIndex, CompressedCache, HeadMaskSet, LayerImportance,
};
use crate::error::{Error, Result};
use crate::evaluator::compression_ratio;
use crate::model::{KVCache, Model, PrefillOutput, Token};
use crate::numerics::retained_count;
use crate::scoring::{capture_from_prefill, collect_attention, score_capture, AggregationChoice, ScoreStages, TaskSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub enum Policy {
    #[default]
    Kvcompose,
    /// Per-head independent selection, evaluated by key masking.
    Unstructured,
    Streaming { sinks: usize },
    Tova,
    Snapkv { window: usize },
    Pyramid { window: usize, shape: f64 },
    Random { seed: u64 },
}

/// Flat table form of [`Policy`]: `kind` plus the parameters that kind
/// accepts. Parameters of other kinds are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sinks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl TryFrom<PolicyRepr> for Policy {
    type Error = String;

    fn try_from(r: PolicyRepr) -> std::result::Result<Self, String> {
        let allowed: &[&str] = match r.kind.as_str() {
            "kvcompose" | "unstructured" | "tova" => &[],
            "streaming" => &["sinks"],
            "snapkv" => &["window"],
            "pyramid" => &["window", "shape"],
            "random" => &["seed"],
            other => return Err(format!("unknown policy kind `{other}`")),
        };
        let given = [
            ("sinks", r.sinks.is_some()),
            ("window", r.window.is_some()),
            ("shape", r.shape.is_some()),
            ("seed", r.seed.is_some()),
        ];
        if let Some((field, _)) = given.iter().find(|(f, set)| *set && !allowed.contains(f)) {
            return Err(format!("policy `{}` does not take `{field}`", r.kind));
        }
        let window = r.window.unwrap_or(DEFAULT_SNAP_WINDOW);
        Ok(match r.kind.as_str() {
            "kvcompose" => Policy::Kvcompose,
            "unstructured" => Policy::Unstructured,
            "tova" => Policy::Tova,
            "streaming" => Policy::Streaming {
                sinks: r.sinks.unwrap_or(DEFAULT_SINKS),
            },
            "snapkv" => Policy::Snapkv { window },
            "pyramid" => Policy::Pyramid {
                window,
                shape: r.shape.unwrap_or(DEFAULT_PYRAMID_SHAPE),
            },
            _ => Policy::Random {
                seed: r.seed.unwrap_or(0),
            },
        })
    }
}

impl From<Policy> for PolicyRepr {
    fn from(p: Policy) -> Self {
        let base = PolicyRepr {
            kind: p.name().to_string(),
            ..PolicyRepr::default()
        };
        match p {
            Policy::Kvcompose | Policy::Unstructured | Policy::Tova => base,
            Policy::Streaming { sinks } => PolicyRepr {
                sinks: Some(sinks),
                ..base
            },
            Policy::Snapkv { window } => PolicyRepr {
                window: Some(window),
                ..base
            },
            Policy::Pyramid { window, shape } => PolicyRepr {
                window: Some(window),
                shape: Some(shape),
                ..base
            },
            Policy::Random { seed } => PolicyRepr {
                seed: Some(seed),
                ..base
            },
        }
    }
}

impl Policy {
    pub fn baseline(&self) -> Option<BaselinePolicy> {
        match *self {
            Policy::Kvcompose | Policy::Unstructured => None,
            Policy::Streaming { sinks } => Some(BaselinePolicy::Streaming { sinks }),
            Policy::Tova => Some(BaselinePolicy::Tova),
            Policy::Snapkv { window } => Some(BaselinePolicy::Snapkv { window }),
            Policy::Pyramid { window, shape } => Some(BaselinePolicy::Pyramid { window, shape }),
            Policy::Random { seed } => Some(BaselinePolicy::Random { seed }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Kvcompose => "kvcompose",
            Policy::Unstructured => "unstructured",
            _ => self.baseline().expect("baseline").name(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.baseline() {
            Some(b) => b.validate(),
            None => Ok(()),
        }
    }

    fn uses_scores(&self) -> bool {
        matches!(self, Policy::Kvcompose | Policy::Unstructured)
    }
}

/// Everything about a context that does not depend on the ratio: the full
/// prefill (all attention rows) and, for score-driven policies, the
/// captured task attention.
#[derive(Debug, Clone)]
pub struct ContextAnalysis {
    pub context: Vec<Token>,
    pub prefill: PrefillOutput,
    pub capture: Option<crate::scoring::AttentionCapture>,
}

impl ContextAnalysis {
    pub fn new(model: &Model, context: &[Token], task_set: &TaskSet, policy: &Policy) -> Result<Self> {
        let prefill = model.prefill(context)?;
        let capture = if policy.uses_scores() {
            Some(match task_set {
                TaskSet::TaskAgnostic { window } => capture_from_prefill(model, &prefill, *window)?,
                TaskSet::TaskAware(_) => collect_attention(model, context, task_set)?,
            })
        } else {
            None
        };
        Ok(Self {
            context: context.to_vec(),
            prefill,
            capture,
        })
    }

    pub fn full_cache(&self) -> &KVCache {
        &self.prefill.cache
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }
}

/// Ratio-independent plan for one policy on one context.
#[derive(Debug, Clone)]
pub struct CompressionPlan {
    policy: Policy,
    stages: Option<ScoreStages>,
    composite: Option<(CompositeIndex, LayerImportance)>,
    snap_capture: Option<crate::scoring::AttentionCapture>,
}

impl CompressionPlan {
    pub fn new(model: &Model, analysis: &ContextAnalysis, agg: &AggregationChoice, policy: &Policy) -> Result<Self> {
        policy.validate()?;
        let mut plan = CompressionPlan {
            policy: *policy,
            stages: None,
            composite: None,
            snap_capture: None,
        };
        if policy.uses_scores() {
            let cap = analysis
                .capture
                .as_ref()
                .ok_or_else(|| Error::usage("analysis lacks an attention capture"))?;
            let stages = score_capture(cap, agg)?;
            if *policy == Policy::Kvcompose {
                let ci = composite_indices(&stages.scores)?;
                let imp = layer_importance(&ci, agg.head);
                plan.composite = Some((ci, imp));
            }
            plan.stages = Some(stages);
        }
        if let Policy::Snapkv { window } | Policy::Pyramid { window, .. } = *policy {
            let w = window.min(analysis.context_len());
            plan.snap_capture = Some(capture_from_prefill(model, &analysis.prefill, w)?);
        }
        Ok(plan)
    }

    pub fn stages(&self) -> Option<&ScoreStages> {
        self.stages.as_ref()
    }

    pub fn composite(&self) -> Option<&(CompositeIndex, LayerImportance)> {
        self.composite.as_ref()
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }
}

#[derive(Debug, Clone)]
pub enum Compressed {
    Structured(CompressedCache),
    /// Full cache plus per-head keep masks (no memory saved).
    Masked { cache: KVCache, masks: HeadMaskSet },
}

impl Compressed {
    /// The cache to decode against, and masks if any.
    pub fn decode_view(&self) -> (&KVCache, Option<&HeadMaskSet>) {
        match self {
            Compressed::Structured(c) => (&c.cache, None),
            Compressed::Masked { cache, masks } => (cache, Some(masks)),
        }
    }

    pub fn structured(&self) -> Option<&CompressedCache> {
        match self {
            Compressed::Structured(c) => Some(c),
            Compressed::Masked { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub policy: String,
    pub r_target: f64,
    pub r_achieved: f64,
    /// Rows per head kept at each layer (mean over heads when masked).
    pub budgets: Vec<f64>,
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let budgets: Vec<String> = self.budgets.iter().map(|b| b.to_string()).collect();
        write!(
            f,
            "policy={} r_target={} r_achieved={} budgets=[{}]",
            self.policy,
            self.r_target,
            self.r_achieved,
            budgets.join(",")
        )
    }
}

impl CompressionPlan {
    pub fn compress(&self, model: &Model, analysis: &ContextAnalysis, r: f64) -> Result<(Compressed, CompressionReport)> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config(format!("compression ratio {r} outside [0, 1]")));
        }
        let cfg = model.config();
        let n = analysis.context_len();
        let full = analysis.full_cache();
        let layers = cfg.layers;

        let compressed = match self.policy {
            Policy::Kvcompose => {
                let (ci, imp) = self.composite.as_ref().expect("kvcompose plan");
                let alloc = allocate_budgets(imp, r)?;
                Compressed::Structured(compact_cache(full, ci, &alloc)?)
            }
            Policy::Unstructured => {
                let stages = self.stages.as_ref().expect("scored plan");
                Compressed::Masked {
                    cache: full.clone(),
                    masks: unstructured_compress(&stages.scores, r)?,
                }
            }
            Policy::Streaming { sinks } => {
                let per_layer = uniform_budgets(layers, n, r)
                    .into_iter()
                    .map(|b| streaming_select(n, b, sinks.min(b)))
                    .collect::<Result<Vec<_>>>()?;
                Compressed::Structured(gather_selection(full, &broadcast_heads(per_layer, cfg.kv_heads), n)?)
            }
            Policy::Tova => {
                let per_layer = uniform_budgets(layers, n, r)
                    .into_iter()
                    .enumerate()
                    .map(|(l, b)| {
                        if b == 0 {
                            Ok(Vec::new())
                        } else {
                            tova_from_record(&analysis.prefill.attention, l, b)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Compressed::Structured(gather_selection(full, &broadcast_heads(per_layer, cfg.kv_heads), n)?)
            }
            Policy::Snapkv { .. } | Policy::Pyramid { .. } => {
                let budgets = match self.policy {
                    Policy::Pyramid { shape, .. } => pyramid_budgets(layers, n, r, shape)?,
                    _ => uniform_budgets(layers, n, r),
                };
                let cap = self.snap_capture.as_ref().expect("snapkv plan");
                let selection = budgets
                    .iter()
                    .enumerate()
                    .map(|(l, &b)| snapkv_select(cap, l, b, cap.task_tokens.min(b)))
                    .collect::<Result<Vec<_>>>()?;
                Compressed::Structured(gather_selection(full, &selection, n)?)
            }
            Policy::Random { seed } => {
                let per_layer = random_select(n, &uniform_budgets(layers, n, r), seed);
                Compressed::Structured(gather_selection(full, &broadcast_heads(per_layer, cfg.kv_heads), n)?)
            }
        };

        let (r_achieved, budgets) = match &compressed {
            Compressed::Structured(c) => (
                compression_ratio(&c.cache, full)?,
                c.budgets().into_iter().map(|b| b as f64).collect(),
            ),
            Compressed::Masked { masks, .. } => {
                let total = (masks.layers * masks.heads * masks.tokens) as f64;
                let kept = masks.kept_per_head();
                let per_layer = kept
                    .chunks(masks.heads)
                    .map(|h| h.iter().sum::<usize>() as f64 / masks.heads as f64)
                    .collect();
                (1.0 - masks.total_kept() as f64 / total, per_layer)
            }
        };
        Ok((
            compressed,
            CompressionReport {
                policy: self.policy.name().to_string(),
                r_target: r,
                r_achieved,
                budgets,
            },
        ))
    }
}

/// One-shot compression of `context` at ratio `r_target`.
pub fn compress(
    model: &Model,
    context: &[Token],
    task_set: &TaskSet,
    agg: &AggregationChoice,
    r_target: f64,
    policy: &Policy,
) -> Result<(Compressed, CompressionReport)> {
    let analysis = ContextAnalysis::new(model, context, task_set, policy)?;
    let plan = CompressionPlan::new(model, &analysis, agg, policy)?;
    plan.compress(model, &analysis, r_target)
}

/// Structured retention budget `⌊(1-r)·L·N⌋`.
pub fn structured_budget(layers: usize, context_len: usize, r: f64) -> usize {
    retained_count(r, layers * context_len)
}
