//! KV-cache compression for grouped-query transformers: attention-guided
//! token scoring, layer-adaptive budgets built from composite tokens,
//! eviction baselines and an evaluation harness.

pub mod baselines;
pub mod cache_io;
pub mod cli;
pub mod composer;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scoring;

pub use composer::{
    allocate_budgets, compact_cache, composite_indices, layer_importance, unstructured_compress,
    BudgetAllocation, CompositeIndex, CompressedCache, HeadMaskSet, LayerImportance,
};
pub use error::{Error, Result};
pub use evaluator::{compression_ratio, EvalReport, DEFAULT_GRID};
pub use model::{construct_induction_model, KVCache, Model, ModelConfig, Token};
pub use pipeline::{compress, Compressed, CompressionReport, Policy};
pub use scoring::{AggOp, AggregationChoice, NormVariant, TaskSet};
