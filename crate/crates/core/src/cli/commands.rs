use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::config::{parse_tokens, RunConfig};
use crate::cache_io::{model_bundle, write_cache, write_report, write_tensors, NamedTensor, TensorBundle, TensorData, CSV_HEADER};
use crate::composer::allocate_budgets;
use crate::error::{Error, Result};
use crate::evaluator::{prepare_tasks, sweep_prepared, EvalReport};
use crate::model::{Model, Token};
use crate::pipeline::{CompressionPlan, ContextAnalysis, Policy};
use crate::scoring::{AggregationChoice, ScoreTensor, TaskSet};

pub const ABLATION_CSV: &str = "ablation.csv";

fn out_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::usage("no output path: pass --out or set `out` in the config"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn read_context(path: &Path, model: &Model) -> Result<Vec<Token>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens = parse_tokens(&text, model.config().vocab)?;
    if tokens.len() > model.config().max_context {
        return Err(Error::config(format!(
            "context of {} tokens exceeds the model context {}",
            tokens.len(),
            model.config().max_context
        )));
    }
    Ok(tokens)
}

fn context_task_set(cfg: &RunConfig, context: &[Token]) -> Result<TaskSet> {
    match cfg.scoring {
        crate::evaluator::ScoringMode::Agnostic { window } => Ok(TaskSet::TaskAgnostic {
            window: window.min(context.len()),
        }),
        crate::evaluator::ScoringMode::Aware => Err(Error::config(
            "task-aware scoring needs task probes; use scoring.mode = \"agnostic\" with a context file",
        )),
    }
}

/// Compresses one context at `cfg.r_target` and writes the KVCF file.
pub fn cmd_compress(cfg: &RunConfig, context_path: &Path) -> Result<Vec<String>> {
    let out = out_path(cfg)?;
    if cfg.policy == Policy::Unstructured {
        return Err(Error::config("unstructured selections are key masks and cannot be written as KVCF"));
    }
    let model = cfg.build_model(cfg.seed)?;
    let context = read_context(context_path, &model)?;
    let task_set = context_task_set(cfg, &context)?;
    let analysis = ContextAnalysis::new(&model, &context, &task_set, &cfg.policy)?;
    let plan = CompressionPlan::new(&model, &analysis, &cfg.aggregation, &cfg.policy)?;
    let (compressed, report) = plan.compress(&model, &analysis, cfg.r_target)?;
    let cache = compressed
        .structured()
        .ok_or_else(|| Error::invariant("structured policy produced a masked cache"))?;
    ensure_parent(out)?;
    let bytes = write_cache(cache, out)?;
    info!("wrote {} ({bytes} bytes)", out.display());
    Ok(vec![report.to_string()])
}

fn summary_line(report: &EvalReport, path: &Path) -> String {
    let mut line = String::new();
    match report.auc {
        Some(a) => write!(line, "auc={a}").unwrap(),
        None => line.push_str("auc=none"),
    }
    for t in &report.max_ratio {
        write!(
            line,
            " max_r@{}={} max_r_interp@{}={}",
            t.epsilon0, t.r_grid, t.epsilon0, t.r_interpolated
        )
        .unwrap();
    }
    write!(line, " report={}", path.display()).unwrap();
    line
}

/// Evaluates the configured policy over the ratio grid and writes
/// `report.json` and `curve.csv` into the output directory.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<String>> {
    let out = out_path(cfg)?;
    let cases = cfg.build_cases()?;
    let settings = cfg.sweep_settings();
    let prepared = prepare_tasks(&cases, &settings.scoring, &settings.policy)?;
    let curve = sweep_prepared(&cases, &prepared, &settings)?;
    let report = EvalReport::from_curve(&settings, curve, &cfg.tolerances, &cases, cfg.resolved_json()?)?;
    let [json, _] = write_report(&report, out)?;
    Ok(vec![summary_line(&report, &json)])
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Sweeps all 48 aggregation configurations. Each lands in its own
/// subdirectory with the resolved `config.toml`, so any cell can be
/// re-run alone with `sweep`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<String>> {
    let out = out_path(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cases = cfg.build_cases()?;
    // Analysis depends on scoring and policy only; share it across cells.
    let prepared = prepare_tasks(&cases, &cfg.scoring, &cfg.policy)?;
    let mut combined = format!("label,{CSV_HEADER}\n");
    let mut lines = Vec::new();
    for choice in AggregationChoice::ablation_grid() {
        let cell = RunConfig {
            aggregation: choice,
            out: None,
            ..cfg.clone()
        };
        let settings = cell.sweep_settings();
        let curve = sweep_prepared(&cases, &prepared, &settings)?;
        let report = EvalReport::from_curve(&settings, curve, &cell.tolerances, &cases, cell.resolved_json()?)?;
        let dir = out.join(choice.slug());
        let [json, _] = write_report(&report, &dir)?;
        let config_path = dir.join("config.toml");
        fs::write(&config_path, cell.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        let label = csv_quote(&report.aggregation);
        for p in &report.grid {
            writeln!(
                combined,
                "{label},{:?},{:?},{:?},{:?},{:?},{:?}",
                p.r_target, p.r_achieved, p.reward_mean, p.reward_std, p.epsilon, p.kl_mean
            )
            .unwrap();
        }
        lines.push(format!("label={:?} {}", report.aggregation, summary_line(&report, &json)));
    }
    let csv_path = out.join(ABLATION_CSV);
    fs::write(&csv_path, combined).map_err(|e| Error::io(&csv_path, e))?;
    lines.push(format!("configs={} combined={}", lines.len(), csv_path.display()));
    Ok(lines)
}

fn score_tensor(name: &str, s: &ScoreTensor) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        dims: vec![s.layers, s.heads, s.tokens],
        data: TensorData::F32(s.values.iter().map(|&x| x as f32).collect()),
    }
}

fn u32_tensor(name: &str, dims: Vec<usize>, values: &[usize]) -> Result<NamedTensor> {
    let data = values
        .iter()
        .map(|&x| u32::try_from(x).map_err(|_| Error::shape("index exceeds u32")))
        .collect::<Result<Vec<_>>>()?;
    NamedTensor::new(name, dims, TensorData::U32(data))
}

/// Writes the score stages of one context (`S_agg_task`, `S_agg_group`,
/// `S`, `idx`, `I` and the budgets at `r_target`) to `scores.kvct`.
pub fn cmd_dump_scores(cfg: &RunConfig, context_path: Option<&Path>) -> Result<Vec<String>> {
    let out = out_path(cfg)?;
    let model = cfg.build_model(cfg.seed)?;
    let (context, task_set) = match context_path {
        Some(p) => {
            let context = read_context(p, &model)?;
            let ts = context_task_set(cfg, &context)?;
            (context, ts)
        }
        None => {
            let task = cfg
                .build_tasks(&model, cfg.seed)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::config("no tasks to draw a context from"))?;
            (task.context().to_vec(), task.task_set(&cfg.scoring))
        }
    };
    let policy = Policy::Kvcompose;
    let analysis = ContextAnalysis::new(&model, &context, &task_set, &policy)?;
    let plan = CompressionPlan::new(&model, &analysis, &cfg.aggregation, &policy)?;
    let stages = plan.stages().ok_or_else(|| Error::invariant("missing score stages"))?;
    let (ci, imp) = plan.composite().ok_or_else(|| Error::invariant("missing composite index"))?;
    let alloc = allocate_budgets(imp, cfg.r_target)?;

    let tensors = vec![
        score_tensor("S_agg_task", &stages.agg_task),
        score_tensor("S_agg_group", &stages.agg_group),
        score_tensor("S", &stages.scores),
        u32_tensor("idx", vec![ci.layers, ci.heads, ci.tokens], &ci.idx)?,
        NamedTensor::new(
            "I",
            vec![imp.layers, imp.tokens],
            TensorData::F32(imp.values.iter().map(|&x| x as f32).collect()),
        )?,
        u32_tensor("budgets", vec![alloc.per_layer.len()], &alloc.per_layer)?,
    ];
    let bundle = TensorBundle {
        meta: serde_json::json!({
            "aggregation": cfg.aggregation.to_string(),
            "r_target": cfg.r_target,
            "context_len": context.len(),
        })
        .to_string(),
        tensors,
    };
    let path: PathBuf = if out.extension().is_some() { out.to_path_buf() } else { out.join("scores.kvct") };
    ensure_parent(&path)?;
    write_tensors(&bundle, &path)?;
    Ok(bundle
        .tensors
        .iter()
        .map(|t| format!("tensor={} shape={:?}", t.name, t.dims))
        .chain([format!("file={}", path.display())])
        .collect())
}

/// Writes the configured model's weights (f64) with its config as metadata.
pub fn cmd_gen_model(cfg: &RunConfig) -> Result<Vec<String>> {
    let out = out_path(cfg)?;
    let model = cfg.build_model(cfg.seed)?;
    ensure_parent(out)?;
    let bytes = write_tensors(&model_bundle(&model)?, out)?;
    let c = model.config();
    Ok(vec![format!(
        "layers={} q_heads={} kv_heads={} head_dim={} d_model={} vocab={} bytes={bytes} file={}",
        c.layers,
        c.q_heads,
        c.kv_heads,
        c.head_dim,
        c.d_model,
        c.vocab,
        out.display()
    )])
}
