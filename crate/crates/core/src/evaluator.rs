//! Evaluation protocol: compression ratio, task rewards, relative
//! degradation ε, ratio sweeps, AUC and the largest ratio within a
//! tolerance.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::uncompressed;
use crate::error::{Error, Result};
use crate::model::{InductionLayout, KVCache, Model, Token};
use crate::numerics::{argmax, softmax_in_place, SeededRng};
use crate::pipeline::{CompressionPlan, Compressed, ContextAnalysis, Policy};
use crate::scoring::{AggregationChoice, TaskSet};

/// The ratio grid used throughout the accuracy-vs-compression curves.
pub const DEFAULT_GRID: [f64; 9] = [0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const DEFAULT_TOLERANCES: [f64; 2] = [0.10, 0.20];
pub const DEFAULT_AGREEMENT_STEPS: usize = 32;

/// Key plus value entries of a cache with `tokens` rows per head.
pub fn cache_entry_count(layers: u64, kv_heads: u64, tokens: u64, head_dim: u64) -> u64 {
    layers * kv_heads * tokens * head_dim * 2
}

/// `1 - |compressed| / |full|`, counting per-head rows of keys and values.
pub fn compression_ratio(compressed: &KVCache, full: &KVCache) -> Result<f64> {
    let full_entries = full.entry_count();
    if full_entries == 0 {
        return Err(Error::usage("full cache is empty"));
    }
    if compressed.num_layers() != full.num_layers() {
        return Err(Error::shape("caches have different layer counts"));
    }
    Ok(1.0 - compressed.entry_count() as f64 / full_entries as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    /// Greedy next token after the prompt must equal `answer`.
    Recall { answer: Token },
    /// Teacher-forced agreement with the full-cache greedy continuation.
    Agreement { reference: Vec<Token> },
}

/// A prompt whose last token is the query fed after the (compressed)
/// context cache; everything before it is the context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: usize,
    pub prompt: Vec<Token>,
    pub kind: TaskKind,
    /// Probe sequences for task-aware scoring.
    pub probes: Vec<Vec<Token>>,
}

impl TaskInstance {
    pub fn context(&self) -> &[Token] {
        &self.prompt[..self.prompt.len() - 1]
    }

    pub fn query(&self) -> Token {
        *self.prompt.last().expect("non-empty prompt")
    }

    /// Tokens fed to the decoder, one per scored step.
    pub fn decode_inputs(&self) -> Vec<Token> {
        match &self.kind {
            TaskKind::Recall { .. } => vec![self.query()],
            TaskKind::Agreement { reference } => std::iter::once(self.query())
                .chain(reference.iter().take(reference.len().saturating_sub(1)).copied())
                .collect(),
        }
    }

    pub fn targets(&self) -> Vec<Token> {
        match &self.kind {
            TaskKind::Recall { answer } => vec![*answer],
            TaskKind::Agreement { reference } => reference.clone(),
        }
    }

    pub fn task_set(&self, mode: &ScoringMode) -> TaskSet {
        match mode {
            ScoringMode::Agnostic { window } => TaskSet::TaskAgnostic {
                window: (*window).min(self.context().len()),
            },
            ScoringMode::Aware => TaskSet::TaskAware(self.probes.clone()),
        }
    }
}

/// Random `[a1 b1 … ak bk aq]` prompt for the induction model; distinct keys
/// and distinct values. Probes ask for every key in the context.
pub fn recall_task(rng: &mut SeededRng, vocab: usize, pairs: usize, id: usize) -> Result<TaskInstance> {
    let layout = InductionLayout { vocab };
    let (keys_n, vals_n) = (layout.key_tokens().len(), layout.value_tokens().len());
    if pairs == 0 || pairs > keys_n || pairs > vals_n {
        return Err(Error::config(format!("cannot draw {pairs} distinct pairs from vocab {vocab}")));
    }
    let keys = rng.sample_distinct(keys_n, pairs);
    let vals = rng.sample_distinct(vals_n, pairs);
    let mut prompt = Vec::with_capacity(2 * pairs + 1);
    for (&a, &b) in keys.iter().zip(&vals) {
        prompt.push(a as Token);
        prompt.push((layout.value_tokens().start + b) as Token);
    }
    let j = rng.below(pairs);
    prompt.push(keys[j] as Token);
    Ok(TaskInstance {
        id,
        prompt,
        kind: TaskKind::Recall {
            answer: (layout.value_tokens().start + vals[j]) as Token,
        },
        probes: keys.iter().map(|&k| vec![k as Token]).collect(),
    })
}

/// Random prompt of `context_len + 1` tokens; the reference is the
/// full-cache greedy continuation of `steps` tokens.
pub fn agreement_task(model: &Model, rng: &mut SeededRng, context_len: usize, steps: usize, id: usize) -> Result<TaskInstance> {
    if context_len == 0 || steps == 0 {
        return Err(Error::config("agreement tasks need a context and at least one step"));
    }
    let vocab = model.config().vocab;
    let prompt: Vec<Token> = (0..=context_len).map(|_| rng.below(vocab) as Token).collect();
    let mut cache = model.prefill(&prompt[..context_len])?.cache;
    let reference = model.greedy_decode(&mut cache, prompt[context_len], steps)?;
    Ok(TaskInstance {
        id,
        probes: vec![vec![prompt[context_len]]],
        prompt,
        kind: TaskKind::Agreement { reference },
    })
}

/// Full-cache logits at every scored step of a task.
#[derive(Debug, Clone)]
pub struct FullRun {
    pub logits: Vec<Vec<f64>>,
}

fn run_steps(model: &Model, cache: &KVCache, masks: Option<&crate::composer::HeadMaskSet>, inputs: &[Token], start: usize) -> Result<Vec<Vec<f64>>> {
    let mut cache = cache.clone();
    inputs
        .iter()
        .enumerate()
        .map(|(i, &t)| model.decode_step_masked(&mut cache, t, start + i, masks))
        .collect()
}

pub fn full_run(model: &Model, full: &KVCache, task: &TaskInstance) -> Result<FullRun> {
    let start = task.context().len();
    Ok(FullRun {
        logits: run_steps(model, full, None, &task.decode_inputs(), start)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskOutcome {
    pub reward: f64,
    pub kl: f64,
}

fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let mut p = p_logits.to_vec();
    let mut q = q_logits.to_vec();
    softmax_in_place(&mut p, 1.0);
    softmax_in_place(&mut q, 1.0);
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        .max(0.0)
}

fn compressed_logits(model: &Model, compressed: &Compressed, task: &TaskInstance) -> Result<Vec<Vec<f64>>> {
    let (cache, masks) = compressed.decode_view();
    run_steps(model, cache, masks, &task.decode_inputs(), task.context().len())
}

fn reward_from_logits(task: &TaskInstance, logits: &[Vec<f64>]) -> f64 {
    let targets = task.targets();
    let hits = logits
        .iter()
        .zip(&targets)
        .filter(|(l, &t)| argmax(l) as Token == t)
        .count();
    match task.kind {
        TaskKind::Recall { .. } => hits as f64,
        // Targets are the full-cache argmaxes, so this is agreement.
        TaskKind::Agreement { .. } => hits as f64 / targets.len() as f64,
    }
}

/// Reward of `task` when decoding against a (possibly compressed) cache.
pub fn reward(model: &Model, compressed: &Compressed, task: &TaskInstance) -> Result<f64> {
    Ok(reward_from_logits(task, &compressed_logits(model, compressed, task)?))
}

/// Reward and mean KL(full ‖ compressed) of one task on a compressed cache.
pub fn evaluate_task(model: &Model, compressed: &Compressed, task: &TaskInstance, full: &FullRun) -> Result<TaskOutcome> {
    let logits = compressed_logits(model, compressed, task)?;
    let reward = reward_from_logits(task, &logits);
    let kl = logits
        .iter()
        .zip(&full.logits)
        .map(|(c, f)| kl_divergence(f, c))
        .sum::<f64>()
        / logits.len() as f64;
    Ok(TaskOutcome { reward, kl })
}

/// Mean relative degradation `(R_full - R_comp) / R_full`. Tasks with a
/// zero full reward are skipped with a warning; if none remain, 0.
pub fn epsilon(full_rewards: &[f64], comp_rewards: &[f64]) -> Result<f64> {
    if full_rewards.len() != comp_rewards.len() {
        return Err(Error::usage("reward lists differ in length"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (i, (&f, &c)) in full_rewards.iter().zip(comp_rewards).enumerate() {
        if f == 0.0 {
            warn!("task {i}: full-cache reward is 0, excluded from epsilon");
            continue;
        }
        sum += (f - c) / f;
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { sum / used as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub r_target: f64,
    pub r_achieved: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub epsilon: f64,
    pub kl_mean: f64,
}

/// Trapezoidal area under reward-vs-ratio, divided by the ratio span.
pub fn auc(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::usage("AUC needs at least two points"));
    }
    let span = curve[curve.len() - 1].0 - curve[0].0;
    if span <= 0.0 || curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::usage("AUC needs strictly increasing ratios"));
    }
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / span)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceResult {
    pub epsilon0: f64,
    /// Largest grid ratio with ε ≤ ε₀ (0 when none passes).
    pub r_grid: f64,
    /// Linear interpolation toward the next (failing) grid point.
    pub r_interpolated: f64,
}

/// `curve` holds `(r, ε)` pairs sorted by `r`.
pub fn max_ratio_under_tolerance(curve: &[(f64, f64)], epsilon0: f64) -> ToleranceResult {
    let last_pass = curve.iter().rposition(|&(_, e)| e <= epsilon0);
    let (r_grid, r_interpolated) = match last_pass {
        None => (0.0, 0.0),
        Some(i) => {
            let (r0, e0) = curve[i];
            match curve.get(i + 1) {
                None => (r0, r0),
                Some(&(r1, e1)) => {
                    let t = if e1 > e0 { (epsilon0 - e0) / (e1 - e0) } else { 0.0 };
                    (r0, r0 + t.clamp(0.0, 1.0) * (r1 - r0))
                }
            }
        }
    };
    ToleranceResult {
        epsilon0,
        r_grid,
        r_interpolated,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScoringMode {
    Agnostic {
        #[serde(default = "default_window")]
        window: usize,
    },
    Aware,
}

fn default_window() -> usize {
    crate::scoring::DEFAULT_OBSERVATION_WINDOW
}

impl Default for ScoringMode {
    fn default() -> Self {
        ScoringMode::Agnostic {
            window: default_window(),
        }
    }
}

/// One model with its tasks, tagged by the seed that produced them.
#[derive(Debug, Clone)]
pub struct SeedCase {
    pub seed: u64,
    pub model: Model,
    pub tasks: Vec<TaskInstance>,
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub policy: Policy,
    pub aggregation: AggregationChoice,
    pub scoring: ScoringMode,
    pub grid: Vec<f64>,
}

/// Per-task data shared by every policy/aggregation evaluated on it.
#[derive(Debug)]
pub struct PreparedTask {
    pub analysis: ContextAnalysis,
    pub full: FullRun,
    pub full_reward: f64,
}

/// Prefill, capture and full-cache reference for every task of every case.
pub fn prepare_tasks(cases: &[SeedCase], scoring: &ScoringMode, policy: &Policy) -> Result<Vec<Vec<PreparedTask>>> {
    cases
        .iter()
        .map(|case| {
            case.tasks
                .par_iter()
                .map(|task| {
                    let analysis =
                        ContextAnalysis::new(&case.model, task.context(), &task.task_set(scoring), policy)?;
                    let full = full_run(&case.model, analysis.full_cache(), task)?;
                    let full_compressed = Compressed::Structured(uncompressed(analysis.full_cache().clone()));
                    let full_reward = evaluate_task(&case.model, &full_compressed, task, &full)?.reward;
                    Ok(PreparedTask {
                        analysis,
                        full,
                        full_reward,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

pub fn sweep(cases: &[SeedCase], settings: &SweepSettings) -> Result<Vec<CurvePoint>> {
    let prepared = prepare_tasks(cases, &settings.scoring, &settings.policy)?;
    sweep_prepared(cases, &prepared, settings)
}

/// Sweep over pre-analysed tasks. Results are reduced in (case, task)
/// order so the output does not depend on scheduling.
pub fn sweep_prepared(cases: &[SeedCase], prepared: &[Vec<PreparedTask>], settings: &SweepSettings) -> Result<Vec<CurvePoint>> {
    let grid = &settings.grid;
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("ratio grid must be non-empty and strictly ascending"));
    }
    if grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::config("ratios must lie in [0, 1]"));
    }
    // [task][grid point] → (r_achieved, outcome)
    let mut rows: Vec<(f64, Vec<(f64, TaskOutcome)>)> = Vec::new();
    for (case, tasks) in cases.iter().zip(prepared) {
        let per_task = case
            .tasks
            .par_iter()
            .zip(tasks.par_iter())
            .map(|(task, prep)| {
                let plan = CompressionPlan::new(&case.model, &prep.analysis, &settings.aggregation, &settings.policy)?;
                let points = grid
                    .iter()
                    .map(|&r| {
                        let (compressed, report) = plan.compress(&case.model, &prep.analysis, r)?;
                        let outcome = evaluate_task(&case.model, &compressed, task, &prep.full)?;
                        Ok((report.r_achieved, outcome))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((prep.full_reward, points))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(per_task);
    }
    if rows.is_empty() {
        return Err(Error::usage("sweep needs at least one task"));
    }

    let full: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let count = rows.len() as f64;
    grid.iter()
        .enumerate()
        .map(|(gi, &r_target)| {
            let comp: Vec<f64> = rows.iter().map(|r| r.1[gi].1.reward).collect();
            let reward_mean = comp.iter().sum::<f64>() / count;
            let var = comp.iter().map(|x| (x - reward_mean).powi(2)).sum::<f64>() / count;
            Ok(CurvePoint {
                r_target,
                r_achieved: rows.iter().map(|r| r.1[gi].0).sum::<f64>() / count,
                reward_mean,
                reward_std: var.sqrt(),
                epsilon: epsilon(&full, &comp)?,
                kl_mean: rows.iter().map(|r| r.1[gi].1.kl).sum::<f64>() / count,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub aggregation: String,
    pub grid: Vec<CurvePoint>,
    /// `None` when the grid has a single point.
    pub auc: Option<f64>,
    pub max_ratio: Vec<ToleranceResult>,
    pub seeds: Vec<u64>,
    pub tasks_per_seed: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_curve(
        settings: &SweepSettings,
        curve: Vec<CurvePoint>,
        tolerances: &[f64],
        cases: &[SeedCase],
        config: serde_json::Value,
    ) -> Result<Self> {
        let reward_curve: Vec<(f64, f64)> = curve.iter().map(|p| (p.r_target, p.reward_mean)).collect();
        let eps_curve: Vec<(f64, f64)> = curve.iter().map(|p| (p.r_target, p.epsilon)).collect();
        let auc = if curve.len() >= 2 { Some(auc(&reward_curve)?) } else { None };
        Ok(EvalReport {
            policy: settings.policy.name().to_string(),
            aggregation: settings.aggregation.to_string(),
            max_ratio: tolerances
                .iter()
                .map(|&e| max_ratio_under_tolerance(&eps_curve, e))
                .collect(),
            grid: curve,
            auc,
            seeds: cases.iter().map(|c| c.seed).collect(),
            tasks_per_seed: cases.first().map_or(0, |c| c.tasks.len()),
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{construct_induction_model, ModelConfig};

    #[test]
    fn two_gigabyte_cache_example() {
        assert_eq!(cache_entry_count(32, 8, 32_000, 128), 2_097_152_000);
    }

    #[test]
    fn ratio_examples() {
        let m = Model::init(ModelConfig::new(2, 2, 1, 4, 8, 0)).unwrap();
        let full = m.prefill(&[1, 2, 3, 4]).unwrap().cache;
        assert_eq!(compression_ratio(&full, &full).unwrap(), 0.0);
        let half = KVCache::from_layers(
            full.layers()
                .iter()
                .map(|l| l.gather(&[vec![0, 3]]).unwrap())
                .collect(),
        );
        assert_eq!(compression_ratio(&half, &full).unwrap(), 0.5);
        let empty = m.empty_cache();
        assert!(matches!(compression_ratio(&full, &empty), Err(Error::Usage(_))));
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon(&[1.0, 0.5], &[1.0, 0.5]).unwrap(), 0.0);
        assert!((epsilon(&[1.0, 1.0], &[0.5, 1.0]).unwrap() - 0.25).abs() < 1e-15);
        assert!((epsilon(&[0.0, 1.0], &[0.0, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!(epsilon(&[1.0], &[]).is_err());
    }

    #[test]
    fn epsilon_matches_elementwise_formula() {
        let mut rng = SeededRng::new(12);
        let full: Vec<f64> = (0..30).map(|_| 0.1 + rng.next_f64()).collect();
        let comp: Vec<f64> = (0..30).map(|_| rng.next_f64()).collect();
        let mut acc = 0.0;
        for i in 0..30 {
            acc += 1.0 - comp[i] / full[i];
        }
        assert!((epsilon(&full, &comp).unwrap() - acc / 30.0).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        let flat: Vec<(f64, f64)> = DEFAULT_GRID.iter().map(|&r| (r, 0.37)).collect();
        assert!((auc(&flat).unwrap() - 0.37).abs() < 1e-12);
        assert!((auc(&[(0.0, 1.0), (1.0, 0.0)]).unwrap() - 0.5).abs() < 1e-15);
        assert!(auc(&[(0.0, 1.0)]).is_err());
        assert!(auc(&[(0.5, 1.0), (0.5, 1.0)]).is_err());
    }

    #[test]
    fn auc_matches_trapezoid_oracle() {
        let mut rng = SeededRng::new(31);
        let pts: Vec<(f64, f64)> = DEFAULT_GRID.iter().map(|&r| (r, rng.next_f64())).collect();
        let mut area = 0.0;
        for i in 1..pts.len() {
            let h = pts[i].0 - pts[i - 1].0;
            area += 0.5 * h * pts[i - 1].1 + 0.5 * h * pts[i].1;
        }
        assert!((auc(&pts).unwrap() - area / 0.9).abs() < 1e-12);
    }

    #[test]
    fn tolerance_examples() {
        let curve = [(0.0, 0.0), (0.25, 0.05), (0.5, 0.15), (0.75, 0.3)];
        let t = max_ratio_under_tolerance(&curve, 0.10);
        assert_eq!(t.r_grid, 0.25);
        assert!((t.r_interpolated - 0.375).abs() < 1e-12);

        let zeros: Vec<(f64, f64)> = DEFAULT_GRID.iter().map(|&r| (r, 0.0)).collect();
        let t = max_ratio_under_tolerance(&zeros, 0.1);
        assert_eq!((t.r_grid, t.r_interpolated), (0.9, 0.9));

        let none = max_ratio_under_tolerance(&[(0.0, 0.5), (0.5, 0.6)], 0.1);
        assert_eq!((none.r_grid, none.r_interpolated), (0.0, 0.0));
    }

    #[test]
    fn tolerance_matches_scan_oracle() {
        let mut rng = SeededRng::new(8);
        for _ in 0..50 {
            let mut e = 0.0;
            let curve: Vec<(f64, f64)> = DEFAULT_GRID
                .iter()
                .map(|&r| {
                    e += rng.next_f64() * 0.1;
                    (r, if r == 0.0 { 0.0 } else { e })
                })
                .collect();
            let eps0 = rng.next_f64() * 0.4;
            let mut expected = 0.0;
            for &(r, e) in &curve {
                if e <= eps0 {
                    expected = r;
                } else {
                    break;
                }
            }
            assert_eq!(max_ratio_under_tolerance(&curve, eps0).r_grid, expected);
        }
    }

    #[test]
    fn recall_task_shape() {
        let mut rng = SeededRng::new(4);
        let t = recall_task(&mut rng, 32, 8, 0).unwrap();
        assert_eq!(t.prompt.len(), 17);
        assert_eq!(t.probes.len(), 8);
        assert!(recall_task(&mut rng, 8, 5, 0).is_err());
    }

    fn full_compressed(cache: KVCache) -> Compressed {
        Compressed::Structured(uncompressed(cache))
    }

    #[test]
    fn full_cache_recall_reward_is_one() {
        let m = construct_induction_model(8, 32).unwrap();
        let mut rng = SeededRng::new(5);
        for id in 0..10 {
            let t = recall_task(&mut rng, 32, 8, id).unwrap();
            let cache = m.prefill(t.context()).unwrap().cache;
            assert_eq!(reward(&m, &full_compressed(cache), &t).unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_ratio_agreement_is_one() {
        let m = Model::init(ModelConfig::new(2, 4, 2, 8, 32, 3)).unwrap();
        let mut rng = SeededRng::new(6);
        let t = agreement_task(&m, &mut rng, 24, 8, 0).unwrap();
        let (c, _) = crate::pipeline::compress(
            &m,
            t.context(),
            &TaskSet::TaskAgnostic { window: 8 },
            &AggregationChoice::default(),
            0.0,
            &Policy::Kvcompose,
        )
        .unwrap();
        assert_eq!(reward(&m, &c, &t).unwrap(), 1.0);
        let full = full_run(&m, &m.prefill(t.context()).unwrap().cache, &t).unwrap();
        let out = evaluate_task(&m, &c, &t, &full).unwrap();
        assert!(out.kl < 1e-9);
    }

    #[test]
    fn single_point_sweep() {
        let m = Model::init(ModelConfig::new(2, 4, 2, 8, 32, 1)).unwrap();
        let mut rng = SeededRng::new(7);
        let tasks = (0..3).map(|i| agreement_task(&m, &mut rng, 16, 4, i).unwrap()).collect();
        let cases = vec![SeedCase { seed: 1, model: m, tasks }];
        let settings = SweepSettings {
            policy: Policy::Kvcompose,
            aggregation: AggregationChoice::default(),
            scoring: ScoringMode::default(),
            grid: vec![0.0],
        };
        let curve = sweep(&cases, &settings).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].epsilon, 0.0);
        assert_eq!(curve[0].reward_mean, 1.0);
    }
}
