use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache_io::{model_from_bundle, read_tensors};
use crate::error::{Error, Result};
use crate::evaluator::{
    agreement_task, recall_task, ScoringMode, SeedCase, SweepSettings, TaskInstance, DEFAULT_AGREEMENT_STEPS,
    DEFAULT_TOLERANCES, DEFAULT_GRID,
};
use crate::model::{construct_induction_model, Model, ModelConfig};
use crate::numerics::SeededRng;
use crate::pipeline::Policy;
use crate::scoring::AggregationChoice;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    /// Randomly initialized model; weights are drawn from the run seed.
    Random {
        layers: usize,
        q_heads: usize,
        kv_heads: usize,
        head_dim: usize,
        vocab: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotary_dims: Option<usize>,
    },
    /// Hand-built two-layer key/value recall model.
    Induction { num_pairs: usize, vocab: usize },
    /// Weights written by `gen-model`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKindSpec {
    Recall,
    Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKindSpec,
    /// Tasks per seed.
    pub count: usize,
    /// Key/value pairs per recall prompt.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Context length of agreement prompts.
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    /// Reference continuation length of agreement tasks.
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_pairs() -> usize {
    8
}

fn default_context_len() -> usize {
    64
}

fn default_steps() -> usize {
    DEFAULT_AGREEMENT_STEPS
}

fn default_seeds() -> usize {
    1
}

fn default_grid() -> Vec<f64> {
    DEFAULT_GRID.to_vec()
}

fn default_tolerances() -> Vec<f64> {
    DEFAULT_TOLERANCES.to_vec()
}

fn default_r_target() -> f64 {
    0.5
}

/// A complete run description. Unknown keys are rejected; every default is
/// filled in so that serializing it back gives the resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; seed `i` of a run is `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_tolerances")]
    pub tolerances: Vec<f64>,
    /// Ratio used by `compress` and `dump-scores`.
    #[serde(default = "default_r_target")]
    pub r_target: f64,
    /// Output location; not part of the resolved config echoed in reports.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub tasks: TaskSpec,
    #[serde(default)]
    pub scoring: ScoringMode,
    #[serde(default)]
    pub aggregation: AggregationChoice,
    #[serde(default)]
    pub policy: Policy,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// The resolved config as JSON, embedded in every report.
    pub fn resolved_json(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::config("seeds must be at least 1"));
        }
        if self.tasks.count == 0 {
            return Err(Error::config("tasks.count must be at least 1"));
        }
        if self.grid.is_empty() || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("grid must be non-empty and strictly ascending"));
        }
        if self.grid.iter().chain([&self.r_target]).any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("ratios must lie in [0, 1]"));
        }
        if self.tolerances.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::config("tolerances must be non-negative"));
        }
        if let ScoringMode::Agnostic { window: 0 } = self.scoring {
            return Err(Error::config("scoring.window must be at least 1"));
        }
        if self.tasks.kind == TaskKindSpec::Recall && !matches!(self.model, ModelSpec::Induction { .. }) {
            return Err(Error::config("recall tasks require the induction model"));
        }
        self.policy.validate()
    }

    pub fn seed_values(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn build_model(&self, seed: u64) -> Result<Model> {
        match &self.model {
            ModelSpec::Random {
                layers,
                q_heads,
                kv_heads,
                head_dim,
                vocab,
                rotary_dims,
            } => {
                let mut cfg = ModelConfig::new(*layers, *q_heads, *kv_heads, *head_dim, *vocab, seed);
                cfg.rotary_dims = *rotary_dims;
                Model::init(cfg).map_err(as_config)
            }
            ModelSpec::Induction { num_pairs, vocab } => {
                construct_induction_model(*num_pairs, *vocab).map_err(as_config)
            }
            ModelSpec::File { path } => model_from_bundle(&read_tensors(path)?),
        }
    }

    pub fn build_tasks(&self, model: &Model, seed: u64) -> Result<Vec<TaskInstance>> {
        // Decorrelate the task stream from the weight stream of the same seed.
        let mut rng = SeededRng::new(seed).fork();
        (0..self.tasks.count)
            .map(|id| match self.tasks.kind {
                TaskKindSpec::Recall => recall_task(&mut rng, model.config().vocab, self.tasks.pairs, id),
                TaskKindSpec::Agreement => {
                    if self.tasks.context_len + self.tasks.steps + 1 > model.config().max_context {
                        return Err(Error::config("tasks.context_len exceeds the model context"));
                    }
                    agreement_task(model, &mut rng, self.tasks.context_len, self.tasks.steps, id)
                }
            })
            .collect()
    }

    pub fn build_cases(&self) -> Result<Vec<SeedCase>> {
        self.seed_values()
            .into_iter()
            .map(|seed| {
                let model = self.build_model(seed)?;
                let tasks = self.build_tasks(&model, seed)?;
                Ok(SeedCase { seed, model, tasks })
            })
            .collect()
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            policy: self.policy,
            aggregation: self.aggregation,
            scoring: self.scoring.clone(),
            grid: self.grid.clone(),
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Shape(m) | Error::Invariant(m) => Error::Config(m),
        other => other,
    }
}

/// Parses a comma-separated ratio list such as `0,0.5,0.9`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("bad ratio {x:?} in --grid")))
        })
        .collect()
}

/// Whitespace-separated integer token ids.
pub fn parse_tokens(text: &str, vocab: usize) -> Result<Vec<crate::model::Token>> {
    let tokens = text
        .split_whitespace()
        .map(|t| {
            t.parse::<crate::model::Token>()
                .map_err(|_| Error::config(format!("bad token id {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::config(format!("token {t} outside vocab {vocab}")));
    }
    if tokens.is_empty() {
        return Err(Error::config("context file holds no tokens"));
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
        seeds = 2
        [model]
        kind = "random"
        layers = 2
        q_heads = 4
        kv_heads = 2
        head_dim = 8
        vocab = 32
        [tasks]
        kind = "agreement"
        count = 3
        context_len = 12
        steps = 4
    "#;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::from_toml(BASIC).unwrap();
        assert_eq!(c.grid, DEFAULT_GRID.to_vec());
        assert_eq!(c.tolerances, vec![0.1, 0.2]);
        assert_eq!(c.aggregation, AggregationChoice::default());
        assert_eq!(c.policy, Policy::Kvcompose);
        assert_eq!(c.seed_values(), vec![0, 1]);
    }

    #[test]
    fn resolved_round_trip() {
        let mut c = RunConfig::from_toml(BASIC).unwrap();
        c.out = Some("somewhere".into());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back.out, None);
        assert_eq!(back.resolved_json().unwrap(), c.resolved_json().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{BASIC}\nbogus = 1\n");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = BASIC.replace("steps = 4", "steps = 4\nextra = true");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for (from, to) in [
            ("seeds = 2", "seeds = 0"),
            ("count = 3", "count = 0"),
            ("seeds = 2", "seeds = 2\ngrid = [0.5, 0.1]"),
            ("seeds = 2", "seeds = 2\nr_target = 1.5"),
            ("kind = \"agreement\"", "kind = \"recall\""),
        ] {
            let text = BASIC.replace(from, to);
            assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))), "{to}");
        }
    }

    #[test]
    fn cases_are_deterministic() {
        let c = RunConfig::from_toml(BASIC).unwrap();
        let a = c.build_cases().unwrap();
        let b = c.build_cases().unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tasks, y.tasks);
        }
        assert_ne!(a[0].tasks[0].prompt, a[1].tasks[0].prompt);
    }

    #[test]
    fn token_parsing() {
        assert_eq!(parse_tokens("1 2\n3\t4", 8).unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_tokens("1 x", 8).is_err());
        assert!(parse_tokens("9", 8).is_err());
        assert!(parse_tokens("  ", 8).is_err());
        assert_eq!(parse_grid("0, 0.5,0.9").unwrap(), vec![0.0, 0.5, 0.9]);
        assert!(parse_grid("0,a").is_err());
    }
}
