use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fuseplan::annealer::AnnealParams;
use fuseplan::fusion::{transform_problem, FusionLayout, TrainingShape};
use fuseplan::genfuse::{default_grid, GenSetup, InferenceTask, LengthDistribution};
use fuseplan::workflow::IterationConfig;
use fuseplan::{ClusterSpec, CostModel, ModelSpec, ParallelStrategy};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// A model given by preset name or by explicit shape.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelEntry {
    Preset { preset: String },
    Spec(ModelSpec),
}

impl ModelEntry {
    fn resolve(&self) -> CliResult<ModelSpec> {
        match self {
            ModelEntry::Spec(s) => Ok(s.clone()),
            ModelEntry::Preset { preset } => match preset.as_str() {
                "llama-13b" => Ok(ModelSpec::llama_13b()),
                "llama-33b" => Ok(ModelSpec::llama_33b()),
                "llama-65b" => Ok(ModelSpec::llama_65b()),
                other => Err(CliError::Config(format!(
                    "unknown model preset {other:?} (expected llama-13b, llama-33b or llama-65b)"
                ))),
            },
        }
    }
}

/// Two models trained side by side on the same devices.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub model_a: String,
    pub model_b: String,
    pub global_batch: u64,
    #[serde(default = "one")]
    pub microbatch_size: u64,
    /// Tokens per sample.
    pub seq_len: f64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSection {
    pub alpha: f64,
    pub epsilon: f64,
    pub swap_retry_limit: usize,
    pub rng_seed: u64,
    pub chains: usize,
    /// Runs the memory-reducing pass after the makespan search.
    pub memory_pass: bool,
    /// Cooling rate of the memory pass; `alpha` when unset.
    pub memory_alpha: Option<f64>,
}

impl Default for AnnealSection {
    fn default() -> Self {
        let p = AnnealParams::default();
        AnnealSection {
            alpha: p.alpha,
            epsilon: p.epsilon,
            swap_retry_limit: p.swap_retry_limit,
            rng_seed: p.rng_seed,
            chains: 8,
            memory_pass: true,
            memory_alpha: None,
        }
    }
}

impl AnnealSection {
    pub fn params(&self) -> AnnealParams {
        AnnealParams {
            alpha: self.alpha,
            epsilon: self.epsilon,
            swap_retry_limit: self.swap_retry_limit,
            rng_seed: self.rng_seed,
        }
    }

    pub fn memory_params(&self) -> AnnealParams {
        AnnealParams { alpha: self.memory_alpha.unwrap_or(self.alpha), ..self.params() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LengthsEntry {
    Lognormal {
        median: f64,
        #[serde(default = "ten")]
        p999_ratio: f64,
        max_len: u32,
    },
    /// Output lengths read from a file, one token count per line; relative
    /// paths resolve against the config file.
    Empirical { file: PathBuf, max_len: u32 },
}

fn ten() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub actor: String,
    /// Models run forward over every generated sample.
    pub inference: Vec<String>,
    pub instances: usize,
    pub gpus_per_instance: u64,
    pub prompt_len: u32,
    pub batch: usize,
    pub lengths: LengthsEntry,
    #[serde(default)]
    pub seed: u64,
    /// Migration ratios swept, as fractions of the batch.
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSection {
    pub actor: String,
    pub reference: String,
    pub critic: String,
    pub reward: String,
    pub actor_strategy: String,
    pub critic_strategy: String,
    pub gen_gpus_per_instance: u64,
    #[serde(default = "default_global_batch")]
    pub global_batch: u64,
    #[serde(default = "default_mini_batch")]
    pub mini_batch: u64,
    #[serde(default = "one")]
    pub microbatch_size: u64,
    pub prompt_len: u32,
    pub lengths: LengthsEntry,
    #[serde(default)]
    pub seed: u64,
    pub migration_ratio: Option<f64>,
    #[serde(default = "default_switch_setup")]
    pub switch_setup: f64,
}

fn default_global_batch() -> u64 {
    512
}

fn default_mini_batch() -> u64 {
    64
}

fn default_switch_setup() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeSection {
    #[serde(default = "default_cases")]
    pub cases: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_cases() -> usize {
    1000
}

fn default_max_steps() -> usize {
    4096
}

impl Default for GaeSection {
    fn default() -> Self {
        GaeSection { cases: default_cases(), max_steps: default_max_steps(), seed: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub models: BTreeMap<String, ModelEntry>,
    #[serde(default)]
    pub strategies: BTreeMap<String, ParallelStrategy>,
    pub training: Option<TrainingSection>,
    #[serde(default)]
    pub anneal: AnnealSection,
    pub generation: Option<GenerationSection>,
    pub iteration: Option<IterationSection>,
    #[serde(default)]
    pub gae: GaeSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every reference resolves and every module-level invariant.
    pub fn validate(&self) -> CliResult<()> {
        self.cluster.validate()?;
        self.cost.validate()?;
        self.anneal.params().validate()?;
        self.anneal.memory_params().validate()?;
        if self.anneal.chains == 0 {
            return Err(CliError::Config("anneal.chains must be positive".into()));
        }
        for (name, m) in &self.models {
            m.resolve()
                .and_then(|s| s.validate().map_err(CliError::from))
                .map_err(|e| CliError::Config(format!("model {name}: {e}")))?;
        }
        for (name, s) in &self.strategies {
            s.validate_for(&self.cluster).map_err(|e| CliError::Config(format!("strategy {name}: {e}")))?;
        }
        if let Some(t) = &self.training {
            self.model(&t.model_a)?;
            self.model(&t.model_b)?;
            self.strategy(&t.model_a)?;
            self.strategy(&t.model_b)?;
        }
        if let Some(g) = &self.generation {
            self.gen_setup()?.validate()?;
            self.lengths(&g.lengths)?;
            if g.grid.is_empty() {
                return Err(CliError::Config("generation.grid is empty".into()));
            }
        }
        if self.iteration.is_some() {
            self.iteration_config()?.validate()?;
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> CliResult<ModelSpec> {
        self.models
            .get(name)
            .ok_or_else(|| CliError::Config(format!("model {name:?} is not defined under [models]")))?
            .resolve()
    }

    pub fn strategy(&self, name: &str) -> CliResult<ParallelStrategy> {
        self.strategies
            .get(name)
            .copied()
            .ok_or_else(|| CliError::Config(format!("strategy {name:?} is not defined under [strategies]")))
    }

    pub fn training(&self) -> CliResult<&TrainingSection> {
        self.training.as_ref().ok_or_else(|| CliError::Config("missing [training] section".into()))
    }

    pub fn generation(&self) -> CliResult<&GenerationSection> {
        self.generation.as_ref().ok_or_else(|| CliError::Config("missing [generation] section".into()))
    }

    /// Fusion layout for the `[training]` pair; strategies share the models' names.
    pub fn layout(&self) -> CliResult<FusionLayout<f64>> {
        let t = self.training()?;
        let shape = TrainingShape { global_batch: t.global_batch, microbatch_size: t.microbatch_size, seq_len: t.seq_len };
        Ok(transform_problem(
            &self.model(&t.model_a)?,
            &self.strategy(&t.model_a)?,
            &self.model(&t.model_b)?,
            &self.strategy(&t.model_b)?,
            &shape,
            &self.cluster,
            &self.cost,
        )?)
    }

    pub fn lengths(&self, entry: &LengthsEntry) -> CliResult<LengthDistribution> {
        match entry {
            LengthsEntry::Lognormal { median, p999_ratio, max_len } => {
                Ok(LengthDistribution::lognormal(*median, *p999_ratio, *max_len)?)
            }
            LengthsEntry::Empirical { file, max_len } => {
                let path = self.base_dir.join(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Config(format!("cannot read length file {}: {e}", path.display())))?;
                Ok(LengthDistribution::parse_empirical(&text, *max_len)?)
            }
        }
    }

    pub fn gen_setup(&self) -> CliResult<GenSetup> {
        let g = self.generation()?;
        let inference = g
            .inference
            .iter()
            .map(|name| Ok(InferenceTask { name: name.clone(), spec: self.model(name)? }))
            .collect::<CliResult<Vec<_>>>()?;
        let setup = GenSetup {
            actor: self.model(&g.actor)?,
            inference,
            num_instances: g.instances,
            gpus_per_instance: g.gpus_per_instance,
            prompt_len: g.prompt_len,
            cluster: self.cluster,
            cost: self.cost,
        };
        Ok(setup)
    }

    pub fn iteration_config(&self) -> CliResult<IterationConfig> {
        let it = self.iteration.as_ref().ok_or_else(|| CliError::Config("missing [iteration] section".into()))?;
        Ok(IterationConfig {
            actor: self.model(&it.actor)?,
            reference: self.model(&it.reference)?,
            critic: self.model(&it.critic)?,
            reward: self.model(&it.reward)?,
            actor_strategy: self.strategy(&it.actor_strategy)?,
            critic_strategy: self.strategy(&it.critic_strategy)?,
            gen_gpus_per_instance: it.gen_gpus_per_instance,
            global_batch: it.global_batch,
            mini_batch: it.mini_batch,
            microbatch_size: it.microbatch_size,
            prompt_len: it.prompt_len,
            lengths: self.lengths(&it.lengths)?,
            seed: it.seed,
            migration_ratio: it.migration_ratio,
            switch_setup: it.switch_setup,
            anneal: self.anneal.params(),
            chains: self.anneal.chains,
            cluster: self.cluster,
            cost: self.cost,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[cluster]
num_gpus = 16
gpus_per_node = 8
activation_capacity_per_stage = inf
kv_capacity = 80e9
bs_max = 256
interconnect_bandwidth = 25e9

[models.a]
preset = "llama-13b"

[models.b]
name = "small"
num_layers = 8
num_heads = 8
hidden_size = 1024
intermediate_size = 4096

[strategies.a]
dp = 1
pp = 2
tp = 8

[strategies.b]
dp = 1
pp = 2
tp = 8

[training]
model_a = "a"
model_b = "b"
global_batch = 4
seq_len = 512
"#;

    #[test]
    fn minimal_config_builds_layout() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        let l = cfg.layout().unwrap();
        assert_eq!(l.n, 2);
        assert_eq!(cfg.anneal.chains, 8);
    }

    #[test]
    fn dangling_model_reference_is_config_error() {
        let text = MINIMAL.replace("model_b = \"b\"", "model_b = \"missing\"");
        let err = RunConfig::parse(&text).unwrap().validate().unwrap_err();
        assert_eq!(err.code(), 2);
    }

    #[test]
    fn unknown_field_rejected() {
        let text = format!("{MINIMAL}\n[anneal]\nalpah = 0.5\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn unknown_preset_rejected() {
        let text = MINIMAL.replace("llama-13b", "llama-7b");
        assert!(RunConfig::parse(&text).unwrap().validate().is_err());
    }
}
