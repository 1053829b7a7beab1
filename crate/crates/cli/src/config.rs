//! Experiment configuration files.
//!
//! One JSON document describes a whole run: registry, synthetic world,
//! policy initialisation, optimizer, evaluation and output location.
//! Relative paths are resolved against the directory holding the config.
//! Command-line flags override individual fields (flag > file > default).
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 7,
//!   "registry": "builtin:default",
//!   "env": { "task_types": 5, "utility": { "kind": "planted", "u_hi": 0.9, "gap": 0.3 } },
//!   "train": { "steps": 2000, "learning_rate": 0.1 },
//!   "output_dir": "runs/planted"
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skillroute::environment::{
    model_ids, skill_ids, Environment, LiveSettings, PlantedSpec, TaskGenConfig, TaskTypeSpec, UtilityTable,
    DEFAULT_OBS_TOKEN_LIMIT,
};
use skillroute::policy::{FeatureLayout, PolicyParams};
use skillroute::registry::{builtin, load_registry, Registry};
use skillroute::rng::{stream_rng, Stream};
use skillroute::trainer::TrainConfig;

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Registry file, or `builtin:default` / `builtin:augmented`.
    #[serde(default = "default_registry_ref")]
    pub registry: String,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub policy: PolicyInit,
    /// `seed` here is ignored; the global seed drives training.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Write a checkpoint every this many steps (0: final only).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_registry_ref() -> String {
    "builtin:default".into()
}
fn default_output_dir() -> String {
    "runs/latest".into()
}
fn default_checkpoint_every() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskTypes {
    /// `n` anonymous, equally likely task types.
    Count(usize),
    Explicit(Vec<TaskTypeSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    /// One planted optimum per task type.
    Planted(PlantedSpec),
    /// Model and skill effects add with no interaction.
    Additive,
    Constant { value: f64 },
    /// A serialized utility table.
    File { path: String },
}

impl Default for UtilitySpec {
    fn default() -> Self {
        UtilitySpec::Planted(PlantedSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "default_task_types")]
    pub task_types: TaskTypes,
    /// Mixture weights, overriding those of explicit task types.
    #[serde(default)]
    pub mixture: Option<Vec<f64>>,
    /// Number of distinct answers; one is gold, the rest are distractors.
    #[serde(default = "default_alphabet")]
    pub answer_alphabet: usize,
    /// Probability that an unaided answer is correct.
    #[serde(default = "default_p0")]
    pub direct_answer_rate: f64,
    #[serde(default)]
    pub feature_noise: f64,
    #[serde(default)]
    pub utility: UtilitySpec,
    /// Seed of the utility table; the global seed when absent.
    #[serde(default)]
    pub utility_seed: Option<u64>,
    #[serde(default = "default_obs_limit")]
    pub obs_token_limit: usize,
    #[serde(default)]
    pub live: LiveSettings,
}

fn default_task_types() -> TaskTypes {
    TaskTypes::Count(5)
}
fn default_alphabet() -> usize {
    10
}
fn default_p0() -> f64 {
    0.1
}
fn default_obs_limit() -> usize {
    DEFAULT_OBS_TOKEN_LIMIT
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            task_types: default_task_types(),
            mixture: None,
            answer_alphabet: default_alphabet(),
            direct_answer_rate: default_p0(),
            feature_noise: 0.0,
            utility: UtilitySpec::default(),
            utility_seed: None,
            obs_token_limit: default_obs_limit(),
            live: LiveSettings::default(),
        }
    }
}

/// Starting point of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyInit {
    /// Weight of the protocol prior on the act-type and answer heads (think,
    /// search, think, answer). Routing heads always start uniform. 0 gives a
    /// fully uniform policy.
    #[serde(default = "default_prior")]
    pub protocol_prior: f64,
}

fn default_prior() -> f64 {
    2.0
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit {
            protocol_prior: default_prior(),
        }
    }
}

impl PolicyInit {
    pub fn initial_params(&self, layout: FeatureLayout, registry: &Registry) -> PolicyParams {
        PolicyParams::scripted(layout, registry, None, self.protocol_prior)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_eval_episodes() -> usize {
    1000
}
fn default_k() -> usize {
    16
}
fn default_temperature() -> f64 {
    1.0
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: default_eval_episodes(),
            k: default_k(),
            temperature: default_temperature(),
        }
    }
}

/// A config with everything it references loaded.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub registry: Registry,
    pub env: Environment,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("not valid JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(CliError::Config(format!("unsupported schema_version {v}"))),
            None => return Err(CliError::Config("missing schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Experiment, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config = Self::parse(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve(base_dir)
    }

    pub fn resolve_path(base_dir: &Path, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }

    /// Loads the referenced registry and builds the environment.
    pub fn resolve(self, base_dir: PathBuf) -> Result<Experiment, CliError> {
        let registry = load_registry_ref(&base_dir, &self.registry)?;
        let env = self.build_env(&base_dir, &registry)?;
        let train = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        train.validate()?;
        Ok(Experiment {
            config: self,
            base_dir,
            registry,
            env,
            train,
        })
    }

    pub fn task_gen(&self) -> Result<TaskGenConfig, CliError> {
        let mut tasks = match &self.env.task_types {
            TaskTypes::Count(n) => TaskGenConfig::uniform(*n),
            TaskTypes::Explicit(specs) => TaskGenConfig {
                task_types: specs.clone(),
                ..TaskGenConfig::uniform(0)
            },
        };
        if let Some(weights) = &self.env.mixture {
            if weights.len() != tasks.task_types.len() {
                return Err(CliError::Config(format!(
                    "mixture has {} weights for {} task types",
                    weights.len(),
                    tasks.task_types.len()
                )));
            }
            tasks = tasks.with_weights(weights);
        }
        tasks.answer_alphabet = self.env.answer_alphabet;
        tasks.direct_answer_rate = self.env.direct_answer_rate;
        tasks.feature_noise = self.env.feature_noise;
        tasks.validate()?;
        Ok(tasks)
    }

    /// Utility table over `registry`'s models and skills.
    pub fn utility_table(&self, base_dir: &Path, registry: &Registry) -> Result<UtilityTable, CliError> {
        let n = self.task_gen()?.task_types.len();
        let (models, skills) = (model_ids(registry), skill_ids(registry));
        let mut rng = stream_rng(self.env.utility_seed.unwrap_or(self.seed), Stream::Utility, 0);
        let table = match &self.env.utility {
            UtilitySpec::Planted(spec) => {
                UtilityTable::planted(n, &models, &skills, spec, self.env.direct_answer_rate, &mut rng)?.0
            }
            UtilitySpec::Additive => UtilityTable::additive(n, &models, &skills, &mut rng),
            UtilitySpec::Constant { value } => UtilityTable::constant(n, &models, &skills, *value),
            UtilitySpec::File { path } => {
                let path = Self::resolve_path(base_dir, path);
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
        };
        table.covers(n, registry)?;
        Ok(table)
    }

    pub fn build_env(&self, base_dir: &Path, registry: &Registry) -> Result<Environment, CliError> {
        let mut env = Environment::new(self.task_gen()?, self.utility_table(base_dir, registry)?)?;
        env.obs_token_limit = self.env.obs_token_limit;
        env.live = self.env.live.clone();
        Ok(env)
    }
}

/// `builtin:default`, `builtin:augmented`, or a path to a registry file.
pub fn load_registry_ref(base_dir: &Path, reference: &str) -> Result<Registry, CliError> {
    match reference {
        "builtin:default" => Ok(builtin::default_registry()),
        "builtin:augmented" => Ok(builtin::augmented_registry()),
        path => {
            let path = ExperimentConfig::resolve_path(base_dir, path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Schema(format!("cannot read registry {}: {e}", path.display())))?;
            Ok(load_registry(&text)?)
        }
    }
}

impl Experiment {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::for_registry(&self.registry, self.env.tasks.feature_dim(), self.train.max_turns)
    }

    pub fn initial_params(&self) -> PolicyParams {
        self.config.policy.initial_params(self.layout(), &self.registry)
    }

    pub fn output_dir(&self) -> PathBuf {
        ExperimentConfig::resolve_path(&self.base_dir, &self.config.output_dir)
    }
}
