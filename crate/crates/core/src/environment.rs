//! Task supply, expert execution and answer judging.
//!
//! The synthetic world realizes each model-skill pair as a Bernoulli hint
//! oracle: a search returns `HINT:<gold>` with probability `U[type, m, s]`
//! and `HINT:<distractor>` otherwise. Answering without a hint succeeds with
//! the task's direct answer rate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{self, SearchCall};
use crate::registry::{self, Backend, Level2Classifier, ModelEntry, Registry, SkillL1, SkillL2};
use crate::rng::StreamRng;

pub const HINT_PREFIX: &str = "HINT:";
pub const DEFAULT_OBS_TOKEN_LIMIT: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("task mixture is empty or has no positive weight")]
    EmptyMixture,
    #[error("no utility entry for task type {task_type}, model {model:?}, skill {skill:?}")]
    UnknownTriple { task_type: usize, model: String, skill: String },
    #[error("invalid generator config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTypeSpec {
    pub name: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    /// Query text shown to experts and to keyword routing. Defaults to the
    /// type name.
    #[serde(default)]
    pub query: Option<String>,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub task_types: Vec<TaskTypeSpec>,
    /// Total number of candidate answers (gold plus distractors).
    #[serde(default = "default_alphabet")]
    pub answer_alphabet: usize,
    /// Probability that answering without a hint is correct.
    #[serde(default = "default_direct_rate")]
    pub direct_answer_rate: f64,
    /// Mixing weight of uniform noise in the context features.
    #[serde(default)]
    pub feature_noise: f64,
}

fn default_alphabet() -> usize {
    10
}

fn default_direct_rate() -> f64 {
    0.1
}

impl TaskGenConfig {
    /// `n` task types named `type0..`, uniform mixture.
    pub fn uniform(n: usize) -> Self {
        TaskGenConfig {
            task_types: (0..n)
                .map(|i| TaskTypeSpec {
                    name: format!("type{i}"),
                    weight: 1.0,
                    query: None,
                })
                .collect(),
            answer_alphabet: default_alphabet(),
            direct_answer_rate: default_direct_rate(),
            feature_noise: 0.0,
        }
    }

    pub fn with_weights(mut self, weights: &[f64]) -> Self {
        for (spec, w) in self.task_types.iter_mut().zip(weights) {
            spec.weight = *w;
        }
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.task_types.len()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let total: f64 = self.task_types.iter().map(|t| t.weight).sum();
        if self.task_types.is_empty() || !(total > 0.0) {
            return Err(EnvError::EmptyMixture);
        }
        if self.task_types.iter().any(|t| !(t.weight >= 0.0) || !t.weight.is_finite()) {
            return Err(EnvError::Config("mixture weights must be finite and non-negative".into()));
        }
        if !(2..=26).contains(&self.answer_alphabet) {
            return Err(EnvError::Config("answer_alphabet must be in 2..=26".into()));
        }
        if !(0.0..=1.0).contains(&self.direct_answer_rate) {
            return Err(EnvError::Config("direct_answer_rate must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.feature_noise) {
            return Err(EnvError::Config("feature_noise must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn answer(&self, index: usize) -> String {
        char::from(b'A' + index as u8).to_string()
    }

    pub fn answers(&self) -> Vec<String> {
        (0..self.answer_alphabet).map(|i| self.answer(i)).collect()
    }

    /// Normalized mixture probabilities.
    pub fn mixture(&self) -> Vec<f64> {
        let total: f64 = self.task_types.iter().map(|t| t.weight).sum();
        self.task_types.iter().map(|t| t.weight / total).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub task_type: usize,
    pub query: String,
    pub context_features: Vec<f64>,
    pub gold_answer: String,
    pub direct_answer_rate: f64,
}

/// Draws one task. Deterministic in `(config, seed)`.
pub fn sample_task(config: &TaskGenConfig, seed: u64) -> Result<TaskInstance, EnvError> {
    use rand::SeedableRng;
    let mut rng = StreamRng::seed_from_u64(seed);
    sample_task_with(config, &format!("task-{seed}"), &mut rng)
}

pub fn sample_task_with(config: &TaskGenConfig, task_id: &str, rng: &mut StreamRng) -> Result<TaskInstance, EnvError> {
    config.validate()?;
    let weights = config.mixture();
    let draw: f64 = rng.gen();
    let mut task_type = weights.len() - 1;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc && *w > 0.0 {
            task_type = i;
            break;
        }
    }
    while weights[task_type] == 0.0 {
        task_type -= 1;
    }
    let n = config.feature_dim();
    let noise = config.feature_noise;
    let context_features = (0..n)
        .map(|i| {
            let base = if i == task_type { 1.0 } else { 0.0 };
            if noise > 0.0 {
                (1.0 - noise) * base + noise * rng.gen::<f64>()
            } else {
                base
            }
        })
        .collect();
    let gold = rng.gen_range(0..config.answer_alphabet);
    let spec = &config.task_types[task_type];
    Ok(TaskInstance {
        task_id: task_id.to_string(),
        task_type,
        query: spec.query.clone().unwrap_or_else(|| spec.name.clone()),
        context_features,
        gold_answer: config.answer(gold),
        direct_answer_rate: config.direct_answer_rate,
    })
}

/// Context-free utilities used by the compatibility decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    /// `U(no model, no skill)` per task type.
    pub baseline: Vec<f64>,
    /// `U(model, no skill)`, indexed `[type][model]`.
    pub model_only: Vec<Vec<f64>>,
    /// `U(no model, skill)`, indexed `[type][skill]`.
    pub skill_only: Vec<Vec<f64>>,
}

/// Per task type success probability of each model / Level-1 skill pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityTable {
    pub models: Vec<String>,
    pub skills: Vec<String>,
    /// Indexed `[type][model][skill]`.
    pub u: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<Marginals>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    #[serde(default = "default_u_hi")]
    pub u_hi: f64,
    #[serde(default = "default_gap")]
    pub gap: f64,
    /// Lower end of the range non-optimal pairs are drawn from.
    #[serde(default = "default_u_lo")]
    pub u_lo: f64,
    /// Explicit `(model, skill)` optimum per task type; drawn when absent.
    #[serde(default)]
    pub optima: Option<Vec<(String, String)>>,
    /// Restrict random optima to the first `n` models / skills.
    #[serde(default)]
    pub optimum_pool: Option<(usize, usize)>,
}

fn default_u_hi() -> f64 {
    0.9
}
fn default_gap() -> f64 {
    0.3
}
fn default_u_lo() -> f64 {
    0.3
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            u_hi: default_u_hi(),
            gap: default_gap(),
            u_lo: default_u_lo(),
            optima: None,
            optimum_pool: None,
        }
    }
}

impl UtilityTable {
    pub fn task_types(&self) -> usize {
        self.u.len()
    }

    pub fn constant(task_types: usize, models: &[String], skills: &[String], value: f64) -> Self {
        UtilityTable {
            models: models.to_vec(),
            skills: skills.to_vec(),
            u: vec![vec![vec![value; skills.len()]; models.len()]; task_types],
            marginals: None,
        }
    }

    pub fn for_registry(task_types: usize, registry: &Registry, value: f64) -> Self {
        Self::constant(task_types, &model_ids(registry), &skill_ids(registry), value)
    }

    /// Table with one planted optimum per task type at `u_hi`; every other
    /// pair is uniform in `[u_lo, u_hi - gap]`. Returns the optima as
    /// `(model index, skill index)`.
    pub fn planted(
        task_types: usize,
        models: &[String],
        skills: &[String],
        spec: &PlantedSpec,
        direct_answer_rate: f64,
        rng: &mut StreamRng,
    ) -> Result<(Self, Vec<(usize, usize)>), EnvError> {
        let ceiling = spec.u_hi - spec.gap;
        if !(0.0..=1.0).contains(&spec.u_hi) || spec.gap < 0.0 || spec.u_lo < 0.0 || spec.u_lo > ceiling {
            return Err(EnvError::Config(format!(
                "planted table needs 0 <= u_lo <= u_hi - gap, u_hi <= 1 (got u_lo {}, u_hi {}, gap {})",
                spec.u_lo, spec.u_hi, spec.gap
            )));
        }
        let optima: Vec<(usize, usize)> = match &spec.optima {
            Some(list) => {
                if list.len() != task_types {
                    return Err(EnvError::Config(format!(
                        "{} optima given for {task_types} task types",
                        list.len()
                    )));
                }
                list.iter()
                    .enumerate()
                    .map(|(t, (m, s))| {
                        let mi = models.iter().position(|x| x == m);
                        let si = skills.iter().position(|x| x == s);
                        mi.zip(si).ok_or_else(|| EnvError::UnknownTriple {
                            task_type: t,
                            model: m.clone(),
                            skill: s.clone(),
                        })
                    })
                    .collect::<Result<_, _>>()?
            }
            None => {
                let (pm, ps) = spec.optimum_pool.unwrap_or((models.len(), skills.len()));
                let (pm, ps) = (pm.clamp(1, models.len()), ps.clamp(1, skills.len()));
                let mut model_order: Vec<usize> = (0..pm).collect();
                let mut skill_order: Vec<usize> = (0..ps).collect();
                model_order.shuffle(rng);
                skill_order.shuffle(rng);
                (0..task_types)
                    .map(|t| (model_order[t % pm], skill_order[(t + t / ps) % ps]))
                    .collect()
            }
        };
        let mut table = Self::constant(task_types, models, skills, 0.0);
        for (t, &(om, os)) in optima.iter().enumerate() {
            for m in 0..models.len() {
                for s in 0..skills.len() {
                    table.u[t][m][s] = if (m, s) == (om, os) {
                        spec.u_hi
                    } else {
                        rng.gen_range(spec.u_lo..=ceiling)
                    };
                }
            }
        }
        let floor = direct_answer_rate.min(spec.u_lo);
        let draw = |rng: &mut StreamRng| rng.gen_range(floor..=spec.u_lo.max(floor));
        table.marginals = Some(Marginals {
            baseline: vec![floor; task_types],
            model_only: (0..task_types).map(|_| (0..models.len()).map(|_| draw(rng)).collect()).collect(),
            skill_only: (0..task_types).map(|_| (0..skills.len()).map(|_| draw(rng)).collect()).collect(),
        });
        Ok((table, optima))
    }

    /// Table in which model and skill effects add up with no interaction.
    pub fn additive(task_types: usize, models: &[String], skills: &[String], rng: &mut StreamRng) -> Self {
        let baseline: Vec<f64> = (0..task_types).map(|_| rng.gen_range(0.0..0.2)).collect();
        let model_gain: Vec<Vec<f64>> = (0..task_types)
            .map(|_| (0..models.len()).map(|_| rng.gen_range(0.0..0.3)).collect())
            .collect();
        let skill_gain: Vec<Vec<f64>> = (0..task_types)
            .map(|_| (0..skills.len()).map(|_| rng.gen_range(0.0..0.3)).collect())
            .collect();
        let mut table = Self::constant(task_types, models, skills, 0.0);
        for t in 0..task_types {
            for m in 0..models.len() {
                for s in 0..skills.len() {
                    table.u[t][m][s] = baseline[t] + model_gain[t][m] + skill_gain[t][s];
                }
            }
        }
        table.marginals = Some(Marginals {
            model_only: model_gain
                .iter()
                .zip(&baseline)
                .map(|(row, b)| row.iter().map(|g| b + g).collect())
                .collect(),
            skill_only: skill_gain
                .iter()
                .zip(&baseline)
                .map(|(row, b)| row.iter().map(|g| b + g).collect())
                .collect(),
            baseline,
        });
        table
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.models.iter().position(|m| m == id)
    }

    pub fn skill_index(&self, id: &str) -> Option<usize> {
        self.skills.iter().position(|s| s == id)
    }

    pub fn get(&self, task_type: usize, model: &str, skill: &str) -> Result<f64, EnvError> {
        let unknown = || EnvError::UnknownTriple {
            task_type,
            model: model.to_string(),
            skill: skill.to_string(),
        };
        let m = self.model_index(model).ok_or_else(unknown)?;
        let s = self.skill_index(skill).ok_or_else(unknown)?;
        self.u.get(task_type).map(|rows| rows[m][s]).ok_or_else(unknown)
    }

    pub fn set(&mut self, task_type: usize, model: &str, skill: &str, value: f64) -> Result<(), EnvError> {
        self.get(task_type, model, skill)?;
        let m = self.model_index(model).expect("checked");
        let s = self.skill_index(skill).expect("checked");
        self.u[task_type][m][s] = value;
        Ok(())
    }

    /// Checks that every `(type, model, skill)` of `registry` has a value in
    /// `[0, 1]`.
    pub fn covers(&self, task_types: usize, registry: &Registry) -> Result<(), EnvError> {
        for t in 0..task_types {
            for m in registry.models() {
                for s in registry.skills() {
                    let v = self.get(t, &m.id, &s.id)?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(EnvError::Config(format!(
                            "utility {v} for ({t}, {}, {}) outside [0, 1]",
                            m.id, s.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn model_ids(registry: &Registry) -> Vec<String> {
    registry.models().iter().map(|m| m.id.clone()).collect()
}

pub fn skill_ids(registry: &Registry) -> Vec<String> {
    registry.skills().iter().map(|s| s.id.clone()).collect()
}

/// Context of an episode in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeState {
    pub task: TaskInstance,
    pub steps: Vec<protocol::Step>,
    pub latest_hint: Option<String>,
    pub turn: usize,
    /// Whether the step being built already has its think block.
    pub pending_think: bool,
    pub searches: usize,
}

impl EpisodeState {
    pub fn new(task: TaskInstance) -> Self {
        EpisodeState {
            task,
            steps: Vec::new(),
            latest_hint: None,
            turn: 0,
            pending_think: false,
            searches: 0,
        }
    }
}

/// Stand-in for an expert-model classifier: picks the child whose id starts
/// with a word that occurs in the query, and otherwise abstains.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubClassifier;

impl Level2Classifier for StubClassifier {
    fn classify(&self, skill: &SkillL1, query: &str) -> Option<String> {
        let tokens = registry::query_tokens(query);
        skill
            .children
            .iter()
            .find(|c| {
                c.id.split('_')
                    .next()
                    .is_some_and(|head| tokens.contains(&head.to_lowercase()))
            })
            .map(|c| c.id.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveSettings {
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_call_budget")]
    pub calls_per_episode: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_call_budget() -> usize {
    4
}

impl Default for LiveSettings {
    fn default() -> Self {
        LiveSettings {
            timeout_ms: default_timeout_ms(),
            calls_per_episode: default_call_budget(),
        }
    }
}

/// Sentinel observations for expert failures. They are ordinary observation
/// text so an episode keeps going.
pub mod sentinel {
    pub const TIMEOUT: &str = "[expert-timeout]";
    pub const BUDGET_EXHAUSTED: &str = "[expert-budget-exhausted]";
    pub const TRANSPORT_PREFIX: &str = "[expert-transport-error";
    pub const INVALID_CALL_PREFIX: &str = "[expert-invalid-call";

    pub fn transport(detail: &str) -> String {
        format!("{TRANSPORT_PREFIX}: {detail}]")
    }

    pub fn invalid_call(detail: &str) -> String {
        format!("{INVALID_CALL_PREFIX}: {detail}]")
    }
}

#[derive(Clone, Debug)]
pub struct Environment {
    pub tasks: TaskGenConfig,
    pub utility: UtilityTable,
    pub obs_token_limit: usize,
    pub live: LiveSettings,
}

impl Environment {
    pub fn new(tasks: TaskGenConfig, utility: UtilityTable) -> Result<Self, EnvError> {
        tasks.validate()?;
        if utility.task_types() != tasks.task_types.len() {
            return Err(EnvError::Config(format!(
                "utility table has {} task types, generator has {}",
                utility.task_types(),
                tasks.task_types.len()
            )));
        }
        Ok(Environment {
            tasks,
            utility,
            obs_token_limit: DEFAULT_OBS_TOKEN_LIMIT,
            live: LiveSettings::default(),
        })
    }

    pub fn sample_task(&self, task_id: &str, rng: &mut StreamRng) -> TaskInstance {
        sample_task_with(&self.tasks, task_id, rng).expect("generator validated at construction")
    }

    /// Synthetic expert call. The returned text is already truncated to the
    /// observation limit.
    #[allow(clippy::too_many_arguments)]
    pub fn execute_search(
        &self,
        state: &EpisodeState,
        model: &ModelEntry,
        skill: &SkillL1,
        _level2: &SkillL2,
        _query: &str,
        rng: &mut StreamRng,
    ) -> Result<String, EnvError> {
        let p = self.utility.get(state.task.task_type, &model.id, &skill.id)?;
        let hint = if rng.gen_bool(p.clamp(0.0, 1.0)) {
            state.task.gold_answer.clone()
        } else {
            self.distractor(&state.task.gold_answer, rng)
        };
        Ok(protocol::truncate_observation(
            &format!("{HINT_PREFIX}{hint}"),
            self.obs_token_limit,
        ))
    }

    pub fn distractor(&self, gold: &str, rng: &mut StreamRng) -> String {
        let others: Vec<String> = self.tasks.answers().into_iter().filter(|a| a != gold).collect();
        others.choose(rng).cloned().unwrap_or_default()
    }

    /// The policy's unaided answer: gold with the task's direct answer rate.
    pub fn direct_guess(&self, task: &TaskInstance, rng: &mut StreamRng) -> String {
        if rng.gen_bool(task.direct_answer_rate.clamp(0.0, 1.0)) {
            task.gold_answer.clone()
        } else {
            self.distractor(&task.gold_answer, rng)
        }
    }

    /// Resolves a parsed search call against the registry, routes it to a
    /// Level-2 skill and runs it on the model's backend. Every failure comes
    /// back as a sentinel observation.
    pub fn invoke(
        &self,
        state: &EpisodeState,
        registry: &Registry,
        call: &SearchCall,
        live_calls: &mut usize,
        rng: &mut StreamRng,
    ) -> String {
        let (Some(model), Some(skill)) = (registry.model(&call.model), registry.skill(&call.skill)) else {
            return sentinel::invalid_call(&format!("{}@@{}", call.model, call.skill));
        };
        let level2 = registry::route_level2(skill, &call.query, Some(&StubClassifier));
        match &model.backend {
            Backend::Synthetic => self
                .execute_search(state, model, skill, level2, &call.query, rng)
                .unwrap_or_else(|e| sentinel::invalid_call(&e.to_string())),
            Backend::Live { endpoint, auth_env } => {
                if *live_calls >= self.live.calls_per_episode {
                    return sentinel::BUDGET_EXHAUSTED.to_string();
                }
                *live_calls += 1;
                let text = call_live(endpoint, auth_env.as_deref(), &model.id, &level2.doc, &call.query, &self.live);
                protocol::truncate_observation(&text, self.obs_token_limit)
            }
        }
    }
}

#[cfg(feature = "live")]
fn call_live(endpoint: &str, auth_env: Option<&str>, model: &str, doc: &str, query: &str, live: &LiveSettings) -> String {
    let target = crate::live::LiveEndpoint {
        url: endpoint.to_string(),
        auth_env: auth_env.map(str::to_string),
    };
    let mut budget = crate::live::CallBudget::new(1);
    crate::live::call_live_expert(
        &target,
        model,
        doc,
        query,
        std::time::Duration::from_millis(live.timeout_ms),
        &mut budget,
    )
}

#[cfg(not(feature = "live"))]
fn call_live(_: &str, _: Option<&str>, _: &str, _: &str, _: &str, _: &LiveSettings) -> String {
    sentinel::transport("live backend not compiled in")
}

/// Exact match after collapsing whitespace.
pub fn judge_answer(task: &TaskInstance, answer: &str) -> bool {
    normalize_ws(answer) == normalize_ws(&task.gold_answer)
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
