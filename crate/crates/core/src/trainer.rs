//! Group-relative policy optimization.
//!
//! Each training step samples a batch of tasks, rolls out a group of
//! episodes per task under the current policy, normalizes the rewards within
//! each group, and takes one gradient-ascent step on the clipped surrogate.
//! Observation records are carried through every stage but never reach the
//! loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{EnvError, Environment, EpisodeState, TaskInstance, HINT_PREFIX};
use crate::policy::{
    entropy, featurize, ActType, AnswerTemplate, ContextFeatures, DecisionRecord, Head, IndexedAction, PolicyError,
    PolicyParams, QueryTemplate,
};
use crate::protocol::{self, SearchCall, TraceText};
use crate::registry::Registry;
use crate::rewards::{total_reward, RewardBreakdown};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("old and new decision records do not line up: {0}")]
    MisalignedRecords(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::group_size")]
    pub group_size: usize,
    #[serde(default = "defaults::max_turns")]
    pub max_turns: usize,
    #[serde(default = "defaults::clip_eps")]
    pub clip_eps: f64,
    #[serde(default = "defaults::dual_clip")]
    pub dual_clip: f64,
    #[serde(default = "defaults::adv_epsilon")]
    pub adv_epsilon: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Tasks per step; each gets its own group.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Surrogate passes over each collected batch. 1 is strictly on-policy.
    #[serde(default = "defaults::ppo_epochs")]
    pub ppo_epochs: usize,
    /// When false the policy trains on answer correctness alone; the format
    /// penalty is still computed and logged.
    #[serde(default = "defaults::use_format_reward")]
    pub use_format_reward: bool,
}

mod defaults {
    pub fn group_size() -> usize {
        8
    }
    pub fn max_turns() -> usize {
        4
    }
    pub fn clip_eps() -> f64 {
        0.2
    }
    pub fn dual_clip() -> f64 {
        3.0
    }
    pub fn adv_epsilon() -> f64 {
        1e-6
    }
    pub fn learning_rate() -> f64 {
        0.1
    }
    pub fn steps() -> usize {
        2000
    }
    pub fn temperature() -> f64 {
        1.0
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn ppo_epochs() -> usize {
        1
    }
    pub fn use_format_reward() -> bool {
        true
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: defaults::group_size(),
            max_turns: defaults::max_turns(),
            clip_eps: defaults::clip_eps(),
            dual_clip: defaults::dual_clip(),
            adv_epsilon: defaults::adv_epsilon(),
            learning_rate: defaults::learning_rate(),
            steps: defaults::steps(),
            temperature: defaults::temperature(),
            seed: 0,
            batch_size: defaults::batch_size(),
            ppo_epochs: defaults::ppo_epochs(),
            use_format_reward: defaults::use_format_reward(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if self.max_turns < 1 {
            return fail("max_turns must be at least 1");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail("clip_eps must lie in (0, 1)");
        }
        if !(self.dual_clip > 1.0 + self.clip_eps) {
            return fail("dual_clip must exceed 1 + clip_eps");
        }
        if !(self.adv_epsilon > 0.0) {
            return fail("adv_epsilon must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.ppo_epochs < 1 {
            return fail("ppo_epochs must be at least 1");
        }
        Ok(())
    }
}

/// How actions are picked during a rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Sample { temperature: f64 },
    Greedy,
}

/// One policy decision with what is needed to recompute its log-prob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub features: ContextFeatures,
    pub action: IndexedAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub task_type: usize,
    pub text: String,
    /// Per-head records in trace order, with one masked record per
    /// injected observation.
    pub records: Vec<DecisionRecord>,
    pub decisions: Vec<Decision>,
    pub reward: RewardBreakdown,
    /// Per-constraint pass flags from the format validator.
    pub format: [bool; 5],
    pub answer: Option<String>,
    /// `(model, skill)` of every search, in order.
    pub routes: Vec<(String, String)>,
}

impl Trajectory {
    pub fn turns(&self) -> usize {
        self.decisions.len()
    }

    pub fn format_clean(&self) -> bool {
        self.reward.r_fmt == 0
    }

    /// Reward the optimizer sees.
    pub fn training_reward(&self, use_format_reward: bool) -> f64 {
        if use_format_reward {
            self.reward.total as f64
        } else {
            self.reward.r_ans as f64
        }
    }

    pub fn unmasked_records(&self) -> impl Iterator<Item = &DecisionRecord> {
        self.records.iter().filter(|r| !r.masked)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    pub trajectories: Vec<Trajectory>,
}

fn think_text(state: &EpisodeState) -> String {
    match &state.latest_hint {
        None => format!("turn {}: no hint yet", state.turn),
        Some(h) => format!("turn {}: latest hint is {h}", state.turn),
    }
}

/// One episode of the think / search / answer loop, stopping after an answer
/// or `max_turns` decisions.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    theta: &PolicyParams,
    env: &Environment,
    registry: &Registry,
    task: TaskInstance,
    max_turns: usize,
    decoding: Decoding,
    rng: &mut crate::rng::StreamRng,
) -> Result<Trajectory, TrainError> {
    let mut state = EpisodeState::new(task);
    let mut text = TraceText::new("");
    let mut records = Vec::new();
    let mut decisions = Vec::new();
    let mut routes = Vec::new();
    let mut live_calls = 0;
    let mut answer = None;

    for turn in 0..max_turns {
        state.turn = turn;
        let features = featurize(&state, registry, &theta.layout)?;
        let (action, head_records) = match decoding {
            Decoding::Sample { temperature } => theta.sample_indexed(&features, temperature, rng),
            Decoding::Greedy => theta.greedy_indexed(&features),
        };
        records.extend(head_records);
        decisions.push(Decision { features, action });

        match ActType::ALL[action.act] {
            ActType::Think => {
                text.push(&protocol::wrap_think(&think_text(&state)));
                state.pending_think = true;
            }
            ActType::Search => {
                let model = &registry.models()[action.model.expect("search has a model")];
                let skill = &registry.skills()[action.skill.expect("search has a skill")];
                let template = QueryTemplate::ALL[action.query.expect("search has a template")];
                let call = SearchCall {
                    model: model.id.clone(),
                    skill: skill.id.clone(),
                    query: template.render(&state.task.query),
                };
                // Registry ids are validated at load, so serialization cannot fail.
                let wire = protocol::serialize_search(&call.model, &call.skill, &call.query)
                    .expect("registry identifiers are valid");
                text.push(&wire);
                let obs = env.invoke(&state, registry, &call, &mut live_calls, rng);
                text.push(&protocol::wrap_observation(&obs));
                records.push(DecisionRecord::observation());
                if let Some(hint) = obs.strip_prefix(HINT_PREFIX) {
                    state.latest_hint = Some(hint.trim().to_string());
                }
                routes.push((call.model, call.skill));
                state.pending_think = false;
                state.searches += 1;
            }
            ActType::Answer => {
                let reply = match AnswerTemplate::ALL[action.answer.expect("answer has a template")] {
                    AnswerTemplate::LatestHint => state.latest_hint.clone().unwrap_or_default(),
                    AnswerTemplate::DirectGuess => env.direct_guess(&state.task, rng),
                };
                text.push(&protocol::wrap_answer(&reply));
                answer = Some(reply);
                break;
            }
        }
    }

    let pt = protocol::parse_trajectory(text.as_str()).with_query(state.task.query.clone());
    let report = protocol::validate_format(&pt, registry);
    let reward = total_reward(&pt, &state.task, &report);
    Ok(Trajectory {
        task_id: state.task.task_id.clone(),
        task_type: state.task.task_type,
        text: text.into_string(),
        records,
        decisions,
        reward,
        format: report.flags(),
        answer,
        routes,
    })
}

/// `G` sampled episodes on one task. Episode `g` draws from
/// `(seed, stream, base_index + g)`, so groups are reproducible regardless of
/// how the work is scheduled.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    theta: &PolicyParams,
    env: &Environment,
    registry: &Registry,
    task: &TaskInstance,
    cfg: &TrainConfig,
    stream: Stream,
    base_index: u64,
) -> Result<RolloutGroup, TrainError> {
    theta.check_compatible(registry, task.context_features.len(), cfg.max_turns)?;
    let trajectories = (0..cfg.group_size)
        .into_par_iter()
        .map(|g| {
            let mut rng = stream_rng(cfg.seed, stream, base_index + g as u64);
            run_episode(
                theta,
                env,
                registry,
                task.clone(),
                cfg.max_turns,
                Decoding::Sample {
                    temperature: cfg.temperature,
                },
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RolloutGroup {
        task: task.clone(),
        trajectories,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub a: Vec<f64>,
    pub mean_reward: f64,
    /// Population standard deviation.
    pub std_reward: f64,
    pub epsilon: f64,
}

/// `A_i = (R_i - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], adv_epsilon: f64) -> AdvantageVector {
    assert!(rewards.len() >= 2, "a group needs at least two rollouts");
    assert!(adv_epsilon > 0.0, "adv_epsilon must be positive");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = rewards.iter().all(|r| *r == rewards[0]);
    let a = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + adv_epsilon)).collect()
    };
    AdvantageVector {
        a,
        mean_reward: mean,
        std_reward: if degenerate { 0.0 } else { std },
        epsilon: adv_epsilon,
    }
}

/// Clipped objective for ratio `rho` and advantage `adv`, and its derivative
/// with respect to `log rho`.
pub fn clipped_objective(rho: f64, adv: f64, clip_eps: f64, dual_clip: f64) -> (f64, f64) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
    let (mut objective, mut slope) = if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    };
    if adv < 0.0 && dual_clip * adv > objective {
        objective = dual_clip * adv;
        slope = 0.0;
    }
    (objective, slope)
}

fn log_ratio(old: &[DecisionRecord], new: &[DecisionRecord]) -> Result<f64, TrainError> {
    let old: Vec<&DecisionRecord> = old.iter().filter(|r| !r.masked).collect();
    let new: Vec<&DecisionRecord> = new.iter().filter(|r| !r.masked).collect();
    if old.len() != new.len() {
        return Err(TrainError::MisalignedRecords(format!(
            "{} old vs {} new unmasked records",
            old.len(),
            new.len()
        )));
    }
    let mut total = 0.0;
    for (i, (o, n)) in old.iter().zip(&new).enumerate() {
        if (o.head, o.index) != (n.head, n.index) {
            return Err(TrainError::MisalignedRecords(format!(
                "record {i}: {:?}#{} vs {:?}#{}",
                o.head, o.index, n.head, n.index
            )));
        }
        total += n.log_prob - o.log_prob;
    }
    Ok(total)
}

/// Clipped, dual-clipped objective of one trajectory. Masked records on
/// either side are ignored.
pub fn trajectory_objective(
    old_records: &[DecisionRecord],
    new_records: &[DecisionRecord],
    adv: f64,
    clip_eps: f64,
    dual_clip: f64,
) -> Result<f64, TrainError> {
    let rho = log_ratio(old_records, new_records)?.exp();
    Ok(clipped_objective(rho, adv, clip_eps, dual_clip).0)
}

/// `-(1/G) * sum of trajectory objectives`.
pub fn surrogate_loss(
    old_records: &[Vec<DecisionRecord>],
    new_records: &[Vec<DecisionRecord>],
    advantages: &[f64],
    clip_eps: f64,
    dual_clip: f64,
) -> Result<f64, TrainError> {
    if old_records.len() != new_records.len() || old_records.len() != advantages.len() {
        return Err(TrainError::MisalignedRecords("group sizes differ".into()));
    }
    let mut total = 0.0;
    for ((old, new), adv) in old_records.iter().zip(new_records).zip(advantages) {
        total += trajectory_objective(old, new, *adv, clip_eps, dual_clip)?;
    }
    Ok(-total / advantages.len() as f64)
}

fn recompute_records(theta: &PolicyParams, trajectory: &Trajectory, temperature: f64) -> Vec<DecisionRecord> {
    trajectory
        .decisions
        .iter()
        .flat_map(|d| theta.indexed_log_prob(&d.features, &d.action, temperature))
        .collect()
}

/// Surrogate loss over a batch of groups under `theta_new` (the groups were
/// collected under the policy whose log-probs they record) and its gradient
/// with respect to `theta_new`. The loss is averaged over all trajectories.
pub fn masked_policy_loss(
    groups: &[RolloutGroup],
    advantages: &[AdvantageVector],
    theta_new: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<(f64, PolicyParams), TrainError> {
    if groups.len() != advantages.len() {
        return Err(TrainError::MisalignedRecords("one advantage vector per group".into()));
    }
    let mut items = Vec::new();
    for (group, adv) in groups.iter().zip(advantages) {
        if group.trajectories.len() != adv.a.len() {
            return Err(TrainError::MisalignedRecords("advantages do not match group size".into()));
        }
        items.extend(group.trajectories.iter().zip(adv.a.iter().copied()));
    }
    let n = items.len().max(1) as f64;
    let per_trajectory = items
        .par_iter()
        .map(|(trajectory, adv)| {
            let new = recompute_records(theta_new, trajectory, cfg.temperature);
            let rho = log_ratio(&trajectory.records, &new)?.exp();
            let (objective, slope) = clipped_objective(rho, *adv, cfg.clip_eps, cfg.dual_clip);
            if slope == 0.0 {
                return Ok((objective, None));
            }
            let mut grad = theta_new.zeros_like();
            for d in &trajectory.decisions {
                theta_new.accumulate_log_prob_grad(&d.features, &d.action, cfg.temperature, -slope / n, &mut grad);
            }
            Ok((objective, Some(grad)))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    // Summed in a fixed order so results do not depend on thread scheduling.
    let mut loss = 0.0;
    let mut grad = theta_new.zeros_like();
    for (objective, g) in per_trajectory {
        loss -= objective / n;
        if let Some(g) = g {
            grad.add_scaled(1.0, &g);
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub step: usize,
    /// Mean of the reward the optimizer sees.
    pub mean_reward: f64,
    /// Fraction of rollouts with a correct answer.
    pub answer_rate: f64,
    pub mean_abs_advantage: f64,
    pub format_violation_rate: f64,
    pub mean_turns: f64,
    pub loss: f64,
    pub entropy_act_type: f64,
    pub entropy_model: f64,
    pub entropy_skill: f64,
    pub entropy_query_template: f64,
    pub entropy_answer_template: f64,
}

impl UpdateStats {
    pub fn entropy(&self, head: Head) -> f64 {
        match head {
            Head::ActType => self.entropy_act_type,
            Head::Model => self.entropy_model,
            Head::Skill => self.entropy_skill,
            Head::QueryTemplate => self.entropy_query_template,
            Head::AnswerTemplate => self.entropy_answer_template,
            Head::Observation => 0.0,
        }
    }
}

/// Mean entropy of each head over the decisions that consulted it.
fn head_entropies(theta: &PolicyParams, groups: &[RolloutGroup], temperature: f64) -> [f64; 5] {
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for d in groups.iter().flat_map(|g| &g.trajectories).flat_map(|t| &t.decisions) {
        let mut add = |slot: usize, head: Head, model: Option<usize>| {
            sums[slot] += entropy(&theta.head_log_probs(head, &d.features, model, temperature));
            counts[slot] += 1;
        };
        add(0, Head::ActType, None);
        if let Some(m) = d.action.model {
            add(1, Head::Model, None);
            add(2, Head::Skill, Some(m));
            add(3, Head::QueryTemplate, None);
        }
        if d.action.answer.is_some() {
            add(4, Head::AnswerTemplate, None);
        }
    }
    let mut out = [0.0; 5];
    for i in 0..5 {
        if counts[i] > 0 {
            out[i] = sums[i] / counts[i] as f64;
        }
    }
    out
}

/// Tasks for training step `step`.
pub fn training_tasks(env: &Environment, cfg: &TrainConfig, step: usize) -> Vec<TaskInstance> {
    (0..cfg.batch_size)
        .map(|b| {
            let index = (step * cfg.batch_size + b) as u64;
            let mut rng = stream_rng(cfg.seed, Stream::TrainTasks, index);
            env.sample_task(&format!("train-{step}-{b}"), &mut rng)
        })
        .collect()
}

pub struct StepOutcome {
    pub theta: PolicyParams,
    pub stats: UpdateStats,
    pub groups: Vec<RolloutGroup>,
}

/// One optimization step: collect, normalize, update.
pub fn train_step(
    theta: &PolicyParams,
    env: &Environment,
    registry: &Registry,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepOutcome, TrainError> {
    cfg.validate()?;
    let tasks = training_tasks(env, cfg, step);
    let groups = tasks
        .par_iter()
        .enumerate()
        .map(|(b, task)| {
            let base = ((step * cfg.batch_size + b) * cfg.group_size) as u64;
            collect_group(theta, env, registry, task, cfg, Stream::TrainEpisodes, base)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let advantages: Vec<AdvantageVector> = groups
        .iter()
        .map(|g| {
            let rewards: Vec<f64> = g
                .trajectories
                .iter()
                .map(|t| t.training_reward(cfg.use_format_reward))
                .collect();
            group_advantages(&rewards, cfg.adv_epsilon)
        })
        .collect();

    let mut next = theta.clone();
    let mut first_loss = None;
    for _ in 0..cfg.ppo_epochs {
        let (loss, grad) = masked_policy_loss(&groups, &advantages, &next, cfg)?;
        first_loss.get_or_insert(loss);
        next.add_scaled(-cfg.learning_rate, &grad);
    }

    let trajectories: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
    let n = trajectories.len() as f64;
    let entropies = head_entropies(theta, &groups, cfg.temperature);
    let stats = UpdateStats {
        step,
        mean_reward: trajectories
            .iter()
            .map(|t| t.training_reward(cfg.use_format_reward))
            .sum::<f64>()
            / n,
        answer_rate: trajectories.iter().map(|t| t.reward.r_ans as f64).sum::<f64>() / n,
        mean_abs_advantage: advantages.iter().flat_map(|a| &a.a).map(|a| a.abs()).sum::<f64>() / n,
        format_violation_rate: trajectories.iter().filter(|t| !t.format_clean()).count() as f64 / n,
        mean_turns: trajectories.iter().map(|t| t.turns() as f64).sum::<f64>() / n,
        loss: first_loss.unwrap_or(0.0),
        entropy_act_type: entropies[0],
        entropy_model: entropies[1],
        entropy_skill: entropies[2],
        entropy_query_template: entropies[3],
        entropy_answer_template: entropies[4],
    };
    Ok(StepOutcome {
        theta: next,
        stats,
        groups,
    })
}

/// Runs `cfg.steps` steps from `theta`, handing every outcome to `observe`.
pub fn train(
    theta: PolicyParams,
    env: &Environment,
    registry: &Registry,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepOutcome),
) -> Result<PolicyParams, TrainError> {
    cfg.validate()?;
    let mut theta = theta;
    for step in 0..cfg.steps {
        let outcome = train_step(&theta, env, registry, cfg, step)?;
        observe(&outcome);
        theta = outcome.theta;
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{PlantedSpec, TaskGenConfig, UtilityTable};
    use crate::policy::FeatureLayout;
    use crate::registry::builtin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world() -> (Registry, Environment, FeatureLayout) {
        let reg = builtin::default_registry();
        let tasks = TaskGenConfig::uniform(5);
        let mut rng = stream_rng(1, Stream::Utility, 0);
        let (table, _) = UtilityTable::planted(
            5,
            &crate::environment::model_ids(&reg),
            &crate::environment::skill_ids(&reg),
            &PlantedSpec::default(),
            0.1,
            &mut rng,
        )
        .unwrap();
        let env = Environment::new(tasks, table).unwrap();
        let layout = FeatureLayout::for_registry(&reg, 5, 4);
        (reg, env, layout)
    }

    #[test]
    fn advantage_fixtures() {
        let a = group_advantages(&[1.0; 8], 1e-6);
        assert!(a.a.iter().all(|x| *x == 0.0));
        let a = group_advantages(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], 1e-6);
        // mean 0.5, population std 0.5 -> 0.5 / 0.500001
        let expected = 0.5 / (0.5 + 1e-6);
        for (i, x) in a.a.iter().enumerate() {
            let sign = if i < 4 { 1.0 } else { -1.0 };
            assert!((x - sign * expected).abs() < 1e-12);
            assert!((x.abs() - 0.999998).abs() < 1e-6);
        }
        let a = group_advantages(&[1.0, 0.0], 1e-6);
        assert!((a.a[0] - expected).abs() < 1e-12 && (a.a[1] + expected).abs() < 1e-12);
    }

    #[test]
    fn clip_fixtures() {
        assert_eq!(clipped_objective(1.0, 0.7, 0.2, 3.0).0, 0.7);
        assert!((clipped_objective(2.0, 1.0, 0.2, 3.0).0 - 1.2).abs() < 1e-12);
        assert!((clipped_objective(10.0, -1.0, 0.2, 3.0).0 + 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_invariants_are_enforced() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                group_size: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                max_turns: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                dual_clip: 1.1,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn group_has_g_bounded_trajectories_and_is_reproducible() {
        let (reg, env, layout) = world();
        let theta = PolicyParams::zeros(layout);
        let cfg = TrainConfig::default();
        let mut rng = stream_rng(3, Stream::TrainTasks, 0);
        let task = env.sample_task("t", &mut rng);
        let a = collect_group(&theta, &env, &reg, &task, &cfg, Stream::TrainEpisodes, 0).unwrap();
        assert_eq!(a.trajectories.len(), 8);
        assert!(a.trajectories.iter().all(|t| t.turns() <= 4));
        let b = collect_group(&theta, &env, &reg, &task, &cfg, Stream::TrainEpisodes, 0).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn immediate_answer_policy_never_searches() {
        let (reg, env, layout) = world();
        let mut theta = PolicyParams::zeros(layout.clone());
        *theta.act_type.get_mut(ActType::Answer.index(), layout.bias_index()) = 50.0;
        let cfg = TrainConfig::default();
        let mut rng = stream_rng(3, Stream::TrainTasks, 0);
        let task = env.sample_task("t", &mut rng);
        let group = collect_group(&theta, &env, &reg, &task, &cfg, Stream::TrainEpisodes, 0).unwrap();
        for t in &group.trajectories {
            assert_eq!(t.turns(), 1);
            assert!(t.records.iter().all(|r| !r.masked));
            assert!(t.routes.is_empty());
        }
    }

    #[test]
    fn scripted_policy_produces_clean_trajectories() {
        let (reg, env, layout) = world();
        let theta = PolicyParams::scripted(layout, &reg, None, 20.0);
        let cfg = TrainConfig::default();
        let mut rng = stream_rng(4, Stream::TrainTasks, 0);
        let task = env.sample_task("t", &mut rng);
        let group = collect_group(&theta, &env, &reg, &task, &cfg, Stream::TrainEpisodes, 0).unwrap();
        for t in &group.trajectories {
            assert!(t.format_clean(), "{}", t.text);
            assert_eq!(t.turns(), 4);
            assert_eq!(t.records.iter().filter(|r| r.masked).count(), 1);
        }
    }

    fn random_theta(layout: &FeatureLayout, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
        let mut p = PolicyParams::zeros(layout.clone());
        let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.gen_range(-scale..scale)).collect();
        p.set_flat(&flat);
        p
    }

    #[test]
    fn zero_learning_rate_and_degenerate_groups_leave_theta_unchanged() {
        let (reg, env, layout) = world();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = random_theta(&layout, &mut rng, 0.5);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert_eq!(train_step(&theta, &env, &reg, &cfg, 0).unwrap().theta, theta);

        // every episode answers immediately with an empty hint: reward -1 for all
        let mut stuck = PolicyParams::zeros(layout.clone());
        *stuck.act_type.get_mut(ActType::Answer.index(), layout.bias_index()) = 80.0;
        *stuck.answer_template.get_mut(0, layout.bias_index()) = 80.0;
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train_step(&stuck, &env, &reg, &cfg, 0).unwrap();
        assert!(out.groups.iter().flat_map(|g| &g.trajectories).all(|t| t.reward.total == -1));
        assert_eq!(out.theta, stuck);
    }

    #[test]
    fn masked_records_do_not_touch_loss_or_gradient() {
        let (reg, env, layout) = world();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = random_theta(&layout, &mut rng, 0.5);
        let cfg = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let out = train_step(&theta, &env, &reg, &cfg, 0).unwrap();
        let adv: Vec<AdvantageVector> = out
            .groups
            .iter()
            .map(|g| {
                let r: Vec<f64> = g.trajectories.iter().map(|t| t.training_reward(true)).collect();
                group_advantages(&r, cfg.adv_epsilon)
            })
            .collect();
        let theta_new = random_theta(&layout, &mut rng, 0.5);
        let (loss, grad) = masked_policy_loss(&out.groups, &adv, &theta_new, &cfg).unwrap();
        let mut noisy = out.groups.clone();
        for t in noisy.iter_mut().flat_map(|g| &mut g.trajectories) {
            let at = rng.gen_range(0..=t.records.len());
            t.records.insert(
                at,
                DecisionRecord {
                    head: Head::Observation,
                    index: 3,
                    log_prob: rng.gen_range(-50.0..0.0),
                    masked: true,
                },
            );
        }
        let (loss2, grad2) = masked_policy_loss(&noisy, &adv, &theta_new, &cfg).unwrap();
        assert_eq!(loss.to_bits(), loss2.to_bits());
        assert_eq!(grad, grad2);
    }

    #[test]
    fn misaligned_records_are_rejected() {
        let rec = |head, index| DecisionRecord {
            head,
            index,
            log_prob: -1.0,
            masked: false,
        };
        let old = vec![rec(Head::ActType, 0)];
        assert!(matches!(
            trajectory_objective(&old, &[rec(Head::ActType, 1)], 1.0, 0.2, 3.0),
            Err(TrainError::MisalignedRecords(_))
        ));
        assert!(matches!(
            trajectory_objective(&old, &[], 1.0, 0.2, 3.0),
            Err(TrainError::MisalignedRecords(_))
        ));
    }
}
