//! Diagnostics: compatibility decomposition, oracle utility and routing
//! regret, registry expansion, pass@k / sc@k, the keyword-retrieval
//! baseline and the skill-pool scaling experiment.
//!
//! Oracle quantities are computed in closed form from the utility table;
//! only achieved utilities are Monte Carlo estimates.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{judge_answer, EnvError, Environment, EpisodeState, TaskInstance, UtilityTable, HINT_PREFIX};
use crate::policy::{featurize, FeatureLayout, PolicyParams};
use crate::protocol::SearchCall;
use crate::registry::{baseline_retrieve, Registry};
use crate::rng::{stream_rng, Stream};
use crate::trainer::{run_episode, train, Decoding, TrainConfig, TrainError, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("the second registry does not extend the first")]
    NotAnExtension,
    #[error("registries are not ordered by inclusion")]
    NotNested,
    #[error("ragged input: {0}")]
    RaggedInput(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub u0: f64,
    pub u_m: f64,
    pub u_k: f64,
    pub u_mk: f64,
    pub delta_m: f64,
    pub delta_k: f64,
    /// Interaction beyond the two main effects.
    pub c: f64,
}

/// Splits the joint gain `u_mk - u0` into model effect, skill effect and
/// compatibility.
pub fn compatibility(u0: f64, u_m: f64, u_k: f64, u_mk: f64) -> CompatibilityReport {
    let delta_m = u_m - u0;
    let delta_k = u_k - u0;
    CompatibilityReport {
        u0,
        u_m,
        u_k,
        u_mk,
        delta_m,
        delta_k,
        c: u_mk - delta_m - delta_k - u0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityRow {
    pub task_type: usize,
    pub model: String,
    pub skill: String,
    #[serde(flatten)]
    pub report: CompatibilityReport,
}

/// Decomposition for every `(type, model, skill)` of a table with marginals.
pub fn compatibility_table(table: &UtilityTable) -> Result<Vec<CompatibilityRow>, AnalysisError> {
    let marginals = table
        .marginals
        .as_ref()
        .ok_or_else(|| AnalysisError::Invalid("utility table has no marginals".into()))?;
    let mut rows = Vec::new();
    for t in 0..table.task_types() {
        for (m, model) in table.models.iter().enumerate() {
            for (s, skill) in table.skills.iter().enumerate() {
                rows.push(CompatibilityRow {
                    task_type: t,
                    model: model.clone(),
                    skill: skill.clone(),
                    report: compatibility(
                        marginals.baseline[t],
                        marginals.model_only[t][m],
                        marginals.skill_only[t][s],
                        table.u[t][m][s],
                    ),
                });
            }
        }
    }
    Ok(rows)
}

/// Best pair for one task type among `models x skills`; ties go to the
/// earlier model, then the earlier skill.
pub fn oracle_utility(
    table: &UtilityTable,
    task_type: usize,
    models: &[String],
    skills: &[String],
) -> Result<(f64, (String, String)), AnalysisError> {
    let mut best: Option<(f64, (String, String))> = None;
    for m in models {
        for s in skills {
            let u = table.get(task_type, m, s)?;
            if best.as_ref().is_none_or(|(top, _)| u > *top) {
                best = Some((u, (m.clone(), s.clone())));
            }
        }
    }
    best.ok_or_else(|| AnalysisError::Invalid("empty model or skill pool".into()))
}

/// Oracle utility of `registry` averaged over the task mixture.
pub fn expected_oracle(table: &UtilityTable, registry: &Registry, mixture: &[f64]) -> Result<f64, AnalysisError> {
    let models = crate::environment::model_ids(registry);
    let skills = crate::environment::skill_ids(registry);
    let mut total = 0.0;
    for (t, w) in mixture.iter().enumerate() {
        total += w * oracle_utility(table, t, &models, &skills)?.0;
    }
    Ok(total)
}

/// The decision state right before the first search of a clean episode.
fn search_state(task: TaskInstance) -> EpisodeState {
    let mut state = EpisodeState::new(task);
    state.turn = 1;
    state.pending_think = true;
    state
}

/// Greedy `(model, skill)` indices at the first search of an episode.
pub fn greedy_route(theta: &PolicyParams, registry: &Registry, task: &TaskInstance) -> Result<(usize, usize), AnalysisError> {
    let f = featurize(&search_state(task.clone()), registry, &theta.layout).map_err(TrainError::from)?;
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best });
    let m = argmax(&theta.model_logits(&f));
    Ok((m, argmax(&theta.skill_logits(&f, m))))
}

/// One representative task per type (no feature noise, gold "A").
pub fn prototype_tasks(env: &Environment) -> Vec<TaskInstance> {
    let n = env.tasks.task_types.len();
    (0..n)
        .map(|t| {
            let mut features = vec![0.0; env.tasks.feature_dim()];
            features[t] = 1.0;
            let spec = &env.tasks.task_types[t];
            TaskInstance {
                task_id: format!("prototype-{t}"),
                task_type: t,
                query: spec.query.clone().unwrap_or_else(|| spec.name.clone()),
                context_features: features,
                gold_answer: env.tasks.answer(0),
                direct_answer_rate: env.tasks.direct_answer_rate,
            }
        })
        .collect()
}

/// Closed-form utility of the greedy routes, averaged over the task mixture.
pub fn greedy_route_utility(theta: &PolicyParams, env: &Environment, registry: &Registry) -> Result<f64, AnalysisError> {
    let mut total = 0.0;
    for (task, w) in prototype_tasks(env).iter().zip(env.tasks.mixture()) {
        let (m, s) = greedy_route(theta, registry, task)?;
        total += w * env.utility.get(task.task_type, &registry.models()[m].id, &registry.skills()[s].id)?;
    }
    Ok(total)
}

/// Fraction of `n` held-out tasks whose greedy route is the oracle pair.
pub fn routing_accuracy(
    theta: &PolicyParams,
    env: &Environment,
    registry: &Registry,
    n: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let models = crate::environment::model_ids(registry);
    let skills = crate::environment::skill_ids(registry);
    let optima: Vec<(String, String)> = (0..env.tasks.task_types.len())
        .map(|t| oracle_utility(&env.utility, t, &models, &skills).map(|(_, pair)| pair))
        .collect::<Result<_, _>>()?;
    let mut hits = 0;
    for i in 0..n {
        let task = env.sample_task(&format!("eval-{i}"), &mut stream_rng(seed, Stream::EvalTasks, i as u64));
        let (m, s) = greedy_route(theta, registry, &task)?;
        if (models[m].as_str(), skills[s].as_str()) == (optima[task.task_type].0.as_str(), optima[task.task_type].1.as_str()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    /// Samples per task for pass@k / sc@k; 1 for plain accuracy.
    pub k: usize,
    pub greedy: bool,
    pub temperature: f64,
    pub max_turns: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub k: usize,
    /// Mean correctness of the first sample of each task.
    pub accuracy: f64,
    pub mean_reward: f64,
    pub format_violation_rate: f64,
    pub pass_at_k: f64,
    pub sc_at_k: f64,
    /// Standard error of `mean_reward` over first samples.
    pub reward_std_error: f64,
}

/// Rolls out `k` episodes on each of `episodes` held-out tasks. Task `i`
/// comes from the evaluation task stream, sample `j` of task `i` from the
/// evaluation episode stream at index `i * k + j`.
pub fn evaluate_detailed(
    theta: &PolicyParams,
    env: &Environment,
    registry: &Registry,
    settings: &EvalSettings,
) -> Result<(EvalReport, Vec<Vec<Trajectory>>), AnalysisError> {
    if settings.episodes == 0 || settings.k == 0 {
        return Err(AnalysisError::Invalid("episodes and k must be positive".into()));
    }
    let decoding = if settings.greedy {
        Decoding::Greedy
    } else {
        Decoding::Sample {
            temperature: settings.temperature,
        }
    };
    let per_task: Vec<Vec<Trajectory>> = (0..settings.episodes)
        .into_par_iter()
        .map(|i| {
            let task = env.sample_task(&format!("eval-{i}"), &mut stream_rng(settings.seed, Stream::EvalTasks, i as u64));
            (0..settings.k)
                .map(|j| {
                    let mut rng = stream_rng(settings.seed, Stream::EvalEpisodes, (i * settings.k + j) as u64);
                    run_episode(theta, env, registry, task.clone(), settings.max_turns, decoding, &mut rng)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;

    let n = per_task.len() as f64;
    let firsts: Vec<&Trajectory> = per_task.iter().map(|s| &s[0]).collect();
    let rewards: Vec<f64> = firsts.iter().map(|t| t.reward.total as f64).collect();
    let mean_reward = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let correct: Vec<Vec<bool>> = per_task
        .iter()
        .map(|s| s.iter().map(|t| t.reward.r_ans == 1).collect())
        .collect();
    let answers: Vec<Vec<String>> = per_task
        .iter()
        .map(|s| s.iter().map(|t| t.answer.clone().unwrap_or_default()).collect())
        .collect();
    let gold: Vec<String> = per_task
        .iter()
        .enumerate()
        .map(|(i, _)| {
            env.sample_task(&format!("eval-{i}"), &mut stream_rng(settings.seed, Stream::EvalTasks, i as u64))
                .gold_answer
        })
        .collect();
    let report = EvalReport {
        tasks: per_task.len(),
        k: settings.k,
        accuracy: firsts.iter().filter(|t| t.reward.r_ans == 1).count() as f64 / n,
        mean_reward,
        format_violation_rate: firsts.iter().filter(|t| !t.format_clean()).count() as f64 / n,
        pass_at_k: pass_at_k(&correct)?,
        sc_at_k: sc_at_k(&answers, &gold)?,
        reward_std_error: (var / n).sqrt(),
    };
    Ok((report, per_task))
}

pub fn evaluate(
    theta: &PolicyParams,
    env: &Environment,
    registry: &Registry,
    settings: &EvalSettings,
) -> Result<EvalReport, AnalysisError> {
    evaluate_detailed(theta, env, registry, settings).map(|(r, _)| r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    /// Closed-form expected reward of always routing to the best pair.
    pub oracle: f64,
    /// Monte Carlo mean episode reward of the policy.
    pub achieved: f64,
    pub regret: f64,
    pub std_error: f64,
    pub episodes: usize,
}

/// Regret of `theta` against the always-argmax one-search policy, whose
/// expected reward is the mixture-weighted oracle utility.
pub fn routing_regret(
    theta: &PolicyParams,
    env: &Environment,
    registry: &Registry,
    settings: &EvalSettings,
) -> Result<RegretReport, AnalysisError> {
    let oracle = expected_oracle(&env.utility, registry, &env.tasks.mixture())?;
    let report = evaluate(theta, env, registry, &EvalSettings { k: 1, ..settings.clone() })?;
    Ok(RegretReport {
        oracle,
        achieved: report.mean_reward,
        regret: oracle - report.mean_reward,
        std_error: report.reward_std_error,
        episodes: report.tasks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub oracle_before: f64,
    pub oracle_after: f64,
    pub oracle_gain: f64,
    /// `oracle_after >= oracle_before`, checked exactly.
    pub monotone: bool,
    pub regret_before: f64,
    pub regret_after: f64,
    /// Achieved-utility difference measured directly.
    pub practical_gain: f64,
    /// `oracle_gain - (regret_after - regret_before)`, from independent runs.
    pub decomposed_gain: f64,
    pub residual: f64,
    /// Standard error of the residual.
    pub std_error: f64,
}

impl ExpansionReport {
    /// Residual within `z` standard errors.
    pub fn identity_holds(&self, z: f64) -> bool {
        self.residual.abs() <= z * self.std_error
    }
}

/// Checks that expansion cannot lower the oracle and that the practical gain
/// splits into oracle gain minus regret change. The direct gain and the
/// regret terms are estimated on disjoint seeds, so the residual is pure
/// sampling noise.
pub fn expansion_check(
    before: &Registry,
    after: &Registry,
    theta: &PolicyParams,
    env: &Environment,
    settings: &EvalSettings,
) -> Result<ExpansionReport, AnalysisError> {
    if !before.is_prefix_of(after) {
        return Err(AnalysisError::NotAnExtension);
    }
    let mixture = env.tasks.mixture();
    let oracle_before = expected_oracle(&env.utility, before, &mixture)?;
    let oracle_after = expected_oracle(&env.utility, after, &mixture)?;

    let seeded = |offset: u64| EvalSettings {
        seed: settings.seed.wrapping_add(offset),
        k: 1,
        ..settings.clone()
    };
    let direct_before = evaluate(theta, env, before, &seeded(0))?;
    let direct_after = evaluate(theta, env, after, &seeded(1))?;
    let regret_before = routing_regret(theta, env, before, &seeded(2))?;
    let regret_after = routing_regret(theta, env, after, &seeded(3))?;

    let practical_gain = direct_after.mean_reward - direct_before.mean_reward;
    let oracle_gain = oracle_after - oracle_before;
    let decomposed_gain = oracle_gain - (regret_after.regret - regret_before.regret);
    let std_error = [
        direct_before.reward_std_error,
        direct_after.reward_std_error,
        regret_before.std_error,
        regret_after.std_error,
    ]
    .iter()
    .map(|s| s * s)
    .sum::<f64>()
    .sqrt();
    Ok(ExpansionReport {
        oracle_before,
        oracle_after,
        oracle_gain,
        monotone: oracle_after >= oracle_before,
        regret_before: regret_before.regret,
        regret_after: regret_after.regret,
        practical_gain,
        decomposed_gain,
        residual: practical_gain - decomposed_gain,
        std_error,
    })
}

fn check_rectangular<T>(rows: &[Vec<T>]) -> Result<usize, AnalysisError> {
    let k = rows.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(AnalysisError::RaggedInput("need at least one sample per task".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != k) {
        return Err(AnalysisError::RaggedInput(format!(
            "task {i} has {} samples, expected {k}",
            rows[i].len()
        )));
    }
    Ok(k)
}

/// Fraction of tasks with at least one correct sample.
pub fn pass_at_k(samples: &[Vec<bool>]) -> Result<f64, AnalysisError> {
    check_rectangular(samples)?;
    Ok(samples.iter().filter(|s| s.iter().any(|c| *c)).count() as f64 / samples.len() as f64)
}

/// Most frequent answer; ties go to the answer sampled first.
pub fn plurality(answers: &[String]) -> Option<&str> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        counts.entry(a.as_str()).or_insert((0, i)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .map(|(a, _)| a)
}

/// Accuracy of the plurality vote over each task's samples.
pub fn sc_at_k(answers: &[Vec<String>], gold: &[String]) -> Result<f64, AnalysisError> {
    check_rectangular(answers)?;
    if answers.len() != gold.len() {
        return Err(AnalysisError::RaggedInput(format!(
            "{} answer rows for {} gold answers",
            answers.len(),
            gold.len()
        )));
    }
    let hits = answers
        .iter()
        .zip(gold)
        .filter(|(a, g)| plurality(a) == Some(g.as_str()))
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

/// The retrieval baseline's route: the top keyword-overlap skill, and the
/// model sharing the most capability tags with it (ties to the earlier).
pub fn retrieval_route(registry: &Registry, query: &str) -> (usize, usize) {
    let skill = baseline_retrieve(registry, query, 1)
        .first()
        .and_then(|s| registry.skill_index(&s.id))
        .unwrap_or(0);
    let tags = &registry.skills()[skill].capability_tags;
    let model = registry
        .models()
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, m)| {
            let overlap = m.capability_tags.intersection(tags).count();
            if overlap > best.1 {
                (i, overlap)
            } else {
                best
            }
        })
        .0;
    (model, skill)
}

/// One think / search / think / answer episode on a fixed route; true if
/// the answer is correct.
pub fn fixed_route_episode(
    env: &Environment,
    registry: &Registry,
    task: &TaskInstance,
    route: (usize, usize),
    rng: &mut crate::rng::StreamRng,
) -> bool {
    let state = search_state(task.clone());
    let call = SearchCall {
        model: registry.models()[route.0].id.clone(),
        skill: registry.skills()[route.1].id.clone(),
        query: task.query.clone(),
    };
    let mut live_calls = 0;
    let obs = env.invoke(&state, registry, &call, &mut live_calls, rng);
    obs.strip_prefix(HINT_PREFIX).is_some_and(|hint| judge_answer(task, hint))
}

/// Accuracy of keyword-retrieval routing on `n` held-out tasks.
pub fn retrieval_accuracy(env: &Environment, registry: &Registry, n: usize, seed: u64) -> f64 {
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let task = env.sample_task(&format!("eval-{i}"), &mut stream_rng(seed, Stream::EvalTasks, i as u64));
            let route = retrieval_route(registry, &task.query);
            let mut rng = stream_rng(seed, Stream::EvalEpisodes, i as u64);
            usize::from(fixed_route_episode(env, registry, &task, route, &mut rng))
        })
        .sum();
    hits as f64 / n.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub level1_skills: usize,
    pub level2_skills: usize,
    pub oracle: f64,
    pub accuracy: f64,
    /// Mean wall time of one evaluation episode. The only column that is
    /// not reproducible bit for bit.
    pub mean_episode_us: f64,
}

/// Trains a fresh policy (from `init`) on each registry in turn and
/// evaluates it greedily. Registries must be ordered by inclusion.
pub fn skill_scaling_experiment(
    registries: &[Registry],
    env: &Environment,
    cfg: &TrainConfig,
    eval: &EvalSettings,
    init: impl Fn(FeatureLayout, &Registry) -> PolicyParams,
) -> Result<Vec<ScalingRow>, AnalysisError> {
    if registries.windows(2).any(|w| !w[0].is_prefix_of(&w[1])) {
        return Err(AnalysisError::NotNested);
    }
    let mut rows = Vec::with_capacity(registries.len());
    for registry in registries {
        let layout = FeatureLayout::for_registry(registry, env.tasks.feature_dim(), cfg.max_turns);
        let theta = train(init(layout, registry), env, registry, cfg, |_| {})?;
        let started = Instant::now();
        let report = evaluate(&theta, env, registry, eval)?;
        let elapsed = started.elapsed().as_secs_f64() * 1e6;
        rows.push(ScalingRow {
            level1_skills: registry.skills().len(),
            level2_skills: registry.level2_count(),
            oracle: expected_oracle(&env.utility, registry, &env.tasks.mixture())?,
            accuracy: report.accuracy,
            mean_episode_us: elapsed / (eval.episodes * eval.k) as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compatibility_fixture() {
        let r = compatibility(0.1, 0.4, 0.3, 0.9);
        assert!((r.c - 0.3).abs() < 1e-12);
        assert!((r.delta_m - 0.3).abs() < 1e-12 && (r.delta_k - 0.2).abs() < 1e-12);
        let additive = compatibility(0.2, 0.5, 0.4, 0.5 + 0.4 - 0.2);
        assert!(additive.c.abs() < 1e-12);
    }

    #[test]
    fn plurality_ties_go_to_the_earliest() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(plurality(&s(&["A", "A", "B"])), Some("A"));
        assert_eq!(plurality(&s(&["A", "B"])), Some("A"));
        assert_eq!(plurality(&s(&["B", "A", "A", "B", "C"])), Some("B"));
        assert_eq!(sc_at_k(&[s(&["A", "B"])], &["B".into()]).unwrap(), 0.0);
        assert_eq!(sc_at_k(&[s(&["A", "A", "B"])], &["A".into()]).unwrap(), 1.0);
    }

    #[test]
    fn pass_at_k_fixtures_and_ragged_input() {
        assert_eq!(pass_at_k(&[vec![false; 4], vec![false; 4]]).unwrap(), 0.0);
        assert_eq!(pass_at_k(&[vec![false, true], vec![true, false]]).unwrap(), 1.0);
        assert!(matches!(pass_at_k(&[vec![true], vec![]]), Err(AnalysisError::RaggedInput(_))));
        assert!(matches!(pass_at_k(&[]), Err(AnalysisError::RaggedInput(_))));
    }
}
