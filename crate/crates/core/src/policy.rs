//! The trainable orchestrator.
//!
//! A factorized categorical policy with linear logits. Per decision it picks
//! an act type (think / search / answer); a search then picks a model, a
//! Level-1 skill and a query template, an answer picks an answer template.
//!
//! Models and skills are never addressed by index. Each is described by an
//! indicator vector over a capability-tag vocabulary fixed when the policy is
//! created, and scored bilinearly against the shared context:
//!
//! ```text
//! model logit(m)  = c^T  W_model phi(m)
//! skill logit(k)  = [c; phi(m)]^T W_skill psi(k)
//! ```
//!
//! where `c` is the task-context block of the features. Routing deliberately
//! ignores turn and progress features: those are identical on every search,
//! and letting them into the routing heads lets a type-independent favourite
//! outrun the per-type signal.
//!
//! so entries added to the registry later are scored through the tags they
//! share with known entries, with no new parameters.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EpisodeState;
use crate::protocol;
use crate::registry::Registry;

pub const CHECKPOINT_FORMAT: &str = "skillroute-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("registry version {registry} predates the policy's layout (built for version {layout})")]
    VersionMismatch { registry: u64, layout: u64 },
    #[error("feature layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("identifier {0:?} is not in the registry")]
    UnresolvableIdentifier(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActType {
    Think,
    Search,
    Answer,
}

impl ActType {
    pub const ALL: [ActType; 3] = [ActType::Think, ActType::Search, ActType::Answer];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// How the dispatched query `z` is phrased.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTemplate {
    RestateTask,
    AskForHint,
}

impl QueryTemplate {
    pub const ALL: [QueryTemplate; 2] = [QueryTemplate::RestateTask, QueryTemplate::AskForHint];

    pub fn render(self, task_query: &str) -> String {
        match self {
            QueryTemplate::RestateTask => task_query.to_string(),
            QueryTemplate::AskForHint => format!("give a hint for: {task_query}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerTemplate {
    /// Repeat the payload of the most recent hint (empty if none arrived).
    LatestHint,
    /// Answer from the policy's own knowledge.
    DirectGuess,
}

impl AnswerTemplate {
    pub const ALL: [AnswerTemplate; 2] = [AnswerTemplate::LatestHint, AnswerTemplate::DirectGuess];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    Think,
    Search {
        model: String,
        skill: String,
        template: QueryTemplate,
    },
    Answer(AnswerTemplate),
}

impl PolicyAction {
    pub fn act_type(&self) -> ActType {
        match self {
            PolicyAction::Think => ActType::Think,
            PolicyAction::Search { .. } => ActType::Search,
            PolicyAction::Answer(_) => ActType::Answer,
        }
    }

    /// Wire form of a search action.
    pub fn search_text(&self, task_query: &str) -> Option<Result<protocol::TraceText, protocol::ProtocolError>> {
        match self {
            PolicyAction::Search { model, skill, template } => {
                Some(protocol::serialize_search(model, skill, &template.render(task_query)))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ActType,
    Model,
    Skill,
    QueryTemplate,
    AnswerTemplate,
    /// Environment-injected content; always masked.
    Observation,
}

impl Head {
    pub const POLICY: [Head; 5] = [
        Head::ActType,
        Head::Model,
        Head::Skill,
        Head::QueryTemplate,
        Head::AnswerTemplate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Head::ActType => "act_type",
            Head::Model => "model",
            Head::Skill => "skill",
            Head::QueryTemplate => "query_template",
            Head::AnswerTemplate => "answer_template",
            Head::Observation => "observation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub head: Head,
    pub index: usize,
    pub log_prob: f64,
    pub masked: bool,
}

impl DecisionRecord {
    pub fn observation() -> Self {
        DecisionRecord {
            head: Head::Observation,
            index: 0,
            log_prob: 0.0,
            masked: true,
        }
    }
}

/// Shape of the feature space a policy was built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    /// Length of the task context feature vector.
    pub context_dim: usize,
    pub max_turns: usize,
    /// Capability-tag vocabulary; unknown tags score zero.
    pub tags: Vec<String>,
    /// Registry version the layout was derived from.
    pub registry_version: u64,
}

impl FeatureLayout {
    pub fn for_registry(registry: &Registry, context_dim: usize, max_turns: usize) -> Self {
        FeatureLayout {
            context_dim,
            max_turns,
            tags: registry.tag_vocabulary(),
            registry_version: registry.version(),
        }
    }

    /// bias, task context, turn one-hot, hint received, think pending
    pub fn shared_dim(&self) -> usize {
        1 + self.context_dim + self.max_turns + 2
    }

    pub fn tag_dim(&self) -> usize {
        self.tags.len()
    }

    pub fn bias_index(&self) -> usize {
        0
    }

    pub fn context_index(&self, i: usize) -> usize {
        1 + i
    }

    pub fn turn_index(&self, turn: usize) -> usize {
        1 + self.context_dim + turn.min(self.max_turns.saturating_sub(1))
    }

    pub fn hint_index(&self) -> usize {
        1 + self.context_dim + self.max_turns
    }

    pub fn pending_think_index(&self) -> usize {
        self.hint_index() + 1
    }

    fn tag_vector<'a>(&self, tags: impl IntoIterator<Item = &'a String>, lookup: &HashMap<&str, usize>) -> Vec<f64> {
        let mut v = vec![0.0; self.tag_dim()];
        for tag in tags {
            if let Some(&i) = lookup.get(tag.as_str()) {
                v[i] = 1.0;
            }
        }
        v
    }
}

/// Policy input for one decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub shared: Vec<f64>,
    /// Capability-tag indicators per model, in registry order.
    pub models: Vec<Vec<f64>>,
    /// Capability-tag indicators per Level-1 skill, in registry order.
    pub skills: Vec<Vec<f64>>,
}

pub fn featurize(state: &EpisodeState, registry: &Registry, layout: &FeatureLayout) -> Result<ContextFeatures, PolicyError> {
    if registry.version() < layout.registry_version {
        return Err(PolicyError::VersionMismatch {
            registry: registry.version(),
            layout: layout.registry_version,
        });
    }
    if state.task.context_features.len() != layout.context_dim {
        return Err(PolicyError::LayoutMismatch(format!(
            "task has {} context features, layout expects {}",
            state.task.context_features.len(),
            layout.context_dim
        )));
    }
    let mut shared = vec![0.0; layout.shared_dim()];
    shared[layout.bias_index()] = 1.0;
    for (i, v) in state.task.context_features.iter().enumerate() {
        shared[layout.context_index(i)] = *v;
    }
    shared[layout.turn_index(state.turn)] = 1.0;
    if state.latest_hint.is_some() {
        shared[layout.hint_index()] = 1.0;
    }
    if state.pending_think {
        shared[layout.pending_think_index()] = 1.0;
    }
    let lookup: HashMap<&str, usize> = layout.tags.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    Ok(ContextFeatures {
        shared,
        models: registry
            .models()
            .iter()
            .map(|m| layout.tag_vector(&m.capability_tags, &lookup))
            .collect(),
        skills: registry
            .skills()
            .iter()
            .map(|s| layout.tag_vector(&s.capability_tags, &lookup))
            .collect(),
    })
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        self.data[r * self.cols..(r + 1) * self.cols]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// `x^T M y`
    fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut total = 0.0;
        for (r, xr) in x.iter().enumerate() {
            if *xr == 0.0 {
                continue;
            }
            total += xr * self.row_dot(r, y);
        }
        total
    }
}

/// Every trainable weight, one matrix per decision head. Also used as the
/// gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layout: FeatureLayout,
    /// `3 x shared`
    pub act_type: Matrix,
    /// `context x tags`
    pub model: Matrix,
    /// `(context + tags) x tags`
    pub skill: Matrix,
    /// `2 x shared`
    pub query_template: Matrix,
    /// `2 x shared`
    pub answer_template: Matrix,
}

/// A search/answer decision resolved to head indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedAction {
    pub act: usize,
    pub model: Option<usize>,
    pub skill: Option<usize>,
    pub query: Option<usize>,
    pub answer: Option<usize>,
}

impl IndexedAction {
    pub fn resolve(action: &PolicyAction, registry: &Registry) -> Result<Self, PolicyError> {
        Ok(match action {
            PolicyAction::Think => IndexedAction {
                act: ActType::Think.index(),
                model: None,
                skill: None,
                query: None,
                answer: None,
            },
            PolicyAction::Search { model, skill, template } => IndexedAction {
                act: ActType::Search.index(),
                model: Some(
                    registry
                        .model_index(model)
                        .ok_or_else(|| PolicyError::UnresolvableIdentifier(model.clone()))?,
                ),
                skill: Some(
                    registry
                        .skill_index(skill)
                        .ok_or_else(|| PolicyError::UnresolvableIdentifier(skill.clone()))?,
                ),
                query: Some(QueryTemplate::ALL.iter().position(|t| t == template).expect("listed")),
                answer: None,
            },
            PolicyAction::Answer(template) => IndexedAction {
                act: ActType::Answer.index(),
                model: None,
                skill: None,
                query: None,
                answer: Some(AnswerTemplate::ALL.iter().position(|t| t == template).expect("listed")),
            },
        })
    }

    pub fn to_action(self, registry: &Registry) -> PolicyAction {
        match ActType::ALL[self.act] {
            ActType::Think => PolicyAction::Think,
            ActType::Search => PolicyAction::Search {
                model: registry.models()[self.model.expect("search has a model")].id.clone(),
                skill: registry.skills()[self.skill.expect("search has a skill")].id.clone(),
                template: QueryTemplate::ALL[self.query.expect("search has a template")],
            },
            ActType::Answer => PolicyAction::Answer(AnswerTemplate::ALL[self.answer.expect("answer has a template")]),
        }
    }
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|z| z - lse).collect()
}

/// Index of the first maximum.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if draw < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum.
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite() && *lp > f64::NEG_INFINITY)
        .unwrap_or(log_probs.len() - 1)
}

pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|lp| lp.exp() * lp)
        .sum::<f64>()
}

impl PolicyParams {
    pub fn zeros(layout: FeatureLayout) -> Self {
        let s = layout.shared_dim();
        let c = layout.context_dim;
        let h = layout.tag_dim();
        PolicyParams {
            act_type: Matrix::zeros(ActType::ALL.len(), s),
            model: Matrix::zeros(c, h),
            skill: Matrix::zeros(c + h, h),
            query_template: Matrix::zeros(QueryTemplate::ALL.len(), s),
            answer_template: Matrix::zeros(AnswerTemplate::ALL.len(), s),
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn matrices(&self) -> [(Head, &Matrix); 5] {
        [
            (Head::ActType, &self.act_type),
            (Head::Model, &self.model),
            (Head::Skill, &self.skill),
            (Head::QueryTemplate, &self.query_template),
            (Head::AnswerTemplate, &self.answer_template),
        ]
    }

    pub fn matrices_mut(&mut self) -> [(Head, &mut Matrix); 5] {
        [
            (Head::ActType, &mut self.act_type),
            (Head::Model, &mut self.model),
            (Head::Skill, &mut self.skill),
            (Head::QueryTemplate, &mut self.query_template),
            (Head::AnswerTemplate, &mut self.answer_template),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.matrices().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|(_, m)| m.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for (_, m) in self.matrices_mut() {
            let n = m.data.len();
            m.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &PolicyParams) {
        for ((_, a), (_, b)) in self.matrices_mut().into_iter().zip(other.matrices()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale_head(&mut self, head: Head, factor: f64) {
        for (h, m) in self.matrices_mut() {
            if h == head {
                m.data.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|(_, m)| m.data.iter().all(|x| x.is_finite()))
    }

    pub fn act_logits(&self, f: &ContextFeatures) -> Vec<f64> {
        (0..ActType::ALL.len()).map(|k| self.act_type.row_dot(k, &f.shared)).collect()
    }

    /// The task-context block of the shared features.
    fn routing_context<'a>(&self, f: &'a ContextFeatures) -> &'a [f64] {
        let start = self.layout.context_index(0);
        &f.shared[start..start + self.layout.context_dim]
    }

    pub fn model_logits(&self, f: &ContextFeatures) -> Vec<f64> {
        let c = self.routing_context(f);
        f.models.iter().map(|phi| self.model.bilinear(c, phi)).collect()
    }

    fn skill_input(&self, f: &ContextFeatures, model: usize) -> Vec<f64> {
        let mut u = self.routing_context(f).to_vec();
        u.extend_from_slice(&f.models[model]);
        u
    }

    pub fn skill_logits(&self, f: &ContextFeatures, model: usize) -> Vec<f64> {
        let u = self.skill_input(f, model);
        f.skills.iter().map(|psi| self.skill.bilinear(&u, psi)).collect()
    }

    pub fn query_logits(&self, f: &ContextFeatures) -> Vec<f64> {
        (0..QueryTemplate::ALL.len()).map(|k| self.query_template.row_dot(k, &f.shared)).collect()
    }

    pub fn answer_logits(&self, f: &ContextFeatures) -> Vec<f64> {
        (0..AnswerTemplate::ALL.len()).map(|k| self.answer_template.row_dot(k, &f.shared)).collect()
    }

    /// Log-probabilities of one head. `model` conditions the skill head.
    pub fn head_log_probs(&self, head: Head, f: &ContextFeatures, model: Option<usize>, temperature: f64) -> Vec<f64> {
        let logits = match head {
            Head::ActType => self.act_logits(f),
            Head::Model => self.model_logits(f),
            Head::Skill => self.skill_logits(f, model.expect("skill head is conditioned on a model")),
            Head::QueryTemplate => self.query_logits(f),
            Head::AnswerTemplate => self.answer_logits(f),
            Head::Observation => return vec![0.0],
        };
        log_softmax(&logits, temperature)
    }

    fn decide(
        &self,
        f: &ContextFeatures,
        temperature: f64,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> (IndexedAction, Vec<DecisionRecord>) {
        let mut records = Vec::with_capacity(4);
        let mut choose = |head: Head, model: Option<usize>, records: &mut Vec<DecisionRecord>| {
            let lp = self.head_log_probs(head, f, model, temperature);
            let index = pick(&lp);
            records.push(DecisionRecord {
                head,
                index,
                log_prob: lp[index],
                masked: false,
            });
            index
        };
        let act = choose(Head::ActType, None, &mut records);
        let mut action = IndexedAction {
            act,
            model: None,
            skill: None,
            query: None,
            answer: None,
        };
        match ActType::ALL[act] {
            ActType::Think => {}
            ActType::Search => {
                let model = choose(Head::Model, None, &mut records);
                action.model = Some(model);
                action.skill = Some(choose(Head::Skill, Some(model), &mut records));
                action.query = Some(choose(Head::QueryTemplate, None, &mut records));
            }
            ActType::Answer => action.answer = Some(choose(Head::AnswerTemplate, None, &mut records)),
        }
        (action, records)
    }

    pub fn sample_indexed(
        &self,
        f: &ContextFeatures,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> (IndexedAction, Vec<DecisionRecord>) {
        assert!(temperature > 0.0, "temperature must be positive");
        self.decide(f, temperature, |lp| sample_index(lp, rng))
    }

    /// Argmax decision; records carry log-probs at temperature 1.
    pub fn greedy_indexed(&self, f: &ContextFeatures) -> (IndexedAction, Vec<DecisionRecord>) {
        self.decide(f, 1.0, argmax)
    }

    /// Samples one decision at `temperature`, returning the action and one
    /// record per head consulted.
    pub fn sample_action(
        &self,
        f: &ContextFeatures,
        registry: &Registry,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> (PolicyAction, Vec<DecisionRecord>) {
        assert!(temperature > 0.0, "temperature must be positive");
        let (indexed, records) = self.decide(f, temperature, |lp| sample_index(lp, rng));
        (indexed.to_action(registry), records)
    }

    /// Per-head argmax, ties to the lowest index.
    pub fn greedy_action(&self, f: &ContextFeatures, registry: &Registry) -> PolicyAction {
        let (indexed, _) = self.decide(f, 1.0, argmax);
        indexed.to_action(registry)
    }

    /// Records `sample_action` would have produced for `action`.
    pub fn action_log_prob(
        &self,
        f: &ContextFeatures,
        registry: &Registry,
        action: &PolicyAction,
        temperature: f64,
    ) -> Result<Vec<DecisionRecord>, PolicyError> {
        let indexed = IndexedAction::resolve(action, registry)?;
        Ok(self.indexed_log_prob(f, &indexed, temperature))
    }

    pub fn indexed_log_prob(&self, f: &ContextFeatures, action: &IndexedAction, temperature: f64) -> Vec<DecisionRecord> {
        let mut records = Vec::with_capacity(4);
        let mut push = |head: Head, model: Option<usize>, index: usize| {
            let lp = self.head_log_probs(head, f, model, temperature);
            records.push(DecisionRecord {
                head,
                index,
                log_prob: lp[index],
                masked: false,
            });
        };
        push(Head::ActType, None, action.act);
        if let Some(m) = action.model {
            push(Head::Model, None, m);
            push(Head::Skill, Some(m), action.skill.expect("search has a skill"));
            push(Head::QueryTemplate, None, action.query.expect("search has a template"));
        }
        if let Some(a) = action.answer {
            push(Head::AnswerTemplate, None, a);
        }
        records
    }

    /// Adds `weight * d/dtheta log pi(action | f)` into `grad`.
    pub fn accumulate_log_prob_grad(
        &self,
        f: &ContextFeatures,
        action: &IndexedAction,
        temperature: f64,
        weight: f64,
        grad: &mut PolicyParams,
    ) {
        let w = weight / temperature;
        let s = &f.shared;

        // Rows of a linear head: d log p_k / d W[j, :] = (1[j = k] - p_j) x
        let linear = |m: &mut Matrix, lp: &[f64], chosen: usize, x: &[f64]| {
            for (j, lpj) in lp.iter().enumerate() {
                let coef = w * (if j == chosen { 1.0 } else { 0.0 } - lpj.exp());
                if coef == 0.0 {
                    continue;
                }
                for (c, xc) in x.iter().enumerate() {
                    *m.get_mut(j, c) += coef * xc;
                }
            }
        };
        // Bilinear head: d log p_k / d W = x (phi_k - E_p[phi])^T
        let bilinear = |m: &mut Matrix, lp: &[f64], chosen: usize, x: &[f64], items: &[Vec<f64>]| {
            let mut centered = items[chosen].clone();
            for (item, lpi) in items.iter().zip(lp) {
                let p = lpi.exp();
                for (c, v) in centered.iter_mut().zip(item) {
                    *c -= p * v;
                }
            }
            for (r, xr) in x.iter().enumerate() {
                if *xr == 0.0 {
                    continue;
                }
                for (c, v) in centered.iter().enumerate() {
                    *m.get_mut(r, c) += w * xr * v;
                }
            }
        };

        let lp = self.head_log_probs(Head::ActType, f, None, temperature);
        linear(&mut grad.act_type, &lp, action.act, s);
        if let Some(m) = action.model {
            let lp = self.head_log_probs(Head::Model, f, None, temperature);
            bilinear(&mut grad.model, &lp, m, self.routing_context(f), &f.models);
            let k = action.skill.expect("search has a skill");
            let lp = self.head_log_probs(Head::Skill, f, Some(m), temperature);
            bilinear(&mut grad.skill, &lp, k, &self.skill_input(f, m), &f.skills);
            let q = action.query.expect("search has a template");
            let lp = self.head_log_probs(Head::QueryTemplate, f, None, temperature);
            linear(&mut grad.query_template, &lp, q, s);
        }
        if let Some(a) = action.answer {
            let lp = self.head_log_probs(Head::AnswerTemplate, f, None, temperature);
            linear(&mut grad.answer_template, &lp, a, s);
        }
    }

    /// Checks that this policy can run against `registry` with tasks of
    /// `context_dim` features and episodes of `max_turns` turns.
    pub fn check_compatible(&self, registry: &Registry, context_dim: usize, max_turns: usize) -> Result<(), PolicyError> {
        if registry.version() < self.layout.registry_version {
            return Err(PolicyError::VersionMismatch {
                registry: registry.version(),
                layout: self.layout.registry_version,
            });
        }
        if context_dim != self.layout.context_dim || max_turns != self.layout.max_turns {
            return Err(PolicyError::LayoutMismatch(format!(
                "policy built for {} context features and {} turns, run uses {context_dim} and {max_turns}",
                self.layout.context_dim, self.layout.max_turns
            )));
        }
        Ok(())
    }

    /// A hand-set policy that follows the protocol exactly (think, search,
    /// think, answer with the hint) and, when `routes` is given, sends task
    /// type `t` to `routes[t] = (model index, skill index)`. Without routes
    /// the model and skill heads stay uniform. Routing relies on each routed
    /// model and skill having a tag no other registry entry carries.
    pub fn scripted(layout: FeatureLayout, registry: &Registry, routes: Option<&[(usize, usize)]>, strength: f64) -> Self {
        let mut p = Self::zeros(layout);
        let l = p.layout.clone();
        let (bias, hint, pending) = (l.bias_index(), l.hint_index(), l.pending_think_index());
        let think = ActType::Think.index();
        let search = ActType::Search.index();
        let answer = ActType::Answer.index();
        *p.act_type.get_mut(think, bias) = 2.0 * strength;
        *p.act_type.get_mut(think, pending) = -2.0 * strength;
        *p.act_type.get_mut(search, pending) = strength;
        *p.act_type.get_mut(search, hint) = -strength;
        *p.act_type.get_mut(answer, bias) = -strength;
        *p.act_type.get_mut(answer, pending) = strength;
        *p.act_type.get_mut(answer, hint) = 2.0 * strength;
        *p.answer_template.get_mut(0, hint) = strength;

        if let Some(routes) = routes {
            let tag_index = |tag: &String| l.tags.iter().position(|t| t == tag);
            let unique_tag = |own: &std::collections::BTreeSet<String>, others: Vec<&std::collections::BTreeSet<String>>| {
                own.iter()
                    .find(|t| others.iter().all(|o| !o.contains(*t)))
                    .and_then(tag_index)
            };
            for (row, &(m, s)) in routes.iter().enumerate() {
                let models = registry.models();
                let others = models.iter().enumerate().filter(|(i, _)| *i != m).map(|(_, e)| &e.capability_tags).collect();
                if let Some(h) = unique_tag(&models[m].capability_tags, others) {
                    *p.model.get_mut(row, h) += strength;
                }
                let skills = registry.skills();
                let others = skills.iter().enumerate().filter(|(i, _)| *i != s).map(|(_, e)| &e.capability_tags).collect();
                if let Some(h) = unique_tag(&skills[s].capability_tags, others) {
                    *p.skill.get_mut(row, h) += strength;
                }
            }
        }
        p
    }

    pub fn to_checkpoint(&self) -> String {
        let heads: serde_json::Map<String, serde_json::Value> = self
            .matrices()
            .iter()
            .map(|(h, m)| (h.name().to_string(), serde_json::to_value(m).expect("matrix serializes")))
            .collect();
        let doc = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "format_version": CHECKPOINT_VERSION,
            "registry_version": self.layout.registry_version,
            "layout": self.layout,
            "heads": heads,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PolicyError> {
        let bad = |msg: String| PolicyError::Checkpoint(msg);
        let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if doc["format"] != CHECKPOINT_FORMAT {
            return Err(bad("not a policy checkpoint".into()));
        }
        if doc["format_version"] != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format_version {}", doc["format_version"])));
        }
        let layout: FeatureLayout = serde_json::from_value(doc["layout"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut params = PolicyParams::zeros(layout);
        for (head, m) in params.matrices_mut() {
            let loaded: Matrix = serde_json::from_value(doc["heads"][head.name()].clone())
                .map_err(|e| bad(format!("head {}: {e}", head.name())))?;
            if (loaded.rows, loaded.cols) != (m.rows, m.cols) || loaded.data.len() != m.data.len() {
                return Err(PolicyError::LayoutMismatch(format!(
                    "head {} is {}x{}, layout needs {}x{}",
                    head.name(),
                    loaded.rows,
                    loaded.cols,
                    m.rows,
                    m.cols
                )));
            }
            *m = loaded;
        }
        if !params.is_finite() {
            return Err(bad("non-finite weights".into()));
        }
        Ok(params)
    }
}
