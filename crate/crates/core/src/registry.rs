//! Model pool and two-tier skill library.
//!
//! The orchestrator only ever sees models and Level-1 skills. Each Level-1
//! skill owns an ordered list of Level-2 children and picks one of them per
//! call, either by keyword overlap with the query or through a classifier.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol;

pub const REGISTRY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("registry needs at least one {0}")]
    EmptyPool(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    /// Answered by the synthetic utility oracle of the experiment.
    Synthetic,
    /// An OpenAI-compatible chat-completions endpoint. `auth_env` names the
    /// environment variable holding the bearer token.
    Live { endpoint: String, auth_env: Option<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub capability_tags: BTreeSet<String>,
    pub backend: Backend,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Keyword,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillL2 {
    pub id: String,
    #[serde(default)]
    pub keywords: BTreeSet<String>,
    #[serde(default)]
    pub doc: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillL1 {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub capability_tags: BTreeSet<String>,
    #[serde(default)]
    pub routing_mode: RoutingMode,
    #[serde(default)]
    pub default_child: usize,
    pub children: Vec<SkillL2>,
}

impl SkillL1 {
    pub fn default_child(&self) -> &SkillL2 {
        &self.children[self.default_child]
    }

    /// Union of every child's keywords.
    pub fn keywords(&self) -> BTreeSet<&str> {
        self.children
            .iter()
            .flat_map(|c| c.keywords.iter().map(String::as_str))
            .collect()
    }
}

/// On-disk layout of a registry file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub schema_version: u32,
    #[serde(default = "first_version")]
    pub version: u64,
    pub models: Vec<ModelEntry>,
    pub skills: Vec<SkillL1>,
}

fn first_version() -> u64 {
    1
}

/// A validated, immutable registry. Extension produces a new value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    models: Vec<ModelEntry>,
    skills: Vec<SkillL1>,
    version: u64,
}

impl Registry {
    pub fn new(models: Vec<ModelEntry>, skills: Vec<SkillL1>, version: u64) -> Result<Self, RegistryError> {
        let registry = Registry { models, skills, version };
        registry.validate()?;
        Ok(registry)
    }

    pub fn models(&self) -> &[ModelEntry] {
        &self.models
    }

    pub fn skills(&self) -> &[SkillL1] {
        &self.skills
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.id == id)
    }

    pub fn skill_index(&self, id: &str) -> Option<usize> {
        self.skills.iter().position(|s| s.id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn skill(&self, id: &str) -> Option<&SkillL1> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn level2_count(&self) -> usize {
        self.skills.iter().map(|s| s.children.len()).sum()
    }

    /// Every capability tag used by any model or Level-1 skill, sorted.
    pub fn tag_vocabulary(&self) -> Vec<String> {
        let tags: BTreeSet<&String> = self
            .models
            .iter()
            .flat_map(|m| m.capability_tags.iter())
            .chain(self.skills.iter().flat_map(|s| s.capability_tags.iter()))
            .collect();
        tags.into_iter().cloned().collect()
    }

    /// True when every model and skill of `self` appears, unchanged and in
    /// the same position, in `other`.
    pub fn is_prefix_of(&self, other: &Registry) -> bool {
        self.models.len() <= other.models.len()
            && self.skills.len() <= other.skills.len()
            && self.models.iter().zip(&other.models).all(|(a, b)| a == b)
            && self.skills.iter().zip(&other.skills).all(|(a, b)| a == b)
    }

    pub fn to_file(&self) -> RegistryFile {
        RegistryFile {
            schema_version: REGISTRY_SCHEMA_VERSION,
            version: self.version,
            models: self.models.clone(),
            skills: self.skills.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.to_file()).expect("registry serializes");
        text.push('\n');
        text
    }

    fn validate(&self) -> Result<(), RegistryError> {
        if self.models.is_empty() {
            return Err(RegistryError::EmptyPool("model"));
        }
        if self.skills.is_empty() {
            return Err(RegistryError::EmptyPool("skill"));
        }
        let mut seen = HashSet::new();
        let mut claim = |id: &str| {
            if seen.insert(id.to_string()) {
                Ok(())
            } else {
                Err(RegistryError::DuplicateId(id.to_string()))
            }
        };
        for model in &self.models {
            claim(&model.id)?;
            protocol::validate_identifier(&model.id).map_err(|e| RegistryError::Schema(e.to_string()))?;
            if model.capability_tags.is_empty() {
                return Err(RegistryError::Schema(format!("model {:?} has no capability tags", model.id)));
            }
        }
        for skill in &self.skills {
            claim(&skill.id)?;
            protocol::validate_identifier(&skill.id).map_err(|e| RegistryError::Schema(e.to_string()))?;
            if skill.capability_tags.is_empty() {
                return Err(RegistryError::Schema(format!("skill {:?} has no capability tags", skill.id)));
            }
            if skill.children.is_empty() {
                return Err(RegistryError::Schema(format!("skill {:?} has no Level-2 children", skill.id)));
            }
            if skill.default_child >= skill.children.len() {
                return Err(RegistryError::Schema(format!(
                    "skill {:?} default_child {} out of range",
                    skill.id, skill.default_child
                )));
            }
            for (i, child) in skill.children.iter().enumerate() {
                claim(&child.id)?;
                if child.keywords.is_empty() && i != skill.default_child {
                    return Err(RegistryError::Schema(format!("Level-2 skill {:?} has no keywords", child.id)));
                }
                if let Some(bad) = child
                    .keywords
                    .iter()
                    .find(|k| k.is_empty() || !k.chars().all(|c| c.is_ascii_digit() || (c.is_alphanumeric() && !c.is_uppercase())))
                {
                    return Err(RegistryError::Schema(format!(
                        "keyword {bad:?} of {:?} must be a single lowercase token",
                        child.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a registry from its JSON text.
pub fn load_registry(json: &str) -> Result<Registry, RegistryError> {
    let file: RegistryFile = serde_json::from_str(json).map_err(|e| RegistryError::Schema(e.to_string()))?;
    if file.schema_version != REGISTRY_SCHEMA_VERSION {
        return Err(RegistryError::Schema(format!(
            "unsupported schema_version {} (expected {REGISTRY_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    Registry::new(file.models, file.skills, file.version)
}

/// Returns a new registry with the extra entries appended and the version
/// bumped. `registry` is left untouched.
pub fn extend_registry(
    registry: &Registry,
    new_models: Vec<ModelEntry>,
    new_skills: Vec<SkillL1>,
) -> Result<Registry, RegistryError> {
    let mut models = registry.models.clone();
    models.extend(new_models);
    let mut skills = registry.skills.clone();
    skills.extend(new_skills);
    Registry::new(models, skills, registry.version + 1)
}

/// Lowercased alphanumeric tokens of `text`.
pub fn query_tokens(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn keyword_hits<'a>(keywords: impl IntoIterator<Item = &'a str>, tokens: &HashSet<String>) -> usize {
    keywords.into_iter().filter(|k| tokens.contains(*k)).count()
}

/// Picks a Level-2 child id for a query. Returning `None`, or an id that is
/// not a child, sends routing back to keyword matching.
pub trait Level2Classifier {
    fn classify(&self, skill: &SkillL1, query: &str) -> Option<String>;
}

fn route_by_keyword<'a>(skill: &'a SkillL1, query: &str) -> &'a SkillL2 {
    let tokens = query_tokens(query);
    let mut best: Option<(usize, &SkillL2)> = None;
    for child in &skill.children {
        let hits = keyword_hits(child.keywords.iter().map(String::as_str), &tokens);
        if hits > 0 && best.is_none_or(|(top, _)| hits > top) {
            best = Some((hits, child));
        }
    }
    best.map_or_else(|| skill.default_child(), |(_, child)| child)
}

pub fn route_level2<'a>(skill: &'a SkillL1, query: &str, classifier: Option<&dyn Level2Classifier>) -> &'a SkillL2 {
    if let (RoutingMode::Classifier, Some(classifier)) = (skill.routing_mode, classifier) {
        if let Some(id) = classifier.classify(skill, query) {
            if let Some(child) = skill.children.iter().find(|c| c.id == id) {
                return child;
            }
        }
    }
    route_by_keyword(skill, query)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CompressionStats {
    pub models: usize,
    pub level1: usize,
    pub level2: usize,
    pub flat_size: usize,
    pub hier_size: usize,
}

impl CompressionStats {
    /// `|K2| / |K1|` in lowest terms.
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.level2 as u64, self.level1 as u64)
    }
}

impl fmt::Display for CompressionStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = self.ratio();
        write!(
            f,
            "models {} level1 {} level2 {} flat {} hier {} ratio {}/{}",
            self.models, self.level1, self.level2, self.flat_size, self.hier_size, self.level2, self.level1
        )?;
        if *ratio.denom() != self.level1 as u64 {
            write!(f, " (= {}/{})", ratio.numer(), ratio.denom())?;
        }
        Ok(())
    }
}

pub fn compression_stats(registry: &Registry) -> CompressionStats {
    let models = registry.models.len();
    let level1 = registry.skills.len();
    let level2 = registry.level2_count();
    CompressionStats {
        models,
        level1,
        level2,
        flat_size: models * level2,
        hier_size: models * level1,
    }
}

/// Static keyword retrieval over Level-1 skills: top `k` by overlap between
/// the query and the union of each skill's child keywords, ties in registry
/// order.
pub fn baseline_retrieve<'a>(registry: &'a Registry, query: &str, k: usize) -> Vec<&'a SkillL1> {
    let tokens = query_tokens(query);
    let mut scored: Vec<(usize, usize)> = registry
        .skills
        .iter()
        .enumerate()
        .map(|(i, s)| (i, keyword_hits(s.keywords(), &tokens)))
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| &registry.skills[i]).collect()
}

/// Registries shipped with the crate.
pub mod builtin {
    use super::*;

    pub const DEFAULT_JSON: &str = include_str!("../assets/registry/default.json");
    pub const OOD_PACK_JSON: &str = include_str!("../assets/registry/ood_pack.json");

    /// Five experts, five Level-1 and eight Level-2 skills.
    pub fn default_registry() -> Registry {
        load_registry(DEFAULT_JSON).expect("bundled default registry is valid")
    }

    /// The two extra experts and four extra Level-1 skills.
    pub fn ood_pack() -> RegistryFile {
        serde_json::from_str(OOD_PACK_JSON).expect("bundled OOD pack parses")
    }

    /// Default registry extended with the OOD pack: seven experts, nine
    /// Level-1 and 24 Level-2 skills.
    pub fn augmented_registry() -> Registry {
        let pack = ood_pack();
        extend_registry(&default_registry(), pack.models, pack.skills).expect("OOD pack extends the default registry")
    }
}

#[cfg(test)]
mod tests {
    use super::builtin::*;
    use super::*;

    fn synthetic_model(id: &str, tags: &[&str]) -> ModelEntry {
        ModelEntry {
            id: id.into(),
            description: String::new(),
            capability_tags: tags.iter().map(|t| t.to_string()).collect(),
            backend: Backend::Synthetic,
        }
    }

    fn simple_skill(id: &str, children: &[(&str, &[&str])]) -> SkillL1 {
        SkillL1 {
            id: id.into(),
            description: String::new(),
            capability_tags: [id.to_lowercase()].into_iter().collect(),
            routing_mode: RoutingMode::Keyword,
            default_child: 0,
            children: children
                .iter()
                .map(|(cid, kws)| SkillL2 {
                    id: cid.to_string(),
                    keywords: kws.iter().map(|k| k.to_string()).collect(),
                    doc: String::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn bundled_registries_have_expected_counts() {
        let default = default_registry();
        assert_eq!((default.models().len(), default.skills().len(), default.level2_count()), (5, 5, 8));
        let augmented = augmented_registry();
        assert_eq!(
            (augmented.models().len(), augmented.skills().len(), augmented.level2_count()),
            (7, 9, 24)
        );
        assert_eq!(augmented.version(), default.version() + 1);
    }

    #[test]
    fn duplicate_model_id_is_rejected() {
        let mut file: RegistryFile = serde_json::from_str(DEFAULT_JSON).unwrap();
        let dup = file.models[0].clone();
        file.models.push(dup);
        let json = serde_json::to_string(&file).unwrap();
        assert_eq!(
            load_registry(&json),
            Err(RegistryError::DuplicateId("GLM-4.6V-Flash".into()))
        );
    }

    #[test]
    fn schema_problems_are_reported() {
        assert!(matches!(load_registry("{"), Err(RegistryError::Schema(_))));
        assert!(matches!(
            load_registry(r#"{"schema_version":1,"models":[]}"#),
            Err(RegistryError::Schema(_))
        ));
        assert_eq!(
            load_registry(r#"{"schema_version":1,"models":[],"skills":[]}"#),
            Err(RegistryError::EmptyPool("model"))
        );
        let mut file: RegistryFile = serde_json::from_str(DEFAULT_JSON).unwrap();
        file.skills[1].default_child = 7;
        assert!(matches!(
            load_registry(&serde_json::to_string(&file).unwrap()),
            Err(RegistryError::Schema(_))
        ));
    }

    #[test]
    fn keyword_routing() {
        let reg = default_registry();
        let chart = reg.skill("Chart_Problem_Solver").unwrap();
        assert_eq!(route_level2(chart, "Compare the bar heights for 2010", None).id, "Bar_Chart_Solver");
        assert_eq!(route_level2(chart, "completely unrelated text", None).id, chart.default_child().id);
        let perception = reg.skill("Perception_Problem_Solver").unwrap();
        assert_eq!(
            route_level2(perception, "nothing relevant", None).id,
            "Relative_Position_Perception"
        );
    }

    #[test]
    fn keyword_ties_go_to_the_earlier_child() {
        let words = ["alpha", "beta", "gamma", "delta"];
        // Every pair of distinct single-keyword children, each hit once.
        for a in words {
            for b in words {
                if a == b {
                    continue;
                }
                let skill = simple_skill("S", &[("first", &[a]), ("second", &[b])]);
                let query = format!("{b} and {a}");
                assert_eq!(route_level2(&skill, &query, None).id, "first");
            }
        }
    }

    struct Fixed(Option<&'static str>);
    impl Level2Classifier for Fixed {
        fn classify(&self, _: &SkillL1, _: &str) -> Option<String> {
            self.0.map(str::to_string)
        }
    }

    #[test]
    fn classifier_routing_and_fallback() {
        let mut skill = simple_skill("S", &[("a", &["x"]), ("b", &["y"])]);
        skill.routing_mode = RoutingMode::Classifier;
        assert_eq!(route_level2(&skill, "x", Some(&Fixed(Some("b")))).id, "b");
        assert_eq!(route_level2(&skill, "y", Some(&Fixed(None))).id, "b");
        assert_eq!(route_level2(&skill, "x", Some(&Fixed(Some("missing")))).id, "a");
        assert_eq!(route_level2(&skill, "y", None).id, "b");
        skill.routing_mode = RoutingMode::Keyword;
        assert_eq!(route_level2(&skill, "x", Some(&Fixed(Some("b")))).id, "a");
    }

    #[test]
    fn extension_is_non_destructive() {
        let base = default_registry();
        let snapshot = base.clone();
        let same = extend_registry(&base, vec![], vec![]).unwrap();
        assert_eq!(same.models(), base.models());
        assert_eq!(same.skills(), base.skills());
        assert_eq!(same.version(), base.version() + 1);
        assert!(base.is_prefix_of(&same));

        let pack = ood_pack();
        let bigger = extend_registry(&base, pack.models.clone(), pack.skills.clone()).unwrap();
        assert_eq!(bigger.models().len(), 7);
        assert_eq!(bigger.skills().len(), 9);
        assert_eq!(base, snapshot);

        let clash = simple_skill("Chart_Problem_Solver", &[("fresh", &["z"])]);
        assert_eq!(
            extend_registry(&base, vec![], vec![clash]),
            Err(RegistryError::DuplicateId("Chart_Problem_Solver".into()))
        );
        let clash = synthetic_model("Chart-R1", &["x"]);
        assert!(extend_registry(&base, vec![clash], vec![]).is_err());
    }

    #[test]
    fn compression_numbers() {
        let stats = compression_stats(&default_registry());
        assert_eq!((stats.flat_size, stats.hier_size), (40, 25));
        assert_eq!(stats.ratio(), Ratio::new(8, 5));
        assert!(stats.to_string().contains("ratio 8/5"));

        let stats = compression_stats(&augmented_registry());
        assert_eq!((stats.level2, stats.level1), (24, 9));
        assert_eq!(stats.ratio(), Ratio::new(24, 9));
        assert!(stats.to_string().contains("ratio 24/9 (= 8/3)"));

        let flat = Registry::new(
            vec![synthetic_model("m", &["t"])],
            vec![simple_skill("A", &[("a1", &["x"])]), simple_skill("B", &[("b1", &["y"])])],
            1,
        )
        .unwrap();
        assert_eq!(compression_stats(&flat).ratio(), Ratio::from_integer(1));
    }

    #[test]
    fn retrieval_baseline() {
        let reg = default_registry();
        let hit = baseline_retrieve(&reg, "count the apples in the photo", 1);
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].id, "Counting_Problem_Solver");

        let none: Vec<&str> = baseline_retrieve(&reg, "zzz qqq", 2).iter().map(|s| s.id.as_str()).collect();
        assert_eq!(none, vec!["Geometric_Problem_Solver", "Chart_Problem_Solver"]);

        assert_eq!(baseline_retrieve(&reg, "anything", 50).len(), 5);
    }
}
