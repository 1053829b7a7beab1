//! Tagged trajectory protocol.
//!
//! Every exchange between the orchestrator and its environment is carried as
//! text built from four tag pairs:
//!
//! ```text
//! <think>...</think>
//! <search>Model@@Skill: query</search>
//! <information>...</information>
//! <answer>...</answer>
//! ```
//!
//! Content inside any block is escaped (`\` -> `\\`, `<` -> `\<`, `>` -> `\>`)
//! so that tag recognition stays decidable even when an expert returns text
//! that looks like protocol markup.
//!
//! [`parse_trajectory`] never fails. Anything it cannot fit into the step
//! structure is kept as an [`Anomaly`], and [`validate_format`] turns the
//! parse into a [`FormatReport`] over the five protocol constraints.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::Registry;

/// Appended to an observation that was cut at the token limit.
pub const TRUNCATION_MARKER: &str = "[truncated]";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("identifier {0:?} contains a forbidden character sequence")]
    InvalidIdentifierCharacters(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Think,
    Search,
    Information,
    Answer,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Think, Tag::Search, Tag::Information, Tag::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Search => "search",
            Tag::Information => "information",
            Tag::Answer => "answer",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            Tag::Think => "<think>",
            Tag::Search => "<search>",
            Tag::Information => "<information>",
            Tag::Answer => "<answer>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            Tag::Think => "</think>",
            Tag::Search => "</search>",
            Tag::Information => "</information>",
            Tag::Answer => "</answer>",
        }
    }
}

/// Serialized trajectory text, or a segment of one.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TraceText(String);

impl TraceText {
    pub fn new(raw: impl Into<String>) -> Self {
        TraceText(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn push(&mut self, other: &TraceText) {
        self.0.push_str(&other.0);
    }
}

impl fmt::Display for TraceText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for TraceText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCall {
    pub model: String,
    pub skill: String,
    pub query: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Search(SearchCall),
    Answer(String),
}

/// One reasoning step: think block(s), at most one action, and whatever
/// observations were injected after it. A well-formed step has exactly one
/// think, and a search step exactly one observation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub thinks: Vec<String>,
    pub action: Option<Action>,
    pub observations: Vec<String>,
    /// Byte offset of the first block belonging to this step.
    pub offset: usize,
    /// Byte offset of the action block, if any.
    pub action_offset: Option<usize>,
}

impl Step {
    pub fn think(&self) -> Option<&str> {
        match self.thinks.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }

    pub fn observation(&self) -> Option<&str> {
        match self.observations.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }
}

/// A tagged block as found in the source text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub tag: Tag,
    /// Raw (still escaped) content between the tags.
    pub content: String,
    pub open_offset: usize,
    /// `None` when the block was never closed.
    pub close_offset: Option<usize>,
}

/// Structural problems found while parsing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Anomaly {
    /// An opening tag whose block was cut off by another opening tag or EOF.
    Unclosed { tag: Tag, offset: usize },
    /// A closing tag with no matching open block.
    StrayClose { tag: Tag, offset: usize },
    /// Non-whitespace text outside every block.
    StrayText { offset: usize, text: String },
    /// A search block whose payload is not `model@@skill: query`.
    MalformedPayload { offset: usize },
}

impl Anomaly {
    pub fn offset(&self) -> usize {
        match self {
            Anomaly::Unclosed { offset, .. }
            | Anomaly::StrayClose { offset, .. }
            | Anomaly::StrayText { offset, .. }
            | Anomaly::MalformedPayload { offset } => *offset,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTrajectory {
    pub query: String,
    pub steps: Vec<Step>,
    pub terminal: bool,
    pub blocks: Vec<Block>,
    pub anomalies: Vec<Anomaly>,
}

impl ParsedTrajectory {
    pub fn with_query(mut self, query: impl Into<String>) -> Self {
        self.query = query.into();
        self
    }

    /// Text of the closing answer, if the trajectory is terminal.
    pub fn final_answer(&self) -> Option<&str> {
        if !self.terminal {
            return None;
        }
        match self.steps.last().and_then(|s| s.action.as_ref()) {
            Some(Action::Answer(text)) => Some(text),
            _ => None,
        }
    }

    pub fn search_calls(&self) -> impl Iterator<Item = &SearchCall> {
        self.steps.iter().filter_map(|s| match &s.action {
            Some(Action::Search(call)) => Some(call),
            _ => None,
        })
    }

    pub fn count_blocks(&self, tag: Tag) -> usize {
        self.blocks.iter().filter(|b| b.tag == tag).count()
    }
}

/// The five protocol constraints, in the order they are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    BalancedTags,
    OneThinkPerStep,
    SearchInfoCountsMatch,
    IdentifiersValid,
    SingleTerminalAnswer,
}

impl Constraint {
    pub const ALL: [Constraint; 5] = [
        Constraint::BalancedTags,
        Constraint::OneThinkPerStep,
        Constraint::SearchInfoCountsMatch,
        Constraint::IdentifiersValid,
        Constraint::SingleTerminalAnswer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Constraint::BalancedTags => "balanced_tags",
            Constraint::OneThinkPerStep => "one_think_per_step",
            Constraint::SearchInfoCountsMatch => "search_info_counts_match",
            Constraint::IdentifiersValid => "identifiers_valid",
            Constraint::SingleTerminalAnswer => "single_terminal_answer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub offset: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub balanced_tags: bool,
    pub one_think_per_step: bool,
    pub search_info_counts_match: bool,
    pub identifiers_valid: bool,
    pub single_terminal_answer: bool,
    pub violations: Vec<Violation>,
}

impl FormatReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn holds(&self, constraint: Constraint) -> bool {
        match constraint {
            Constraint::BalancedTags => self.balanced_tags,
            Constraint::OneThinkPerStep => self.one_think_per_step,
            Constraint::SearchInfoCountsMatch => self.search_info_counts_match,
            Constraint::IdentifiersValid => self.identifiers_valid,
            Constraint::SingleTerminalAnswer => self.single_terminal_answer,
        }
    }

    pub fn flags(&self) -> [bool; 5] {
        Constraint::ALL.map(|c| self.holds(c))
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        if matches!(ch, '\\' | '<' | '>') {
            out.push('\\');
        }
        out.push(ch);
    }
    out
}

pub fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(ch) = chars.next() {
        if ch == '\\' {
            match chars.next() {
                Some(next) => out.push(next),
                None => out.push('\\'),
            }
        } else {
            out.push(ch);
        }
    }
    out
}

fn check_identifier(id: &str, is_model: bool) -> Result<(), ProtocolError> {
    let bad = id.is_empty()
        || id.trim() != id
        || id.contains("@@")
        || id.contains(':')
        || id.contains('<')
        || id.contains('>')
        || id.contains('\\')
        || (is_model && id.ends_with('@'))
        || (!is_model && id.starts_with('@'));
    if bad {
        Err(ProtocolError::InvalidIdentifierCharacters(id.to_string()))
    } else {
        Ok(())
    }
}

/// Checks that `id` can travel through a search payload unchanged.
pub fn validate_identifier(id: &str) -> Result<(), ProtocolError> {
    check_identifier(id, true)?;
    check_identifier(id, false)
}

pub fn serialize_search(model_id: &str, skill_id: &str, query: &str) -> Result<TraceText, ProtocolError> {
    check_identifier(model_id, true)?;
    check_identifier(skill_id, false)?;
    Ok(TraceText(format!(
        "<search>{model_id}@@{skill_id}: {}</search>",
        escape(query)
    )))
}

pub fn wrap_observation(obs: &str) -> TraceText {
    TraceText(format!("<information>{}</information>", escape(obs)))
}

pub fn wrap_think(text: &str) -> TraceText {
    TraceText(format!("<think>{}</think>", escape(text)))
}

pub fn wrap_answer(text: &str) -> TraceText {
    TraceText(format!("<answer>{}</answer>", escape(text)))
}

/// Keeps the first `limit` whitespace-delimited tokens of `obs`. Text under
/// the limit is returned untouched; otherwise the kept tokens are joined by
/// single spaces and followed by [`TRUNCATION_MARKER`].
pub fn truncate_observation(obs: &str, limit: usize) -> String {
    let mut tokens = obs.split_whitespace();
    let kept: Vec<&str> = tokens.by_ref().take(limit).collect();
    if tokens.next().is_none() {
        return obs.to_string();
    }
    let mut out = kept.join(" ");
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(TRUNCATION_MARKER);
    out
}

/// Splits a search payload into `(model, skill, query)`, tolerating
/// whitespace around the separators.
pub fn parse_search_payload(payload: &str) -> Option<SearchCall> {
    let (model, rest) = payload.split_once("@@")?;
    let (skill, query) = rest.split_once(':')?;
    Some(SearchCall {
        model: model.trim().to_string(),
        skill: skill.trim().to_string(),
        query: query.trim().to_string(),
    })
}

enum Token<'a> {
    Open(Tag, usize),
    Close(Tag, usize),
    Text(&'a str, usize),
}

fn tag_at(text: &str, at: usize) -> Option<(bool, Tag, usize)> {
    let rest = &text[at..];
    for tag in Tag::ALL {
        if rest.starts_with(tag.open()) {
            return Some((true, tag, tag.open().len()));
        }
        if rest.starts_with(tag.close()) {
            return Some((false, tag, tag.close().len()));
        }
    }
    None
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                // Skip the escaped character, whatever its width.
                i += 1;
                if i < bytes.len() {
                    i += text[i..].chars().next().map_or(1, char::len_utf8);
                }
            }
            b'<' => {
                if let Some((is_open, tag, len)) = tag_at(text, i) {
                    if text_start < i {
                        tokens.push(Token::Text(&text[text_start..i], text_start));
                    }
                    tokens.push(if is_open { Token::Open(tag, i) } else { Token::Close(tag, i) });
                    i += len;
                    text_start = i;
                } else {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    if text_start < bytes.len() {
        tokens.push(Token::Text(&text[text_start..], text_start));
    }
    tokens
}

/// Best-effort structural parse. Deterministic, total, and lossless with
/// respect to structure: anything that does not fit is reported in
/// `anomalies` rather than dropped.
pub fn parse_trajectory(text: &str) -> ParsedTrajectory {
    let mut blocks: Vec<Block> = Vec::new();
    let mut anomalies = Vec::new();
    // (tag, open offset, content start)
    let mut open: Option<(Tag, usize, usize)> = None;

    let finish_unclosed = |open: (Tag, usize, usize), end: usize, blocks: &mut Vec<Block>, anomalies: &mut Vec<Anomaly>| {
        let (tag, offset, start) = open;
        anomalies.push(Anomaly::Unclosed { tag, offset });
        blocks.push(Block {
            tag,
            content: text[start..end].to_string(),
            open_offset: offset,
            close_offset: None,
        });
    };

    for token in tokenize(text) {
        match token {
            Token::Open(tag, offset) => {
                if let Some(current) = open.take() {
                    finish_unclosed(current, offset, &mut blocks, &mut anomalies);
                }
                open = Some((tag, offset, offset + tag.open().len()));
            }
            Token::Close(tag, offset) => match open {
                Some((open_tag, open_offset, start)) if open_tag == tag => {
                    blocks.push(Block {
                        tag,
                        content: text[start..offset].to_string(),
                        open_offset,
                        close_offset: Some(offset),
                    });
                    open = None;
                }
                _ => anomalies.push(Anomaly::StrayClose { tag, offset }),
            },
            Token::Text(chunk, offset) => {
                if open.is_none() && !chunk.trim().is_empty() {
                    anomalies.push(Anomaly::StrayText {
                        offset,
                        text: chunk.to_string(),
                    });
                }
            }
        }
    }
    if let Some(current) = open.take() {
        finish_unclosed(current, text.len(), &mut blocks, &mut anomalies);
    }

    let mut steps: Vec<Step> = Vec::new();
    let mut current: Option<Step> = None;
    for block in &blocks {
        let content = unescape(&block.content);
        let starts_new = match (&current, block.tag) {
            (None, _) => true,
            (Some(step), Tag::Think) => step.action.is_some() || !step.observations.is_empty(),
            (Some(step), Tag::Search | Tag::Answer) => step.action.is_some() || !step.observations.is_empty(),
            (Some(_), Tag::Information) => false,
        };
        if starts_new {
            if let Some(done) = current.take() {
                steps.push(done);
            }
            current = Some(Step {
                offset: block.open_offset,
                ..Step::default()
            });
        }
        let step = current.as_mut().expect("step started above");
        match block.tag {
            Tag::Think => step.thinks.push(content),
            Tag::Information => step.observations.push(content),
            Tag::Answer => {
                step.action = Some(Action::Answer(content));
                step.action_offset = Some(block.open_offset);
            }
            Tag::Search => {
                let call = parse_search_payload(&content).unwrap_or_else(|| {
                    anomalies.push(Anomaly::MalformedPayload {
                        offset: block.open_offset,
                    });
                    SearchCall {
                        model: String::new(),
                        skill: String::new(),
                        query: content.clone(),
                    }
                });
                step.action = Some(Action::Search(call));
                step.action_offset = Some(block.open_offset);
            }
        }
    }
    if let Some(done) = current {
        steps.push(done);
    }

    let terminal = matches!(steps.last().and_then(|s| s.action.as_ref()), Some(Action::Answer(_)));
    anomalies.sort_by_key(Anomaly::offset);
    ParsedTrajectory {
        query: String::new(),
        steps,
        terminal,
        blocks,
        anomalies,
    }
}

/// Canonical text for a parsed trajectory: blocks back to back, one space
/// after the payload colon, content escaped. For well-formed input,
/// `serialize(&parse_trajectory(t))` is `t` with inter-block whitespace and
/// payload spacing normalized.
pub fn serialize(pt: &ParsedTrajectory) -> TraceText {
    let mut out = String::new();
    for step in &pt.steps {
        for think in &step.thinks {
            out.push_str(wrap_think(think).as_str());
        }
        match &step.action {
            Some(Action::Search(call)) => {
                out.push_str(&format!(
                    "<search>{}@@{}: {}</search>",
                    call.model,
                    call.skill,
                    escape(&call.query)
                ));
            }
            Some(Action::Answer(text)) => out.push_str(wrap_answer(text).as_str()),
            None => {}
        }
        for obs in &step.observations {
            out.push_str(wrap_observation(obs).as_str());
        }
    }
    TraceText(out)
}

/// Evaluates the five protocol constraints and lists every violation.
pub fn validate_format(pt: &ParsedTrajectory, registry: &Registry) -> FormatReport {
    let mut violations = Vec::new();

    for anomaly in &pt.anomalies {
        let (constraint, detail) = match anomaly {
            Anomaly::Unclosed { tag, .. } => (Constraint::BalancedTags, format!("unclosed <{}>", tag.name())),
            Anomaly::StrayClose { tag, .. } => (Constraint::BalancedTags, format!("unmatched </{}>", tag.name())),
            Anomaly::StrayText { .. } => (Constraint::BalancedTags, "text outside any tag".to_string()),
            Anomaly::MalformedPayload { .. } => (
                Constraint::IdentifiersValid,
                "search payload is not model@@skill: query".to_string(),
            ),
        };
        violations.push(Violation {
            constraint,
            offset: anomaly.offset(),
            detail,
        });
    }

    for step in &pt.steps {
        if step.thinks.len() != 1 {
            violations.push(Violation {
                constraint: Constraint::OneThinkPerStep,
                offset: step.offset,
                detail: format!("step has {} think blocks", step.thinks.len()),
            });
        }
    }

    let searches = pt.count_blocks(Tag::Search);
    let infos = pt.count_blocks(Tag::Information);
    if searches != infos {
        let offset = pt
            .blocks
            .iter()
            .find(|b| matches!(b.tag, Tag::Search | Tag::Information))
            .map_or(0, |b| b.open_offset);
        violations.push(Violation {
            constraint: Constraint::SearchInfoCountsMatch,
            offset,
            detail: format!("{searches} search blocks vs {infos} information blocks"),
        });
    }

    let models: HashSet<&str> = registry.models().iter().map(|m| m.id.as_str()).collect();
    let skills: HashSet<&str> = registry.skills().iter().map(|s| s.id.as_str()).collect();
    let malformed: HashSet<usize> = pt
        .anomalies
        .iter()
        .filter_map(|a| match a {
            Anomaly::MalformedPayload { offset } => Some(*offset),
            _ => None,
        })
        .collect();
    for step in &pt.steps {
        if let Some(Action::Search(call)) = &step.action {
            let payload_ok = !step.action_offset.is_some_and(|o| malformed.contains(&o));
            if payload_ok && !models.contains(call.model.as_str()) {
                violations.push(Violation {
                    constraint: Constraint::IdentifiersValid,
                    offset: step.offset,
                    detail: format!("unknown model {:?}", call.model),
                });
            }
            if payload_ok && !skills.contains(call.skill.as_str()) {
                violations.push(Violation {
                    constraint: Constraint::IdentifiersValid,
                    offset: step.offset,
                    detail: format!("unknown skill {:?}", call.skill),
                });
            }
        }
    }

    let answers: Vec<&Block> = pt.blocks.iter().filter(|b| b.tag == Tag::Answer).collect();
    if answers.len() != 1 {
        violations.push(Violation {
            constraint: Constraint::SingleTerminalAnswer,
            offset: answers.get(1).map_or(0, |b| b.open_offset),
            detail: format!("{} answer blocks", answers.len()),
        });
    } else if pt.blocks.last().map(|b| b.tag) != Some(Tag::Answer) {
        violations.push(Violation {
            constraint: Constraint::SingleTerminalAnswer,
            offset: answers[0].open_offset,
            detail: "answer is not the final block".to_string(),
        });
    }

    violations.sort_by_key(|v| (v.offset, v.constraint));
    let holds = |c: Constraint| !violations.iter().any(|v| v.constraint == c);
    FormatReport {
        balanced_tags: holds(Constraint::BalancedTags),
        one_think_per_step: holds(Constraint::OneThinkPerStep),
        search_info_counts_match: holds(Constraint::SearchInfoCountsMatch),
        identifiers_valid: holds(Constraint::IdentifiersValid),
        single_terminal_answer: holds(Constraint::SingleTerminalAnswer),
        violations,
    }
}
