//! Brute-force format checker written against the protocol rules, sharing
//! no code with the crate's parser.
//!
//! Blocks are found with a regex scan that skips escaped characters. Steps
//! are recovered from the block-letter string alone: a think, search or
//! answer opens a new step unless it directly follows a think, so a trace
//! has one think per step exactly when its letters match `(T[SA]?I*)*`
//! and no two thinks are adjacent.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\\.|<(/?)(think|search|information|answer)>").unwrap())
}

fn unescape_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\\(.)").unwrap())
}

fn payload_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)^(.*?)@@(.*?):").unwrap())
}

fn steps_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(T[SA]?I*)*$").unwrap())
}

fn letter(tag: &str) -> char {
    match tag {
        "think" => 'T',
        "search" => 'S',
        "information" => 'I',
        "answer" => 'A',
        _ => unreachable!(),
    }
}

/// Pass flags in the order balanced tags, one think per step, search /
/// information counts, identifiers, single terminal answer.
pub fn reference_flags(text: &str, models: &HashSet<String>, skills: &HashSet<String>) -> [bool; 5] {
    let mut balanced = true;
    // (letter, raw content)
    let mut blocks: Vec<(char, String)> = Vec::new();
    let mut open: Option<(char, usize)> = None;
    let mut cursor = 0;

    let outside_text = |from: usize, to: usize, open: &Option<(char, usize)>| {
        open.is_none() && text[from..to].chars().any(|c| !c.is_whitespace())
    };

    for m in token_re().captures_iter(text) {
        let whole = m.get(0).unwrap();
        let Some(tag) = m.get(2) else { continue };
        if outside_text(cursor, whole.start(), &open) {
            balanced = false;
        }
        let l = letter(tag.as_str());
        if m.get(1).unwrap().as_str().is_empty() {
            if let Some((ol, start)) = open.take() {
                balanced = false;
                blocks.push((ol, text[start..whole.start()].to_string()));
            }
            open = Some((l, whole.end()));
        } else {
            match open {
                Some((ol, start)) if ol == l => {
                    blocks.push((ol, text[start..whole.start()].to_string()));
                    open = None;
                }
                _ => balanced = false,
            }
        }
        cursor = whole.end();
    }
    if outside_text(cursor, text.len(), &open) {
        balanced = false;
    }
    if let Some((ol, start)) = open {
        balanced = false;
        blocks.push((ol, text[start..].to_string()));
    }

    let letters: String = blocks.iter().map(|b| b.0).collect();
    let one_think = steps_re().is_match(&letters) && !letters.contains("TT");
    let counts = letters.matches('S').count() == letters.matches('I').count();
    let identifiers = blocks.iter().filter(|b| b.0 == 'S').all(|(_, raw)| {
        let payload = unescape_re().replace_all(raw, "${1}");
        match payload_re().captures(&payload) {
            Some(c) => models.contains(c[1].trim()) && skills.contains(c[2].trim()),
            None => false,
        }
    });
    let terminal = letters.matches('A').count() == 1 && letters.ends_with('A');
    [balanced, one_think, counts, identifiers, terminal]
}
