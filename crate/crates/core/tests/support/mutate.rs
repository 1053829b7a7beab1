//! Random well-formed traces and structural mutations of them.

use rand::seq::SliceRandom;
use rand::Rng;

const ALPHABET: &[char] = &[
    'a', 'b', 'c', 'x', '1', ' ', ' ', '<', '>', '\\', '@', ':', '/', 'é', '\n',
];
const TAGS: &[&str] = &["think", "search", "information", "answer"];

fn escape(s: &str) -> String {
    s.chars()
        .flat_map(|c| match c {
            '\\' | '<' | '>' => vec!['\\', c],
            _ => vec![c],
        })
        .collect()
}

fn random_text(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

/// A trace satisfying every constraint, as a list of blocks.
pub fn valid_blocks(rng: &mut impl Rng, models: &[String], skills: &[String]) -> Vec<String> {
    let mut blocks = Vec::new();
    for _ in 0..rng.gen_range(0..4) {
        blocks.push(format!("<think>{}</think>", escape(&random_text(rng, 12))));
        let m = models.choose(rng).unwrap();
        let s = skills.choose(rng).unwrap();
        blocks.push(format!("<search>{m}@@{s}: {}</search>", escape(&random_text(rng, 12))));
        blocks.push(format!("<information>{}</information>", escape(&random_text(rng, 12))));
    }
    blocks.push(format!("<think>{}</think>", escape(&random_text(rng, 12))));
    blocks.push(format!("<answer>{}</answer>", escape(&random_text(rng, 6))));
    blocks
}

fn char_boundary(rng: &mut impl Rng, s: &str) -> usize {
    let bounds: Vec<usize> = (0..=s.len()).filter(|i| s.is_char_boundary(*i)).collect();
    *bounds.choose(rng).unwrap()
}

fn mutate_blocks(rng: &mut impl Rng, blocks: &mut Vec<String>) {
    let n = blocks.len();
    match rng.gen_range(0..5) {
        0 if n > 0 => {
            blocks.remove(rng.gen_range(0..n));
        }
        1 if n > 0 => {
            let b = blocks[rng.gen_range(0..n)].clone();
            blocks.insert(rng.gen_range(0..=n), b);
        }
        2 if n > 1 => {
            let i = rng.gen_range(0..n - 1);
            blocks.swap(i, i + 1);
        }
        3 => {
            let tag = TAGS.choose(rng).unwrap();
            blocks.insert(rng.gen_range(0..=n), format!("<{tag}>{}</{tag}>", escape(&random_text(rng, 5))));
        }
        _ => {
            let junk = ["oops", " ", "\n", "x y"].choose(rng).unwrap().to_string();
            blocks.insert(rng.gen_range(0..=n), junk);
        }
    }
}

fn mutate_text(rng: &mut impl Rng, text: &mut String, models: &[String], skills: &[String]) {
    match rng.gen_range(0..8) {
        0 => {
            // drop one tag occurrence
            let tags: Vec<(usize, usize)> = TAGS
                .iter()
                .flat_map(|t| [format!("<{t}>"), format!("</{t}>")])
                .flat_map(|p| text.match_indices(&p).map(|(i, s)| (i, s.len())).collect::<Vec<_>>())
                .collect();
            if let Some(&(i, len)) = tags.choose(rng) {
                text.replace_range(i..i + len, "");
            }
        }
        1 => {
            let tag = TAGS.choose(rng).unwrap();
            let t = if rng.gen_bool(0.5) { format!("<{tag}>") } else { format!("</{tag}>") };
            let at = char_boundary(rng, text);
            text.insert_str(at, &t);
        }
        2 => {
            let at = char_boundary(rng, text);
            text.truncate(at);
        }
        3 => {
            let at = char_boundary(rng, text);
            text.insert(at, '\\');
        }
        4 => {
            let from = models.choose(rng).unwrap();
            let to = ["Nope-Model", "", " ", "GPT"].choose(rng).unwrap();
            *text = text.replacen(from.as_str(), to, 1);
        }
        5 => {
            let from = skills.choose(rng).unwrap();
            let to = ["Unknown_Solver", "", "  "].choose(rng).unwrap();
            *text = text.replacen(from.as_str(), to, 1);
        }
        6 => {
            let sep = ["@@", ": "].choose(rng).unwrap();
            let to = ["", "@", ";"].choose(rng).unwrap();
            *text = text.replacen(sep, to, 1);
        }
        _ => {
            let at = char_boundary(rng, text);
            text.insert_str(at, &random_text(rng, 3));
        }
    }
}

/// A trace with zero to three block-level and zero to two text-level
/// mutations applied.
pub fn mutated_trace(rng: &mut impl Rng, models: &[String], skills: &[String]) -> String {
    let mut blocks = valid_blocks(rng, models, skills);
    for _ in 0..rng.gen_range(0..=3) {
        mutate_blocks(rng, &mut blocks);
    }
    let sep = if rng.gen_bool(0.3) { "\n" } else { "" };
    let mut text = blocks.join(sep);
    for _ in 0..rng.gen_range(0..=2) {
        mutate_text(rng, &mut text, models, skills);
    }
    text
}
