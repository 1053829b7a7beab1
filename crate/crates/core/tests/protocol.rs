mod support;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillroute::environment::{model_ids, skill_ids};
use skillroute::protocol::{
    escape, parse_trajectory, serialize, serialize_search, truncate_observation, unescape, validate_format,
    wrap_answer, wrap_observation, wrap_think, Action, Constraint, TRUNCATION_MARKER,
};
use skillroute::registry::builtin;

use support::mutate::{mutated_trace, valid_blocks};
use support::reference::reference_flags;

fn ids() -> (Vec<String>, Vec<String>) {
    let r = builtin::default_registry();
    (model_ids(&r), skill_ids(&r))
}

#[test]
fn validator_agrees_with_reference_on_mutated_traces() {
    let registry = builtin::default_registry();
    let (models, skills) = ids();
    let model_set: HashSet<String> = models.iter().cloned().collect();
    let skill_set: HashSet<String> = skills.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut failing = [0usize; 5];
    let mut clean = 0;
    for i in 0..10_000 {
        let text = mutated_trace(&mut rng, &models, &skills);
        let expected = reference_flags(&text, &model_set, &skill_set);
        let got = validate_format(&parse_trajectory(&text), &registry).flags();
        assert_eq!(got, expected, "trace {i} disagrees: {text:?}");
        for (c, ok) in expected.iter().enumerate() {
            failing[c] += usize::from(!ok);
        }
        clean += usize::from(expected.iter().all(|x| *x));
    }
    // the corpus must exercise every constraint and still contain clean traces
    assert!(failing.iter().all(|n| *n > 200), "{failing:?}");
    assert!(clean > 200, "{clean}");
}

#[test]
fn each_constraint_is_falsifiable_on_its_own() {
    let registry = builtin::default_registry();
    let ok = "<think>a</think><search>Chart-R1@@Chart_Problem_Solver: q</search>\
              <information>HINT:B</information><think>b</think><answer>B</answer>";
    assert!(validate_format(&parse_trajectory(ok), &registry).is_clean());
    let cases = [
        (Constraint::BalancedTags, format!("{ok} trailing")),
        (
            Constraint::OneThinkPerStep,
            ok.replacen("<think>a</think>", "<think>a</think><think>a2</think>", 1),
        ),
        (
            Constraint::SearchInfoCountsMatch,
            ok.replacen("<information>HINT:B</information>", "<information>x</information><information>y</information>", 1),
        ),
        (Constraint::IdentifiersValid, ok.replacen("Chart-R1", "Chart-R9", 1)),
        (Constraint::SingleTerminalAnswer, ok.replacen("<answer>B</answer>", "", 1)),
    ];
    for (constraint, text) in cases {
        let report = validate_format(&parse_trajectory(&text), &registry);
        for c in Constraint::ALL {
            assert_eq!(report.holds(c), c != constraint, "{constraint:?} fixture, {c:?} on {text:?}");
        }
    }
}

#[test]
fn generated_valid_traces_are_clean() {
    let registry = builtin::default_registry();
    let (models, skills) = ids();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let text = valid_blocks(&mut rng, &models, &skills).concat();
        let report = validate_format(&parse_trajectory(&text), &registry);
        assert!(report.is_clean(), "{text:?}: {:?}", report.violations);
    }
}

fn content() -> impl Strategy<Value = String> {
    proptest::string::string_regex(r"[a-z0-9 <>\\/@:é]{0,24}").unwrap()
}

proptest! {
    #[test]
    fn escape_round_trips(s in any::<String>()) {
        prop_assert_eq!(unescape(&escape(&s)), s);
    }

    #[test]
    fn escaped_text_contains_no_tags(s in any::<String>()) {
        let parsed = parse_trajectory(wrap_think(&s).as_str());
        prop_assert_eq!(parsed.blocks.len(), 1);
        prop_assert!(parsed.anomalies.is_empty());
        prop_assert_eq!(parsed.steps[0].think(), Some(s.as_str()));
    }

    #[test]
    fn parse_serialize_round_trip(steps in proptest::collection::vec((content(), 0usize..5, 0usize..5, content(), content()), 0..4),
                                   last in content(), answer in content()) {
        let (models, skills) = ids();
        let mut text = String::new();
        for (think, m, s, query, obs) in &steps {
            text.push_str(wrap_think(think).as_str());
            text.push_str(serialize_search(&models[*m], &skills[*s], query).unwrap().as_str());
            text.push_str(wrap_observation(obs).as_str());
        }
        text.push_str(wrap_think(&last).as_str());
        text.push_str(wrap_answer(&answer).as_str());

        let parsed = parse_trajectory(&text);
        prop_assert!(validate_format(&parsed, &builtin::default_registry()).is_clean());
        prop_assert_eq!(parsed.final_answer(), Some(answer.as_str()));
        let calls: Vec<_> = parsed.search_calls().collect();
        prop_assert_eq!(calls.len(), steps.len());
        for (call, (_, m, s, query, _)) in calls.iter().zip(&steps) {
            prop_assert_eq!(&call.model, &models[*m]);
            prop_assert_eq!(&call.skill, &skills[*s]);
            prop_assert_eq!(&call.query, query.trim());
        }
        // serialization is canonical: a second pass changes nothing
        let once = serialize(&parsed);
        let twice = serialize(&parse_trajectory(once.as_str()));
        prop_assert_eq!(once.as_str(), twice.as_str());
    }

    #[test]
    fn parser_is_total_and_deterministic(s in any::<String>()) {
        let a = parse_trajectory(&s);
        prop_assert_eq!(&a, &parse_trajectory(&s));
        let terminal = matches!(a.steps.last().and_then(|st| st.action.as_ref()), Some(Action::Answer(_)));
        prop_assert_eq!(a.terminal, terminal);
    }

    #[test]
    fn truncation_keeps_a_prefix_of_tokens(words in proptest::collection::vec("[a-z]{1,5}", 0..40), limit in 0usize..30) {
        let text = words.join(" ");
        let out = truncate_observation(&text, limit);
        if words.len() <= limit {
            prop_assert_eq!(out, text);
        } else {
            let kept: Vec<&str> = out.split_whitespace().collect();
            prop_assert_eq!(kept.len(), limit + 1);
            prop_assert_eq!(kept[limit], TRUNCATION_MARKER);
            prop_assert_eq!(&kept[..limit], &words.iter().map(String::as_str).collect::<Vec<_>>()[..limit]);
        }
    }
}
