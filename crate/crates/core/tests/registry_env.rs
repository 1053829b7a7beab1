mod support;

use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillroute::environment::{EpisodeState, HINT_PREFIX};
use skillroute::protocol::SearchCall;
use skillroute::registry::{builtin, compression_stats, extend_registry, load_registry, RegistryError};
use skillroute::rng::{stream_rng, Stream};

use support::world::planted;

#[test]
fn builtin_compression_ratios() {
    let small = compression_stats(&builtin::default_registry());
    assert_eq!(small.ratio(), Ratio::new(8, 5));
    let large = compression_stats(&builtin::augmented_registry());
    assert_eq!(large.ratio(), Ratio::new(24, 9));
    assert_eq!(large.ratio(), Ratio::new(8, 3));
}

#[test]
fn extension_keeps_the_base_as_a_prefix() {
    let base = builtin::default_registry();
    let pack = builtin::ood_pack();
    let ext = extend_registry(&base, pack.models.clone(), pack.skills.clone()).unwrap();
    assert!(base.is_prefix_of(&ext));
    assert!(!ext.is_prefix_of(&base));
    assert_eq!(ext.version(), base.version() + 1);
    // re-adding the same pack collides
    assert!(matches!(
        extend_registry(&ext, pack.models, vec![]),
        Err(RegistryError::DuplicateId(_))
    ));
}

#[test]
fn registry_json_round_trips() {
    for reg in [builtin::default_registry(), builtin::augmented_registry()] {
        let again = load_registry(&reg.to_json()).unwrap();
        assert_eq!(again, reg);
    }
}

#[test]
fn hint_accuracy_tracks_planted_utility() {
    let world = planted(13);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20_000;
    for t in 0..2 {
        let (m, s) = world.optima[t];
        let mut hits = 0;
        for i in 0..n {
            let mut task_rng = stream_rng(i, Stream::EvalTasks, 0);
            let mut task = world.env.sample_task("h", &mut task_rng);
            task.task_type = t;
            let call = SearchCall {
                model: world.registry.models()[m].id.clone(),
                skill: world.registry.skills()[s].id.clone(),
                query: task.query.clone(),
            };
            let gold = task.gold_answer.clone();
            let obs = world.env.invoke(&EpisodeState::new(task), &world.registry, &call, &mut 0, &mut rng);
            hits += usize::from(obs.strip_prefix(HINT_PREFIX) == Some(gold.as_str()));
        }
        let rate = hits as f64 / n as f64;
        // 0.9 with a standard error of about 0.002
        assert!((rate - 0.9).abs() < 0.01, "type {t}: {rate}");
    }
}

#[test]
fn unknown_identifiers_come_back_as_sentinels() {
    let world = planted(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let task = world.env.sample_task("x", &mut rng);
    let call = SearchCall {
        model: "Nope".into(),
        skill: world.registry.skills()[0].id.clone(),
        query: "q".into(),
    };
    let obs = world.env.invoke(&EpisodeState::new(task), &world.registry, &call, &mut 0, &mut rng);
    assert!(obs.starts_with(skillroute::environment::sentinel::INVALID_CALL_PREFIX), "{obs}");
}

proptest! {
    #[test]
    fn task_features_identify_the_type(seed in any::<u64>()) {
        let world = planted(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = world.env.sample_task("p", &mut rng);
        let argmax = (0..task.context_features.len())
            .fold(0, |b, i| if task.context_features[i] > task.context_features[b] { i } else { b });
        prop_assert_eq!(argmax, task.task_type);
        prop_assert!(world.env.tasks.answers().contains(&task.gold_answer));
    }
}
