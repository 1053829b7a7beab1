//! Helpers for gradient and masking checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skillroute::environment::EpisodeState;
use skillroute::policy::{featurize, ContextFeatures, DecisionRecord, Head, IndexedAction, PolicyParams};
use skillroute::rng::Stream;
use skillroute::trainer::{collect_group, group_advantages, AdvantageVector, RolloutGroup, TrainConfig};

use super::world::World;

pub fn randomize(theta: &mut PolicyParams, scale: f64, rng: &mut impl Rng) {
    let flat: Vec<f64> = theta.flat().iter().map(|v| v + rng.gen_range(-scale..scale)).collect();
    theta.set_flat(&flat);
}

pub fn random_features(world: &World, rng: &mut ChaCha8Rng) -> ContextFeatures {
    let task = world.env.sample_task("t", rng);
    let mut state = EpisodeState::new(task);
    state.turn = rng.gen_range(0..world.layout.max_turns);
    state.pending_think = rng.gen_bool(0.5);
    if rng.gen_bool(0.5) {
        state.latest_hint = Some("C".into());
    }
    featurize(&state, &world.registry, &world.layout).unwrap()
}

pub fn log_prob(theta: &PolicyParams, f: &ContextFeatures, a: &IndexedAction, temp: f64) -> f64 {
    theta.indexed_log_prob(f, a, temp).iter().map(|r| r.log_prob).sum()
}

/// `||a - b|| / max(||a||, ||b||)`, with an absolute floor for tiny vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-6)
}

pub fn central_difference(theta: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let base = theta.flat();
    let mut probe = theta.clone();
    (0..base.len())
        .map(|i| {
            let mut x = base.clone();
            x[i] = base[i] + h;
            probe.set_flat(&x);
            let up = f(&probe);
            x[i] = base[i] - h;
            probe.set_flat(&x);
            let down = f(&probe);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn groups_for(world: &World, theta: &PolicyParams, cfg: &TrainConfig, n: usize, seed: u64) -> Vec<RolloutGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|b| {
            let task = world.env.sample_task(&format!("g{b}"), &mut rng);
            collect_group(theta, &world.env, &world.registry, &task, cfg, Stream::TrainEpisodes, (seed * 1000 + b as u64) * 8)
                .unwrap()
        })
        .collect()
}

pub fn advantages(groups: &[RolloutGroup], cfg: &TrainConfig) -> Vec<AdvantageVector> {
    groups
        .iter()
        .map(|g| {
            let r: Vec<f64> = g.trajectories.iter().map(|t| t.training_reward(true)).collect();
            group_advantages(&r, cfg.adv_epsilon)
        })
        .collect()
}

pub fn inject_masked(groups: &mut [RolloutGroup], rng: &mut impl Rng) {
    for t in groups.iter_mut().flat_map(|g| &mut g.trajectories) {
        for _ in 0..rng.gen_range(0..6) {
            let at = rng.gen_range(0..=t.records.len());
            let head = Head::POLICY[rng.gen_range(0..Head::POLICY.len())];
            t.records.insert(
                at,
                DecisionRecord {
                    head,
                    index: rng.gen_range(0..50),
                    log_prob: rng.gen_range(-50.0..5.0),
                    masked: true,
                },
            );
        }
    }
}
