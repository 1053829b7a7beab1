//! Planted-optimum worlds used across tests.

use skillroute::environment::{model_ids, skill_ids, Environment, PlantedSpec, TaskGenConfig, UtilityTable};
use skillroute::policy::{FeatureLayout, PolicyParams};
use skillroute::registry::{builtin, Registry};
use skillroute::rng::{stream_rng, Stream};

pub struct World {
    pub registry: Registry,
    pub env: Environment,
    /// Planted `(model, skill)` per task type.
    pub optima: Vec<(usize, usize)>,
    pub layout: FeatureLayout,
}

impl World {
    pub fn prior_policy(&self) -> PolicyParams {
        PolicyParams::scripted(self.layout.clone(), &self.registry, None, 2.0)
    }
}

/// Five task types on the default registry, `u_hi` 0.9, gap 0.3, p0 0.1.
pub fn planted(seed: u64) -> World {
    planted_on(builtin::default_registry(), 5, seed, PlantedSpec::default())
}

pub fn planted_on(registry: Registry, task_types: usize, seed: u64, spec: PlantedSpec) -> World {
    let tasks = TaskGenConfig::uniform(task_types);
    let mut rng = stream_rng(seed, Stream::Utility, 0);
    let (table, optima) = UtilityTable::planted(
        task_types,
        &model_ids(&registry),
        &skill_ids(&registry),
        &spec,
        tasks.direct_answer_rate,
        &mut rng,
    )
    .unwrap();
    let env = Environment::new(tasks, table).unwrap();
    let layout = FeatureLayout::for_registry(&registry, task_types, 4);
    World {
        registry,
        env,
        optima,
        layout,
    }
}
