use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use skillroute::analysis::{
    self, compatibility_table, expansion_check, expected_oracle, greedy_route_utility, routing_accuracy,
    routing_regret, skill_scaling_experiment, EvalSettings, RegretReport,
};
use skillroute::policy::PolicyParams;
use skillroute::registry::{compression_stats, extend_registry, load_registry, Registry, RegistryFile};
use skillroute::trainer;

use crate::config::{load_registry_ref, Experiment, ExperimentConfig};
use crate::error::CliError;
use crate::output::{self, TrajectoryRecord};
use crate::{AnalyzeCommand, ConfigArgs, EvalArgs, EvalMode, RegistryCommand, RolloutArgs, TrainArgs};

/// Loads the config with command-line overrides applied.
fn load_experiment(args: &ConfigArgs, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<(Experiment, PathBuf), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    edit(&mut config);
    let base_dir = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let exp = config.resolve(base_dir)?;
    let out = args.out.clone().unwrap_or_else(|| exp.output_dir());
    Ok((exp, out))
}

fn load_checkpoint(path: &Path, exp: &Experiment) -> Result<PolicyParams, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let theta = PolicyParams::from_checkpoint(&text)?;
    theta.check_compatible(&exp.registry, exp.env.tasks.feature_dim(), exp.train.max_turns)?;
    Ok(theta)
}

fn eval_settings(exp: &Experiment, episodes: Option<usize>, k: usize, greedy: bool, seed_offset: u64) -> EvalSettings {
    EvalSettings {
        episodes: episodes.unwrap_or(exp.config.eval.episodes),
        k,
        greedy,
        temperature: exp.config.eval.temperature,
        max_turns: exp.train.max_turns,
        seed: exp.config.seed.wrapping_add(seed_offset),
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let (exp, out) = load_experiment(&args.common, |c| {
        if let Some(steps) = args.steps {
            c.train.steps = steps;
        }
        if args.no_format_reward {
            c.train.use_format_reward = false;
        }
    })?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = output::csv_writer(&metrics_path)?;
    let traj_path = out.join("trajectories.jsonl");
    let mut trajectories = if args.log_trajectories {
        Some(output::create(&traj_path)?)
    } else {
        None
    };

    let mut failure: Option<CliError> = None;
    let every = exp.config.checkpoint_every;
    let theta = trainer::train(exp.initial_params(), &exp.env, &exp.registry, &exp.train, |outcome| {
        if failure.is_some() {
            return;
        }
        let result = (|| -> Result<(), CliError> {
            metrics.serialize(&outcome.stats)?;
            if let Some(w) = trajectories.as_mut() {
                for t in outcome.groups.iter().flat_map(|g| &g.trajectories) {
                    output::write_jsonl_line(w, &TrajectoryRecord::new(Some(outcome.stats.step), t), &traj_path)?;
                }
            }
            let done = outcome.stats.step + 1;
            if every > 0 && done % every == 0 && done < exp.train.steps {
                output::write_text(&out.join(format!("checkpoint-{done:06}.json")), &outcome.theta.to_checkpoint())?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    metrics.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    if let Some(mut w) = trajectories {
        w.flush().map_err(|e| CliError::io(&traj_path, e))?;
    }
    let policy_path = out.join("policy.json");
    output::write_text(&policy_path, &theta.to_checkpoint())?;

    let accuracy = routing_accuracy(&theta, &exp.env, &exp.registry, exp.config.eval.episodes, exp.config.seed)?;
    println!("trained {} steps -> {}", exp.train.steps, policy_path.display());
    println!(
        "greedy oracle-route accuracy on {} held-out tasks: {:.3}",
        exp.config.eval.episodes, accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    mode: &'static str,
    k: usize,
    tasks: usize,
    accuracy: f64,
    mean_reward: f64,
    format_violation_rate: f64,
    pass_at_k: f64,
    sc_at_k: f64,
    routing_accuracy: f64,
    oracle_utility: f64,
    greedy_route_utility: f64,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let (exp, out) = load_experiment(&args.common, |_| {})?;
    let theta = load_checkpoint(&args.checkpoint, &exp)?;
    let (mode, k, greedy) = match args.mode {
        EvalMode::Greedy => ("greedy", 1, true),
        EvalMode::PassAtK => ("pass_at_k", args.k.unwrap_or(exp.config.eval.k), false),
        EvalMode::ScAtK => ("sc_at_k", args.k.unwrap_or(exp.config.eval.k), false),
    };
    let settings = eval_settings(&exp, args.episodes, k, greedy, 0);
    let report = analysis::evaluate(&theta, &exp.env, &exp.registry, &settings)?;
    let row = EvalRow {
        mode,
        k,
        tasks: report.tasks,
        accuracy: report.accuracy,
        mean_reward: report.mean_reward,
        format_violation_rate: report.format_violation_rate,
        pass_at_k: report.pass_at_k,
        sc_at_k: report.sc_at_k,
        routing_accuracy: routing_accuracy(&theta, &exp.env, &exp.registry, settings.episodes, settings.seed)?,
        oracle_utility: expected_oracle(&exp.env.utility, &exp.registry, &exp.env.tasks.mixture())?,
        greedy_route_utility: greedy_route_utility(&theta, &exp.env, &exp.registry)?,
    };
    let path = out.join("eval.csv");
    output::write_csv(&path, &[&row])?;
    println!("{mode} evaluation on {} tasks (k = {k})", row.tasks);
    println!("  accuracy              {:.4}", row.accuracy);
    println!("  mean reward           {:.4}", row.mean_reward);
    println!("  format violation rate {:.4}", row.format_violation_rate);
    if k > 1 {
        println!("  {:<21} {:.4}", format!("pass@{k}"), row.pass_at_k);
        println!("  {:<21} {:.4}", format!("sc@{k}"), row.sc_at_k);
    }
    println!("  oracle-route accuracy {:.4}", row.routing_accuracy);
    println!("  oracle utility        {:.4}", row.oracle_utility);
    println!("  greedy-route utility  {:.4}", row.greedy_route_utility);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn rollout(args: &RolloutArgs) -> Result<(), CliError> {
    let (exp, out) = load_experiment(&args.common, |_| {})?;
    let theta = match &args.checkpoint {
        Some(p) => load_checkpoint(p, &exp)?,
        None => exp.initial_params(),
    };
    let settings = eval_settings(&exp, Some(args.episodes), 1, args.greedy, 0);
    let (report, episodes) = analysis::evaluate_detailed(&theta, &exp.env, &exp.registry, &settings)?;
    let path = out.join("rollouts.jsonl");
    let mut w = output::create(&path)?;
    for t in episodes.iter().flatten() {
        output::write_jsonl_line(&mut w, &TrajectoryRecord::new(None, t), &path)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    println!(
        "{} episodes, accuracy {:.3}, format violations {:.3} -> {}",
        report.tasks,
        report.accuracy,
        report.format_violation_rate,
        path.display()
    );
    Ok(())
}

pub fn registry(cmd: &RegistryCommand) -> Result<(), CliError> {
    let here = Path::new("");
    match cmd {
        RegistryCommand::Validate { path } => {
            let r = load_registry_ref(here, path)?;
            println!(
                "ok: {} models, {} level-1 skills, {} level-2 skills (version {})",
                r.models().len(),
                r.skills().len(),
                r.level2_count(),
                r.version()
            );
        }
        RegistryCommand::Stats { path } => {
            let r = load_registry_ref(here, path)?;
            println!("{}", compression_stats(&r));
        }
        RegistryCommand::Extend { base, pack, out } => {
            let r = load_registry_ref(here, base)?;
            let text = std::fs::read_to_string(pack)
                .map_err(|e| CliError::Schema(format!("cannot read pack {}: {e}", pack.display())))?;
            let pack: RegistryFile = serde_json::from_str(&text).map_err(|e| CliError::Schema(e.to_string()))?;
            let merged = extend_registry(&r, pack.models, pack.skills)?;
            // round-trip through the loader so the written file is known good
            load_registry(&merged.to_json())?;
            output::write_text(out, &merged.to_json())?;
            println!("{} -> {}", compression_stats(&merged), out.display());
        }
    }
    Ok(())
}

/// Flat CSV view of a compatibility row.
#[derive(Serialize)]
struct CompatibilityCsvRow<'a> {
    task_type: usize,
    model: &'a str,
    skill: &'a str,
    u0: f64,
    u_m: f64,
    u_k: f64,
    u_mk: f64,
    delta_m: f64,
    delta_k: f64,
    c: f64,
}

#[derive(Serialize)]
struct RegretRow {
    scope: String,
    oracle: f64,
    achieved: f64,
    regret: f64,
    std_error: f64,
    episodes: usize,
}

impl RegretRow {
    fn new(scope: String, r: RegretReport) -> Self {
        RegretRow {
            scope,
            oracle: r.oracle,
            achieved: r.achieved,
            regret: r.regret,
            std_error: r.std_error,
            episodes: r.episodes,
        }
    }
}

pub fn analyze(cmd: &AnalyzeCommand) -> Result<(), CliError> {
    match cmd {
        AnalyzeCommand::Compatibility { common } => {
            let (exp, out) = load_experiment(common, |_| {})?;
            let rows = compatibility_table(&exp.env.utility)?;
            let path = out.join("compatibility.csv");
            let csv_rows: Vec<_> = rows
                .iter()
                .map(|r| CompatibilityCsvRow {
                    task_type: r.task_type,
                    model: &r.model,
                    skill: &r.skill,
                    u0: r.report.u0,
                    u_m: r.report.u_m,
                    u_k: r.report.u_k,
                    u_mk: r.report.u_mk,
                    delta_m: r.report.delta_m,
                    delta_k: r.report.delta_k,
                    c: r.report.c,
                })
                .collect();
            output::write_csv(&path, &csv_rows)?;
            let additive = rows.iter().filter(|r| r.report.c.abs() < 1e-12).count();
            let positive = rows.iter().filter(|r| r.report.c > 1e-12).count();
            println!(
                "{} pairs: {additive} with C = 0, {positive} with positive compatibility -> {}",
                rows.len(),
                path.display()
            );
        }
        AnalyzeCommand::Regret {
            common,
            checkpoint,
            episodes,
            per_type,
        } => {
            let (exp, out) = load_experiment(common, |_| {})?;
            let theta = load_checkpoint(checkpoint, &exp)?;
            let settings = eval_settings(&exp, *episodes, 1, true, 0);
            let mut rows = vec![RegretRow::new(
                "all".into(),
                routing_regret(&theta, &exp.env, &exp.registry, &settings)?,
            )];
            if *per_type {
                for t in 0..exp.env.tasks.task_types.len() {
                    let mut env = exp.env.clone();
                    for (i, spec) in env.tasks.task_types.iter_mut().enumerate() {
                        spec.weight = if i == t { 1.0 } else { 0.0 };
                    }
                    rows.push(RegretRow::new(
                        format!("type{t}"),
                        routing_regret(&theta, &env, &exp.registry, &settings)?,
                    ));
                }
            }
            let path = out.join("regret.csv");
            output::write_csv(&path, &rows)?;
            for r in &rows {
                println!(
                    "{:>6}: oracle {:.4} achieved {:.4} regret {:.4} (se {:.4})",
                    r.scope, r.oracle, r.achieved, r.regret, r.std_error
                );
            }
        }
        AnalyzeCommand::Expansion {
            common,
            before,
            after,
            checkpoint,
            episodes,
        } => {
            let (exp, out) = load_experiment(common, |_| {})?;
            let before = load_registry_ref(&exp.base_dir, before)?;
            let after = load_registry_ref(&exp.base_dir, after)?;
            // the world must price every pair of the larger registry
            let env = exp.config.build_env(&exp.base_dir, &after)?;
            let experiment = Experiment {
                registry: before.clone(),
                env,
                ..exp
            };
            let theta = match checkpoint {
                Some(p) => load_checkpoint(p, &experiment)?,
                None => experiment.initial_params(),
            };
            let settings = eval_settings(&experiment, *episodes, 1, true, 0);
            let report = expansion_check(&before, &after, &theta, &experiment.env, &settings)?;
            let path = out.join("expansion.csv");
            output::write_csv(&path, &[&report])?;
            let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
            println!(
                "oracle {:.4} -> {:.4} (gain {:+.4}): monotonicity {}",
                report.oracle_before,
                report.oracle_after,
                report.oracle_gain,
                verdict(report.monotone)
            );
            println!(
                "practical gain {:+.4} vs oracle gain - regret change {:+.4}: residual {:+.4} (2 se = {:.4}) {}",
                report.practical_gain,
                report.decomposed_gain,
                report.residual,
                2.0 * report.std_error,
                verdict(report.identity_holds(2.0))
            );
            if !report.monotone {
                return Err(CliError::Internal("oracle utility decreased under expansion".into()));
            }
        }
        AnalyzeCommand::Scaling {
            common,
            registries,
            steps,
            episodes,
        } => {
            let (exp, out) = load_experiment(common, |c| {
                if let Some(s) = steps {
                    c.train.steps = *s;
                }
            })?;
            let regs: Vec<Registry> = registries
                .iter()
                .map(|r| load_registry_ref(&exp.base_dir, r))
                .collect::<Result<_, _>>()?;
            let largest = regs.last().expect("clap requires at least one registry");
            let env = exp.config.build_env(&exp.base_dir, largest)?;
            let settings = eval_settings(&exp, *episodes, 1, true, 0);
            let init = exp.config.policy.clone();
            let rows = skill_scaling_experiment(&regs, &env, &exp.train, &settings, |layout, reg| {
                init.initial_params(layout, reg)
            })?;
            let path = out.join("scaling.csv");
            output::write_csv(&path, &rows)?;
            for r in &rows {
                println!(
                    "|K1| = {:>2} |K2| = {:>2}: oracle {:.4} accuracy {:.4} ({:.1} us/episode)",
                    r.level1_skills, r.level2_skills, r.oracle, r.accuracy, r.mean_episode_us
                );
            }
        }
    }
    Ok(())
}
