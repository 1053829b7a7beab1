//! Files written by the commands.
//!
//! | file                 | columns / fields                                                    |
//! |----------------------|---------------------------------------------------------------------|
//! | `metrics.csv`        | one row per training step, the fields of `UpdateStats`              |
//! | `trajectories.jsonl` | one episode per line: step, task, trace text, reward, format flags, |
//! |                      | answer, routes and per-head decision records                        |
//! | `eval.csv`           | mode, k, tasks, accuracy, rewards, pass@k, sc@k, routing accuracy   |
//! | `compatibility.csv`  | task_type, model, skill, u0, u_m, u_k, u_mk, delta_m, delta_k, c    |
//! | `regret.csv`         | scope, oracle, achieved, regret, std_error, episodes                |
//! | `expansion.csv`      | the fields of `ExpansionReport`                                     |
//! | `scaling.csv`        | level1_skills, level2_skills, oracle, accuracy, mean_episode_us     |
//!
//! Nothing here carries timestamps, so reruns with the same config and seed
//! reproduce every file byte for byte (the wall-time column of
//! `scaling.csv` excepted).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use skillroute::policy::DecisionRecord;
use skillroute::protocol::Constraint;
use skillroute::rewards::RewardBreakdown;
use skillroute::trainer::Trajectory;

use crate::error::CliError;

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

/// Writes `rows` as a CSV file with a header from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
pub struct FormatFlags {
    pub balanced_tags: bool,
    pub one_think_per_step: bool,
    pub search_info_counts_match: bool,
    pub identifiers_valid: bool,
    pub single_terminal_answer: bool,
}

impl From<[bool; 5]> for FormatFlags {
    fn from(f: [bool; 5]) -> Self {
        debug_assert_eq!(Constraint::ALL.len(), 5);
        FormatFlags {
            balanced_tags: f[0],
            one_think_per_step: f[1],
            search_info_counts_match: f[2],
            identifiers_valid: f[3],
            single_terminal_answer: f[4],
        }
    }
}

#[derive(Serialize)]
pub struct TrajectoryRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub task_id: &'a str,
    pub task_type: usize,
    pub text: &'a str,
    pub reward: RewardBreakdown,
    pub format: FormatFlags,
    pub answer: Option<&'a str>,
    pub routes: &'a [(String, String)],
    pub decisions: &'a [DecisionRecord],
}

impl<'a> TrajectoryRecord<'a> {
    pub fn new(step: Option<usize>, t: &'a Trajectory) -> Self {
        TrajectoryRecord {
            step,
            task_id: &t.task_id,
            task_type: t.task_type,
            text: &t.text,
            reward: t.reward,
            format: t.format.into(),
            answer: t.answer.as_deref(),
            routes: &t.routes,
            decisions: &t.records,
        }
    }
}

pub fn write_jsonl_line(w: &mut impl Write, record: &impl Serialize, path: &Path) -> Result<(), CliError> {
    let line = serde_json::to_string(record).map_err(|e| CliError::Internal(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| CliError::io(path, e))
}
