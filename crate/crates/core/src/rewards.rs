//! Trajectory reward: answer correctness plus a flat format penalty.

use serde::{Deserialize, Serialize};

use crate::environment::{judge_answer, TaskInstance};
use crate::protocol::{FormatReport, ParsedTrajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// 1 when the terminal answer is correct.
    pub r_ans: i32,
    /// -1 when any protocol constraint is violated.
    pub r_fmt: i32,
    pub total: i32,
}

impl RewardBreakdown {
    pub fn new(r_ans: i32, r_fmt: i32) -> Self {
        debug_assert!(matches!(r_ans, 0 | 1) && matches!(r_fmt, -1 | 0));
        RewardBreakdown {
            r_ans,
            r_fmt,
            total: r_ans + r_fmt,
        }
    }
}

/// 1 iff the trajectory ended in an answer that matches the gold answer.
pub fn outcome_reward(pt: &ParsedTrajectory, task: &TaskInstance) -> i32 {
    if !pt.terminal {
        return 0;
    }
    match pt.final_answer() {
        Some(answer) if judge_answer(task, answer) => 1,
        _ => 0,
    }
}

/// Flat penalty: one violation or five, the result is -1.
pub fn format_reward(fr: &FormatReport) -> i32 {
    if fr.violations.is_empty() {
        0
    } else {
        -1
    }
}

pub fn total_reward(pt: &ParsedTrajectory, task: &TaskInstance, fr: &FormatReport) -> RewardBreakdown {
    RewardBreakdown::new(outcome_reward(pt, task), format_reward(fr))
}
