//! Response bodies. Each is a pure function of an [`ExperimentState`], so a
//! replay of the log up to sequence `k` reproduces the response served at `k`.

use serde::{Deserialize, Serialize};

use adaptrial_core::stats::{
    allocation_report_with_arms, analyze, posterior_summary, prob_second_beats_first, AllocationReport,
    AnalysisReport, ArmPosteriorSummary,
};
use adaptrial_core::store::ExportRow;
use adaptrial_core::{AssignmentRecord, ExperimentState, PolicyKind, Reward, Status};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedView {
    pub experiment_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentView {
    pub assignment_id: u64,
    pub arm: usize,
    pub arm_label: String,
    pub policy_used: PolicyKind,
}

impl AssignmentView {
    pub fn of(state: &ExperimentState, rec: &AssignmentRecord) -> Self {
        AssignmentView {
            assignment_id: rec.assignment_id,
            arm: rec.arm,
            arm_label: state.arms[rec.arm].label.clone(),
            policy_used: rec.policy_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardView {
    pub assignment_id: u64,
    pub arm: usize,
    pub reward: Reward,
    /// Whether this reward triggered a batch flush.
    pub flushed: bool,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionView {
    pub sequence: u64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryView {
    pub experiment_id: String,
    pub name: String,
    pub status: Status,
    pub last_sequence: u64,
}

impl SummaryView {
    pub fn of(state: &ExperimentState) -> Self {
        SummaryView {
            experiment_id: state.experiment_id.clone(),
            name: state.config.name.clone(),
            status: state.status(),
            last_sequence: state.last_sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmView {
    pub index: usize,
    pub label: String,
    pub prior_success: f64,
    pub prior_failure: f64,
    /// Committed counts, the ones the sampler sees.
    pub successes: u64,
    pub failures: u64,
    pub alpha: f64,
    pub beta: f64,
    pub expected_value: f64,
    /// Buffered until the next batch flush.
    pub pending_successes: u64,
    pub pending_failures: u64,
    pub paused: bool,
    pub assigned_uniform: u64,
    pub assigned_thompson: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub experiment_id: String,
    pub name: String,
    pub status: Status,
    pub last_sequence: u64,
    pub split_to_uniform: f64,
    pub burn_in: u64,
    pub batch_size: u64,
    pub served_uniform: u64,
    pub served_thompson: u64,
    pub assignments: u64,
    pub rewards_recorded: u64,
    pub pending_rewards: u64,
    pub flushes: u64,
    pub adopted: Option<usize>,
    pub arms: Vec<ArmView>,
}

impl StateView {
    pub fn of(state: &ExperimentState) -> Self {
        let arms = state
            .arms
            .iter()
            .zip(&state.committed)
            .map(|(arm, p)| {
                let pending = |r: Reward| {
                    state
                        .pending
                        .iter()
                        .filter(|x| x.arm == arm.index && x.reward == r)
                        .count() as u64
                };
                let assigned = |k: PolicyKind| {
                    state
                        .assignments
                        .iter()
                        .filter(|a| a.arm == arm.index && a.policy_used == k)
                        .count() as u64
                };
                ArmView {
                    index: arm.index,
                    label: arm.label.clone(),
                    prior_success: p.prior_success,
                    prior_failure: p.prior_failure,
                    successes: p.successes,
                    failures: p.failures,
                    alpha: p.alpha(),
                    beta: p.beta(),
                    expected_value: p.expected_value(),
                    pending_successes: pending(Reward::Success),
                    pending_failures: pending(Reward::Failure),
                    paused: state.paused.contains(&arm.index),
                    assigned_uniform: assigned(PolicyKind::UniformRandom),
                    assigned_thompson: assigned(PolicyKind::ThompsonBB),
                }
            })
            .collect();
        StateView {
            experiment_id: state.experiment_id.clone(),
            name: state.config.name.clone(),
            status: state.status(),
            last_sequence: state.last_sequence,
            split_to_uniform: state.split_to_uniform,
            burn_in: state.config.thompson.burn_in,
            batch_size: state.config.thompson.batch_size,
            served_uniform: state.served.uniform,
            served_thompson: state.served.thompson,
            assignments: state.assignments.len() as u64,
            rewards_recorded: state.rewards_recorded,
            pending_rewards: state.pending.len() as u64,
            flushes: state.flushes,
            adopted: state.adopted,
            arms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsView {
    pub last_sequence: u64,
    /// Committed posteriors with 95% credible intervals.
    pub posteriors: Vec<ArmPosteriorSummary>,
    /// P(arm j beats arm 0) under the committed posteriors; `None` for arm 0
    /// and when a parameter is not an integer.
    pub prob_beats_first: Vec<Option<f64>>,
    /// Frequentist analysis of rewarded assignments, per policy.
    pub analysis: AnalysisReport,
}

impl StatsView {
    pub fn of(state: &ExperimentState) -> Self {
        let first = &state.committed[0];
        StatsView {
            last_sequence: state.last_sequence,
            posteriors: posterior_summary(state),
            prob_beats_first: state
                .committed
                .iter()
                .enumerate()
                .map(|(j, p)| (j > 0).then(|| prob_second_beats_first(first, p).ok()).flatten())
                .collect(),
            analysis: analyze(&rows(state)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationView {
    pub last_sequence: u64,
    #[serde(flatten)]
    pub report: AllocationReport,
}

impl AllocationView {
    pub fn of(state: &ExperimentState) -> Self {
        AllocationView {
            last_sequence: state.last_sequence,
            report: allocation_report_with_arms(&rows(state), state.arm_count()),
        }
    }
}

/// The export table, rebuilt from in-memory assignments.
pub fn rows(state: &ExperimentState) -> Vec<ExportRow> {
    state
        .assignments
        .iter()
        .map(|r| ExportRow {
            sequence: r.assigned_at,
            participant_id: r.participant_id.clone(),
            policy: r.policy_used,
            arm: r.arm,
            reward: r.reward,
        })
        .collect()
}
