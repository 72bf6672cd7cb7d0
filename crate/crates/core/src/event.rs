use serde::{Deserialize, Serialize};

use crate::bandit::Reward;
use crate::engine::{ExperimentConfig, OperatorAction};
use crate::policy::{ArmDraw, ChoiceMode, PolicyKind};

/// One line of an experiment's append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// Dense, gapless, starting at 1 per experiment.
    pub sequence: u64,
    /// Wall-clock milliseconds since the Unix epoch. Informational; replay ignores it.
    #[serde(default)]
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Event {
    Created {
        experiment_id: String,
        config: ExperimentConfig,
    },
    /// Carries the realized meta draw and any Thompson draws so replay needs no RNG.
    Assigned {
        assignment_id: u64,
        participant_id: String,
        policy: PolicyKind,
        arm: usize,
        meta_draw: f64,
        mode: ChoiceMode,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        draws: Vec<ArmDraw>,
    },
    Rewarded {
        assignment_id: u64,
        arm: usize,
        reward: Reward,
    },
    BatchFlushed {
        rewards: u64,
    },
    OperatorAction {
        action: OperatorAction,
    },
    Ended,
}

impl Event {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Event::Created { .. } => "Created",
            Event::Assigned { .. } => "Assigned",
            Event::Rewarded { .. } => "Rewarded",
            Event::BatchFlushed { .. } => "BatchFlushed",
            Event::OperatorAction { .. } => "OperatorAction",
            Event::Ended => "Ended",
        }
    }
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
