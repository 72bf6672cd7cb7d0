//! Experiment state machine: meta-policy routing, burn-in, batched posterior
//! refresh, sticky assignment, reward ingestion and operator steering.
//!
//! Every mutation is expressed as an [`Event`] and goes through
//! [`ExperimentState::apply`]; the live operations only decide *which* event
//! to emit. Replaying a log therefore walks exactly the same code path as
//! live evolution.
//!
//! Two views of the posteriors are kept: `committed` (what the sampler sees)
//! and `pending` (rewards received since the last flush). A flush folds the
//! whole buffer in at once, so between two `BatchFlushed` events the sampling
//! posteriors are constant.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bandit::{select_arm, Arm, BetaPosterior, Reward};
use crate::error::{Error, Result};
use crate::event::{Event, EventRecord};
use crate::policy::{
    builtin_registry, ChoiceMode, Choice, PolicyContext, PolicyKind, PolicyRegistry, ThompsonConfig,
};

/// Everything needed to create an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Arm labels; position is the arm index.
    pub arms: Vec<String>,
    /// Probability that a new participant is routed to the uniform-random branch.
    #[serde(default = "default_split")]
    pub split_to_uniform: f64,
    #[serde(default)]
    pub thompson: ThompsonConfig,
}

fn default_split() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, arms: &[&str], split_to_uniform: f64, thompson: ThompsonConfig) -> Self {
        ExperimentConfig {
            name: name.into(),
            arms: arms.iter().map(|s| s.to_string()).collect(),
            split_to_uniform,
            thompson,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::invalid("an experiment needs at least one arm"));
        }
        let mut seen = BTreeSet::new();
        for label in &self.arms {
            if label.is_empty() {
                return Err(Error::invalid("arm labels must be non-empty"));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::invalid(format!("duplicate arm label `{label}`")));
            }
        }
        validate_split(self.split_to_uniform)?;
        self.thompson.validate(self.arms.len())
    }
}

fn validate_split(split: f64) -> Result<()> {
    if (0.0..=1.0).contains(&split) {
        Ok(())
    } else {
        Err(Error::invalid(format!("split_to_uniform must lie in [0, 1], got {split}")))
    }
}

/// Operator steering commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorAction {
    PauseArm { arm: usize },
    ResumeArm { arm: usize },
    AdoptArm { arm: usize },
    RevertAdoption,
    SetSplit { split_to_uniform: f64 },
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub assignment_id: u64,
    pub participant_id: String,
    pub policy_used: PolicyKind,
    pub arm: usize,
    /// Sequence number of the `Assigned` event.
    pub assigned_at: u64,
    pub mode: ChoiceMode,
    pub reward: Option<Reward>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingReward {
    pub assignment_id: u64,
    pub arm: usize,
    pub reward: Reward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Running,
    ArmPaused { arms: Vec<usize> },
    Adopted { arm: usize },
    Ended,
}

/// Assignments served per meta-policy branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub uniform: u64,
    pub thompson: u64,
}

impl BranchCounts {
    pub fn get(&self, kind: PolicyKind) -> u64 {
        match kind {
            PolicyKind::UniformRandom => self.uniform,
            PolicyKind::ThompsonBB => self.thompson,
        }
    }

    fn bump(&mut self, kind: PolicyKind) {
        match kind {
            PolicyKind::UniformRandom => self.uniform += 1,
            PolicyKind::ThompsonBB => self.thompson += 1,
        }
    }
}

/// Full state of one experiment, reconstructible from its event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentState {
    pub experiment_id: String,
    pub config: ExperimentConfig,
    pub arms: Vec<Arm>,
    /// Current split; starts at the configured value and moves with `SetSplit`.
    pub split_to_uniform: f64,
    pub committed: Vec<BetaPosterior>,
    pub pending: Vec<PendingReward>,
    pub assignments: Vec<AssignmentRecord>,
    pub participants: BTreeMap<String, u64>,
    pub served: BranchCounts,
    pub paused: BTreeSet<usize>,
    pub adopted: Option<usize>,
    pub ended: bool,
    pub rewards_recorded: u64,
    pub flushes: u64,
    pub last_sequence: u64,
}

impl ExperimentState {
    /// Validate `config` and produce the fresh state plus its `Created` event.
    pub fn create(experiment_id: impl Into<String>, config: ExperimentConfig) -> Result<(Self, EventRecord)> {
        let experiment_id = experiment_id.into();
        if experiment_id.is_empty() {
            return Err(Error::invalid("experiment id must be non-empty"));
        }
        config.validate()?;
        let record = EventRecord {
            sequence: 1,
            timestamp_ms: 0,
            event: Event::Created {
                experiment_id: experiment_id.clone(),
                config: config.clone(),
            },
        };
        Ok((Self::fresh(experiment_id, config), record))
    }

    fn fresh(experiment_id: String, config: ExperimentConfig) -> Self {
        let arms = config
            .arms
            .iter()
            .enumerate()
            .map(|(index, label)| Arm {
                index,
                label: label.clone(),
            })
            .collect::<Vec<_>>();
        let committed = (0..arms.len())
            .map(|i| {
                let p = config.thompson.prior_for(i);
                BetaPosterior::with_counts(p.success, p.failure, 0, 0).expect("validated priors")
            })
            .collect();
        ExperimentState {
            experiment_id,
            split_to_uniform: config.split_to_uniform,
            config,
            arms,
            committed,
            pending: Vec::new(),
            assignments: Vec::new(),
            participants: BTreeMap::new(),
            served: BranchCounts::default(),
            paused: BTreeSet::new(),
            adopted: None,
            ended: false,
            rewards_recorded: 0,
            flushes: 0,
            last_sequence: 1,
        }
    }

    /// Rebuild a state from an ordered log. The first record must be `Created`
    /// with sequence 1; every later record must be exactly one past its predecessor.
    pub fn replay<'a, I>(events: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a EventRecord>,
    {
        let mut iter = events.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::replay(0, "log is empty; expected a Created event"))?;
        let mut state = match &first.event {
            Event::Created { experiment_id, config } if first.sequence == 1 => {
                config.validate().map_err(|e| Error::replay(1, e.to_string()))?;
                Self::fresh(experiment_id.clone(), config.clone())
            }
            Event::Created { .. } => {
                return Err(Error::replay(first.sequence, "Created must carry sequence 1"))
            }
            other => {
                return Err(Error::replay(
                    first.sequence,
                    format!("log must start with Created, found {}", other.kind_name()),
                ))
            }
        };
        for rec in iter {
            state
                .apply(rec)
                .map_err(|e| match e {
                    Error::Replay { .. } => e,
                    other => Error::replay(rec.sequence, other.to_string()),
                })?;
        }
        Ok(state)
    }

    pub fn arm_count(&self) -> usize {
        self.arms.len()
    }

    pub fn status(&self) -> Status {
        if self.ended {
            Status::Ended
        } else if let Some(arm) = self.adopted {
            Status::Adopted { arm }
        } else if !self.paused.is_empty() {
            Status::ArmPaused {
                arms: self.paused.iter().copied().collect(),
            }
        } else {
            Status::Running
        }
    }

    /// Arms that may currently be served, ascending.
    pub fn eligible_arms(&self) -> Vec<usize> {
        (0..self.arms.len()).filter(|a| !self.paused.contains(a)).collect()
    }

    pub fn assignments_served(&self) -> u64 {
        self.assignments.len() as u64
    }

    pub fn assignment(&self, assignment_id: u64) -> Option<&AssignmentRecord> {
        assignment_id
            .checked_sub(1)
            .and_then(|i| self.assignments.get(i as usize))
    }

    pub fn assignment_for(&self, participant_id: &str) -> Option<&AssignmentRecord> {
        self.participants
            .get(participant_id)
            .and_then(|&id| self.assignment(id))
    }

    /// Committed posteriors with the pending buffer folded in (not used for sampling).
    pub fn posteriors_with_pending(&self) -> Vec<BetaPosterior> {
        let mut out = self.committed.clone();
        for p in &self.pending {
            out[p.arm].update(p.reward);
        }
        out
    }

    /// Assign `participant_id` using the built-in strategy registry.
    pub fn assign(&mut self, participant_id: &str, rng: &mut dyn RngCore) -> Result<Assignment> {
        self.assign_with(builtin_registry(), participant_id, rng)
    }

    /// Sticky: a participant that already holds an assignment gets the same
    /// record back and no event is emitted.
    pub fn assign_with(
        &mut self,
        registry: &PolicyRegistry,
        participant_id: &str,
        rng: &mut dyn RngCore,
    ) -> Result<Assignment> {
        if self.ended {
            return Err(Error::Lifecycle("experiment has ended".into()));
        }
        if participant_id.is_empty() {
            return Err(Error::invalid("participant_id must be non-empty"));
        }
        if let Some(existing) = self.assignment_for(participant_id) {
            return Ok(Assignment {
                record: existing.clone(),
                events: Vec::new(),
                created: false,
            });
        }
        let eligible = self.eligible_arms();
        if eligible.is_empty() {
            return Err(Error::NoEligibleArm);
        }

        let meta_draw: f64 = rng.random();
        let kind = if meta_draw < self.split_to_uniform {
            PolicyKind::UniformRandom
        } else {
            PolicyKind::ThompsonBB
        };
        let choice = match self.adopted {
            Some(arm) => Choice {
                arm,
                mode: ChoiceMode::Forced,
                draws: Vec::new(),
            },
            None => {
                let policy = registry.for_kind(kind)?;
                let ctx = PolicyContext {
                    eligible: &eligible,
                    posteriors: &self.committed,
                    served: self.served.get(kind),
                    thompson: &self.config.thompson,
                };
                policy.choose(&ctx, rng)?
            }
        };

        let assignment_id = self.assignments.len() as u64 + 1;
        let rec = self.commit(Event::Assigned {
            assignment_id,
            participant_id: participant_id.to_string(),
            policy: kind,
            arm: choice.arm,
            meta_draw,
            mode: choice.mode,
            draws: choice.draws,
        })?;
        Ok(Assignment {
            record: self.assignments.last().expect("just assigned").clone(),
            events: vec![rec],
            created: true,
        })
    }

    /// Store a reward and flush the buffer once it reaches the batch size.
    /// Returns the emitted events (`Rewarded`, possibly followed by `BatchFlushed`).
    pub fn record_reward(&mut self, assignment_id: u64, reward: Reward) -> Result<Vec<EventRecord>> {
        let arm = self
            .assignment(assignment_id)
            .ok_or_else(|| Error::NotFound(format!("assignment {assignment_id}")))?
            .arm;
        let mut events = vec![self.commit(Event::Rewarded {
            assignment_id,
            arm,
            reward,
        })?];
        if self.pending.len() as u64 >= self.config.thompson.batch_size {
            events.extend(self.flush_batch()?);
        }
        Ok(events)
    }

    /// Fold every pending reward into the committed posteriors. No-op on an empty buffer.
    pub fn flush_batch(&mut self) -> Result<Option<EventRecord>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let rewards = self.pending.len() as u64;
        self.commit(Event::BatchFlushed { rewards }).map(Some)
    }

    pub fn apply_operator_action(&mut self, action: OperatorAction) -> Result<EventRecord> {
        let event = match action {
            OperatorAction::End => Event::Ended,
            other => Event::OperatorAction { action: other },
        };
        self.commit(event)
    }

    fn commit(&mut self, event: Event) -> Result<EventRecord> {
        let rec = EventRecord {
            sequence: self.last_sequence + 1,
            timestamp_ms: 0,
            event,
        };
        self.apply(&rec)?;
        Ok(rec)
    }

    /// Validate and apply one event. On error the state is untouched.
    pub fn apply(&mut self, rec: &EventRecord) -> Result<()> {
        if rec.sequence != self.last_sequence + 1 {
            return Err(Error::replay(
                rec.sequence,
                format!("expected sequence {}", self.last_sequence + 1),
            ));
        }
        match &rec.event {
            Event::Created { .. } => {
                return Err(Error::InvalidState("duplicate Created event".into()));
            }
            Event::Assigned {
                assignment_id,
                participant_id,
                policy,
                arm,
                meta_draw,
                mode,
                draws,
            } => {
                self.check_assigned(*assignment_id, participant_id, *policy, *arm, *meta_draw, *mode, draws)?;
                self.assignments.push(AssignmentRecord {
                    assignment_id: *assignment_id,
                    participant_id: participant_id.clone(),
                    policy_used: *policy,
                    arm: *arm,
                    assigned_at: rec.sequence,
                    mode: *mode,
                    reward: None,
                });
                self.participants.insert(participant_id.clone(), *assignment_id);
                self.served.bump(*policy);
            }
            Event::Rewarded {
                assignment_id,
                arm,
                reward,
            } => {
                let existing = self
                    .assignment(*assignment_id)
                    .ok_or_else(|| Error::NotFound(format!("assignment {assignment_id}")))?;
                if existing.reward.is_some() {
                    return Err(Error::Conflict(format!(
                        "assignment {assignment_id} already has a reward"
                    )));
                }
                if existing.arm != *arm {
                    return Err(Error::InvalidState(format!(
                        "reward names arm {arm} but assignment {assignment_id} was served arm {}",
                        existing.arm
                    )));
                }
                self.assignments[*assignment_id as usize - 1].reward = Some(*reward);
                self.pending.push(PendingReward {
                    assignment_id: *assignment_id,
                    arm: *arm,
                    reward: *reward,
                });
                self.rewards_recorded += 1;
            }
            Event::BatchFlushed { rewards } => {
                if *rewards == 0 || *rewards != self.pending.len() as u64 {
                    return Err(Error::InvalidState(format!(
                        "flush of {rewards} rewards but {} pending",
                        self.pending.len()
                    )));
                }
                for p in self.pending.drain(..) {
                    self.committed[p.arm].update(p.reward);
                }
                self.flushes += 1;
            }
            Event::OperatorAction { action } => {
                self.check_action(action)?;
                match *action {
                    OperatorAction::PauseArm { arm } => {
                        self.paused.insert(arm);
                    }
                    OperatorAction::ResumeArm { arm } => {
                        self.paused.remove(&arm);
                    }
                    OperatorAction::AdoptArm { arm } => self.adopted = Some(arm),
                    OperatorAction::RevertAdoption => self.adopted = None,
                    OperatorAction::SetSplit { split_to_uniform } => self.split_to_uniform = split_to_uniform,
                    OperatorAction::End => self.ended = true,
                }
            }
            Event::Ended => {
                self.check_action(&OperatorAction::End)?;
                self.ended = true;
            }
        }
        self.last_sequence = rec.sequence;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn check_assigned(
        &self,
        assignment_id: u64,
        participant_id: &str,
        policy: PolicyKind,
        arm: usize,
        meta_draw: f64,
        mode: ChoiceMode,
        draws: &[crate::policy::ArmDraw],
    ) -> Result<()> {
        if self.ended {
            return Err(Error::Lifecycle("experiment has ended".into()));
        }
        if participant_id.is_empty() {
            return Err(Error::invalid("participant_id must be non-empty"));
        }
        if self.participants.contains_key(participant_id) {
            return Err(Error::Conflict(format!("participant `{participant_id}` already assigned")));
        }
        if assignment_id != self.assignments.len() as u64 + 1 {
            return Err(Error::InvalidState(format!(
                "assignment id {assignment_id} out of order (expected {})",
                self.assignments.len() + 1
            )));
        }
        if !(0.0..1.0).contains(&meta_draw) {
            return Err(Error::InvalidState(format!("meta draw {meta_draw} outside [0, 1)")));
        }
        let routed = if meta_draw < self.split_to_uniform {
            PolicyKind::UniformRandom
        } else {
            PolicyKind::ThompsonBB
        };
        if routed != policy {
            return Err(Error::InvalidState(format!(
                "meta draw {meta_draw} routes to {routed}, event says {policy}"
            )));
        }
        if arm >= self.arms.len() || self.paused.contains(&arm) {
            return Err(Error::InvalidState(format!("arm {arm} is not eligible")));
        }
        let served = self.served.get(policy);
        let consistent = match (self.adopted, mode, policy) {
            (Some(adopted), ChoiceMode::Forced, _) => adopted == arm,
            (Some(_), _, _) | (None, ChoiceMode::Forced, _) => false,
            (None, ChoiceMode::Uniform, PolicyKind::UniformRandom) => draws.is_empty(),
            (None, ChoiceMode::BurnIn, PolicyKind::ThompsonBB) => {
                draws.is_empty() && served < self.config.thompson.burn_in
            }
            (None, ChoiceMode::Sampled, PolicyKind::ThompsonBB) => {
                let eligible = self.eligible_arms();
                served >= self.config.thompson.burn_in
                    && draws.iter().map(|d| d.arm).eq(eligible.iter().copied())
                    && select_arm(&draws.iter().map(|d| d.value).collect::<Vec<_>>())
                        .map(|i| draws[i].arm == arm)
                        .unwrap_or(false)
            }
            _ => false,
        };
        if !consistent {
            return Err(Error::InvalidState(format!(
                "{policy} assignment of arm {arm} in mode {mode:?} is inconsistent with the experiment state"
            )));
        }
        Ok(())
    }

    fn check_action(&self, action: &OperatorAction) -> Result<()> {
        if self.ended {
            return Err(Error::Lifecycle("experiment has ended".into()));
        }
        let arm_in_range = |arm: usize| {
            if arm < self.arms.len() {
                Ok(())
            } else {
                Err(Error::invalid(format!("arm {arm} does not exist")))
            }
        };
        match *action {
            OperatorAction::PauseArm { arm } => {
                arm_in_range(arm)?;
                if self.paused.contains(&arm) {
                    return Err(Error::invalid(format!("arm {arm} is already paused")));
                }
                if self.adopted == Some(arm) {
                    return Err(Error::invalid(format!("arm {arm} is adopted; revert first")));
                }
                if self.paused.len() + 1 >= self.arms.len() {
                    return Err(Error::invalid("cannot pause the only active arm"));
                }
            }
            OperatorAction::ResumeArm { arm } => {
                arm_in_range(arm)?;
                if !self.paused.contains(&arm) {
                    return Err(Error::invalid(format!("arm {arm} is not paused")));
                }
            }
            OperatorAction::AdoptArm { arm } => {
                arm_in_range(arm)?;
                if self.paused.contains(&arm) {
                    return Err(Error::invalid(format!("arm {arm} is paused")));
                }
            }
            OperatorAction::RevertAdoption => {
                if self.adopted.is_none() {
                    return Err(Error::invalid("no arm is adopted"));
                }
            }
            OperatorAction::SetSplit { split_to_uniform } => validate_split(split_to_uniform)?,
            OperatorAction::End => {}
        }
        Ok(())
    }
}

/// Result of [`ExperimentState::assign`].
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub record: AssignmentRecord,
    /// Empty when the participant already held an assignment.
    pub events: Vec<EventRecord>,
    pub created: bool,
}
