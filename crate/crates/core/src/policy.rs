//! Assignment strategies and the registry that resolves them by name.
//!
//! The meta-policy routes every new participant to one of two branches
//! (uniform-random or Thompson). Each branch is served by an
//! [`AssignmentPolicy`] looked up in a [`PolicyRegistry`], so an alternative
//! strategy can be swapped in under the same name without touching the engine.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bandit::{select_arm, BetaPosterior};
use crate::error::{Error, Result};

/// Which branch of the meta-policy served a participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "UR")]
    UniformRandom,
    #[serde(rename = "TSBB")]
    ThompsonBB,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 2] = [PolicyKind::UniformRandom, PolicyKind::ThompsonBB];

    /// Registry name and wire tag.
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::UniformRandom => "UR",
            PolicyKind::ThompsonBB => "TSBB",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "UR" | "uniform_random" => Ok(PolicyKind::UniformRandom),
            "TSBB" | "TS" | "thompson_bb" => Ok(PolicyKind::ThompsonBB),
            other => Err(Error::invalid(format!("unknown policy `{other}`"))),
        }
    }
}

/// Prior pseudo-counts for one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prior {
    pub success: f64,
    pub failure: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Prior {
            success: 1.0,
            failure: 1.0,
        }
    }
}

/// Thompson branch settings: burn-in length, batch size and per-arm priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThompsonConfig {
    /// Thompson-branch assignments served uniformly before sampling starts.
    #[serde(default)]
    pub burn_in: u64,
    /// Rewards buffered between posterior refreshes.
    #[serde(default = "default_batch_size")]
    pub batch_size: u64,
    /// One entry per arm; empty means `Beta(1, 1)` everywhere.
    #[serde(default)]
    pub priors: Vec<Prior>,
}

fn default_batch_size() -> u64 {
    1
}

impl Default for ThompsonConfig {
    fn default() -> Self {
        ThompsonConfig {
            burn_in: 0,
            batch_size: 1,
            priors: Vec::new(),
        }
    }
}

impl ThompsonConfig {
    pub fn validate(&self, arm_count: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !self.priors.is_empty() && self.priors.len() != arm_count {
            return Err(Error::invalid(format!(
                "expected {arm_count} priors, got {}",
                self.priors.len()
            )));
        }
        for p in &self.priors {
            BetaPosterior::new(p.success, p.failure)?;
        }
        Ok(())
    }

    pub fn prior_for(&self, arm: usize) -> Prior {
        self.priors.get(arm).copied().unwrap_or_default()
    }
}

/// One sampled value, tagged with the arm it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmDraw {
    pub arm: usize,
    pub value: f64,
}

/// How an arm was picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceMode {
    Uniform,
    BurnIn,
    Sampled,
    Forced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub arm: usize,
    pub mode: ChoiceMode,
    pub draws: Vec<ArmDraw>,
}

impl Choice {
    fn uniform(arm: usize, mode: ChoiceMode) -> Self {
        Choice {
            arm,
            mode,
            draws: Vec::new(),
        }
    }
}

/// What a strategy sees when picking an arm.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    /// Arm indexes that may be served, ascending.
    pub eligible: &'a [usize],
    /// Committed posteriors for every arm, indexed by arm.
    pub posteriors: &'a [BetaPosterior],
    /// Assignments this branch has already served.
    pub served: u64,
    pub thompson: &'a ThompsonConfig,
}

pub trait AssignmentPolicy: Send + Sync + fmt::Debug {
    fn kind(&self) -> PolicyKind;

    fn choose(&self, ctx: &PolicyContext<'_>, rng: &mut dyn RngCore) -> Result<Choice>;
}

fn uniform_pick(eligible: &[usize], rng: &mut dyn RngCore) -> Result<usize> {
    if eligible.is_empty() {
        return Err(Error::NoEligibleArm);
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Traditional A/B assignment: every eligible arm equally likely.
#[derive(Debug, Default)]
pub struct UniformRandom;

impl AssignmentPolicy for UniformRandom {
    fn kind(&self) -> PolicyKind {
        PolicyKind::UniformRandom
    }

    fn choose(&self, ctx: &PolicyContext<'_>, rng: &mut dyn RngCore) -> Result<Choice> {
        let arm = uniform_pick(ctx.eligible, rng)?;
        Ok(Choice::uniform(arm, ChoiceMode::Uniform))
    }
}

/// Beta-Bernoulli Thompson Sampling with a uniform burn-in.
#[derive(Debug, Default)]
pub struct ThompsonBB;

impl AssignmentPolicy for ThompsonBB {
    fn kind(&self) -> PolicyKind {
        PolicyKind::ThompsonBB
    }

    fn choose(&self, ctx: &PolicyContext<'_>, rng: &mut dyn RngCore) -> Result<Choice> {
        if ctx.served < ctx.thompson.burn_in {
            let arm = uniform_pick(ctx.eligible, rng)?;
            return Ok(Choice::uniform(arm, ChoiceMode::BurnIn));
        }
        if ctx.eligible.is_empty() {
            return Err(Error::NoEligibleArm);
        }
        let draws: Vec<ArmDraw> = ctx
            .eligible
            .iter()
            .map(|&arm| ArmDraw {
                arm,
                value: ctx.posteriors[arm].sample(rng),
            })
            .collect();
        let values: Vec<f64> = draws.iter().map(|d| d.value).collect();
        let arm = draws[select_arm(&values)?].arm;
        Ok(Choice {
            arm,
            mode: ChoiceMode::Sampled,
            draws,
        })
    }
}

/// Named collection of assignment strategies.
#[derive(Debug, Clone, Default)]
pub struct PolicyRegistry {
    entries: BTreeMap<String, Arc<dyn AssignmentPolicy>>,
}

impl PolicyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding `UR` and `TSBB`.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(PolicyKind::UniformRandom.name(), Arc::new(UniformRandom));
        r.register(PolicyKind::ThompsonBB.name(), Arc::new(ThompsonBB));
        r
    }

    /// Register (or replace) the strategy served under `name`.
    pub fn register(&mut self, name: impl Into<String>, policy: Arc<dyn AssignmentPolicy>) {
        self.entries.insert(name.into(), policy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AssignmentPolicy>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("no policy registered as `{name}`")))
    }

    pub fn for_kind(&self, kind: PolicyKind) -> Result<Arc<dyn AssignmentPolicy>> {
        self.get(kind.name())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Process-wide registry with the built-in strategies.
pub fn builtin_registry() -> &'static PolicyRegistry {
    static REGISTRY: OnceLock<PolicyRegistry> = OnceLock::new();
    REGISTRY.get_or_init(PolicyRegistry::with_builtins)
}
