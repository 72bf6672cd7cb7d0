//! Beta-Bernoulli Thompson Sampling primitives.
//!
//! Each arm carries a [`BetaPosterior`]: the prior pseudo-counts are kept
//! apart from the observed success/failure counts so the raw tallies stay
//! inspectable, while `alpha()`/`beta()` feed the sampler. One sampling round
//! draws a value per arm ([`sample_posterior`]) and serves the arm with the
//! largest draw ([`select_arm`]).

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An experimental alternative. Indexes are contiguous from 0 within an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub index: usize,
    pub label: String,
}

/// Binary outcome observed after an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Reward {
    Failure,
    Success,
}

impl Reward {
    pub fn as_u8(self) -> u8 {
        match self {
            Reward::Failure => 0,
            Reward::Success => 1,
        }
    }

    pub fn is_success(self) -> bool {
        self == Reward::Success
    }
}

impl From<Reward> for u8 {
    fn from(r: Reward) -> u8 {
        r.as_u8()
    }
}

impl From<bool> for Reward {
    fn from(success: bool) -> Self {
        if success {
            Reward::Success
        } else {
            Reward::Failure
        }
    }
}

impl TryFrom<u8> for Reward {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Reward::Failure),
            1 => Ok(Reward::Success),
            other => Err(Error::invalid(format!("reward must be 0 or 1, got {other}"))),
        }
    }
}

/// Per-arm belief state: `Beta(prior_success + successes, prior_failure + failures)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub prior_success: f64,
    pub prior_failure: f64,
    pub successes: u64,
    pub failures: u64,
}

impl BetaPosterior {
    /// Fresh posterior with no observations. Both priors must be positive and finite.
    pub fn new(prior_success: f64, prior_failure: f64) -> Result<Self> {
        validate_prior(prior_success, "prior_success")?;
        validate_prior(prior_failure, "prior_failure")?;
        Ok(BetaPosterior {
            prior_success,
            prior_failure,
            successes: 0,
            failures: 0,
        })
    }

    /// The `Beta(1, 1)` prior.
    pub fn uniform() -> Self {
        BetaPosterior {
            prior_success: 1.0,
            prior_failure: 1.0,
            successes: 0,
            failures: 0,
        }
    }

    /// Prior plus pre-existing counts, e.g. to rebuild a tabulated example.
    pub fn with_counts(
        prior_success: f64,
        prior_failure: f64,
        successes: u64,
        failures: u64,
    ) -> Result<Self> {
        let mut p = BetaPosterior::new(prior_success, prior_failure)?;
        p.successes = successes;
        p.failures = failures;
        Ok(p)
    }

    pub fn alpha(&self) -> f64 {
        self.prior_success + self.successes as f64
    }

    pub fn beta(&self) -> f64 {
        self.prior_failure + self.failures as f64
    }

    pub fn observations(&self) -> u64 {
        self.successes + self.failures
    }

    /// Fold one reward into the counts. Priors never change.
    pub fn update(&mut self, reward: Reward) {
        match reward {
            Reward::Success => self.successes += 1,
            Reward::Failure => self.failures += 1,
        }
    }

    pub fn updated(mut self, reward: Reward) -> Self {
        self.update(reward);
        self
    }

    /// Posterior mean `alpha / (alpha + beta)`.
    pub fn expected_value(&self) -> f64 {
        let a = self.alpha();
        a / (a + self.beta())
    }

    pub fn variance(&self) -> f64 {
        let (a, b) = (self.alpha(), self.beta());
        let s = a + b;
        a * b / (s * s * (s + 1.0))
    }

    /// One `Beta(alpha, beta)` variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // alpha/beta are positive and finite by construction.
        let dist = Beta::new(self.alpha(), self.beta()).expect("positive beta parameters");
        dist.sample(rng)
    }
}

fn validate_prior(v: f64, name: &str) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn init_posterior(prior_success: f64, prior_failure: f64) -> Result<BetaPosterior> {
    BetaPosterior::new(prior_success, prior_failure)
}

pub fn update_posterior(p: &BetaPosterior, r: Reward) -> BetaPosterior {
    p.clone().updated(r)
}

pub fn expected_value(p: &BetaPosterior) -> f64 {
    p.expected_value()
}

pub fn sample_posterior<R: Rng + ?Sized>(p: &BetaPosterior, rng: &mut R) -> f64 {
    p.sample(rng)
}

/// Index of the largest draw; ties go to the lowest index.
pub fn select_arm(draws: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in draws.iter().enumerate() {
        match best {
            Some((_, b)) if d <= b => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidState("cannot select from an empty draw vector".into()))
}

/// One Thompson round over `posteriors`: the draws and the winning position.
pub fn thompson_round<R: Rng + ?Sized>(
    posteriors: &[BetaPosterior],
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    let draws: Vec<f64> = posteriors.iter().map(|p| p.sample(rng)).collect();
    let winner = select_arm(&draws)?;
    Ok((draws, winner))
}
