//! Condition means and SEMs, the unpooled two-proportion Wald test,
//! allocation proportions, posterior summaries and the exact
//! `P(X2 > X1)` for integer-parameter Beta variables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::beta::ln_beta;
use statrs::function::erf::erfc;

use crate::bandit::BetaPosterior;
use crate::engine::ExperimentState;
use crate::error::{Error, Result};
use crate::policy::PolicyKind;
use crate::store::ExportRow;

/// Credible level used by [`posterior_summary`].
pub const CREDIBLE_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionSummary {
    pub successes: u64,
    pub trials: u64,
    pub mean: f64,
    /// `sqrt(mean * (1 - mean) / trials)`
    pub sem: f64,
}

impl ProportionSummary {
    pub fn new(successes: u64, trials: u64) -> Result<Self> {
        if trials == 0 {
            return Err(Error::invalid("a proportion needs at least one trial"));
        }
        if successes > trials {
            return Err(Error::invalid(format!("{successes} successes exceed {trials} trials")));
        }
        let mean = successes as f64 / trials as f64;
        Ok(ProportionSummary {
            successes,
            trials,
            mean,
            sem: (mean * (1.0 - mean) / trials as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub z: f64,
    pub two_sided_p: f64,
    pub group1: ProportionSummary,
    pub group2: ProportionSummary,
}

impl WaldResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.two_sided_p < alpha
    }
}

/// Two-sided p-value of a standard-normal statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Unpooled Wald test of `m2 - m1`: `z = (m2 - m1) / sqrt(sem1^2 + sem2^2)`.
pub fn wald_two_proportion(s1: u64, n1: u64, s2: u64, n2: u64) -> Result<WaldResult> {
    let group1 = ProportionSummary::new(s1, n1)?;
    let group2 = ProportionSummary::new(s2, n2)?;
    let se = (group1.sem * group1.sem + group2.sem * group2.sem).sqrt();
    let diff = group2.mean - group1.mean;
    let z = if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        return Err(Error::DegenerateVariance);
    };
    Ok(WaldResult {
        z,
        two_sided_p: normal_two_sided_p(z),
        group1,
        group2,
    })
}

fn integer_param(v: f64, name: &str) -> Result<u64> {
    if v.is_finite() && v >= 1.0 && v.fract() == 0.0 && v <= 1e9 {
        Ok(v as u64)
    } else {
        Err(Error::invalid(format!("{name} must be a positive integer, got {v}")))
    }
}

/// `P(X2 > X1)` for `X1 ~ Beta(a1, b1)`, `X2 ~ Beta(a2, b2)` with integer
/// parameters, via the finite sum
/// `sum_{i=0}^{a2-1} B(a1+i, b1+b2) / ((b2+i) B(1+i, b2) B(a1, b1))`.
pub fn prob_best_exact(a1: f64, b1: f64, a2: f64, b2: f64) -> Result<f64> {
    let (a1, b1) = (integer_param(a1, "a1")? as f64, integer_param(b1, "b1")? as f64);
    let (a2, b2) = (integer_param(a2, "a2")?, integer_param(b2, "b2")? as f64);
    let base = ln_beta(a1, b1);
    let mut total = 0.0;
    for i in 0..a2 {
        let i = i as f64;
        total += (ln_beta(a1 + i, b1 + b2) - (b2 + i).ln() - ln_beta(1.0 + i, b2) - base).exp();
    }
    Ok(total.clamp(0.0, 1.0))
}

/// [`prob_best_exact`] for two posteriors (their alpha/beta must be integers).
pub fn prob_second_beats_first(first: &BetaPosterior, second: &BetaPosterior) -> Result<f64> {
    prob_best_exact(first.alpha(), first.beta(), second.alpha(), second.beta())
}

/// Equal-tailed credible interval of the posterior at `level`.
pub fn credible_interval(p: &BetaPosterior, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("credible level must lie in (0, 1), got {level}")));
    }
    let dist = Beta::new(p.alpha(), p.beta()).map_err(|e| Error::invalid(e.to_string()))?;
    let tail = (1.0 - level) / 2.0;
    Ok((dist.inverse_cdf(tail), dist.inverse_cdf(1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmPosteriorSummary {
    pub arm: usize,
    pub label: String,
    pub alpha: f64,
    pub beta: f64,
    pub expected_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Per-arm alpha, beta, EV and 95% central credible interval of the committed posteriors.
pub fn posterior_summary(state: &ExperimentState) -> Vec<ArmPosteriorSummary> {
    state
        .arms
        .iter()
        .zip(&state.committed)
        .map(|(arm, p)| summarize_posterior(arm.index, &arm.label, p))
        .collect()
}

pub fn summarize_posterior(arm: usize, label: &str, p: &BetaPosterior) -> ArmPosteriorSummary {
    let (ci_low, ci_high) = credible_interval(p, CREDIBLE_LEVEL).expect("fixed valid level");
    ArmPosteriorSummary {
        arm,
        label: label.to_string(),
        alpha: p.alpha(),
        beta: p.beta(),
        expected_value: p.expected_value(),
        ci_low,
        ci_high,
    }
}

/// Counts and proportions over arms on one basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCounts {
    pub total: u64,
    pub counts: Vec<u64>,
    /// Empty when `total` is zero.
    pub proportions: Vec<f64>,
}

impl BasisCounts {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let proportions = if total == 0 {
            Vec::new()
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        BasisCounts {
            total,
            counts,
            proportions,
        }
    }

    /// Proportion of `arm` relative to an arbitrary denominator.
    pub fn share_of(&self, arm: usize, denominator: u64) -> Option<f64> {
        (denominator > 0).then(|| self.counts.get(arm).copied().unwrap_or(0) as f64 / denominator as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAllocation {
    pub policy: PolicyKind,
    /// Every assignment, rewarded or not.
    pub assigned: BasisCounts,
    /// Only assignments with a recorded reward.
    pub rewarded: BasisCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub arm_count: usize,
    pub policies: Vec<PolicyAllocation>,
}

impl AllocationReport {
    pub fn policy(&self, kind: PolicyKind) -> Option<&PolicyAllocation> {
        self.policies.iter().find(|p| p.policy == kind)
    }
}

fn arm_count_of(rows: &[ExportRow]) -> usize {
    rows.iter().map(|r| r.arm + 1).max().unwrap_or(0)
}

/// Per-policy, per-arm counts on the all-assigned and rewarded-only bases.
pub fn allocation_report(rows: &[ExportRow]) -> AllocationReport {
    allocation_report_with_arms(rows, arm_count_of(rows))
}

pub fn allocation_report_with_arms(rows: &[ExportRow], arm_count: usize) -> AllocationReport {
    let arm_count = arm_count.max(arm_count_of(rows));
    let policies = PolicyKind::ALL
        .iter()
        .filter_map(|&kind| {
            let mut assigned = vec![0u64; arm_count];
            let mut rewarded = vec![0u64; arm_count];
            let mut any = false;
            for r in rows.iter().filter(|r| r.policy == kind) {
                any = true;
                assigned[r.arm] += 1;
                if r.reward.is_some() {
                    rewarded[r.arm] += 1;
                }
            }
            any.then(|| PolicyAllocation {
                policy: kind,
                assigned: BasisCounts::from_counts(assigned),
                rewarded: BasisCounts::from_counts(rewarded),
            })
        })
        .collect();
    AllocationReport { arm_count, policies }
}

/// Arm `arm` against arm 0 within one policy's rewarded data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub baseline_arm: usize,
    pub arm: usize,
    /// `None` when either arm has no rewarded trials or the variance is degenerate.
    pub wald: Option<WaldResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAnalysis {
    pub policy: PolicyKind,
    /// Indexed by arm; `None` for arms without rewarded trials.
    pub arms: Vec<Option<ProportionSummary>>,
    pub comparisons: Vec<ArmComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub rows: u64,
    pub rewarded_rows: u64,
    pub policies: Vec<PolicyAnalysis>,
    pub allocation: AllocationReport,
}

/// Reward tallies `(successes, trials)` per arm for one policy.
pub fn reward_tallies(rows: &[ExportRow], kind: PolicyKind, arm_count: usize) -> Vec<(u64, u64)> {
    let mut out = vec![(0u64, 0u64); arm_count];
    for r in rows.iter().filter(|r| r.policy == kind) {
        if let Some(reward) = r.reward {
            out[r.arm].1 += 1;
            out[r.arm].0 += u64::from(reward.as_u8());
        }
    }
    out
}

/// Per-policy summaries and Wald tests from per-arm `(successes, trials)` tallies.
pub fn policy_analysis(kind: PolicyKind, tallies: &[(u64, u64)]) -> PolicyAnalysis {
    let arms = tallies
        .iter()
        .map(|&(s, n)| ProportionSummary::new(s, n).ok())
        .collect();
    let comparisons = (1..tallies.len())
        .map(|arm| {
            let (s1, n1) = tallies[0];
            let (s2, n2) = tallies[arm];
            ArmComparison {
                baseline_arm: 0,
                arm,
                wald: wald_two_proportion(s1, n1, s2, n2).ok(),
            }
        })
        .collect();
    PolicyAnalysis {
        policy: kind,
        arms,
        comparisons,
    }
}

/// Everything `analyze` prints. Rewarded rows count whether or not their batch was flushed.
pub fn analyze(rows: &[ExportRow]) -> AnalysisReport {
    let allocation = allocation_report(rows);
    let policies = allocation
        .policies
        .iter()
        .map(|p| policy_analysis(p.policy, &reward_tallies(rows, p.policy, allocation.arm_count)))
        .collect();
    AnalysisReport {
        rows: rows.len() as u64,
        rewarded_rows: rows.iter().filter(|r| r.reward.is_some()).count() as u64,
        policies,
        allocation,
    }
}

impl AnalysisReport {
    /// Human-readable table. Numbers use fixed precision so two reports built
    /// from the same counts render identically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.rows == 0 {
            out.push_str("no data\n");
            return out;
        }
        let _ = writeln!(out, "rows: {}  rewarded: {}", self.rows, self.rewarded_rows);
        for p in &self.policies {
            let _ = writeln!(out, "\npolicy {}", p.policy);
            let _ = writeln!(out, "  arm  successes  trials    mean     sem");
            for (arm, s) in p.arms.iter().enumerate() {
                match s {
                    Some(s) => {
                        let _ = writeln!(
                            out,
                            "  {arm:>3}  {:>9}  {:>6}  {:.4}  {:.4}",
                            s.successes, s.trials, s.mean, s.sem
                        );
                    }
                    None => {
                        let _ = writeln!(out, "  {arm:>3}  {:>9}  {:>6}       -       -", 0, 0);
                    }
                }
            }
            for c in &p.comparisons {
                match &c.wald {
                    Some(w) => {
                        let _ = writeln!(
                            out,
                            "  wald arm {} vs arm {}: z = {:.4}  p = {:.4}",
                            c.arm, c.baseline_arm, w.z, w.two_sided_p
                        );
                    }
                    None => {
                        let _ = writeln!(out, "  wald arm {} vs arm {}: n/a", c.arm, c.baseline_arm);
                    }
                }
            }
        }
        let _ = writeln!(out, "\nallocation");
        for p in &self.allocation.policies {
            for (basis, counts) in [("assigned", &p.assigned), ("rewarded", &p.rewarded)] {
                let cells: Vec<String> = counts
                    .counts
                    .iter()
                    .enumerate()
                    .map(|(arm, c)| match counts.proportions.get(arm) {
                        Some(prop) => format!("arm{arm}={c} ({prop:.3})"),
                        None => format!("arm{arm}={c}"),
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    "  {:<4} {basis:<8} n={:<6} {}",
                    p.policy.name(),
                    counts.total,
                    cells.join("  ")
                );
            }
        }
        out
    }
}
