//! Monte-Carlo harness: synthetic Bernoulli participants pushed through the
//! real [`ExperimentState`] code path, aggregated over seeded replications.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::Reward;
use crate::engine::{ExperimentConfig, ExperimentState};
use crate::error::{Error, Result};
use crate::event::EventRecord;
use crate::policy::{PolicyKind, Prior, ThompsonConfig};
use crate::stats::{policy_analysis, AllocationReport, AnalysisReport, BasisCounts, PolicyAllocation, WaldResult};

/// Arm means switch to `post_switch_means` from participant `switch_at` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonstationarity {
    pub switch_at: u64,
    pub post_switch_means: Vec<f64>,
}

/// When simulated rewards reach the engine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardDelay {
    /// Before the next participant arrives.
    #[default]
    Immediate,
    /// After a uniform number of further assignments in `0..=max_delay`.
    Shuffled { max_delay: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    #[serde(default)]
    pub name: String,
    pub arm_true_means: Vec<f64>,
    /// Participants per replication.
    pub horizon: u64,
    #[serde(default = "default_split")]
    pub split_to_uniform: f64,
    #[serde(default)]
    pub burn_in: u64,
    #[serde(default = "default_batch")]
    pub batch_size: u64,
    #[serde(default)]
    pub priors: Vec<Prior>,
    #[serde(default = "default_replications")]
    pub replications: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub nonstationarity: Option<Nonstationarity>,
    #[serde(default)]
    pub reward_missing_prob: f64,
    #[serde(default)]
    pub reward_delay: RewardDelay,
    /// Significance level for the per-policy Wald test.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_split() -> f64 {
    0.5
}
fn default_batch() -> u64 {
    1
}
fn default_replications() -> u64 {
    1
}
fn default_alpha() -> f64 {
    0.05
}

impl SimulationScenario {
    /// Two arms at `means`, everything else at defaults.
    pub fn new(means: &[f64], horizon: u64) -> Self {
        SimulationScenario {
            name: String::new(),
            arm_true_means: means.to_vec(),
            horizon,
            split_to_uniform: default_split(),
            burn_in: 0,
            batch_size: 1,
            priors: Vec::new(),
            replications: 1,
            seed: 0,
            nonstationarity: None,
            reward_missing_prob: 0.0,
            reward_delay: RewardDelay::Immediate,
            alpha: default_alpha(),
        }
    }

    /// The self-explanation case study: UR-side means as ground truth,
    /// 0.5 split, burn-in 100, batch 10, 921 participants.
    pub fn paper_case_study() -> Self {
        SimulationScenario {
            name: "paper_case_study".into(),
            split_to_uniform: 0.5,
            burn_in: 100,
            batch_size: 10,
            replications: 1000,
            seed: 20_240_601,
            ..Self::new(&[0.512, 0.608], 921)
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "paper_case_study" => Some(Self::paper_case_study()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let check_means = |means: &[f64], what: &str| -> Result<()> {
            if means.is_empty() {
                return Err(Error::invalid(format!("{what} must list at least one arm")));
            }
            if let Some(m) = means.iter().find(|m| !(0.0..=1.0).contains(*m)) {
                return Err(Error::invalid(format!("{what} entry {m} outside [0, 1]")));
            }
            Ok(())
        };
        check_means(&self.arm_true_means, "arm_true_means")?;
        if let Some(ns) = &self.nonstationarity {
            check_means(&ns.post_switch_means, "post_switch_means")?;
            if ns.post_switch_means.len() != self.arm_true_means.len() {
                return Err(Error::invalid("post_switch_means must have one entry per arm"));
            }
            if ns.switch_at >= self.horizon {
                return Err(Error::invalid("switch_at must be below the horizon"));
            }
        }
        if !(0.0..1.0).contains(&self.reward_missing_prob) {
            return Err(Error::invalid("reward_missing_prob must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        self.experiment_config().validate()
    }

    pub fn arm_count(&self) -> usize {
        self.arm_true_means.len()
    }

    /// True means in force for participant `t`.
    pub fn means_at(&self, t: u64) -> &[f64] {
        match &self.nonstationarity {
            Some(ns) if t >= ns.switch_at => &ns.post_switch_means,
            _ => &self.arm_true_means,
        }
    }

    /// Arm with the highest pre-switch mean (lowest index on ties).
    pub fn best_arm(&self) -> usize {
        crate::bandit::select_arm(&self.arm_true_means).expect("validated non-empty")
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            name: self.name.clone(),
            arms: (0..self.arm_true_means.len()).map(|i| format!("arm{i}")).collect(),
            split_to_uniform: self.split_to_uniform,
            thompson: ThompsonConfig {
                burn_in: self.burn_in,
                batch_size: self.batch_size,
                priors: self.priors.clone(),
            },
        }
    }

    fn all_means_equal(&self) -> bool {
        let first = self.arm_true_means[0];
        let same = |m: &[f64]| m.iter().all(|&x| x == first);
        same(&self.arm_true_means)
            && self
                .nonstationarity
                .as_ref()
                .is_none_or(|ns| same(&ns.post_switch_means))
    }
}

/// What one policy branch did in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub policy: PolicyKind,
    pub participants: u64,
    /// Assignments per arm.
    pub assigned: Vec<u64>,
    /// Delivered rewards per arm.
    pub rewarded: Vec<u64>,
    pub successes: Vec<u64>,
    /// Sum over this branch's participants of (best true mean - served arm's true mean).
    pub regret: f64,
    /// Arm 1 against arm 0 on delivered rewards; `None` if undefined.
    pub wald: Option<WaldResult>,
}

impl PolicyOutcome {
    fn new(policy: PolicyKind, arms: usize) -> Self {
        PolicyOutcome {
            policy,
            participants: 0,
            assigned: vec![0; arms],
            rewarded: vec![0; arms],
            successes: vec![0; arms],
            regret: 0.0,
            wald: None,
        }
    }

    pub fn allocation(&self, arm: usize) -> Option<f64> {
        (self.participants > 0).then(|| self.assigned[arm] as f64 / self.participants as f64)
    }

    pub fn tallies(&self) -> Vec<(u64, u64)> {
        self.successes.iter().copied().zip(self.rewarded.iter().copied()).collect()
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.wald.is_some_and(|w| w.rejects(alpha))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub seed: u64,
    pub participants: u64,
    pub true_means: Vec<f64>,
    /// One entry per policy, `UR` first.
    pub policies: Vec<PolicyOutcome>,
}

impl ReplicationRecord {
    pub fn policy(&self, kind: PolicyKind) -> &PolicyOutcome {
        self.policies.iter().find(|p| p.policy == kind).expect("both policies recorded")
    }

    /// The report `analyze` would print for this replication's log, built
    /// from in-memory counters. Arms past the last one ever assigned are
    /// dropped, as they are when the table is read back from a log.
    pub fn analysis(&self) -> AnalysisReport {
        let arm_count = self
            .policies
            .iter()
            .filter_map(|p| p.assigned.iter().rposition(|&c| c > 0))
            .max()
            .map_or(0, |i| i + 1);
        let ran: Vec<&PolicyOutcome> = self.policies.iter().filter(|p| p.participants > 0).collect();
        AnalysisReport {
            rows: self.participants,
            rewarded_rows: self.policies.iter().flat_map(|p| p.rewarded.iter()).sum(),
            policies: ran
                .iter()
                .map(|p| policy_analysis(p.policy, &p.tallies()[..arm_count]))
                .collect(),
            allocation: AllocationReport {
                arm_count,
                policies: ran
                    .iter()
                    .map(|p| PolicyAllocation {
                        policy: p.policy,
                        assigned: BasisCounts::from_counts(p.assigned[..arm_count].to_vec()),
                        rewarded: BasisCounts::from_counts(p.rewarded[..arm_count].to_vec()),
                    })
                    .collect(),
            },
        }
    }
}

/// Cumulative regret of a replication, over both branches.
pub fn regret(record: &ReplicationRecord) -> f64 {
    record.policies.iter().map(|p| p.regret).sum()
}

/// Cumulative regret of serving `served` arms under fixed `true_means`.
pub fn served_regret(true_means: &[f64], served: &[usize]) -> f64 {
    let best = true_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    served.iter().map(|&a| best - true_means[a]).sum()
}

/// Derive the seed of replication `index` from the master seed (SplitMix64).
pub fn replication_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn run_replication(scenario: &SimulationScenario, replication_seed: u64) -> Result<ReplicationRecord> {
    simulate(scenario, 0, replication_seed, false).map(|t| t.record)
}

/// A replication together with its full event log and final engine state.
#[derive(Debug, Clone)]
pub struct Trace {
    pub record: ReplicationRecord,
    pub events: Vec<EventRecord>,
    pub state: ExperimentState,
}

/// Like [`run_replication`] but keeps the event log and the final state.
pub fn run_replication_traced(scenario: &SimulationScenario, replication_seed: u64) -> Result<Trace> {
    simulate(scenario, 0, replication_seed, true)
}

fn simulate(
    scenario: &SimulationScenario,
    replication: u64,
    seed: u64,
    keep_log: bool,
) -> Result<Trace> {
    scenario.validate()?;
    let arms = scenario.arm_count();
    let (mut state, created) = ExperimentState::create(format!("sim-{seed:016x}"), scenario.experiment_config())?;
    let mut log = Vec::new();
    if keep_log {
        log.push(created);
    }
    let mut engine_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    env_rng.set_stream(1);

    let mut outcomes = [
        PolicyOutcome::new(PolicyKind::UniformRandom, arms),
        PolicyOutcome::new(PolicyKind::ThompsonBB, arms),
    ];
    let slot = |k: PolicyKind| match k {
        PolicyKind::UniformRandom => 0,
        PolicyKind::ThompsonBB => 1,
    };
    // (due participant index, assignment id, policy slot, arm, reward)
    let mut in_flight: VecDeque<(u64, u64, usize, usize, Reward)> = VecDeque::new();

    let deliver = |state: &mut ExperimentState,
                       outcomes: &mut [PolicyOutcome; 2],
                       log: &mut Vec<EventRecord>,
                       (assignment_id, s, arm, reward): (u64, usize, usize, Reward)|
     -> Result<()> {
        let events = state.record_reward(assignment_id, reward)?;
        if keep_log {
            log.extend(events);
        }
        outcomes[s].rewarded[arm] += 1;
        outcomes[s].successes[arm] += u64::from(reward.as_u8());
        Ok(())
    };

    for t in 0..scenario.horizon {
        while in_flight.front().is_some_and(|d| d.0 <= t) {
            let (_, id, s, arm, r) = in_flight.pop_front().expect("checked");
            deliver(&mut state, &mut outcomes, &mut log, (id, s, arm, r))?;
        }

        let means = scenario.means_at(t);
        let a = state.assign(&format!("p{t}"), &mut engine_rng)?;
        if keep_log {
            log.extend(a.events);
        }
        let rec = a.record;
        let s = slot(rec.policy_used);
        let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        outcomes[s].participants += 1;
        outcomes[s].assigned[rec.arm] += 1;
        outcomes[s].regret += best - means[rec.arm];

        // Both environment draws are always taken so the stream does not
        // depend on which branch of the missing/delay logic runs.
        let missing = env_rng.random::<f64>() < scenario.reward_missing_prob;
        let reward = Reward::from(env_rng.random::<f64>() < means[rec.arm]);
        if missing {
            continue;
        }
        match scenario.reward_delay {
            RewardDelay::Immediate => {
                deliver(&mut state, &mut outcomes, &mut log, (rec.assignment_id, s, rec.arm, reward))?
            }
            RewardDelay::Shuffled { max_delay } => {
                let due = t + 1 + env_rng.random_range(0..=max_delay);
                let pos = in_flight.partition_point(|d| d.0 <= due);
                in_flight.insert(pos, (due, rec.assignment_id, s, rec.arm, reward));
            }
        }
    }
    while let Some((_, id, s, arm, r)) = in_flight.pop_front() {
        deliver(&mut state, &mut outcomes, &mut log, (id, s, arm, r))?;
    }

    for o in outcomes.iter_mut() {
        if arms >= 2 {
            o.wald = policy_analysis(o.policy, &o.tallies()).comparisons[0].wald;
        }
    }
    Ok(Trace {
        record: ReplicationRecord {
            replication,
            seed,
            participants: scenario.horizon,
            true_means: scenario.arm_true_means.clone(),
            policies: outcomes.to_vec(),
        },
        events: log,
        state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Linear-interpolated quantiles; `None` for an empty sample.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Quantiles {
        p05: at(0.05),
        p50: at(0.5),
        p95: at(0.95),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy: PolicyKind,
    pub participants: u64,
    /// Pooled assignment proportions per arm; empty if the branch never ran.
    pub allocation: Vec<f64>,
    /// Mean over replications (where the branch ran) of the best arm's share.
    pub mean_best_arm_share: Option<f64>,
    pub best_arm_share: Option<Quantiles>,
    /// Pooled delivered success rate.
    pub mean_reward: Option<f64>,
    /// Mean over replications of the branch's cumulative regret.
    pub mean_regret: f64,
    /// Total regret divided by total participants of the branch.
    pub regret_per_participant: Option<f64>,
    /// Fraction of replications whose Wald test rejects at `alpha`.
    pub rejection_rate: f64,
    pub z: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyAggregate {
    pub replications: u64,
    pub best_arm: usize,
    pub alpha: f64,
    pub mean_total_regret: f64,
    pub policies: Vec<PolicyAggregate>,
}

impl StudyAggregate {
    pub fn policy(&self, kind: PolicyKind) -> &PolicyAggregate {
        self.policies.iter().find(|p| p.policy == kind).expect("both policies aggregated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: SimulationScenario,
    pub aggregate: StudyAggregate,
    pub replications: Vec<ReplicationRecord>,
}

/// Run every replication (in parallel) and aggregate in replication order.
pub fn run_study(scenario: &SimulationScenario) -> Result<SimulationReport> {
    scenario.validate()?;
    let records = (0..scenario.replications)
        .into_par_iter()
        .map(|i| simulate(scenario, i, replication_seed(scenario.seed, i), false).map(|t| t.record))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationReport {
        scenario: scenario.clone(),
        aggregate: aggregate(scenario, &records),
        replications: records,
    })
}

pub fn aggregate(scenario: &SimulationScenario, records: &[ReplicationRecord]) -> StudyAggregate {
    let best = scenario.best_arm();
    let n = records.len().max(1) as f64;
    let policies = PolicyKind::ALL
        .iter()
        .map(|&kind| {
            let outs: Vec<&PolicyOutcome> = records.iter().map(|r| r.policy(kind)).collect();
            let participants: u64 = outs.iter().map(|o| o.participants).sum();
            let assigned: Vec<u64> = (0..scenario.arm_count())
                .map(|a| outs.iter().map(|o| o.assigned[a]).sum())
                .collect();
            let allocation = if participants == 0 {
                Vec::new()
            } else {
                assigned.iter().map(|&c| c as f64 / participants as f64).collect()
            };
            let shares: Vec<f64> = outs.iter().filter_map(|o| o.allocation(best)).collect();
            let successes: u64 = outs.iter().flat_map(|o| o.successes.iter()).sum();
            let rewarded: u64 = outs.iter().flat_map(|o| o.rewarded.iter()).sum();
            let total_regret: f64 = outs.iter().map(|o| o.regret).sum();
            let zs: Vec<f64> = outs.iter().filter_map(|o| o.wald.map(|w| w.z)).collect();
            PolicyAggregate {
                policy: kind,
                participants,
                allocation,
                mean_best_arm_share: (!shares.is_empty())
                    .then(|| shares.iter().sum::<f64>() / shares.len() as f64),
                best_arm_share: quantiles(&shares),
                mean_reward: (rewarded > 0).then(|| successes as f64 / rewarded as f64),
                mean_regret: total_regret / n,
                regret_per_participant: (participants > 0).then(|| total_regret / participants as f64),
                rejection_rate: outs.iter().filter(|o| o.rejects(scenario.alpha)).count() as f64 / n,
                z: quantiles(&zs),
            }
        })
        .collect();
    StudyAggregate {
        replications: records.len() as u64,
        best_arm: best,
        alpha: scenario.alpha,
        mean_total_regret: records.iter().map(regret).sum::<f64>() / n,
        policies,
    }
}

impl SimulationReport {
    /// One CSV row per replication.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let arms = self.scenario.arm_count();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["replication".to_string(), "seed".into(), "participants".into()];
        for kind in PolicyKind::ALL {
            let p = kind.name().to_lowercase();
            header.push(format!("{p}_participants"));
            header.extend((0..arms).map(|a| format!("{p}_arm{a}_assigned")));
            header.extend((0..arms).map(|a| format!("{p}_arm{a}_rewarded")));
            header.extend((0..arms).map(|a| format!("{p}_arm{a}_successes")));
            header.push(format!("{p}_regret"));
            header.push(format!("{p}_z"));
            header.push(format!("{p}_reject"));
        }
        header.push("total_regret".into());
        out.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        for r in &self.replications {
            let mut row = vec![r.replication.to_string(), r.seed.to_string(), r.participants.to_string()];
            for kind in PolicyKind::ALL {
                let o = r.policy(kind);
                row.push(o.participants.to_string());
                row.extend(o.assigned.iter().map(u64::to_string));
                row.extend(o.rewarded.iter().map(u64::to_string));
                row.extend(o.successes.iter().map(u64::to_string));
                row.push(o.regret.to_string());
                row.push(o.wald.map(|w| w.z.to_string()).unwrap_or_default());
                row.push(u8::from(o.rejects(self.scenario.alpha)).to_string());
            }
            row.push(regret(r).to_string());
            out.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Aggregate-only view (scenario + aggregate), for the summary file.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            scenario: &'a SimulationScenario,
            aggregate: &'a StudyAggregate,
        }
        serde_json::to_string_pretty(&Summary {
            scenario: &self.scenario,
            aggregate: &self.aggregate,
        })
        .expect("report serializes")
    }

    pub fn render_summary(&self) -> String {
        let agg = &self.aggregate;
        let mut s = format!(
            "scenario {}: {} replications x {} participants, true means {:?}, best arm {}\n",
            if self.scenario.name.is_empty() { "<unnamed>" } else { &self.scenario.name },
            agg.replications,
            self.scenario.horizon,
            self.scenario.arm_true_means,
            agg.best_arm
        );
        for p in &agg.policies {
            let alloc = p
                .allocation
                .iter()
                .enumerate()
                .map(|(a, v)| format!("arm{a}={v:.3}"))
                .collect::<Vec<_>>()
                .join(" ");
            s.push_str(&format!(
                "  {:<4} participants={:<8} allocation [{}]  mean best-arm share={}  mean reward={}  mean regret={:.3}  regret/participant={}  reject@{}={:.3}\n",
                p.policy.name(),
                p.participants,
                alloc,
                p.mean_best_arm_share.map_or("-".into(), |v| format!("{v:.3}")),
                p.mean_reward.map_or("-".into(), |v| format!("{v:.3}")),
                p.mean_regret,
                p.regret_per_participant.map_or("-".into(), |v| format!("{v:.4}")),
                agg.alpha,
                p.rejection_rate,
            ));
        }
        s.push_str(&format!("  mean total regret={:.3}\n", agg.mean_total_regret));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFpr {
    pub policy: PolicyKind,
    pub rejections: u64,
    /// Replications where the test was undefined (empty arm or degenerate variance).
    pub undefined: u64,
    pub rate: f64,
    /// 95% Wilson interval of the rate.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprReport {
    pub alpha: f64,
    pub replications: u64,
    pub policies: Vec<PolicyFpr>,
}

impl FprReport {
    pub fn policy(&self, kind: PolicyKind) -> &PolicyFpr {
        self.policies.iter().find(|p| p.policy == kind).expect("both policies measured")
    }
}

/// Wilson score interval for `k` successes out of `n` at z = 1.96.
pub fn wilson_interval(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = k as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Empirical Type-I error of each policy's Wald test when every arm has the same mean.
pub fn fpr_study(scenario: &SimulationScenario, alpha: f64) -> Result<FprReport> {
    scenario.validate()?;
    if !scenario.all_means_equal() {
        return Err(Error::invalid("fpr_study needs all true means equal"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha must lie in [0, 1]"));
    }
    if scenario.arm_count() < 2 {
        return Err(Error::invalid("fpr_study needs at least two arms"));
    }
    let report = run_study(scenario)?;
    let reps = report.replications.len() as u64;
    let policies = PolicyKind::ALL
        .iter()
        .map(|&kind| {
            let outs = report.replications.iter().map(|r| r.policy(kind));
            let rejections = outs.clone().filter(|o| o.rejects(alpha)).count() as u64;
            let undefined = outs.filter(|o| o.wald.is_none()).count() as u64;
            let (ci_low, ci_high) = wilson_interval(rejections, reps);
            PolicyFpr {
                policy: kind,
                rejections,
                undefined,
                rate: rejections as f64 / reps as f64,
                ci_low,
                ci_high,
            }
        })
        .collect();
    Ok(FprReport {
        alpha,
        replications: reps,
        policies,
    })
}
