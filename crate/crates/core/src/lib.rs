//! Adaptive experimentation engine: Beta-Bernoulli Thompson Sampling next to a
//! uniform-random control policy, with an append-only event log, the analysis
//! routines for comparing both policies and a Monte-Carlo harness.

pub mod bandit;
pub mod engine;
pub mod error;
pub mod event;
pub mod policy;
pub mod sim;
pub mod stats;
pub mod store;

pub use bandit::{select_arm, Arm, BetaPosterior, Reward};
pub use engine::{
    Assignment, AssignmentRecord, ExperimentConfig, ExperimentState, OperatorAction, Status,
};
pub use error::{Error, ErrorClass, Result};
pub use event::{Event, EventRecord};
pub use policy::{AssignmentPolicy, PolicyKind, PolicyRegistry, ThompsonConfig};
pub use sim::{
    fpr_study, regret, run_replication, run_study, FprReport, ReplicationRecord, SimulationReport,
    SimulationScenario,
};
pub use stats::{analyze, prob_best_exact, wald_two_proportion, AnalysisReport};
pub use store::{EventStore, FileStore, MemoryStore, Snapshot};
