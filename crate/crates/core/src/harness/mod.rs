//! Training harness: configuration, synthetic scenarios, checkpoints, the
//! trainer loop and evaluation.

pub mod checkpoint;
pub mod config;
pub mod diagnose;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod trainer;

pub use checkpoint::{Checkpoint, Manifest, ParamEntry};
pub use config::TrainConfig;
pub use diagnose::{diagnose, zero_policy_gap, Diagnosis};
pub use eval::{evaluate, sample_batch, simulate, SimulationDump};
pub use generator::{generate_scenarios, generate_with, ik_residual, GeneratorOptions, ScenarioKind};
pub use gradcheck::{run_all as gradcheck_all, CheckResult};
pub use trainer::{train, train_with, IterationLog, TrainOutcome, Trainer};
