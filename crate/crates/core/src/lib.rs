//! Harness-ladder evaluation of coding agents: materialize a task workspace at
//! a harness level, drive an agent through it while recording eight
//! append-only traces, then adjudicate the result and aggregate metrics.

pub mod adjudicate;
pub mod agent;
pub mod episode;
pub mod fixture;
pub mod materialize;
pub mod metrics;
pub mod pipeline;
pub mod snapshot;
pub mod tools;
pub mod trace;
pub mod verify;

pub use adjudicate::{adjudicate, AdjudicationConfig, EvaluatorPack, OutcomeRecord};
pub use episode::{ArtifactKind, FailureType, HarnessLevel, OutcomeLabel, TaskSpec};
pub use trace::EpisodePackage;
