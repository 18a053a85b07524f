//! Budget-constrained agent evolution with Elo tournament selection.
//!
//! Each iteration samples fresh examples, scores the competing agents on
//! them, updates Elo ratings, and asks a mutator plugin for a new agent built
//! from the comparative report. Evaluators and mutators are external
//! processes speaking a small JSON protocol; deterministic synthetic doubles
//! are built in. The [`noiselab`] module quantifies how often noisy
//! evaluation picks the right agent.

pub mod commands;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod noiselab;
pub mod plugin;
pub mod rating;
pub mod replay;
pub mod reports;
pub mod store;
pub mod synthetic;

pub use engine::{AgentRecord, Engine, EngineConfig, IterationRecord, Mode, RunOutcome};
pub use error::{Error, Result};
pub use evaluation::{EvalOutcome, Evaluator, ExampleRef};
pub use plugin::{MutationPhase, Mutator};
pub use rating::{KFactor, Rating};
