//! Discrete-event simulation of a multi-trace reasoning engine under KV-cache
//! memory pressure, with hidden-state step scoring and memory-triggered pruning.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`] holds recorded or synthetic reasoning traces.
//! * [`scorer`] is the two-layer MLP step scorer, its trainer and ranking metrics.
//! * [`engine`] simulates parallel decoding against a token-granular KV ledger.
//! * [`policies`] are the pruning / preemption hooks the engine calls into.
//! * [`voting`] aggregates the answers of completed traces.
//! * [`experiment`] runs policy × budget × seed grids and writes reports.

pub mod corpus;
pub mod engine;
pub mod experiment;
pub mod policies;
pub mod scorer;
pub mod voting;

pub use corpus::{normalize_answer, Corpus, Question, Step, SyntheticConfig, Trace};
pub use engine::{simulate, EngineConfig, SimulationResult, TimingReport};
pub use policies::PolicyConfig;
pub use scorer::{ScorerWeights, TrainConfig};
