//! Core library of a self-hostable adversarial question-collection platform.
//!
//! Annotators write questions about a passage and mark the answer span; a
//! reading-comprehension model answers the same question, and only questions
//! the model fails on are kept.
//!
//! - [`metrics`]: answer normalization, EM/F1 and win adjudication.
//! - [`adversary`]: model-in-the-loop adapters (stub, lexical baseline, HTTP).
//! - [`engine`]: event-sourced HIT, qualification and review workflow.
//! - [`eventlog`]: the NDJSON log the engine replays from.
//! - [`store`]: SQuAD-format import/export, consolidation and splits.
//! - [`analysis`]: evaluation, human performance and dataset statistics.

pub mod adversary;
pub mod analysis;
pub mod engine;
pub mod eventlog;
pub mod metrics;
pub mod store;

pub use adversary::{Adversary, AdversaryDescriptor, AdversaryError, AdversaryKind, AdversaryRegistry, Prediction};
pub use analysis::{ComprehensionLabel, EvalResult};
pub use engine::{Engine, EngineConfig, EngineError, EngineState, Event, SharedEngine};
pub use eventlog::{EventLogError, EventRecord};
pub use metrics::{adjudicate, em, f1, normalize, AdjudicationPolicy, MatchScore};
pub use store::{Dataset, Split, StoreError};
