//! Deterministic synthetic access networks with ground-truth labels.

pub mod corpus;
mod path;
pub mod topology;

use thiserror::Error;

pub use corpus::{generate_corpus, generate_corpus_with, AddressingPattern, Blueprint, CorpusOptions, Placement};
pub use path::{simulate_session, SimOptions, SimulatedPath, DEFAULT_JITTER_US, TWO_HOP_EPSILON_US};
pub use topology::{
    parse_topologies, write_topologies, Faults, LinkSpec, NatRole, NodeSpec, ReplyBehavior, SyntheticTopology,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("topology spec line {line}: {msg}")]
    SpecParse { line: usize, msg: String },
    #[error("inconsistent topology: {0}")]
    SpecInconsistent(String),
}
