//! Corpus-to-curriculum toolkit: difficulty scoring with held-out n-gram
//! teachers, easy-to-hard ranking, competence-gated batch schedules, and the
//! diagnostics and surprisal-based evaluations that go with them.

pub mod analysis;
pub mod corpus;
pub mod cross_review;
pub mod error;
pub mod eval;
pub mod scheduler;
pub mod stats;
pub mod synth;
pub mod teacher;
pub mod text;
pub mod tokenizer;

pub use error::{Error, Result, StatsError};
