//! Knowledge condensation and reasoning pipeline for knowledge-based visual
//! question answering: passage retrieval, condensation into concepts and
//! essences, answer generation and soft-accuracy evaluation.

pub mod backends;
pub mod condense;
pub mod corpus;
pub mod eval;
pub mod events;
pub mod reason;
pub mod retrieval;
pub mod synth;
