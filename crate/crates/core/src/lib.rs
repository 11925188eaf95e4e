//! Sequence-to-sequence response generation with max-margin ranking
//! regularization, plus corpus and probability diagnostics for universal
//! replies.

pub mod checkpoint;
pub mod corpus;
pub mod inference;
pub mod lemma;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod vocab;
