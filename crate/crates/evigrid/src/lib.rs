//! Factorized grounding-then-answering lab over synthetic feature streams.

pub mod autograd;
pub mod domain;
pub mod grounding;
pub mod losses;
