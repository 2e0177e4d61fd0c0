//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Shapes are strict: the only broadcasting is a bias over the last
//! dimension ([`Tape::add_bias`]) and scalar scaling ([`Tape::scale`]).

mod ops;
mod tape;

pub use tape::{Tape, Var};

#[cfg(test)]
mod tests;
