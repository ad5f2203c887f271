//! Demonstration selection for in-context semantic parsing.
//!
//! Programs are parsed into sibling-augmented trees, decomposed into local
//! structures, and demonstration sets are chosen to cover the structures a
//! test program is expected to contain.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod fixture;
pub mod gateway;
pub mod pipeline;
pub mod program;
pub mod prompting;
pub mod retrieval;
pub mod selection;
pub mod structures;

pub use error::{Error, Result, SyntaxError};
