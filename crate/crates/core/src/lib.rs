//! Multistage collaborative knowledge distillation.
//!
//! A few-shot prompted teacher labels an unlabeled pool; pairs of students
//! trained on disjoint halves then relabel each other's half stage after
//! stage, and a final student is trained on the union.

pub mod analysis;
pub mod backends;
pub mod corpus;
pub mod error;
mod hashing;
pub mod parse_eval;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
