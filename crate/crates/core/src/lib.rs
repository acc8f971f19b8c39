//! Desk-scale laboratory for adversarially robust training and transfer.

pub mod adversary;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod hash;
pub mod models;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
