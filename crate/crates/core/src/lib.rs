//! Matrix capsule networks with EM routing.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autograd`] provide dense
//! arrays and a reverse-mode tape, [`capsule`] implements votes, EM routing
//! and spread loss on top of them, [`network`] assembles the digit
//! recognizer with its reconstruction decoder, and [`data`], [`train`] and
//! [`report`] cover IDX loading, optimization and evaluation artifacts.

pub mod autograd;
pub mod capsule;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod network;
pub mod ops;
pub mod report;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
