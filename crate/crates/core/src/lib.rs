//! Persona-consistent dialogue generation with two latent memories.
//!
//! An entailment memory is learned by premise-to-hypothesis generation and
//! then held fixed while a discourse memory, a bag-of-words head and a
//! multiple-choice head are learned on dialogue. Both memory reads are added
//! to the decoder's `[SOH]` embedding.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::ParamStore;
pub use tensor::{Tape, Tensor, Var};
