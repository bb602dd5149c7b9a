//! Text representations of adsorbate-catalyst systems and a small
//! transformer regressor trained on them.
//!
//! The pipeline runs: [`system`] records → [`featurize`] strings →
//! [`tokenizer`] ids → [`encoder`] (built on the [`tensor`] tape) →
//! [`train`] → [`analysis`] and [`eval`].

pub mod analysis;
pub mod checkpoint;
pub mod composition;
pub mod elements;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod optim;
pub mod synth;
pub mod system;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
