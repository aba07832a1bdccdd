//! Backward-decoupled vision-language pretraining at desk scale: a frozen
//! tiny language model, a P-Former that predicts reference soft prompts for
//! sentences, and adaptors aligned to those prompts on synthetic scenes.

pub mod adaptors;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pformer;
pub mod rng;
pub mod tinylm;
pub mod vltrain;

pub use error::{Error, Result};
