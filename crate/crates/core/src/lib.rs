//! Soft decision-tree ensembles and linear mode connectivity.
//!
//! Train differentiable tree ensembles, align two independently trained
//! ensembles by exploiting tree permutation, subtree flip and splitting order
//! invariances, and measure the accuracy barrier along the linear path
//! between them.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod invariance;
pub mod lap;
pub mod matching;
pub mod model;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
pub use model::{ArchitectureSpec, EnsembleParams, TreeKind, TreeParams};
