//! Reference implementations kept independent of the fast code paths, and
//! the golden fixtures generated from them.
//!
//! Nothing here depends on the tensor engine or the core crate.

pub mod golden;
pub mod pgt;
pub mod reference;
pub mod unet64;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("bad PGT1 data: {0}")]
    Format(String),
    #[error("golden manifest: {0}")]
    Manifest(String),
}

pub use golden::{check, generate, load_file, load_manifest, write, Expected, GoldenCase, Outcome, Tolerance};
pub use pgt::Pgt;
