//! File formats, synthetic box-world scenes, evaluation reports and the
//! `panrec` command line on top of `panrec-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod formats;
pub mod replay;
pub mod synth;

pub use config::{Profile, RunConfig};
pub use error::{Error, Result};
