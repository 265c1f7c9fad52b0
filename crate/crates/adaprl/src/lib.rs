//! File formats, run orchestration and the command-line front end for
//! `adaprl-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod run;

pub use commands::{cmd_predict, cmd_sweep, cmd_train, Options};
pub use error::AppError;
