pub mod error;
pub mod panel;
pub mod linalg;
pub mod smoothing;
pub mod coefficients;
pub mod index;
pub mod factor_dynamics;
pub mod garch;
pub mod portfolio;
pub mod pipeline;
pub mod simulation;
pub mod data;
pub mod backtest;
pub mod cli;

pub use error::{DynCovError, Result};
