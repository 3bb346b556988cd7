//! StarNet: star-topology pedestrian trajectory prediction.
//!
//! A centralized hub network summarizes the whole crowd into one
//! spatio-temporal representation per time step; weight-shared host
//! networks consume it to predict each pedestrian's future trajectory.
//! Everything runs on a purpose-built reverse-mode differentiation core.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
