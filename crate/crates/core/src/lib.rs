//! Set-valued trajectory prediction with calibrated coverage, and a
//! model-predictive planner that avoids every predicted trajectory.
//!
//! Pipeline: sparsify observed trajectories into an ε-covering basis
//! ([`geometry`]), describe scenes by a fixed-length affordance and label
//! which bases are possible ([`scene`]), train a multi-label scorer
//! ([`predictor`]), calibrate its thresholds ([`calibration`]), then plan
//! against the predicted sets ([`planner`]) in closed loop ([`sim`]).

pub mod calibration;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod planner;
pub mod predictor;
pub mod scene;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};
