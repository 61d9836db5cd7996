//! State estimation for AC power systems, two ways: classical weighted
//! least squares and a semidefinite relaxation over the voltage outer
//! product, with spectral diagnostics that quantify how close the relaxed
//! solution is to rank one (and how exact angle measurements pull it there).
//!
//! The pipeline runs: parse a network case, solve a reference power flow,
//! synthesize a meter set from the solution, estimate by WLS and by the
//! conic program, then compare objectives and spectra. Everything is
//! deterministic for a fixed seed.

pub mod error;
pub mod experiments;
pub mod measurement;
pub mod network;
pub mod power_flow;
pub mod relaxation;
pub mod solver;
pub mod spectral;
pub mod wls;

pub use error::{Error, Result};
