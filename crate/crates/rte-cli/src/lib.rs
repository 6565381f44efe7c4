//! Batch front-end for the radiative transfer solver: configuration parsing,
//! the study drivers and report emission.

pub mod config;
pub mod run;
