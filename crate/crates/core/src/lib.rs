//! Hierarchical-equations-of-motion simulation of rephasing two-dimensional
//! electronic spectra for coupled chromophore aggregates.

pub mod bath;
pub mod commands;
pub mod config;
pub mod heom;
pub mod model;
pub mod output;
pub mod pipeline;
pub mod plot;
pub mod pulses;
pub mod response;
pub mod spectra;
pub mod units;
