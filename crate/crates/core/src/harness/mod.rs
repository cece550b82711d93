//! Everything around the optimizer: data, configuration, persistence,
//! experiment drivers, and the command-line front end.

pub mod dataset;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod scenarios;
