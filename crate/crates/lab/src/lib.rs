//! Files, parallel execution and the command-line front end around
//! `icc-core`.

pub mod bank;
pub mod cli;
pub mod config;
pub mod report;
pub mod runner;
