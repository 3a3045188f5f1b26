//! Wage decomposition on matched worker–firm panels.

pub mod akm;
pub mod boost;
pub mod cli;
pub mod config;
pub mod crossfit;
pub mod data;
pub mod decompose;
pub mod explain;
pub mod graph;
pub mod model;
pub mod panel;
pub mod partition;
pub mod synth;
pub mod tree;
