//! Command-line front end for training and exporting equivariant flows.

pub mod commands;
pub mod config;
