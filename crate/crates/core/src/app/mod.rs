//! Files, configuration, the end-to-end pipeline and the command line.

pub mod ate;
pub mod benchmark;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod model_io;
pub mod pipeline;
pub mod plot;
pub mod train;
