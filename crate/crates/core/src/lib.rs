//! Evolving-method optimization for instruction datasets.

pub mod analysis;
pub mod config;
pub mod data_model;
pub mod evolution;
pub mod failure;
pub mod gateway;
pub mod optimizer;
pub mod pipeline;
pub mod templates;
