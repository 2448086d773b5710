pub mod ablation;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod pipeline;
pub mod sampling;
