pub mod cli;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod grpo;
pub mod parser;
pub mod prompt;
pub mod reward;
