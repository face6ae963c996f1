//! Worksheet engine: declarative task specs, dialogue state tracking, agent policy,
//! knowledge queries and evaluation metrics.

pub mod acts;
pub mod apis;
pub mod engine;
pub mod eventlog;
pub mod eval;
pub mod exprlang;
pub mod kb;
pub mod lexer;
pub mod llm;
pub mod policy;
pub mod respond;
pub mod semparse;
pub mod spec;
pub mod state;
pub mod value;
