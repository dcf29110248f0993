//! Runtime kernel for tool-using coding agents.

pub mod cli;
pub mod compaction;
pub mod config;
pub mod context;
pub mod execpolicy;
pub mod features;
pub mod guardian;
pub mod harness;
pub mod permissions;
pub mod protocol;
pub mod runner;
pub mod sandbox;
pub mod state;
pub mod tools;
pub mod transport;
