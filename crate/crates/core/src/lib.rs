pub mod domain;
pub mod linelog;
pub mod memory;
pub mod llm;
pub mod oracle;
pub mod sentinel;
pub mod architect;
pub mod simharness;
pub mod control;
pub mod agent;
pub mod analysis;
pub mod server;
pub mod cli;
