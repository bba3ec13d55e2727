//! Scenario runner, operator gateway and command-line shell.

pub mod commands;
pub mod gateway;
pub mod journal;
pub mod protocol;
pub mod render;
