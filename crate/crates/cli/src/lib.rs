//! Configuration, orchestration and subcommands behind the `tilted` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod verify;
