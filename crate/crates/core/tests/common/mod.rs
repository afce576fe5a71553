//! Oracles shared by the per-area tests and the acceptance run.
#![allow(dead_code)]

pub mod equivalence;
pub mod flops;
pub mod gradients;
pub mod masks;
