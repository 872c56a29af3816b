//! Harness for the poisoning laboratory: a synthetic knowledge-graph QA
//! world, victim training, attack/defense orchestration, an append-only
//! results store, and report rendering used by the `badskp` binary.

pub mod config;
pub mod experiment;
pub mod report;
pub mod results;
pub mod trainer;
pub mod world;
