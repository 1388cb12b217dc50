//! Core library for agentic neuroimaging workflow orchestration.

pub mod action;
pub mod jit;
pub mod ledger;
pub mod policy;
pub mod registry;
pub mod runtime;
pub mod taxonomy;
pub mod agreement;
pub mod clock;
pub mod qc;
pub mod sandbox;
pub mod synth;
