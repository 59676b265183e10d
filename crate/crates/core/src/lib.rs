//! Self-drafting speculative decoding for Mixture-of-Experts models whose
//! experts are offloaded to host memory or SSD.
//!
//! The crate is a deterministic, desk-scale laboratory:
//!
//! - [`model`]: a tiny seeded MoE decoder that reports expert routing;
//! - [`memsim`]: device/host/SSD residency, a byte-exact migration ledger and
//!   a linear latency model;
//! - [`drafting`]: draft-expert selection, the affinity table and hotness;
//! - [`specdec`]: the speculate → verify → accept → replace loop;
//! - [`baselines`]: on-demand, oracle-overlap and caching systems;
//! - [`harness`]: config files, sweeps, traces and result tables.

pub mod baselines;
pub mod drafting;
pub mod error;
pub mod harness;
pub mod memsim;
pub mod model;
pub mod run;
pub mod specdec;

pub use error::{Error, Result};
