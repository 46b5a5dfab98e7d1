//! Deterministic simulator and verification suite for locally self-adjusting
//! hypercubic networks.
//!
//! The crate implements two topology-transformation algorithms over a fixed
//! set of 2^N nodes: the three-phase group-based transformation (`engine`,
//! selected as `dyhypes` in run configs) and the stateless single-server
//! variant (`single_server`, selected as `ss`). Around them sit an exact
//! working-set oracle over the timestamped communication graph (`workset`),
//! per-node algorithm state with its invariant checkers (`state`), workload
//! generators (`workloads`), a deterministic run harness with model-level
//! cost accounting (`harness`), and statistical verification commands plus an
//! exact numeric recurrence oracle (`analysis`).

pub mod analysis;
pub mod coord;
pub mod engine;
pub mod error;
pub mod harness;
pub mod single_server;
pub mod state;
pub mod workloads;
pub mod workset;

pub use coord::{Coord, NetworkState, NodeId, SubtreeRef};
pub use error::{Error, Result};
