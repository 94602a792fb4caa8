//! Query-age-optimal sampling and transmission scheduling for heterogeneous
//! status-update systems.
//!
//! A transmitter serves a mix of random-arrival and generate-at-will sources
//! to a monitor over a lossy channel, at most one packet per slot, under
//! discounted-average transmission and sampling budgets. The objective is
//! the sum discounted average *query age of information* (QAoI): the age at
//! the monitor, counted only in slots the monitor actually queries.
//!
//! The crate provides, in matching modules:
//!
//! - [`model`]: the system instance, CMDP state/action spaces, transition
//!   kernels and per-slot costs;
//! - [`lp`]: a sparse linear-program container with an embedded dense
//!   revised-simplex backend and an interior-point backend;
//! - [`occupancy`]: the joint occupation-measure LP, optimal randomized
//!   policy extraction, and an exact policy-evaluation oracle;
//! - [`weakly_coupled`]: the per-source decomposed LP, its lower bound, and
//!   the priority-based dynamic truncation policy;
//! - [`simulator`]: a seeded, replicated Monte-Carlo engine for any policy;
//! - [`experiment`]: config-driven parameter sweeps emitting CSV tables;
//! - [`policy_io`]: the versioned text format for solved policies.
//!
//! The `book/` directory of the repository walks through the same material
//! chapter by chapter; its code snippets compile and run as doc-tests of
//! this crate.

pub mod model;



