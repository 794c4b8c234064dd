//! Scanclave: runtime integrity verification of a target application from a
//! simulated enclave, proven to a remote verifier over an untrusted network.
//!
//! The crate is organized around the trust boundaries of the system:
//!
//! - [`enclave`] — the simulated trusted core. Owns the per-instance signing
//!   key, seals it to storage, schedules scans on an unpredictable timer, and
//!   signs nonce-bound verification reports. Reachable only through explicit
//!   entry points.
//! - [`scanner`] — enumerates and measures the target application's
//!   executable memory against a launch-time baseline, over an in-process
//!   region table, a live external process, or a snapshot directory.
//! - [`protocol`] — the canonical byte encoding and framed message set that
//!   crosses the untrusted network. Signatures are computed over these bytes.
//! - [`verifier`] — the remote side: registers instances via quote
//!   validation, issues challenges, validates reports (authenticity, replay,
//!   freshness, integrity) and commands target restarts.
//! - [`host`] — the untrusted host application: launches the target, relays
//!   frames between verifier and enclave, and executes restart commands. It
//!   can misbehave on purpose under a fault plan.
//! - [`adversary`] — the attack harness: memory tampering, replay,
//!   impersonation, launch suppression, and restore-before-scan attackers,
//!   plus a declarative scenario runner.

pub mod adversary;
pub mod enclave;
pub mod host;
pub mod protocol;
pub mod rng;
pub mod scanner;
pub mod time;
pub mod verifier;
