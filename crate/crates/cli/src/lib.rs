//! Implementation of the `esmlab` command-line harness.
//!
//! The binary in `main.rs` is a thin argument-parsing shell; everything it
//! does lives here so integration tests can drive commands directly:
//!
//! * [`config`] — strict JSON run configurations (schema-versioned, unknown
//!   keys rejected) for every subcommand.
//! * [`output`] — artifact plumbing: output-root resolution, CSV / JSON /
//!   PNG writers, contact sheets, and image metrics.
//! * [`run`] — the command implementations and the exit-code policy.

pub mod config;
pub mod output;
pub mod run;
