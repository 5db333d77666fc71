//! App fingerprinting under encrypted tunnels.
//!
//! The crate covers the whole pipeline: packet records are reassembled into
//! flows, TLS flows are correlated with the tunnel flows that carried them,
//! a dual-branch recurrent model learns app features that survive tunnel
//! re-encapsulation, and tunnel-only flows are classified at inference time.
//! A traffic simulator produces parallel corpora for experiments.

pub mod error;
pub mod eval;
pub mod flow;
pub mod formats;
pub mod ingest;
pub mod nn;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
