//! Experiment runner for the `genni` command: config files, synthetic data,
//! training sweeps with manifests, sampler benchmarks, plot export and
//! informative-negative inspection.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod error;
pub mod inspect;
pub mod plots;
pub mod runner;
pub mod synth;

use sha2::{Digest, Sha256};

pub use error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
