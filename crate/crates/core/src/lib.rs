//! Shielded risk-augmented learning for constrained MDPs.
//!
//! A tabular CMDP is augmented with a running risk budget. A backup cost critic
//! drives a distribution-level shield that keeps every proposal within budget,
//! and a shielded Q-learner trains policies over the augmented space.

// `!(x >= 0.0)` style guards reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cmdp;
pub mod config;
pub mod critic;
pub mod envs;
pub mod error;
pub mod io;
pub mod oracle;
pub mod policy;
pub mod runner;
pub mod shield;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Random source for every simulation in the crate.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}
