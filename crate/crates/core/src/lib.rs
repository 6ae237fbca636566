//! Expert knowledge elicitation with preferential Bayesian neural networks,
//! and its transfer into a multi-task Bayesian-optimization surrogate.
//!
//! The pipeline has two stages:
//!
//! 1. **Elicitation** ([`pbnn`], [`active`]): a Siamese Bayesian network learns
//!    the expert's latent utility from pairwise comparisons, with queries
//!    chosen by mutual information between the label and the weights.
//! 2. **Optimization** ([`mtl`], [`boloop`]): the elicited hidden layers are
//!    shared with a second output head that models the objective, trained on a
//!    decaying combination of both losses and driven by Monte Carlo expected
//!    improvement.
//!
//! [`bench`] holds the benchmark objectives, [`expertsim`] the calibrated
//! simulated experts, and [`harness`] the experiment drivers and data
//! ingestion used by the `prefbo` command line tool.

pub mod active;
pub mod bench;
pub mod boloop;
pub mod expertsim;
pub mod harness;
pub mod mtl;
pub mod netcore;
pub mod pbnn;
pub mod stats;
pub mod varnet;

/// Seeded generator used for every stochastic component.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Derives an independent child seed from a parent seed and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer over the combined words.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(derive_seed(seed, stream))
}
