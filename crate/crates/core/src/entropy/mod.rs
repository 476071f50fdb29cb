//! Rate models and entropy coding.

mod bitstream;
mod context;
mod factorized;
mod gaussian;
mod quadtree;
mod range_coder;
pub mod symbols;

pub use bitstream::{Bitstream, Chunk, ChunkKind, Header, MAGIC, VERSION};
pub use context::{Coding, EntropyConfig, LatentCode, LatentEntropyModel, StepParams};
pub use factorized::FactorizedPrior;
pub use gaussian::{bin_probability, bits_from_likelihood, gaussian_likelihood, normal_cdf, rate_gaussian};
pub use quadtree::{pad_even, quadtree_partition, step_of, QuadtreeGroups, STEPS};
pub use range_coder::{range_decode, range_encode, Cdf, RangeDecoder, RangeEncoder, PRECISION, TOTAL};

/// Lower bound on every predicted scale.
pub const SIGMA_MIN: f64 = 0.01;
/// Lower bound on every modeled bin probability (caps a symbol at 16 bits).
pub const LIKELIHOOD_MIN: f64 = 1.0 / 65536.0;
