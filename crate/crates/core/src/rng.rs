//! Seeded random streams.
//!
//! Every Monte Carlo loop derives independent substreams from a master seed by
//! stream index, so parallel and sequential runs produce identical draws.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha12Rng;

/// Root generator for a master seed.
pub fn master(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

/// Substream `index` of the master seed. Streams never overlap.
pub fn substream(seed: u64, index: u64) -> LabRng {
    let mut rng = LabRng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derive a fresh seed from a generator (used to hand seeds to nested routines).
pub fn fork_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}
