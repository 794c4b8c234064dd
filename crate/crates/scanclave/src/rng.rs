//! Randomness plumbing. One concrete CSPRNG type (ChaCha20) is threaded
//! through every operation that needs entropy, so production code draws from
//! OS entropy while fixtures seed the exact same code paths.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// The RNG handed to key generation, nonce generation, sealing, and scan
/// scheduling.
pub type Csprng = ChaCha20Rng;

/// A CSPRNG seeded from operating-system entropy.
pub fn os_rng() -> Csprng {
    let mut seed = [0u8; 32];
    getrandom::fill(&mut seed).expect("operating system entropy unavailable");
    ChaCha20Rng::from_seed(seed)
}

/// A deterministic CSPRNG for tests and reproducible harness runs.
pub fn seeded_rng(seed: u64) -> Csprng {
    ChaCha20Rng::seed_from_u64(seed)
}
