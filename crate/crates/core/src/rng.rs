use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one RNG used for initialization, dropout, shuffling and augmentation.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
