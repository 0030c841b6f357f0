//! Deterministic random-stream derivation.
//!
//! Every random decision in the simulator draws from a `ChaCha8Rng` whose
//! seed is derived from the run seed plus a purpose label and indices.
//! Distinct purposes get statistically independent streams, concurrent
//! consumers each own their stream object, and no call site ever shares a
//! generator — so results never depend on execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the SplitMix64 output permutation; a strong 64-bit mixer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a label, used to key streams by owner strings.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a stream seed from the run seed, a purpose label, and two indices.
pub fn derive_seed(seed: u64, purpose: &str, index: u64, sub: u64) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(purpose));
    h = splitmix64(h ^ index);
    splitmix64(h ^ sub)
}

/// A fresh generator for (seed, purpose, index, sub).
pub fn stream_rng(seed: u64, purpose: &str, index: u64, sub: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index, sub))
}

/// Shuffle stream for one training epoch over one data shard.
///
/// `owner` names the shard: a vehicle id for federated clients, or
/// [`CENTRAL_OWNER`] for the pooled central training set. `index` is the
/// epoch index for central training and the round index for federated
/// clients; `local_epoch` distinguishes a client's passes within a round.
/// Central training and a single client holding the same shard under the
/// same owner tag therefore draw identical shuffles, which is what makes
/// the one-client federated run coincide with the centralized run.
pub fn train_rng(seed: u64, owner: &str, index: u64, local_epoch: u64) -> ChaCha8Rng {
    stream_rng(seed, &format!("train/{owner}"), index, local_epoch)
}

/// Shard-owner tag for the pooled central training set.
pub const CENTRAL_OWNER: &str = "central";

/// Seed for model parameter initialization; shared by the centralized and
/// federated paths so both start from identical weights.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, "model-init", 0, 0)
}
