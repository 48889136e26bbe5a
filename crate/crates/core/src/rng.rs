//! Independent deterministic random streams, one per concern.
//!
//! Every consumer draws from its own ChaCha8 stream derived from the run
//! seed, so adding or removing one consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT_PROTAGONIST: u64 = 1;
pub const INIT_ADVERSARY: u64 = 2;
pub const ENV: u64 = 3;
pub const ACTION_PROTAGONIST: u64 = 4;
pub const ACTION_ADVERSARY: u64 = 5;
pub const MASK_PROTAGONIST: u64 = 6;
pub const MASK_ADVERSARY: u64 = 7;
pub const HEAD_PROTAGONIST: u64 = 8;
pub const REPLAY_PROTAGONIST: u64 = 9;
pub const REPLAY_ADVERSARY: u64 = 10;
pub const HEAD_ADVERSARY: u64 = 11;
/// Evaluation episode `i` uses `EVAL_BASE + 2i` (env) and `EVAL_BASE + 2i + 1` (actions).
pub const EVAL_BASE: u64 = 1 << 32;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
