//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose key is
//! derived from the master seed and a path of tags (repeat, purpose,
//! iteration), and whose stream id is the particle index. A particle's draws
//! therefore depend only on `(seed, path, index)`, never on which thread
//! processed it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type handed out by [`SeedStream`].
pub type StreamRng = ChaCha8Rng;

/// Tags separating the independent purposes within one EM2C iteration.
pub mod purpose {
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const KERNEL: u64 = 0x4b45_524e;
    pub const RESAMPLE: u64 = 0x5245_5341;
    pub const LOCAL_MOVE: u64 = 0x4c4f_4341;
    pub const PROJECT: u64 = 0x5052_4f4a;
    pub const METRIC: u64 = 0x4d45_5452;
    pub const REFERENCE: u64 = 0x5245_4645;
    pub const INIT: u64 = 0x494e_4954;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the tree of derived seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix64(seed) }
    }

    /// Derives an independent child stream for `tag`.
    #[must_use]
    pub fn child(self, tag: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019))),
        }
    }

    /// Shorthand for a chain of [`child`](Self::child) calls.
    #[must_use]
    pub fn path(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |s, &t| s.child(t))
    }

    /// A single generator for serial work at this node.
    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.key)
    }

    /// Generator for particle `index`: same key, distinct ChaCha stream.
    pub fn particle(self, index: usize) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        rng.set_stream(index as u64);
        rng
    }

    pub fn key(self) -> u64 {
        self.key
    }
}
