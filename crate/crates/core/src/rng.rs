//! Named, splittable seeds.
//!
//! A [`Seed`] never carries generator state; every consumer derives its own
//! child seed by label, so adding a new consumer never perturbs the streams of
//! existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(pub u64);

impl Seed {
    /// Child seed for a string label.
    pub fn derive(self, label: &str) -> Seed {
        // FNV-1a over the label, then mixed with the parent.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Seed(splitmix64(self.0 ^ splitmix64(h)))
    }

    /// Child seed for an integer index (per-video, per-iteration streams).
    pub fn index(self, i: u64) -> Seed {
        Seed(splitmix64(self.0.wrapping_add(splitmix64(i ^ 0x9e37_79b9_7f4a_7c15))))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
