//! Seeded splitmix64 generator used wherever replays must be reproducible
//! across platforms (deck shuffles, per-game seed derivation).
//!
//! The update rule is the standard splitmix64 state transition:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Every output is a pure function of the 64-bit seed and the call index, so
//! any trajectory can be replayed bit-exactly from its recorded seed.

/// Splitmix64 stream over a 64-bit state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, bound)` by rejection, avoiding modulo bias.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// In-place Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Derives a child seed from a parent seed and a stream index.
///
/// Used to give every episode, actor, and level its own independent stream
/// while keeping the whole run a function of one root seed.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut rng = SplitMix64::new(parent ^ index.wrapping_mul(0xA076_1D64_78BD_642F));
    rng.next_u64()
}

/// A ChaCha stream that remembers its seed and exposes its word position, so
/// client random state can be checkpointed and restored exactly.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    rng: rand_chacha::ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            seed,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut rand_chacha::ChaCha8Rng {
        &mut self.rng
    }

    /// (seed, stream position) capturing the exact generator state.
    pub fn save(&self) -> (u64, u128) {
        (self.seed, self.rng.get_word_pos())
    }

    pub fn restore(state: (u64, u128)) -> Self {
        let mut out = Self::new(state.0);
        out.rng.set_word_pos(state.1);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 1234567, cross-checked against the widely
        // published splitmix64 reference sequence.
        let mut rng = SplitMix64::new(1234567);
        assert_eq!(rng.next_u64(), 6457827717110365317);
        assert_eq!(rng.next_u64(), 3203168211198807973);
        assert_eq!(rng.next_u64(), 9817491932198370423);
    }

    #[test]
    fn shuffle_is_deterministic_per_seed() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b: Vec<u32> = (0..50).collect();
        SplitMix64::new(99).shuffle(&mut a);
        SplitMix64::new(99).shuffle(&mut b);
        assert_eq!(a, b);
        let mut c: Vec<u32> = (0..50).collect();
        SplitMix64::new(100).shuffle(&mut c);
        assert_ne!(a, c);
    }

    #[test]
    fn next_below_stays_in_range() {
        let mut rng = SplitMix64::new(7);
        for bound in [1u64, 2, 3, 10, 1000] {
            for _ in 0..200 {
                assert!(rng.next_below(bound) < bound);
            }
        }
    }

    #[test]
    fn derived_seeds_differ_per_index() {
        let s0 = derive_seed(42, 0);
        let s1 = derive_seed(42, 1);
        assert_ne!(s0, s1);
        assert_eq!(s0, derive_seed(42, 0));
    }
}
