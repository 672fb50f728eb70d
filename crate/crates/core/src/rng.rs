//! Seeded PRNG used everywhere randomness is needed.
//!
//! The generator is splitmix64 (Steele et al., "Fast splittable pseudorandom
//! number generators"). It is implemented here rather than pulled from a
//! crate so that streams are bitwise stable regardless of dependency
//! versions: checkpoints, datasets and metrics files must reproduce exactly
//! for a given seed.
//!
//! All randomness in a run flows from a single root seed through named
//! sub-streams (`stream`), so consuming extra numbers in one component never
//! shifts another component's stream.

/// splitmix64 generator. One `u64` of state, full 2^64 period.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; used only to derive stream seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent named sub-stream from a root seed.
    pub fn stream(seed: u64, label: &str) -> Self {
        Rng {
            state: mix(seed ^ fnv1a(label.as_bytes())),
        }
    }

    /// Derive a per-item stream, e.g. one per generated sample.
    pub fn substream(&self, index: u64) -> Self {
        Rng {
            state: mix(self.state ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN))),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Uniform integer in [0, n). Multiply-shift; the bias at n << 2^64 is
    /// far below anything observable here.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = self.next_f64().max(1e-12);
        let u2 = self.next_f64();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a1 = Rng::stream(7, "init");
        let mut a2 = Rng::stream(7, "init");
        let mut b = Rng::stream(7, "data");
        let xs1: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let xs2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = Rng::new(3);
        let mut sum = 0.0f64;
        for _ in 0..10_000 {
            let x = rng.next_f32();
            assert!((0.0..1.0).contains(&x));
            sum += x as f64;
        }
        assert!((sum / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            assert!(rng.below(7) < 7);
        }
    }

    #[test]
    fn substreams_differ() {
        let root = Rng::stream(5, "gen");
        let mut s0 = root.substream(0);
        let mut s1 = root.substream(1);
        assert_ne!(s0.next_u64(), s1.next_u64());
    }
}
