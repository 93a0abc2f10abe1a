//! Named, splittable counter-based random number generator.
//!
//! Every consumer of randomness (weight init, dropout, noise corruption,
//! trajectory sampling) derives its own stream from `(seed, labels...)`.
//! Streams are independent: drawing from one never shifts another, which
//! is what makes per-sequence parallelism and module-bypass comparisons
//! bit-reproducible.

/// SplitMix64 output mix.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// A counter-based PRNG stream. `Clone` is cheap; cloning forks the
/// current position (use [`StreamRng::stream`]/[`StreamRng::substream`]
/// for independent streams instead).
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        StreamRng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent child stream named by `label`. Does not
    /// advance this stream.
    pub fn stream(&self, label: &str) -> StreamRng {
        let mut k = self.key;
        for &b in label.as_bytes() {
            k = mix(k ^ (b as u64).wrapping_mul(GOLDEN));
        }
        StreamRng {
            key: mix(k ^ 0x5851_f42d_4c95_7f2d),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent child stream indexed by `idx`.
    pub fn substream(&self, idx: u64) -> StreamRng {
        StreamRng {
            key: mix(self.key ^ idx.wrapping_mul(GOLDEN)),
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 64-bit multiply-shift; bias is negligible for the n used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Avoid ln(0).
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = u1.max(1e-300);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Random sign: -1.0 or +1.0 with equal probability.
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
