//! Seedable counter-based random number generator.
//!
//! Every stochastic pathway in the toolkit draws from this generator so that
//! runs are reproducible from a single seed, and so the stream definition is
//! simple enough to re-implement bit-for-bit in any language:
//!
//! The stream is splitmix64 over an explicit counter. Draw `i` (1-based) is
//!
//! ```text
//! z = seed + i * 0x9E3779B97F4A7C15          (wrapping u64 arithmetic)
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! Uniform doubles take the top 53 bits; normal draws use Box-Muller on two
//! consecutive uniforms. Child streams are derived by mixing a tag into the
//! seed, which keeps per-step/per-example streams independent of how many
//! draws earlier streams consumed.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based splitmix64 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    /// Derive an independent child stream. `derive(t)` is a pure function of
    /// `(seed, t)`, so callers can key streams by step/example/purpose without
    /// tracking draw counts across components.
    pub fn derive(&self, tag: u64) -> CounterRng {
        CounterRng::new(mix(self.seed.wrapping_add(mix(tag).wrapping_mul(GAMMA))))
    }

    /// Derive a child stream from a chain of tags.
    pub fn derive_path(&self, tags: &[u64]) -> CounterRng {
        let mut rng = self.clone();
        for &t in tags {
            rng = rng.derive(t);
        }
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Restore a stream mid-sequence (for training resume).
    pub fn with_counter(seed: u64, counter: u64) -> Self {
        CounterRng { seed, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n) by rejection sampling (unbiased).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
