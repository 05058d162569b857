//! Counter-based deterministic random number generation.
//!
//! All randomness in this crate flows through [`CounterRng`], a stateless
//! counter-based generator: output `i` of a stream keyed by `k` is
//! `mix(k, i)`, where `mix` is the splitmix64 avalanche finalizer applied to
//! `k ^ (i * GOLDEN_GAMMA)`. The same `(key, counter)` pair always produces
//! the same 64-bit word, on every platform, so noise fields are replayable
//! and trials can be dispatched in any order or in parallel.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Fixed 64-bit avalanche mix of two words (splitmix64 finalizer).
///
/// Used both as the per-output function of [`CounterRng`] and as the
/// documented rule for deriving sub-stream keys (trial seeds, per-image
/// seeds, compose-child seeds).
#[inline]
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator.
///
/// Not cryptographically secure; intended for reproducible simulation only.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a logarithm argument.
    #[inline]
    fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw via Box-Muller (two uniforms per call).
    #[inline]
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`. Modulo bias is negligible for n << 2^64.
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
