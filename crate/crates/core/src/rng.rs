//! Portable, counter-based random numbers.
//!
//! Every random quantity in the crate (initial weights, datasets, minibatch
//! indices) is drawn from SplitMix64 so that results depend only on seeds,
//! never on platform or crate versions. Draw `i` of a stream keyed by `key`
//! is `mix(key + (i + 1) * GOLDEN_GAMMA)`, which makes any draw addressable
//! without replaying the ones before it.
//!
//! Normals use the cosine branch of Box–Muller, one normal per two uniforms.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function (Steele, Lea & Flood constants).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream identifiers used to derive independent keys from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    ModelInit = 1,
    Teacher = 2,
    DataInputs = 3,
    DataNoise = 4,
    Batches = 5,
    Oracle = 6,
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    key: u64,
    counter: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            counter: 0,
        }
    }

    /// Independent stream for `(seed, domain, index)`.
    pub fn derive(seed: u64, domain: Domain, index: u64) -> Self {
        let k = mix64(seed ^ mix64(domain as u64)).wrapping_add(mix64(index.wrapping_add(0x5EED)));
        Self::new(mix64(k))
    }

    /// Output at an arbitrary position of the stream, independent of `counter`.
    #[inline]
    pub fn at(&self, position: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(position.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = self.at(self.counter);
        self.counter += 1;
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..bound` (Lemire's multiply-shift; bias < 2^-32 for small bounds).
    #[inline]
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }
}
