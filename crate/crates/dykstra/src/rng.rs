//! Deterministic pseudo-random numbers for instance generation and probes.
//!
//! Experiments must be reproducible bit for bit, across runs, platforms and
//! reimplementations in other languages, so the generator is fixed here
//! instead of delegated to an external crate. The stream is xoshiro256**
//! (Blackman/Vigna) seeded from a single `u64` through splitmix64, the
//! seeding procedure recommended by its authors. Uniform doubles take the
//! top 53 bits of a draw, so `uniform()` values are exactly representable
//! multiples of 2^-53 in `[0, 1)`.
//!
//! Porting notes (all arithmetic wrapping, all shifts on `u64`):
//!
//! ```text
//! splitmix64:  z  = seed += 0x9E3779B97F4A7C15
//!              z  = (z ^ z >> 30) * 0xBF58476D1CE4E5B9
//!              z  = (z ^ z >> 27) * 0x94D049BB133111EB
//!              out = z ^ z >> 31
//! xoshiro256**: out = rotl(s1 * 5, 7) * 9, then the linear state update
//! uniform:     (out >> 11) * 2^-53
//! ```

/// Fixed 256-bit-state generator; see the module docs for the exact stream.
#[derive(Clone, Debug)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(seed: &mut u64) -> u64 {
    *seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *seed;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    /// Seed the full 256-bit state from one word via four splitmix64 draws.
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        Rng {
            state: [
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
            ],
        }
    }

    /// Next raw word of the xoshiro256** stream.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Vector of independent `uniform()` draws.
    pub fn uniform_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.uniform()).collect()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}
