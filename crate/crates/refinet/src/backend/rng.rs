//! Deterministic pseudo-random numbers (xoshiro256++ with splitmix64 seeding).
//!
//! Hand-rolled so that seeded runs and checkpoint resumes replay bitwise,
//! independent of any external crate's stream changing between versions.
//! Not cryptographic.

use super::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    s: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::from_seed_and_stream(seed, 0)
    }

    /// Independent stream per (seed, stream) pair; used to derive per-epoch
    /// shuffles and per-image toy generators without consuming the main stream.
    pub fn from_seed_and_stream(seed: u64, stream: u64) -> Self {
        let mut sm = seed ^ stream.wrapping_mul(0xa076_1d64_78bd_642f);
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        // xoshiro must not start from the all-zero state
        if s == [0, 0, 0, 0] {
            s[0] = 0x9e37_79b9_7f4a_7c15;
        }
        Self { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform<T: Real>(&mut self, lo: f64, hi: f64) -> T {
        T::from_f64(lo + self.next_f64() * (hi - lo)).expect("uniform sample representable")
    }

    /// Uniform integer in [0, n). Modulo bias is negligible for the small n
    /// used here (shuffles, rectangle counts).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.next_u64() % n
    }

    pub fn shuffle<E>(&mut self, xs: &mut [E]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Self { s }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = SeededRng::from_seed_and_stream(7, 0);
        let mut b = SeededRng::from_seed_and_stream(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn state_roundtrip_resumes_stream() {
        let mut a = SeededRng::new(42);
        a.next_u64();
        let mut b = SeededRng::from_state(a.state());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_within_bounds() {
        let mut rng = SeededRng::new(1);
        for _ in 0..1000 {
            let v: f32 = rng.uniform(-0.25, 0.25);
            assert!((-0.25..0.25).contains(&v));
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = SeededRng::new(3);
        let mut xs: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
