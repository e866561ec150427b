use super::{EngineError, SimTime};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based deterministic RNG stream keyed by `(seed, stream_key)`.
///
/// The i-th output is a pure function of the seed, the key, and i, so
/// streams with distinct keys never perturb each other: adding or removing
/// an agent leaves every other agent's traffic untouched.
#[derive(Debug, Clone)]
pub struct RngStream {
    base: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_key: &str) -> Self {
        let base = mix64(seed ^ mix64(fnv1a64(stream_key.as_bytes())));
        RngStream { base, counter: 0 }
    }

    /// Number of draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.base.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform integer in `[0, bound)`, unbiased via rejection.
    pub fn draw(&mut self, bound: u64) -> Result<u64, EngineError> {
        if bound == 0 {
            return Err(EngineError::ZeroBound);
        }
        // Reject the topmost `2^64 mod bound` values.
        let rem = (u64::MAX % bound).wrapping_add(1) % bound;
        let zone = u64::MAX - rem;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return Ok(x % bound);
            }
        }
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn draw_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo < hi);
        lo + self.draw(hi - lo).expect("nonzero span")
    }

    /// Uniform float strictly inside (0, 1).
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Exponentially distributed interval with the given mean, rounded to
    /// whole nanoseconds.
    pub fn exp_interval(&mut self, mean: SimTime) -> SimTime {
        let u = self.next_f64();
        let ns = -(mean.as_nanos() as f64) * u.ln();
        SimTime::from_nanos(ns.round() as u64)
    }

    pub fn fill_bytes(&mut self, buf: &mut [u8]) {
        for chunk in buf.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_key_are_identical() {
        let mut a = RngStream::new(123, "agent");
        let mut b = RngStream::new(123, "agent");
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    // Golden values frozen from the first run of this generator; they pin
    // the output across refactors and platforms.
    #[test]
    fn distinct_keys_diverge_golden() {
        let mut a = RngStream::new(42, "agent-a");
        let mut b = RngStream::new(42, "agent-b");
        let da: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let db: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(da, db);
        assert_eq!(da, GOLDEN_AGENT_A);
        assert_eq!(db, GOLDEN_AGENT_B);
    }

    const GOLDEN_AGENT_A: [u64; 16] = [
        0x1B952E99796CC88B, 0xF41315D4993322BD,
        0xC5489AA80F998772, 0x0D7EEEBC163080D3,
        0x607551A4B369976D, 0x7061AF784BF70194,
        0x44D728D90F34A9DB, 0x5E6423EEFD3ED39B,
        0xE60C8D47AF39D15C, 0xDE07ECBF59B0D5CE,
        0xA3A83D039B94C462, 0xDAA50E27638CAE43,
        0x93D01FC9F748CF82, 0x9EDD1CB431109E1E,
        0x68DAFD1BD316B5D6, 0x9691E451300567A3,
    ];
    const GOLDEN_AGENT_B: [u64; 16] = [
        0x7FF8C74C4B1AAD3E, 0x1E0B017C8A350565,
        0x8B2EFA89E3FBEDD8, 0xCDBE3A273B612568,
        0xF275D7593CEF2A39, 0x6D9AA3F3F9C47E76,
        0x9F78AA9B1E5E036B, 0xB78309BF9E5A4FC7,
        0x608A2078B9A8C4CE, 0xD48E1FCC3AADC87C,
        0xC13396FFAD17DC9C, 0x09EDEDD3BAABBD21,
        0x77EE214CA67D164F, 0xAD7E367DB2ADB2EA,
        0x46E1133E459540F4, 0xD24DEB726254DA7B,
    ];

    #[test]
    fn bound_one_is_always_zero() {
        let mut r = RngStream::new(7, "z");
        for _ in 0..32 {
            assert_eq!(r.draw(1).unwrap(), 0);
        }
    }

    #[test]
    fn zero_bound_is_rejected() {
        let mut r = RngStream::new(7, "z");
        assert_eq!(r.draw(0).unwrap_err(), EngineError::ZeroBound);
    }

    #[test]
    fn draws_are_pure_functions_of_index() {
        let mut a = RngStream::new(5, "x");
        let first: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        // Interleave a foreign stream; a fresh "x" stream must reproduce
        // the same sequence regardless.
        let mut noise = RngStream::new(5, "y");
        let mut b = RngStream::new(5, "x");
        let mut second = Vec::new();
        for _ in 0..8 {
            noise.next_u64();
            second.push(b.next_u64());
            noise.next_u64();
        }
        assert_eq!(first, second);
    }

    #[test]
    fn draw_is_roughly_uniform() {
        let mut r = RngStream::new(11, "uniform");
        let mut buckets = [0u32; 10];
        for _ in 0..10_000 {
            buckets[r.draw(10).unwrap() as usize] += 1;
        }
        for &b in &buckets {
            assert!((800..1200).contains(&b), "bucket count {b} out of range");
        }
    }

    #[test]
    fn exp_interval_mean_is_close() {
        let mut r = RngStream::new(3, "exp");
        let mean = SimTime::from_secs(10);
        let n = 20_000u64;
        let total: u128 = (0..n).map(|_| r.exp_interval(mean).as_nanos() as u128).sum();
        let avg = (total / n as u128) as f64;
        let expect = mean.as_nanos() as f64;
        assert!((avg - expect).abs() < 0.03 * expect, "avg {avg} vs {expect}");
    }
}
