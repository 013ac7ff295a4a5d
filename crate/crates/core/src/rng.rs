/// Counter-based deterministic random generator.
///
/// Each output is a pure function of (key, counter), so independent
/// substreams derived from the same seed are reproducible regardless of
/// thread scheduling, and the sequence is bit-identical across platforms
/// (integer arithmetic only; the normal variate uses an Irwin-Hall sum of
/// uniforms rather than transcendental functions).
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix(seed ^ GOLDEN),
            ctr: 0,
        }
    }

    /// Derive an independent stream, e.g. one per scene index.
    pub fn substream(&self, index: u64) -> Self {
        CounterRng {
            key: mix(self.key ^ mix(index.wrapping_mul(GOLDEN) ^ 0x6a09_e667_f3bc_c909)),
            ctr: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) via widening multiply.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Approximately standard normal: Irwin-Hall sum of 12 uniforms.
    /// Exact-arithmetic construction keeps the stream platform-independent.
    pub fn normal(&mut self) -> f64 {
        let mut s = 0.0;
        for _ in 0..12 {
            s += self.uniform();
        }
        s - 6.0
    }

    /// Sample `m` distinct values from 0..n in increasing order
    /// (partial Fisher-Yates, then sort).
    pub fn distinct_sorted(&mut self, n: usize, m: usize) -> Vec<u32> {
        assert!(m <= n);
        let mut pool: Vec<u32> = (0..n as u32).collect();
        for i in 0..m {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut picked = pool[..m].to_vec();
        picked.sort_unstable();
        picked
    }
}
