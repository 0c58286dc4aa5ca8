/// SplitMix64 (Steele, Lea and Flood): a 64-bit counter passed through a
/// fixed mixing function. Output depends only on the seed, on every platform.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..n` (`n > 0`), by multiply-shift with rejection
    /// of the biased low range.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let mut product = u128::from(self.next_u64()) * u128::from(n);
        if (product as u64) < n {
            let threshold = n.wrapping_neg() % n;
            while (product as u64) < threshold {
                product = u128::from(self.next_u64()) * u128::from(n);
            }
        }
        (product >> 64) as u64
    }
}

/// `count` distinct indices from `0..m`, uniformly, by a partial Fisher-Yates
/// shuffle; returned in ascending order.
pub fn sample_indices(m: usize, count: usize, seed: u64) -> Vec<usize> {
    assert!(count <= m, "cannot draw {count} of {m}");
    let mut rng = SplitMix64::new(seed);
    let mut pool: Vec<usize> = (0..m).collect();
    for i in 0..count {
        let j = i + rng.below((m - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool.sort_unstable();
    pool
}
