//! Deterministic, splittable random numbers.
//!
//! Every stochastic piece of the pipeline (weight init, batch order, noise
//! for gradient-based attribution baselines, synthetic data) pulls from one
//! of these.  The generator is counter-based: a fixed 64-bit key plus an
//! incrementing counter pushed through a SplitMix64-style finalizer.  That
//! makes streams cheap to fork — `split` derives an independent child key
//! from the parent key and a label — so the same seed reproduces the same
//! run bit-for-bit no matter how the work is reordered between streams.

/// SplitMix64 finalizer: a bijective 64-bit mix with good avalanche.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
    /// Spare normal deviate from Box–Muller, if one is banked.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Fork an independent stream.  The child's key is derived from the
    /// parent key, the label, and the parent's split position, so the same
    /// sequence of `split` calls always yields the same children.
    pub fn split(&mut self, label: &str) -> Rng {
        let mut h = self.key;
        for &b in label.as_bytes() {
            h = mix(h ^ u64::from(b));
        }
        let child = mix(h ^ self.counter.wrapping_mul(GOLDEN) ^ 0x5bf0_3635_dcb2_9359);
        self.counter = self.counter.wrapping_add(1);
        Rng {
            key: child,
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key ^ self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1), with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller; pairs are banked for efficiency.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Guard u1 away from 0 so the log is finite.
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = u1.max(1e-300);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n).  `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        // Multiply-shift rejection-free mapping; bias is negligible for the
        // small n used here (vocab sizes, corpus indices).
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
