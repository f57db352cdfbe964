//! Counter-based randomness.
//!
//! Every draw is a pure function of an [`RngKey`]. There is no generator
//! state to advance, so a retained example sees the same variates no matter
//! which neighbours were filtered out of its microbatch.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stream identifiers for the `op_id` field.
pub mod op {
    pub const DROPOUT: u32 = 1;
    pub const PARAM_INIT: u32 = 2;
    pub const SHUFFLE: u32 = 3;
    pub const MICROBATCH_SEED: u32 = 4;
    pub const CORPUS: u32 = 5;
    pub const ADAPTER_INIT: u32 = 6;
    pub const BOOTSTRAP: u32 = 7;
    pub const RETAIN_TUNE: u32 = 8;
    pub const FAULT: u32 = 9;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed64: u64,
    pub example_id: u64,
    pub token_idx: u32,
    pub op_id: u32,
    pub offset: u32,
}

impl RngKey {
    pub fn new(seed64: u64, example_id: u64, token_idx: u32, op_id: u32, offset: u32) -> Self {
        Self {
            seed64,
            example_id,
            token_idx,
            op_id,
            offset,
        }
    }

    /// 64 uniformly distributed bits for this key.
    pub fn bits(&self) -> u64 {
        let mut h = mix64(self.seed64.wrapping_add(GAMMA));
        h = mix64(h ^ self.example_id.wrapping_add(GAMMA.wrapping_mul(2)));
        let packed = ((self.token_idx as u64) << 32) | self.op_id as u64;
        h = mix64(h ^ packed.wrapping_add(GAMMA.wrapping_mul(3)));
        mix64(h ^ (self.offset as u64).wrapping_add(GAMMA.wrapping_mul(4)))
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn uniform(&self) -> f32 {
        (self.bits() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }
}

/// Sequential convenience view over a keyed stream.
///
/// The n-th draw is `RngKey { seed, stream, n >> 32, op, n as u32 }`, so the
/// stream can be replayed from any position.
#[derive(Clone, Debug)]
pub struct CounterStream {
    seed: u64,
    stream: u64,
    op: u32,
    counter: u64,
}

impl CounterStream {
    pub fn new(seed: u64, stream: u64, op: u32) -> Self {
        Self {
            seed,
            stream,
            op,
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        RngKey::new(self.seed, self.stream, (c >> 32) as u32, self.op, c as u32).bits()
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
