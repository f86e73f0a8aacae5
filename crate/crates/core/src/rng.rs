//! Deterministic random streams.
//!
//! Every stochastic routine in this crate takes an explicit [`RngStream`]. The
//! generator is xoshiro256** with its 256-bit state filled by SplitMix64, so a
//! `(seed, stream_id)` pair reproduces the same sequence on every platform.
//! Normal deviates come from the Box–Muller transform.

use std::f64::consts::TAU;

/// Name recorded in run manifests.
pub const ALGORITHM: &str = "xoshiro256** (SplitMix64 seeding), Box-Muller normals";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes. Used to turn arm names and similar labels into
/// stream ids.
pub fn label_id(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngStream {
    state: [u64; 4],
    stream_id: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    /// Seeds the generator. The SplitMix64 state starts at
    /// `seed ^ splitmix64(stream_id)` and its next four outputs become the
    /// xoshiro state.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut id_state = stream_id;
        let mut sm = seed ^ splitmix64(&mut id_state);
        let mut state = [0u64; 4];
        for word in &mut state {
            *word = splitmix64(&mut sm);
        }
        // xoshiro must not start from the all-zero state
        if state == [0; 4] {
            state[0] = GOLDEN_GAMMA;
        }
        RngStream {
            state,
            stream_id,
            spare_normal: None,
        }
    }

    pub fn from_label(seed: u64, label: &str) -> Self {
        Self::new(seed, label_id(label))
    }

    /// An independent child stream keyed by `label`; `self` is not advanced.
    pub fn fork(&self, label: &str) -> Self {
        let mut mixed = self.state[0] ^ self.state[2].rotate_left(17) ^ self.stream_id;
        let seed = splitmix64(&mut mixed);
        Self::new(seed, label_id(label))
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

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

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Integer in `[0, n)` by 128-bit multiply-high. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal deviate. Box–Muller yields pairs; the second value of
    /// each pair is returned by the following call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Fisher–Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
