//! Counter-based random numbers.
//!
//! All randomness comes from Philox4x32-10 (Salmon et al., Random123). A
//! draw is a pure function of `(key, counter)`, so any probe entry can be
//! regenerated without replaying a sequence. The 128-bit counter is laid out
//! as
//!
//! | word | contents                                        |
//! |------|-------------------------------------------------|
//! | 0    | element index, low 32 bits                      |
//! | 1    | element index bits 32..48, substream byte, domain byte |
//! | 2, 3 | stream (low, high)                              |
//!
//! and the 64-bit key is the seed. Uniforms take 53 bits from two words;
//! normals use Box–Muller on the two uniforms of one Philox block
//! (element `2k` is the cosine branch, `2k + 1` the sine branch).

use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn philox_round(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
    let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
    [
        ((p1 >> 32) as u32) ^ ctr[1] ^ key[0],
        p1 as u32,
        ((p0 >> 32) as u32) ^ ctr[3] ^ key[1],
        p0 as u32,
    ]
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    ctr = philox_round(ctr, key);
    for _ in 1..10 {
        key[0] = key[0].wrapping_add(PHILOX_W0);
        key[1] = key[1].wrapping_add(PHILOX_W1);
        ctr = philox_round(ctr, key);
    }
    ctr
}

/// SplitMix64 finaliser, used to fold identifiers into stream numbers.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a block of draws is used for. Different domains never share counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Gaussian = 0,
    Mask = 1,
    Init = 2,
    Dropout = 3,
    Shuffle = 4,
    Instance = 5,
}

/// Seed of one probe draw: the stored state `s` of the low-memory layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeSeed {
    pub seed: u64,
    pub stream: u64,
}

impl ProbeSeed {
    pub const fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Per-layer, per-iteration seed: `stream = mix64(mix64(layer) ^ iteration)`.
    pub fn for_layer(seed: u64, layer: u64, iteration: u64) -> Self {
        Self { seed, stream: mix64(mix64(layer) ^ iteration) }
    }

    /// A child stream, e.g. one per trial or per channel pair.
    pub fn child(self, index: u64) -> Self {
        Self { seed: self.seed, stream: mix64(self.stream ^ mix64(index.wrapping_add(0x5851_F42D))) }
    }
}

const INDEX_LIMIT: u64 = 1 << 48;

/// Random access into one `(seed, stream, domain, substream)` family.
#[derive(Clone, Copy, Debug)]
pub struct CounterStream {
    key: [u32; 2],
    stream: [u32; 2],
    tag: u32,
}

impl CounterStream {
    pub fn new(seed: ProbeSeed, domain: Domain, sub: u8) -> Self {
        Self {
            key: [seed.seed as u32, (seed.seed >> 32) as u32],
            stream: [seed.stream as u32, (seed.stream >> 32) as u32],
            tag: (u32::from(domain as u8) << 24) | (u32::from(sub) << 16),
        }
    }

    #[inline]
    pub fn words(&self, index: u64) -> [u32; 4] {
        debug_assert!(index < INDEX_LIMIT);
        let ctr = [index as u32, self.tag | ((index >> 32) as u32 & 0xFFFF), self.stream[0], self.stream[1]];
        philox4x32_10(ctr, self.key)
    }

    /// Uniform on `[0, 1)` for draw `index`.
    #[inline]
    pub fn uniform(&self, index: u64) -> f64 {
        let w = self.words(index);
        unit_closed_open(w[0], w[1])
    }

    /// Standard normal number `index` of this stream.
    #[inline]
    pub fn normal(&self, index: u64) -> f64 {
        let (c, s) = self.normal_pair(index / 2);
        if index.is_multiple_of(2) {
            c
        } else {
            s
        }
    }

    #[inline]
    fn normal_pair(&self, block: u64) -> (f64, f64) {
        let w = self.words(block);
        let u1 = unit_open_closed(w[0], w[1]);
        let u2 = unit_closed_open(w[2], w[3]);
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * c, radius * s)
    }

    /// Fills `out` with normals `start, start + 1, ...`.
    pub fn fill_normals(&self, start: u64, out: &mut [f64]) {
        let mut idx = start;
        let mut k = 0;
        if idx % 2 == 1 && !out.is_empty() {
            out[0] = self.normal_pair(idx / 2).1;
            idx += 1;
            k = 1;
        }
        while k + 1 < out.len() {
            let (c, s) = self.normal_pair(idx / 2);
            out[k] = c;
            out[k + 1] = s;
            k += 2;
            idx += 2;
        }
        if k < out.len() {
            out[k] = self.normal_pair(idx / 2).0;
        }
    }
}

#[inline]
fn bits53(hi: u32, lo: u32) -> u64 {
    ((u64::from(hi) << 32) | u64::from(lo)) >> 11
}

#[inline]
fn unit_closed_open(hi: u32, lo: u32) -> f64 {
    bits53(hi, lo) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn unit_open_closed(hi: u32, lo: u32) -> f64 {
    (bits53(hi, lo) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential generator over a counter stream (shuffles, init, instances).
#[derive(Clone, Debug)]
pub struct SeqRng {
    stream: CounterStream,
    next: u64,
}

impl SeqRng {
    pub fn new(seed: ProbeSeed, domain: Domain) -> Self {
        Self { stream: CounterStream::new(seed, domain, 0), next: 0 }
    }

    pub fn from_u64(seed: u64, domain: Domain) -> Self {
        Self::new(ProbeSeed::new(seed, 0), domain)
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.stream.words(self.next);
        self.next += 1;
        (u64::from(w[0]) << 32) | u64::from(w[1])
    }

    pub fn uniform(&mut self) -> f64 {
        let u = self.stream.uniform(self.next);
        self.next += 1;
        u
    }

    pub fn normal(&mut self) -> f64 {
        let z = self.stream.normal(self.next);
        self.next += 1;
        z
    }

    /// Uniform integer in `0..bound` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(bound);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher–Yates.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
