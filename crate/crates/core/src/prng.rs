//! Counter-based random streams shared between encoder and decoder.
//!
//! Every variate is a pure function of `(key, domain, a, b, draw)`; there is no
//! mutable generator state, so any subset of draws can be regenerated in any
//! order on any thread. The block function is Philox4x32-10.
//!
//! Counter layout of one Philox block: `[domain, a, b, draw]`. Callers use `a`
//! and `b` for their own indices (step and candidate for the sampler, step and
//! batch element for training). Each block yields four 32-bit words, i.e. two
//! 64-bit words, i.e. two uniforms.
//!
//! Uniforms take the top 53 bits of a 64-bit word: `u = (w >> 11) * 2^-53` in
//! `[0, 1)`. Normals use the Box-Muller transform on the two uniforms of one
//! block: `r = sqrt(-2 ln(1 - u0))`, `z0 = r cos(2 pi u1)`, `z1 = r sin(2 pi u1)`.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// Stream domains. The numeric tags are part of the bitstream contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Domain {
    /// Initial noise `x_1` of a decode.
    Init = 1,
    /// Candidate noise for step `n`, candidate `m`.
    Candidate = 2,
    /// Categorical selection draw for step `n`.
    Select = 3,
    /// Hash projection assignments.
    Hash = 4,
    /// Network initialisation.
    NetInit = 5,
    /// Training minibatches.
    Train = 6,
    /// Adaptation vector initialisation.
    VectorInit = 7,
    /// Quantisation noise during rate-constrained fitting.
    QuantNoise = 8,
    /// Synthetic corpus generation.
    Corpus = 9,
    /// Evaluation probes and trials.
    Eval = 10,
}

/// One Philox4x32-10 block.
pub fn philox4x32(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    #[inline(always)]
    fn mulhilo(a: u32, b: u32) -> (u32, u32) {
        let p = a as u64 * b as u64;
        ((p >> 32) as u32, p as u32)
    }
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrngStream {
    key: u64,
    domain: Domain,
}

impl PrngStream {
    pub fn new(key: u64, domain: Domain) -> Self {
        Self { key, domain }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Two 64-bit words from block `draw` of counter `(a, b)`.
    pub fn words(&self, a: u32, b: u32, draw: u32) -> [u64; 2] {
        let key = [self.key as u32, (self.key >> 32) as u32];
        let w = philox4x32([self.domain as u32, a, b, draw], key);
        [
            ((w[0] as u64) << 32) | w[1] as u64,
            ((w[2] as u64) << 32) | w[3] as u64,
        ]
    }

    /// A single uniform in `[0, 1)`: the first word of block 0.
    pub fn uniform(&self, a: u32, b: u32) -> f64 {
        to_unit(self.words(a, b, 0)[0])
    }

    /// `n` uniforms in `[0, 1)`.
    pub fn uniforms(&self, a: u32, b: u32, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut draw = 0u32;
        while out.len() < n {
            let [w0, w1] = self.words(a, b, draw);
            out.push(to_unit(w0));
            if out.len() < n {
                out.push(to_unit(w1));
            }
            draw += 1;
        }
        out
    }

    /// `n` standard normals.
    pub fn normals(&self, a: u32, b: u32, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        self.fill_normals(a, b, &mut out, n);
        out
    }

    /// Appends `n` standard normals to `out`.
    pub fn fill_normals(&self, a: u32, b: u32, out: &mut Vec<f64>, n: usize) {
        let target = out.len() + n;
        let mut draw = 0u32;
        while out.len() < target {
            let [w0, w1] = self.words(a, b, draw);
            let (z0, z1) = box_muller(to_unit(w0), to_unit(w1));
            out.push(z0);
            if out.len() < target {
                out.push(z1);
            }
            draw += 1;
        }
    }

    /// Uniform integer in `[0, bound)` by multiply-shift on the top 32 bits.
    pub fn below(&self, a: u32, b: u32, bound: u32) -> u32 {
        let w = self.words(a, b, 0)[0];
        (((w >> 32) * bound as u64) >> 32) as u32
    }
}

#[inline]
fn to_unit(w: u64) -> f64 {
    (w >> 11) as f64 * TWO_POW_M53
}

#[inline]
fn box_muller(u0: f64, u1: f64) -> (f64, f64) {
    // 1 - u0 lies in (0, 1], so the log is finite.
    let r = (-2.0 * (1.0 - u0).ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u1;
    (r * theta.cos(), r * theta.sin())
}

/// 64-bit key derivation for per-job seeds (SplitMix64 finaliser).
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
