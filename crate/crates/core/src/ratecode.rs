//! Scalar quantisation, a factorised entropy model, rate-constrained fitting
//! and a range coder.
//!
//! # Entropy model
//!
//! A smooth, strictly increasing CDF `c(x) = sigmoid(z(x))` with nine
//! parameters `psi = [h1_0, h1_1, b1_0, b1_1, a_0, a_1, h2_0, h2_1, b2]`:
//!
//! ```text
//! y_j  = softplus(h1_j) x + b1_j
//! g_j  = y_j + tanh(a_j) tanh(y_j)
//! z(x) = sum_j softplus(h2_j) g_j + b2
//! ```
//!
//! Each `g_j` has slope `1 + tanh(a_j) sech^2(y_j) > 0`, so `c` is strictly
//! monotone for every `psi`. Symbol `q` has mass `c(q + 1/2) - c(q - 1/2)`.
//!
//! # Coded alphabet
//!
//! Symbols `-q_max..=q_max` map to indices `0..2 q_max + 1`; index
//! `2 q_max + 1` is the escape symbol and carries the tail mass
//! `c(-q_max - 1/2) + 1 - c(q_max + 1/2)`. An escaped symbol is followed by its
//! value as a raw 32-bit two's-complement integer, sent as two 16-bit halves
//! (high half first) with uniform frequencies.
//!
//! # Frequency table
//!
//! Frequencies sum to `2^16`. With `n` coded symbols and model masses `p_i`,
//! `f_i = 1 + floor(p_i (2^16 - n))`; the remainder goes to the symbol with the
//! largest frequency (lowest index on ties).
//!
//! # Range coder
//!
//! A carry-propagating range coder with a 64-bit `low`, 32-bit `range` and
//! byte-wise renormalisation whenever `range < 2^24`. Encoding a symbol with
//! cumulative frequency `F` and frequency `f` sets `r = range >> 16`,
//! `low += r F`, `range = r f`. The flush emits four bytes of `low`. The
//! stream starts directly with the first significant byte, so a decoder
//! primes its 32-bit `code` register from the first four bytes.

use crate::adapt::{build_projection, loss_and_vector_grad, OneVector};
use crate::error::{check_len, Error, Result};
use crate::net::{draw_fm_noise, AdamW, FmSample, TrainConfig, VectorFieldNet};
use crate::prng::{Domain, PrngStream};

pub const PSI_LEN: usize = 9;
pub const DEFAULT_Q_MAX: i32 = 64;
pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
/// Raw bits following an escape symbol.
pub const ESCAPE_RAW_BITS: u32 = 32;
/// Mass floor used by the training-time rate, in probability units.
const TRAIN_MASS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub scale: f64,
    pub q_max: i32,
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Domain(format!(
                "quantisation scale must be > 0, got {}",
                self.scale
            )));
        }
        if self.q_max < 1 {
            return Err(Error::Config(format!(
                "q_max must be >= 1, got {}",
                self.q_max
            )));
        }
        Ok(())
    }
}

fn check_scale(s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!(
            "quantisation scale must be > 0, got {s}"
        )));
    }
    Ok(())
}

/// `q_i = round(v_i / s)`, half away from zero, saturating at the `i32` range.
pub fn quantize(v: &[f64], s: f64) -> Result<Vec<i32>> {
    check_scale(s)?;
    Ok(v.iter().map(|x| (x / s).round() as i32).collect())
}

pub fn dequantize(q: &[i32], s: f64) -> Result<Vec<f64>> {
    check_scale(s)?;
    Ok(q.iter().map(|&q| q as f64 * s).collect())
}

/// `v / s + u`: the noisy stand-in for rounding, in symbol units.
pub fn relax_noise(v: &[f64], s: f64, u: &[f64]) -> Result<Vec<f64>> {
    check_scale(s)?;
    check_len(v.len(), u.len())?;
    Ok(v.iter().zip(u).map(|(x, u)| x / s + u).collect())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `z(x)` together with `dz/dpsi` and `dz/dx`.
struct Logit {
    z: f64,
    dpsi: [f64; PSI_LEN],
    dx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyModel {
    pub psi: [f64; PSI_LEN],
}

impl EntropyModel {
    /// A symmetric model approximating a logistic density with standard
    /// deviation `std` (in symbol units).
    pub fn symmetric(std: f64) -> Self {
        let std = std.max(0.25);
        // With a = 0 the logit is 2 w m x; a logistic of this std has slope
        // pi / (sqrt(3) std).
        let w = std::f64::consts::PI / (3f64.sqrt() * std) / 2.0;
        let h1 = softplus_inv(1.0);
        let h2 = softplus_inv(w);
        Self {
            psi: [h1, h1, 0.5, -0.5, 0.0, 0.0, h2, h2, 0.0],
        }
    }

    pub fn rounded_to_f32(&self) -> Self {
        Self {
            psi: self.psi.map(|v| v as f32 as f64),
        }
    }

    fn logit(&self, x: f64) -> Logit {
        let p = &self.psi;
        let mut z = p[8];
        let mut dpsi = [0.0; PSI_LEN];
        let mut dx = 0.0;
        dpsi[8] = 1.0;
        for j in 0..2 {
            let m = softplus(p[j]);
            let y = m * x + p[2 + j];
            let tau = p[4 + j].tanh();
            let ty = y.tanh();
            let g = y + tau * ty;
            let dg_dy = 1.0 + tau * (1.0 - ty * ty);
            let w = softplus(p[6 + j]);
            z += w * g;
            dpsi[j] = w * dg_dy * sigmoid(p[j]) * x;
            dpsi[2 + j] = w * dg_dy;
            dpsi[4 + j] = w * (1.0 - tau * tau) * ty;
            dpsi[6 + j] = sigmoid(p[6 + j]) * g;
            dx += w * dg_dy * m;
        }
        Logit { z, dpsi, dx }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x).z)
    }

    /// `c(hi) - c(lo)` computed without cancellation in either tail.
    fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        let zl = self.logit(lo).z;
        let zh = self.logit(hi).z;
        let sign = if zl + zh > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(sign * zh) - sigmoid(sign * zl)).abs()
    }

    /// Mass of the in-alphabet symbol `q`.
    pub fn pmf(&self, q: i32) -> f64 {
        let q = q as f64;
        self.mass_between(q - 0.5, q + 0.5)
    }

    /// Tail mass outside `[-q_max - 1/2, q_max + 1/2]`.
    pub fn escape_mass(&self, q_max: i32) -> f64 {
        let edge = q_max as f64 + 0.5;
        sigmoid(self.logit(-edge).z) + sigmoid(-self.logit(edge).z)
    }

    /// Masses of the coded alphabet: `2 q_max + 1` symbols, then escape.
    pub fn alphabet_masses(&self, q_max: i32) -> Vec<f64> {
        let mut m: Vec<f64> = (-q_max..=q_max).map(|q| self.pmf(q)).collect();
        m.push(self.escape_mass(q_max));
        m
    }

    /// Continuous-input rate `-log2(c(y + 1/2) - c(y - 1/2))` and its
    /// derivatives in `y` and `psi`. The mass is floored at `1e-9`, where the
    /// derivatives are zero.
    fn relaxed_rate(&self, y: f64) -> (f64, f64, [f64; PSI_LEN]) {
        let hi = self.logit(y + 0.5);
        let lo = self.logit(y - 0.5);
        let sign = if hi.z + lo.z > 0.0 { -1.0 } else { 1.0 };
        let p = (sigmoid(sign * hi.z) - sigmoid(sign * lo.z)).abs();
        if p < TRAIN_MASS_FLOOR {
            return (-TRAIN_MASS_FLOOR.log2(), 0.0, [0.0; PSI_LEN]);
        }
        let sh = sigmoid(hi.z) * sigmoid(-hi.z);
        let sl = sigmoid(lo.z) * sigmoid(-lo.z);
        let k = -1.0 / (p * std::f64::consts::LN_2);
        let dy = k * (sh * hi.dx - sl * lo.dx);
        let mut dpsi = [0.0; PSI_LEN];
        for i in 0..PSI_LEN {
            dpsi[i] = k * (sh * hi.dpsi[i] - sl * lo.dpsi[i]);
        }
        (-p.log2(), dy, dpsi)
    }

    /// Frozen integer frequencies for coding `2 q_max + 2` indices.
    pub fn freq_table(&self, q_max: i32) -> Result<FreqTable> {
        if q_max < 1 {
            return Err(Error::Config(format!("q_max must be >= 1, got {q_max}")));
        }
        let masses = self.alphabet_masses(q_max);
        let n = masses.len() as u32;
        if n >= FREQ_TOTAL / 2 {
            return Err(Error::Config(format!(
                "alphabet of {n} symbols too large for the coder"
            )));
        }
        if masses.iter().any(|m| !m.is_finite()) {
            return Err(Error::Model("non-finite entropy model mass".into()));
        }
        let spare = (FREQ_TOTAL - n) as f64;
        let mut freqs: Vec<u32> = masses
            .iter()
            .map(|&m| 1 + ((m * spare).floor() as u32).min(FREQ_TOTAL - n))
            .collect();
        let sum: u32 = freqs.iter().sum();
        if sum > FREQ_TOTAL {
            return Err(Error::Model(format!("frequency table overflows: {sum}")));
        }
        let mut best = 0;
        for (i, &f) in freqs.iter().enumerate() {
            if f > freqs[best] {
                best = i;
            }
        }
        freqs[best] += FREQ_TOTAL - sum;
        FreqTable::new(q_max, freqs)
    }
}

/// `sum_i -log2 pmf(q_i)`; escaped symbols cost the escape mass plus
/// [`ESCAPE_RAW_BITS`].
pub fn rate_bits(em: &EntropyModel, symbols: &[i32], q_max: i32) -> Result<f64> {
    let mut bits = 0.0;
    let escape = em.escape_mass(q_max);
    for &q in symbols {
        let (p, extra) = if q.unsigned_abs() <= q_max as u32 {
            (em.pmf(q), 0.0)
        } else {
            (escape, ESCAPE_RAW_BITS as f64)
        };
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::Model(format!("pmf underflow at symbol {q}")));
        }
        bits += extra - p.log2();
    }
    Ok(bits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    q_max: i32,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn new(q_max: i32, freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() != 2 * q_max as usize + 2 {
            return Err(Error::Config(
                "frequency table size does not match q_max".into(),
            ));
        }
        if freqs.contains(&0) || freqs.iter().map(|&f| f as u64).sum::<u64>() != FREQ_TOTAL as u64 {
            return Err(Error::Model(
                "frequencies must be >= 1 and sum to 2^16".into(),
            ));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(Self { q_max, freqs, cum })
    }

    pub fn q_max(&self) -> i32 {
        self.q_max
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    fn escape_index(&self) -> usize {
        self.freqs.len() - 1
    }

    fn index_of(&self, q: i32) -> Option<usize> {
        (q.unsigned_abs() <= self.q_max as u32).then(|| (q + self.q_max) as usize)
    }

    /// Ideal code length of `symbols` under this table, in bits.
    pub fn cost_bits(&self, symbols: &[i32]) -> f64 {
        let total = FREQ_TOTAL as f64;
        symbols
            .iter()
            .map(|&q| match self.index_of(q) {
                Some(i) => -(self.freqs[i] as f64 / total).log2(),
                None => {
                    ESCAPE_RAW_BITS as f64 - (self.freqs[self.escape_index()] as f64 / total).log2()
                }
            })
            .sum()
    }
}

const TOP: u32 = 1 << 24;

struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    started: bool,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            started: false,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        // The very first byte is always zero and is not transmitted.
        if self.started {
            self.out.push(byte);
        } else {
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode(&mut self, cum: u32, freq: u32) {
        let r = self.range >> FREQ_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            bytes,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.bytes.get(self.pos).ok_or_else(|| Error::Decode {
            offset: self.pos,
            msg: "range-coded payload truncated".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    /// Decodes one index given the cumulative table.
    fn decode(&mut self, cum: &[u32]) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let value = self.code / r;
        if value >= FREQ_TOTAL {
            return Err(Error::Decode {
                offset: self.pos,
                msg: "range coder state out of bounds".into(),
            });
        }
        let idx = cum.partition_point(|&c| c <= value) - 1;
        self.code -= r * cum[idx];
        self.range = r * (cum[idx + 1] - cum[idx]);
        self.normalize()?;
        Ok(idx)
    }

    fn decode_raw16(&mut self) -> Result<u32> {
        let r = self.range >> FREQ_BITS;
        let value = self.code / r;
        if value >= FREQ_TOTAL {
            return Err(Error::Decode {
                offset: self.pos,
                msg: "range coder state out of bounds".into(),
            });
        }
        self.code -= r * value;
        self.range = r;
        self.normalize()?;
        Ok(value)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }
}

/// Range-codes `symbols`; an empty input gives an empty payload.
pub fn range_encode(symbols: &[i32], table: &FreqTable) -> Vec<u8> {
    if symbols.is_empty() {
        return Vec::new();
    }
    let mut enc = RangeEncoder::new();
    for &q in symbols {
        match table.index_of(q) {
            Some(i) => enc.encode(table.cum[i], table.freqs[i]),
            None => {
                let e = table.escape_index();
                enc.encode(table.cum[e], table.freqs[e]);
                let raw = q as u32;
                enc.encode(raw >> 16, 1);
                enc.encode(raw & 0xFFFF, 1);
            }
        }
    }
    enc.finish()
}

/// Decodes exactly `n` symbols; the payload must be consumed exactly.
pub fn range_decode(bytes: &[u8], n: usize, table: &FreqTable) -> Result<Vec<i32>> {
    if n == 0 {
        if !bytes.is_empty() {
            return Err(Error::Decode {
                offset: 0,
                msg: "payload present for an empty symbol stream".into(),
            });
        }
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(n);
    let esc = table.escape_index();
    for _ in 0..n {
        let idx = dec.decode(&table.cum)?;
        if idx == esc {
            let hi = dec.decode_raw16()?;
            let lo = dec.decode_raw16()?;
            out.push(((hi << 16) | lo) as i32);
        } else {
            out.push(idx as i32 - table.q_max);
        }
    }
    if dec.pos != bytes.len() {
        return Err(Error::Decode {
            offset: dec.pos,
            msg: format!("{} trailing payload bytes", bytes.len() - dec.pos),
        });
    }
    Ok(out)
}

/// Stage-2 options.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub train: TrainConfig,
    pub lr_scale: f64,
    pub lr_model: f64,
    pub q_max: i32,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 400,
                batch: 64,
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
            lr_scale: 1e-2,
            lr_model: 1e-2,
            q_max: DEFAULT_Q_MAX,
        }
    }
}

/// Per-step record of stage-2 fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Step {
    pub distortion: f64,
    pub rate_bits: f64,
}

/// Initial `(s, psi)` for a stage-1 vector: `s = max|v| / 16` and a symmetric
/// model matched to the spread of `v / s`.
pub fn initial_quantizer(v: &[f64]) -> (f64, EntropyModel) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let s = if max > 0.0 { max / 16.0 } else { 1e-3 };
    let n = v.len().max(1) as f64;
    let std = (v.iter().map(|x| (x / s) * (x / s)).sum::<f64>() / n).sqrt();
    (s, EntropyModel::symmetric(std))
}

struct Stage2Objective {
    distortion: f64,
    rate: f64,
    g_v: Vec<f64>,
    g_log_s: f64,
    g_psi: [f64; PSI_LEN],
}

impl Stage2Objective {
    #[cfg(test)]
    fn total(&self, lambda: f64) -> f64 {
        self.distortion + lambda * self.rate
    }
}

/// `L_FM(v + s u) + lambda * R(v / s + u)` and its gradients in `v`, `log s`
/// and `psi`. `template` supplies the LoRA layout and projection seed and is overwritten.
#[allow(clippy::too_many_arguments)]
fn stage2_objective(
    net: &VectorFieldNet,
    template: &mut OneVector,
    proj: &crate::adapt::HashProjection,
    v: &[f64],
    log_s: f64,
    em: &EntropyModel,
    u: &[f64],
    batch: &[FmSample<'_>],
    lambda: f64,
) -> Result<Stage2Objective> {
    let s = log_s.exp();
    let y = relax_noise(v, s, u)?;
    for (dst, yi) in template.v.iter_mut().zip(&y) {
        *dst = s * yi;
    }
    let (distortion, g_noisy) = loss_and_vector_grad(net, template, proj, batch)?;
    let mut rate = 0.0;
    let mut g_v = g_noisy.clone();
    let mut g_log_s = 0.0;
    let mut g_psi = [0.0; PSI_LEN];
    for i in 0..v.len() {
        let (r, dr_dy, dr_dpsi) = em.relaxed_rate(y[i]);
        rate += r;
        g_v[i] += lambda * dr_dy / s;
        g_log_s += g_noisy[i] * s * u[i] - lambda * dr_dy * v[i] / s;
        for j in 0..PSI_LEN {
            g_psi[j] += lambda * dr_dpsi[j];
        }
    }
    Ok(Stage2Objective {
        distortion,
        rate,
        g_v,
        g_log_s,
        g_psi,
    })
}

/// Joint fit of `v`, `s` and `psi` on `L_FM(v + s u) + lambda * R`, where `R`
/// is the total relaxed rate in bits and `u ~ U(-1/2, 1/2)^k`.
///
/// The returned scale and model are rounded to `f32`, as transmitted.
pub fn fit_stage2(
    net: &VectorFieldNet,
    ov: &OneVector,
    x: &[f64],
    lambda: f64,
    cfg: &Stage2Config,
) -> Result<(OneVector, QuantConfig, EntropyModel)> {
    fit_stage2_with(net, ov, x, lambda, cfg, &mut |_, _| {})
}

pub fn fit_stage2_with(
    net: &VectorFieldNet,
    ov: &OneVector,
    x: &[f64],
    lambda: f64,
    cfg: &Stage2Config,
    on_step: &mut dyn FnMut(usize, Stage2Step),
) -> Result<(OneVector, QuantConfig, EntropyModel)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "rate weight must be >= 0, got {lambda}"
        )));
    }
    check_len(net.input_dim(), x.len())?;
    let proj = build_projection(ov.proj_seed, &ov.spec, ov.k())?;
    let k = ov.k();
    let tc = &cfg.train;
    let (s0, mut em) = initial_quantizer(&ov.v);
    let mut v = ov.v.clone();
    let mut log_s = [s0.ln()];
    let mut opt_v = AdamW::new(k, tc.lr, 0.0);
    let mut opt_s = AdamW::new(1, cfg.lr_scale, 0.0);
    let mut opt_m = AdamW::new(PSI_LEN, cfg.lr_model, 0.0);
    let fm_stream = PrngStream::new(tc.seed, Domain::Train);
    let q_stream = PrngStream::new(tc.seed, Domain::QuantNoise);
    let mut template = ov.clone();
    for step in 0..tc.steps {
        let u: Vec<f64> = q_stream
            .uniforms(step as u32, 0, k)
            .into_iter()
            .map(|u| u - 0.5)
            .collect();
        let batch: Vec<FmSample> = (0..tc.batch)
            .map(|e| {
                let (_, t, eps) = draw_fm_noise(&fm_stream, step, e, x.len(), tc.eta0, tc.eta1);
                FmSample { x, t, eps }
            })
            .collect();
        let diverged = |msg: String| Error::Training { step, msg };
        let o = stage2_objective(
            net,
            &mut template,
            &proj,
            &v,
            log_s[0],
            &em,
            &u,
            &batch,
            lambda,
        )
        .map_err(|e| diverged(e.to_string()))?;
        let finite = o.g_v.iter().chain(&o.g_psi).all(|g| g.is_finite())
            && o.g_log_s.is_finite()
            && o.rate.is_finite();
        if !finite {
            return Err(diverged("non-finite stage-2 gradient".into()));
        }
        let (dist, rate, g_v, g_log_s, g_psi) = (o.distortion, o.rate, o.g_v, o.g_log_s, o.g_psi);
        on_step(
            step,
            Stage2Step {
                distortion: dist,
                rate_bits: rate,
            },
        );
        let lr_frac = tc.lr_at(step) / tc.lr;
        opt_v.lr = tc.lr * lr_frac;
        opt_s.lr = cfg.lr_scale * lr_frac;
        opt_m.lr = cfg.lr_model * lr_frac;
        opt_v.step(&mut v, &g_v);
        opt_s.step(&mut log_s, &[g_log_s]);
        opt_m.step(&mut em.psi, &g_psi);
    }
    let qc = QuantConfig {
        scale: log_s[0].exp() as f32 as f64,
        q_max: cfg.q_max,
    };
    qc.validate()?;
    let out = OneVector {
        v,
        spec: ov.spec.clone(),
        proj_seed: ov.proj_seed,
    };
    Ok((out, qc, em.rounded_to_f32()))
}
