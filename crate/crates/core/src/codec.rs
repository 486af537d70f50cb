//! End-to-end encoder and decoder, codec configuration and the bitstream
//! container.
//!
//! Bitstream layout (little-endian):
//!
//! | field          | bytes        |
//! |----------------|--------------|
//! | magic `"VOVB"` | 4            |
//! | version        | 1            |
//! | config digest  | 4            |
//! | projection seed| 8            |
//! | sampler seed   | 8            |
//! | scale `s`      | 4 (`f32`)    |
//! | `psi`          | 9 x 4 (`f32`)|
//! | symbol count   | LEB128       |
//! | payload length | LEB128       |
//! | payload        | range-coded  |
//!
//! An optional scaling block follows: flag byte `1`, `u32 N`, `u32 M`,
//! `u64 seed`, then the indices as `ceil(log2 M)`-bit big-endian fields
//! padded to a byte. Without scaling the stream ends after the payload.

use std::fmt::Write as _;

use crate::adapt::{fit_vector_stage1, AdaptedNet, FitConfig, LoraSpec, OneVector};
use crate::dynamics::{ode_decode_early, TimeGrid, VectorField, ETA0, ETA1};
use crate::error::{check_len, Error, Result};
use crate::io::{hex, parse_key_values, short_digest};
use crate::net::{ByteReader, TrainConfig, VectorFieldNet};
use crate::prng::{derive_seed, Domain, PrngStream};
use crate::ratecode::{
    dequantize, fit_stage2, quantize, range_decode, range_encode, EntropyModel, Stage2Config,
    DEFAULT_Q_MAX, PSI_LEN,
};
use crate::scaling::{decode_scaled, encode_scaled, ScalingConfig, ScalingTrace};

const BITSTREAM_MAGIC: &[u8; 4] = b"VOVB";
pub const BITSTREAM_VERSION: u8 = 1;
const SCALING_FLAG: u8 = 1;
/// Fixed part of the scaling block: flag, `N`, `M`, seed.
pub const SCALING_BLOCK_HEADER_BYTES: usize = 1 + 4 + 4 + 8;

/// Every knob shared by encoder and decoder, plus the encoder's fitting
/// budget. Stored as a flat `key = value` text file.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub k: usize,
    pub rank: usize,
    pub lambda: f64,
    /// Decode steps `N` of the uniform grid.
    pub steps: usize,
    pub eta0: f64,
    pub eta1: f64,
    pub proj_seed: u64,
    pub sampler_seed: u64,
    pub train_seed: u64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub batch: usize,
    pub init_std: f64,
    pub q_max: i32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            k: 1024,
            rank: 1,
            lambda: 3e-3,
            steps: 100,
            eta0: ETA0,
            eta1: ETA1,
            proj_seed: 1,
            sampler_seed: 2,
            train_seed: 3,
            stage1_steps: 600,
            stage1_lr: 3e-2,
            stage2_steps: 400,
            stage2_lr: 1e-2,
            batch: 64,
            init_std: 1e-2,
            q_max: DEFAULT_Q_MAX,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.rank == 0 || self.steps == 0 || self.batch == 0 {
            return Err(Error::Config(
                "k, rank, steps and batch must be >= 1".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.q_max < 1 {
            return Err(Error::Config(format!(
                "q_max must be >= 1, got {}",
                self.q_max
            )));
        }
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0 && self.init_std >= 0.0) {
            return Err(Error::Config(
                "learning rates must be > 0 and init_std >= 0".into(),
            ));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.steps, self.eta0, self.eta1)
    }

    /// First four bytes of SHA-256 over the fields the decoder depends on.
    /// Seeds travel in the stream itself; fitting budgets and `lambda` do
    /// not affect decoding and are left out.
    pub fn digest(&self) -> [u8; 4] {
        let canon = format!(
            "k={}\nrank={}\nsteps={}\neta0={:016x}\neta1={:016x}\nq_max={}\n",
            self.k,
            self.rank,
            self.steps,
            self.eta0.to_bits(),
            self.eta1.to_bits(),
            self.q_max
        );
        short_digest(canon.as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "rank = {}", self.rank);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "eta0 = {}", self.eta0);
        let _ = writeln!(s, "eta1 = {}", self.eta1);
        let _ = writeln!(s, "proj_seed = {}", self.proj_seed);
        let _ = writeln!(s, "sampler_seed = {}", self.sampler_seed);
        let _ = writeln!(s, "train_seed = {}", self.train_seed);
        let _ = writeln!(s, "stage1_steps = {}", self.stage1_steps);
        let _ = writeln!(s, "stage1_lr = {}", self.stage1_lr);
        let _ = writeln!(s, "stage2_steps = {}", self.stage2_steps);
        let _ = writeln!(s, "stage2_lr = {}", self.stage2_lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "init_std = {}", self.init_std);
        let _ = writeln!(s, "q_max = {}", self.q_max);
        s
    }

    /// Parses `key = value` text over the defaults; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for kv in parse_key_values(text)? {
            match kv.key.as_str() {
                "k" => c.k = kv.parse()?,
                "rank" => c.rank = kv.parse()?,
                "lambda" => c.lambda = kv.parse()?,
                "steps" => c.steps = kv.parse()?,
                "eta0" => c.eta0 = kv.parse()?,
                "eta1" => c.eta1 = kv.parse()?,
                "proj_seed" => c.proj_seed = kv.parse()?,
                "sampler_seed" => c.sampler_seed = kv.parse()?,
                "train_seed" => c.train_seed = kv.parse()?,
                "stage1_steps" => c.stage1_steps = kv.parse()?,
                "stage1_lr" => c.stage1_lr = kv.parse()?,
                "stage2_steps" => c.stage2_steps = kv.parse()?,
                "stage2_lr" => c.stage2_lr = kv.parse()?,
                "batch" => c.batch = kv.parse()?,
                "init_std" => c.init_std = kv.parse()?,
                "q_max" => c.q_max = kv.parse()?,
                _ => return Err(kv.unknown()),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            train: TrainConfig {
                steps: self.stage1_steps,
                batch: self.batch,
                lr: self.stage1_lr,
                weight_decay: 0.0,
                seed: self.train_seed,
                eta0: self.eta0,
                eta1: self.eta1,
                ..Default::default()
            },
            init_std: self.init_std,
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        let d = Stage2Config::default();
        Stage2Config {
            train: TrainConfig {
                steps: self.stage2_steps,
                batch: self.batch,
                lr: self.stage2_lr,
                weight_decay: 0.0,
                seed: derive_seed(self.train_seed, 2),
                eta0: self.eta0,
                eta1: self.eta1,
                ..d.train
            },
            q_max: self.q_max,
            ..d
        }
    }
}

/// Options for the encoding-time scaling block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleOptions {
    pub steps: u32,
    pub candidates: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub config_digest: [u8; 4],
    pub proj_seed: u64,
    pub sampler_seed: u64,
    pub scale: f32,
    pub psi: [f32; PSI_LEN],
    pub symbol_count: u32,
    pub payload: Vec<u8>,
    pub scaling: Option<ScalingTrace>,
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn get_varint(r: &mut ByteReader) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = r.u8()?;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Format(format!(
        "overlong varint before offset {}",
        r.pos()
    )))
}

impl Bitstream {
    pub fn entropy_model(&self) -> EntropyModel {
        EntropyModel {
            psi: self.psi.map(|p| p as f64),
        }
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(72);
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.proj_seed.to_le_bytes());
        out.extend_from_slice(&self.sampler_seed.to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        for p in &self.psi {
            out.extend_from_slice(&p.to_le_bytes());
        }
        put_varint(&mut out, self.symbol_count as u64);
        put_varint(&mut out, self.payload.len() as u64);
        out
    }

    fn scaling_bytes(&self) -> Vec<u8> {
        let Some(t) = &self.scaling else {
            return Vec::new();
        };
        let mut out = vec![SCALING_FLAG];
        out.extend_from_slice(&t.steps.to_le_bytes());
        out.extend_from_slice(&t.candidates.to_le_bytes());
        out.extend_from_slice(&t.seed.to_le_bytes());
        out.extend(t.pack_indices());
        out
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = self.header_bytes();
        out.extend_from_slice(&self.payload);
        out.extend(self.scaling_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != BITSTREAM_MAGIC {
            return Err(Error::Format("bad bitstream magic".into()));
        }
        let version = r.u8()?;
        if version != BITSTREAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported bitstream version {version}"
            )));
        }
        let config_digest: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let proj_seed = r.u64()?;
        let sampler_seed = r.u64()?;
        let scale = r.f32()?;
        let mut psi = [0f32; PSI_LEN];
        for p in &mut psi {
            *p = r.f32()?;
        }
        let symbol_count = u32::try_from(get_varint(&mut r)?)
            .map_err(|_| Error::Format("symbol count exceeds u32".into()))?;
        let payload_len = get_varint(&mut r)?;
        if payload_len > r.remaining() as u64 {
            return Err(Error::Format(format!(
                "payload of {payload_len} bytes truncated at offset {} ({} left)",
                r.pos(),
                r.remaining()
            )));
        }
        let payload = r.take(payload_len as usize)?.to_vec();
        let scaling = if r.remaining() == 0 {
            None
        } else {
            let flag = r.u8()?;
            if flag != SCALING_FLAG {
                return Err(Error::Format(format!(
                    "bad scaling flag {flag} at offset {}",
                    r.pos() - 1
                )));
            }
            let steps = r.u32()?;
            let candidates = r.u32()?;
            if candidates == 0 {
                return Err(Error::Format("scaling block with zero candidates".into()));
            }
            let seed = r.u64()?;
            let need = (steps as u64 * ScalingTrace::bits_per_index(candidates) as u64).div_ceil(8);
            if need != r.remaining() as u64 {
                return Err(Error::Format(format!(
                    "index block has {} bytes, expected {need}",
                    r.remaining()
                )));
            }
            let indices = ScalingTrace::unpack_indices(r.take(need as usize)?, steps, candidates)?;
            let trace = ScalingTrace {
                steps,
                candidates,
                seed,
                indices,
            };
            trace.validate().map_err(|e| Error::Format(e.to_string()))?;
            Some(trace)
        };
        Ok(Self {
            config_digest,
            proj_seed,
            sampler_seed,
            scale,
            psi,
            symbol_count,
            payload,
            scaling,
        })
    }

    pub fn accounting(&self, signal_len: usize) -> BitAccounting {
        let header_bits = 8 * self.header_bytes().len() as u64;
        let payload_bits = 8 * self.payload.len() as u64;
        let scaling_bits = 8 * self.scaling_bytes().len() as u64;
        let index_bits = self.scaling.as_ref().map_or(0, |t| t.side_info_bits());
        let total_bits = header_bits + payload_bits + scaling_bits;
        BitAccounting {
            header_bits,
            payload_bits,
            scaling_bits,
            index_bits,
            total_bits,
            bits_per_dim: total_bits as f64 / signal_len.max(1) as f64,
        }
    }
}

/// Itemised size of a serialized stream. `scaling_bits` is the whole block;
/// `index_bits` the raw `N ceil(log2 M)` part of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitAccounting {
    pub header_bits: u64,
    pub payload_bits: u64,
    pub scaling_bits: u64,
    pub index_bits: u64,
    pub total_bits: u64,
    pub bits_per_dim: f64,
}

impl BitAccounting {
    pub fn header_share(&self) -> f64 {
        self.header_bits as f64 / self.total_bits as f64
    }
}

/// Encoder output: the stream, the decoder-identical reconstruction and
/// rate figures for the coded symbols.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub bitstream: Bitstream,
    pub bytes: Vec<u8>,
    pub reconstruction: Vec<f64>,
    pub symbols: Vec<i32>,
    /// Cross-entropy of the symbols under the frozen integer table.
    pub model_bits: f64,
    pub accounting: BitAccounting,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Initial decode state shared by ODE and SDE decoding.
pub fn initial_noise(sampler_seed: u64, dim: usize) -> Vec<f64> {
    PrngStream::new(sampler_seed, Domain::Init).normals(0, 0, dim)
}

pub fn fit_stage1(net: &VectorFieldNet, x: &[f64], cfg: &CodecConfig) -> Result<OneVector> {
    cfg.validate()?;
    let spec = LoraSpec::all_layers(net, cfg.rank)?;
    stage(
        "stage 1",
        fit_vector_stage1(net, x, &spec, cfg.k, cfg.proj_seed, &cfg.fit_config()),
    )
}

/// Full pipeline: stage 1, stage 2, quantisation, range coding and, when
/// requested, the scaling block. The reconstruction is produced by decoding
/// the serialized bytes.
pub fn encode(
    net: &VectorFieldNet,
    x: &[f64],
    cfg: &CodecConfig,
    scale: Option<ScaleOptions>,
) -> Result<Encoded> {
    let ov = fit_stage1(net, x, cfg)?;
    encode_from_stage1(net, x, &ov, cfg, scale)
}

/// Pipeline from a stage-1 vector onwards; lets rate sweeps share stage 1.
pub fn encode_from_stage1(
    net: &VectorFieldNet,
    x: &[f64],
    ov: &OneVector,
    cfg: &CodecConfig,
    scale: Option<ScaleOptions>,
) -> Result<Encoded> {
    cfg.validate()?;
    check_len(net.input_dim(), x.len())?;
    if ov.k() != cfg.k || ov.proj_seed != cfg.proj_seed {
        return Err(Error::Config(
            "stage-1 vector does not match the codec config".into(),
        ));
    }
    let (ov2, qc, em) = stage(
        "stage 2",
        fit_stage2(net, ov, x, cfg.lambda, &cfg.stage2_config()),
    )?;
    let symbols = stage("quantize", quantize(&ov2.v, qc.scale))?;
    let table = stage("entropy model", em.freq_table(cfg.q_max))?;
    let payload = range_encode(&symbols, &table);
    let mut b = Bitstream {
        config_digest: cfg.digest(),
        proj_seed: cfg.proj_seed,
        sampler_seed: cfg.sampler_seed,
        scale: qc.scale as f32,
        psi: em.psi.map(|p| p as f32),
        symbol_count: symbols.len() as u32,
        payload,
        scaling: None,
    };
    if let Some(opts) = scale {
        let v_hat = stage("scaling", decode_vector(net, &b, cfg))?;
        let field = AdaptedNet::new(net, &v_hat)?;
        let sc = ScalingConfig {
            grid: TimeGrid::uniform(opts.steps as usize, cfg.eta0, cfg.eta1)?,
            candidates: opts.candidates,
            seed: opts.seed,
        };
        let (trace, _) = stage("scaling", encode_scaled(&field, x, &sc))?;
        b.scaling = Some(trace);
    }
    let bytes = b.serialize();
    let parsed = Bitstream::parse(&bytes)?;
    let reconstruction = stage("decode", decode(net, &parsed, cfg))?;
    Ok(Encoded {
        accounting: b.accounting(x.len()),
        model_bits: table.cost_bits(&symbols),
        bitstream: b,
        bytes,
        reconstruction,
        symbols,
    })
}

fn check_digest(b: &Bitstream, cfg: &CodecConfig) -> Result<()> {
    let want = cfg.digest();
    if b.config_digest != want {
        return Err(Error::Config(format!(
            "config digest mismatch: stream has {}, config gives {}; decode with the config used to encode",
            hex(&b.config_digest),
            hex(&want)
        )));
    }
    Ok(())
}

/// Range-decodes and dequantises the adaptation vector.
pub fn decode_vector(net: &VectorFieldNet, b: &Bitstream, cfg: &CodecConfig) -> Result<OneVector> {
    check_digest(b, cfg)?;
    if b.symbol_count as usize != cfg.k {
        return Err(Error::Integrity(format!(
            "stream carries {} symbols, config expects k = {}",
            b.symbol_count, cfg.k
        )));
    }
    let spec = LoraSpec::all_layers(net, cfg.rank)?;
    let table = b.entropy_model().freq_table(cfg.q_max)?;
    let q = range_decode(&b.payload, b.symbol_count as usize, &table)?;
    let s = b.scale as f64;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Format(format!("bad quantizer scale {s}")));
    }
    Ok(OneVector {
        v: dequantize(&q, s)?,
        spec,
        proj_seed: b.proj_seed,
    })
}

/// Decodes with any field standing in for the adapted network: ODE on the
/// config grid, or trace replay when a scaling block is present.
pub fn reconstruct<V: VectorField + ?Sized>(
    field: &V,
    b: &Bitstream,
    cfg: &CodecConfig,
) -> Result<Vec<f64>> {
    match &b.scaling {
        Some(trace) => {
            let grid = TimeGrid::uniform(trace.steps as usize, cfg.eta0, cfg.eta1)?;
            decode_scaled(field, trace, &grid)
        }
        None => reconstruct_early(field, b, cfg, 0),
    }
}

/// ODE decode stopped at grid boundary `stop_index`, then the one-step map.
pub fn reconstruct_early<V: VectorField + ?Sized>(
    field: &V,
    b: &Bitstream,
    cfg: &CodecConfig,
    stop_index: usize,
) -> Result<Vec<f64>> {
    let grid = cfg.grid()?;
    ode_decode_early(
        field,
        initial_noise(b.sampler_seed, field.dim()),
        &grid,
        stop_index,
    )
}

pub fn decode(net: &VectorFieldNet, b: &Bitstream, cfg: &CodecConfig) -> Result<Vec<f64>> {
    let ov = decode_vector(net, b, cfg)?;
    reconstruct(&AdaptedNet::new(net, &ov)?, b, cfg)
}

pub fn decode_early(
    net: &VectorFieldNet,
    b: &Bitstream,
    cfg: &CodecConfig,
    stop_index: usize,
) -> Result<Vec<f64>> {
    let ov = decode_vector(net, b, cfg)?;
    reconstruct_early(&AdaptedNet::new(net, &ov)?, b, cfg, stop_index)
}
