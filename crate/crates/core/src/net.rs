//! Small time-conditioned MLP vector field with hand-written reverse mode.
//!
//! Input is `[x_t | emb(t)]` where `emb` has `time_embed_dim` sinusoidal
//! features. Hidden layers apply the configured activation; the output layer
//! is linear. Weights are stored `(fan_in, fan_out)` so a batch forward is
//! `X W + b`. An optional fixed [`GaussianPrior`] field is added to the output;
//! it has no trainable parameters.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::dynamics::{VectorField, ETA0, ETA1};
use crate::error::{check_len, Error, Result};
use crate::prior::GaussianPrior;
use crate::prng::{Domain, PrngStream};

const CHECKPOINT_MAGIC: &[u8; 4] = b"VFNN";
const CHECKPOINT_VERSION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Start the output layer at zero so the untrained field is identically 0.
    pub zero_init_output: bool,
}

impl NetConfig {
    /// Three hidden SiLU layers of width 256 and 16 time features.
    pub fn toy(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![256, 256, 256],
            time_embed_dim: 16,
            activation: Activation::Silu,
            seed,
            zero_init_output: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim + self.time_embed_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.input_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Additive weight updates, one optional `(fan_in, fan_out)` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeltas(pub Vec<Option<Array2<f64>>>);

impl LayerDeltas {
    pub fn none(layers: usize) -> Self {
        Self(vec![None; layers])
    }
}

/// Per-layer gradients of a scalar loss.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub dw: Vec<Array2<f64>>,
    pub db: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldNet {
    config: NetConfig,
    layers: Vec<Dense>,
    prior: Option<GaussianPrior>,
}

/// Cached activations from a batch forward pass.
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    effective: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

pub fn time_embedding(t: f64, features: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), features);
    let pairs = features.div_ceil(2);
    for (j, o) in out.iter_mut().enumerate() {
        let i = j / 2;
        let freq = if pairs > 1 {
            100f64.powf(i as f64 / (pairs - 1) as f64)
        } else {
            1.0
        };
        *o = if j % 2 == 0 {
            (freq * t).sin()
        } else {
            (freq * t).cos()
        };
    }
}

impl VectorFieldNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let init = PrngStream::new(config.seed, Domain::NetInit);
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let w = if l == last && config.zero_init_output {
                    Array2::zeros((fan_in, fan_out))
                } else {
                    let scale = (1.0 / fan_in as f64).sqrt();
                    let z = init.normals(l as u32, 0, fan_in * fan_out);
                    Array2::from_shape_vec((fan_in, fan_out), z)
                        .expect("shape")
                        .mapv(|v| v * scale)
                };
                Dense {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            prior: None,
        })
    }

    /// Adds a fixed Gaussian skip field to the network output.
    pub fn with_prior(mut self, prior: GaussianPrior) -> Result<Self> {
        check_len(self.config.input_dim, prior.dim())?;
        self.prior = Some(prior);
        Ok(self)
    }

    pub fn prior(&self) -> Option<&GaussianPrior> {
        self.prior.as_ref()
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Network input rows `[x_t | emb(t)]`.
    pub fn input_matrix(&self, xs: &Array2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        check_len(self.config.input_dim, xs.ncols())?;
        check_len(xs.nrows(), ts.len())?;
        let d = self.config.input_dim;
        let e = self.config.time_embed_dim;
        let mut input = Array2::zeros((xs.nrows(), d + e));
        for (r, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("row-major");
            for (dst, src) in row[..d].iter_mut().zip(xs.row(r).iter()) {
                *dst = *src;
            }
            time_embedding(ts[r], e, &mut row[d..]);
        }
        Ok(input)
    }

    fn check_deltas(&self, delta: Option<&LayerDeltas>) -> Result<()> {
        if let Some(d) = delta {
            check_len(self.layers.len(), d.0.len())?;
            for (layer, dw) in self.layers.iter().zip(&d.0) {
                if let Some(dw) = dw {
                    if dw.dim() != layer.w.dim() {
                        return Err(Error::Dimension {
                            expected: layer.w.len(),
                            got: dw.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Batch forward keeping everything the backward pass needs.
    pub fn forward_cached(
        &self,
        xs: &Array2<f64>,
        ts: &[f64],
        delta: Option<&LayerDeltas>,
    ) -> Result<ForwardCache> {
        self.check_deltas(delta)?;
        let act = self.config.activation;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut effective = Vec::with_capacity(self.layers.len());
        let mut h = self.input_matrix(xs, ts)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = match delta.and_then(|d| d.0[l].as_ref()) {
                Some(dw) => &layer.w + dw,
                None => layer.w.clone(),
            };
            let mut z = h.dot(&w);
            z += &layer.b;
            inputs.push(h);
            effective.push(w);
            if l == last {
                if let Some(p) = &self.prior {
                    z += &p.field_batch(xs, ts);
                }
                return Ok(ForwardCache {
                    inputs,
                    pre,
                    effective,
                    output: z,
                });
            }
            h = z.mapv(|v| act.apply(v));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Batch forward: one row of `xs` per time in `ts`.
    pub fn forward_batch(
        &self,
        xs: &Array2<f64>,
        ts: &[f64],
        delta: Option<&LayerDeltas>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_cached(xs, ts, delta)?.output)
    }

    /// `v(x_t, t)` for a single state.
    pub fn forward(&self, x_t: &[f64], t: f64, delta: Option<&LayerDeltas>) -> Result<Vec<f64>> {
        check_len(self.config.input_dim, x_t.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("network time {t} outside [0, 1]")));
        }
        let xs = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).expect("shape");
        let out = self.forward_batch(&xs, &[t], delta)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Backpropagates `dL/d output` through a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> NetGrads {
        let act = self.config.activation;
        let n = self.layers.len();
        let mut dw = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        let mut g = grad_out;
        for l in (0..n).rev() {
            dw.push(cache.inputs[l].t().dot(&g));
            db.push(g.sum_axis(Axis(0)));
            if l > 0 {
                let mut dx = g.dot(&cache.effective[l].t());
                dx.zip_mut_with(&cache.pre[l - 1], |d, &z| *d *= act.derivative(z));
                g = dx;
            }
        }
        dw.reverse();
        db.reverse();
        NetGrads { dw, db }
    }

    /// Flat parameter vector in declaration order (per layer: W row-major, then b).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.param_count(), flat.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(c.time_embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&c.activation.code().to_le_bytes());
        out.push(c.zero_init_output as u8);
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(c.hidden_dims.len() as u32).to_le_bytes());
        for &h in &c.hidden_dims {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.push(self.prior.is_some() as u8);
        for v in self.flat_params() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(p) = &self.prior {
            for v in p.mean.iter().chain(&p.variances).chain(p.basis.iter()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let input_dim = r.u32()? as usize;
        let time_embed_dim = r.u32()? as usize;
        let activation = Activation::from_code(r.u32()?)?;
        let zero_init_output = r.u8()? != 0;
        let seed = r.u64()?;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 64 {
            return Err(Error::Format(format!(
                "implausible hidden layer count {n_hidden}"
            )));
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| r.u32().map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let config = NetConfig {
            input_dim,
            hidden_dims,
            time_embed_dim,
            activation,
            seed,
            zero_init_output,
        };
        config
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let has_prior = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad prior flag {f}"))),
        };
        let count: usize = config.layer_shapes().iter().map(|(i, o)| i * o + o).sum();
        let prior_count = if has_prior {
            input_dim * (input_dim + 2)
        } else {
            0
        };
        if r.remaining() != (count + prior_count) * 4 {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameter bytes, config needs {}",
                r.remaining(),
                (count + prior_count) * 4
            )));
        }
        let mut read =
            |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.f32().map(|v| v as f64)).collect() };
        let flat = read(count)?;
        let mut net = Self::new(config)?;
        net.set_flat_params(&flat)?;
        if has_prior {
            let mean = read(input_dim)?;
            let variances = read(input_dim)?;
            let basis =
                Array2::from_shape_vec((input_dim, input_dim), read(input_dim * input_dim)?)
                    .expect("shape");
            net.prior = Some(GaussianPrior {
                mean,
                basis,
                variances,
            });
        }
        Ok(net)
    }

    /// The network as stored in a checkpoint: parameters rounded to f32.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.w.mapv_inplace(|v| v as f32 as f64);
            l.b.mapv_inplace(|v| v as f32 as f64);
        }
        out.prior = self.prior.as_ref().map(GaussianPrior::rounded_to_f32);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Adapts the network into a [`VectorField`] with optional weight deltas.
    pub fn field<'a>(&'a self, delta: Option<&'a LayerDeltas>) -> NetField<'a> {
        NetField { net: self, delta }
    }
}

/// A network plus optional adaptation, evaluated as a vector field.
#[derive(Clone, Copy)]
pub struct NetField<'a> {
    net: &'a VectorFieldNet,
    delta: Option<&'a LayerDeltas>,
}

impl VectorField for NetField<'_> {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net.forward(x, t, self.delta)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated input: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// One flow-matching training example: target `x`, time `t`, noise `eps`.
#[derive(Debug, Clone)]
pub struct FmSample<'a> {
    pub x: &'a [f64],
    pub t: f64,
    pub eps: Vec<f64>,
}

/// Batch loss `mean_b ||v(x_t, t) - (eps - x)||^2` and its gradients.
pub fn loss_fm_and_grad(
    net: &VectorFieldNet,
    delta: Option<&LayerDeltas>,
    batch: &[FmSample<'_>],
) -> Result<(f64, NetGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let d = net.input_dim();
    let b = batch.len();
    let mut xt = Array2::zeros((b, d));
    let mut target = Array2::zeros((b, d));
    let mut ts = Vec::with_capacity(b);
    for (r, s) in batch.iter().enumerate() {
        check_len(d, s.x.len())?;
        check_len(d, s.eps.len())?;
        for j in 0..d {
            xt[[r, j]] = (1.0 - s.t) * s.x[j] + s.t * s.eps[j];
            target[[r, j]] = s.eps[j] - s.x[j];
        }
        ts.push(s.t);
    }
    let cache = net.forward_cached(&xt, &ts, delta)?;
    let resid = &cache.output - &target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    let grad_out = resid * (2.0 / b as f64);
    let grads = net.backward(&cache, grad_out);
    Ok((loss, grads))
}

/// Decoupled-weight-decay Adam over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eta0: f64,
    pub eta1: f64,
    /// Cosine-anneal the learning rate down to `lr_floor * lr`.
    pub cosine: bool,
    pub lr_floor: f64,
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine || self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * c)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1.5e-3,
            weight_decay: 1e-4,
            seed: 0,
            eta0: ETA0,
            eta1: ETA1,
            cosine: true,
            lr_floor: 0.05,
        }
    }
}

/// Draws the `(t, eps)` pair for batch element `elem` of step `step`.
/// Returns the uniform used for example selection alongside.
pub fn draw_fm_noise(
    stream: &PrngStream,
    step: usize,
    elem: usize,
    dim: usize,
    eta0: f64,
    eta1: f64,
) -> (f64, f64, Vec<f64>) {
    let u = stream.uniforms(step as u32, 2 * elem as u32, 2);
    let t = eta0 + (1.0 - eta0 - eta1) * u[1];
    let eps = stream.normals(step as u32, 2 * elem as u32 + 1, dim);
    (u[0], t, eps)
}

fn flat_grads(g: &NetGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (dw, db) in g.dw.iter().zip(&g.db) {
        out.extend(dw.iter());
        out.extend(db.iter());
    }
    out
}

/// Flow-matching training of all base parameters on a corpus.
/// Returns the trained network and the per-step minibatch loss.
pub fn train_base(
    init: &VectorFieldNet,
    corpus: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(VectorFieldNet, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    for x in corpus {
        check_len(init.input_dim(), x.len())?;
    }
    let mut net = init.clone();
    let mut params = net.flat_params();
    let mut opt = AdamW::new(params.len(), cfg.lr, cfg.weight_decay);
    let stream = PrngStream::new(cfg.seed, Domain::Train);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<FmSample> = (0..cfg.batch)
            .map(|e| {
                let (u, t, eps) =
                    draw_fm_noise(&stream, step, e, net.input_dim(), cfg.eta0, cfg.eta1);
                let idx = ((u * corpus.len() as f64) as usize).min(corpus.len() - 1);
                FmSample {
                    x: &corpus[idx],
                    t,
                    eps,
                }
            })
            .collect();
        let (loss, grads) = loss_fm_and_grad(&net, None, &batch).map_err(|e| Error::Training {
            step,
            msg: e.to_string(),
        })?;
        let g = flat_grads(&grads);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Training {
                step,
                msg: "non-finite gradient".into(),
            });
        }
        opt.lr = cfg.lr_at(step);
        opt.step(&mut params, &g);
        net.set_flat_params(&params)?;
        losses.push(loss);
    }
    Ok((net, losses))
}

/// Everything needed to build and train a toy base model: architecture,
/// prior and optimiser settings. Stored as flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseRecipe {
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub net_seed: u64,
    /// Add the fitted Gaussian prior field; variances are floored at `prior_floor`.
    pub prior: bool,
    pub prior_floor: f64,
    pub train: TrainConfig,
}

impl Default for BaseRecipe {
    fn default() -> Self {
        let toy = NetConfig::toy(1, 0);
        Self {
            hidden_dims: toy.hidden_dims,
            time_embed_dim: toy.time_embed_dim,
            activation: toy.activation,
            net_seed: 0,
            prior: true,
            prior_floor: 1e-4,
            train: TrainConfig::default(),
        }
    }
}

impl BaseRecipe {
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden_dims.iter().map(|h| h.to_string()).collect();
        let t = &self.train;
        format!(
            "hidden = {}\ntime_embed = {}\nactivation = {}\nnet_seed = {}\nprior = {}\nprior_floor = {}\n\
             steps = {}\nbatch = {}\nlr = {}\nweight_decay = {}\ntrain_seed = {}\ncosine = {}\nlr_floor = {}\n",
            hidden.join(","),
            self.time_embed_dim,
            self.activation.name(),
            self.net_seed,
            self.prior,
            self.prior_floor,
            t.steps,
            t.batch,
            t.lr,
            t.weight_decay,
            t.seed,
            t.cosine,
            t.lr_floor
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for kv in crate::io::parse_key_values(text)? {
            match kv.key.as_str() {
                "hidden" => {
                    r.hidden_dims = kv
                        .value
                        .split(',')
                        .map(|h| {
                            h.trim().parse().map_err(|e| {
                                Error::Config(format!(
                                    "line {}: bad layer width {h:?}: {e}",
                                    kv.line
                                ))
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "time_embed" => r.time_embed_dim = kv.parse()?,
                "activation" => r.activation = Activation::from_name(&kv.value)?,
                "net_seed" => r.net_seed = kv.parse()?,
                "prior" => r.prior = kv.parse()?,
                "prior_floor" => r.prior_floor = kv.parse()?,
                "steps" => r.train.steps = kv.parse()?,
                "batch" => r.train.batch = kv.parse()?,
                "lr" => r.train.lr = kv.parse()?,
                "weight_decay" => r.train.weight_decay = kv.parse()?,
                "train_seed" => r.train.seed = kv.parse()?,
                "cosine" => r.train.cosine = kv.parse()?,
                "lr_floor" => r.train.lr_floor = kv.parse()?,
                _ => return Err(kv.unknown()),
            }
        }
        if r.train.batch == 0 || !(r.train.lr > 0.0) || !(r.prior_floor > 0.0) {
            return Err(Error::Config(
                "batch, lr and prior_floor must be positive".into(),
            ));
        }
        Ok(r)
    }

    pub fn net_config(&self, input_dim: usize) -> NetConfig {
        NetConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            time_embed_dim: self.time_embed_dim,
            activation: self.activation,
            seed: self.net_seed,
            zero_init_output: true,
        }
    }

    /// Builds the initial net (with the prior fitted on `corpus` if enabled),
    /// trains it, and returns it rounded to checkpoint precision together
    /// with the per-step loss.
    pub fn train(&self, corpus: &[Vec<f64>]) -> Result<(VectorFieldNet, Vec<f64>)> {
        let dim = corpus
            .first()
            .map(|x| x.len())
            .ok_or_else(|| Error::Config("empty training corpus".into()))?;
        let mut init = VectorFieldNet::new(self.net_config(dim))?;
        if self.prior {
            init = init.with_prior(GaussianPrior::fit(corpus, self.prior_floor)?)?;
        }
        let (net, losses) = train_base(&init, corpus, &self.train)?;
        Ok((net.rounded_to_f32(), losses))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked_params: usize,
}

impl GradReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares `analytic` against central differences of `loss` at `indices`.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    params: &[f64],
    analytic: &[f64],
    loss: impl Fn(&[f64]) -> f64,
    indices: &[usize],
    step: f64,
    floor: f64,
) -> GradReport {
    let mut p = params.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for &i in indices {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
    }
    GradReport {
        max_rel_err,
        checked_params: indices.len(),
    }
}

/// Picks `count` distinct parameter indices with a deterministic stream.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let s = PrngStream::new(seed, Domain::Eval);
    if count >= len {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(count);
    let mut i = 0u32;
    while picked.len() < count {
        let j = s.below(i, 0xFFFF, len as u32) as usize;
        if !picked.contains(&j) {
            picked.push(j);
        }
        i += 1;
    }
    picked
}

/// Fixed small batch used by the gradient checks.
pub(crate) fn probe_batch(
    dim: usize,
    seed: u64,
    size: usize,
) -> (Vec<Vec<f64>>, Vec<(f64, Vec<f64>)>) {
    let s = PrngStream::new(seed, Domain::Eval);
    let xs: Vec<Vec<f64>> = (0..size)
        .map(|i| s.normals(1000 + i as u32, 0, dim))
        .collect();
    let noise = (0..size)
        .map(|i| {
            let (_, t, eps) = draw_fm_noise(&s, 7, i, dim, ETA0, ETA1);
            (t, eps)
        })
        .collect();
    (xs, noise)
}

/// Checks base-parameter gradients of the flow-matching loss (with `delta`
/// held fixed) against central differences on at least 64 parameters.
pub fn grad_check(
    net: &VectorFieldNet,
    delta: Option<&LayerDeltas>,
    seed: u64,
) -> Result<GradReport> {
    let (xs, noise) = probe_batch(net.input_dim(), seed, 4);
    let batch: Vec<FmSample> = xs
        .iter()
        .zip(&noise)
        .map(|(x, (t, eps))| FmSample {
            x,
            t: *t,
            eps: eps.clone(),
        })
        .collect();
    let (_, grads) = loss_fm_and_grad(net, delta, &batch)?;
    let analytic = flat_grads(&grads);
    let params = net.flat_params();
    let indices = sample_indices(params.len(), 64, seed ^ 0x5EED);
    let loss = |p: &[f64]| {
        let mut n = net.clone();
        n.set_flat_params(p).expect("length");
        loss_fm_and_grad(&n, delta, &batch)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    };
    Ok(check_gradients(
        &params, &analytic, loss, &indices, 1e-5, 1e-7,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::optimal_vf;

    fn small(seed: u64) -> VectorFieldNet {
        VectorFieldNet::new(NetConfig {
            input_dim: 3,
            hidden_dims: vec![8, 8],
            time_embed_dim: 4,
            activation: Activation::Silu,
            seed,
            zero_init_output: false,
        })
        .unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let net = VectorFieldNet::new(NetConfig::toy(5, 1)).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert!(net
                .forward(&[1.0, -2.0, 0.5, 3.0, 0.1], t, None)
                .unwrap()
                .iter()
                .all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_delta_is_bit_exact() {
        let net = small(2);
        let zeros = LayerDeltas(
            net.layers()
                .iter()
                .map(|l| Some(Array2::zeros(l.w.dim())))
                .collect(),
        );
        let x = [0.3, -0.1, 0.9];
        assert_eq!(
            net.forward(&x, 0.4, None).unwrap(),
            net.forward(&x, 0.4, Some(&zeros)).unwrap()
        );
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = small(7);
        let b = small(7);
        assert_eq!(a, b);
        assert_eq!(
            a.forward(&[1.0, 2.0, 3.0], 0.5, None).unwrap(),
            b.forward(&[1.0, 2.0, 3.0], 0.5, None).unwrap()
        );
        assert_ne!(a, small(8));
    }

    #[test]
    fn shape_errors() {
        let net = small(1);
        assert!(matches!(
            net.forward(&[1.0], 0.5, None),
            Err(Error::Dimension { .. })
        ));
        let bad = LayerDeltas(vec![None]);
        assert!(net.forward(&[1.0, 2.0, 3.0], 0.5, Some(&bad)).is_err());
    }

    #[test]
    fn batch_forward_matches_single() {
        let net = small(3);
        let xs = Array2::from_shape_vec((2, 3), vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        let out = net.forward_batch(&xs, &[0.2, 0.8], None).unwrap();
        let r1 = net.forward(&[-1.0, 0.0, 2.0], 0.8, None).unwrap();
        for j in 0..3 {
            assert!((out[[1, j]] - r1[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_zero_when_net_matches_target() {
        // Identity activation, zero hidden path: output = bias. Pick a batch
        // whose target eps - x equals the bias.
        let mut net = VectorFieldNet::new(NetConfig {
            input_dim: 2,
            hidden_dims: vec![3],
            time_embed_dim: 2,
            activation: Activation::Identity,
            seed: 0,
            zero_init_output: true,
        })
        .unwrap();
        net.layers_mut()[1].b = Array1::from(vec![0.5, -0.25]);
        let x = vec![1.0, 1.0];
        let batch = vec![
            FmSample {
                x: &x,
                t: 0.3,
                eps: vec![1.5, 0.75],
            },
            FmSample {
                x: &x,
                t: 0.9,
                eps: vec![1.5, 0.75],
            },
        ];
        let (loss, grads) = loss_fm_and_grad(&net, None, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(flat_grads(&grads).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn one_by_one_linear_gradient_by_hand() {
        // v = w * x_t + b (identity activation, no hidden layer, no time features).
        let mut net = VectorFieldNet::new(NetConfig {
            input_dim: 1,
            hidden_dims: vec![],
            time_embed_dim: 0,
            activation: Activation::Identity,
            seed: 0,
            zero_init_output: true,
        })
        .unwrap();
        net.layers_mut()[0].w[[0, 0]] = 0.7;
        net.layers_mut()[0].b[0] = -0.2;
        let x = vec![2.0];
        let (t, eps) = (0.4, 0.5);
        let batch = vec![FmSample {
            x: &x,
            t,
            eps: vec![eps],
        }];
        let (loss, g) = loss_fm_and_grad(&net, None, &batch).unwrap();
        let xt = (1.0 - t) * 2.0 + t * eps;
        let r = 0.7 * xt - 0.2 - (eps - 2.0);
        assert!((loss - r * r).abs() < 1e-14);
        assert!((g.dw[0][[0, 0]] - 2.0 * r * xt).abs() < 1e-13);
        assert!((g.db[0][0] - 2.0 * r).abs() < 1e-13);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let r = grad_check(&small(seed), None, seed).unwrap();
            assert!(r.checked_params >= 64);
            assert!(r.within(1e-3), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn linear_net_gradients_near_exact() {
        let net = VectorFieldNet::new(NetConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            time_embed_dim: 2,
            activation: Activation::Identity,
            seed: 4,
            zero_init_output: false,
        })
        .unwrap();
        let r = grad_check(&net, None, 1).unwrap();
        assert!(r.within(1e-7), "{r:?}");
    }

    #[test]
    fn gradients_with_delta_match() {
        let net = small(5);
        let s = PrngStream::new(99, Domain::Eval);
        let d = LayerDeltas(
            net.layers()
                .iter()
                .enumerate()
                .map(|(l, layer)| {
                    let (i, o) = layer.w.dim();
                    Some(
                        Array2::from_shape_vec((i, o), s.normals(l as u32, 0, i * o)).unwrap()
                            * 0.1,
                    )
                })
                .collect(),
        );
        let r = grad_check(&net, Some(&d), 3).unwrap();
        assert!(r.within(1e-3), "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let net = small(6);
        let (xs, noise) = probe_batch(3, 6, 4);
        let batch: Vec<FmSample> = xs
            .iter()
            .zip(&noise)
            .map(|(x, (t, e))| FmSample {
                x,
                t: *t,
                eps: e.clone(),
            })
            .collect();
        let (_, grads) = loss_fm_and_grad(&net, None, &batch).unwrap();
        let mut analytic = flat_grads(&grads);
        for g in analytic.iter_mut() {
            *g *= 1.1;
        }
        let params = net.flat_params();
        let idx = sample_indices(params.len(), 64, 1);
        let r = check_gradients(
            &params,
            &analytic,
            |p| {
                let mut n = net.clone();
                n.set_flat_params(p).unwrap();
                loss_fm_and_grad(&n, None, &batch).unwrap().0
            },
            &idx,
            1e-5,
            1e-7,
        );
        assert!(r.max_rel_err > 1e-2, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small(9);
        let bytes = net.to_bytes();
        let back = VectorFieldNet::from_bytes(&bytes).unwrap();
        assert_eq!(back, net.rounded_to_f32());
        assert_eq!(back.to_bytes(), bytes);
        assert!(VectorFieldNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            VectorFieldNet::from_bytes(&bad),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn recipe_text_round_trip() {
        let r = BaseRecipe {
            hidden_dims: vec![32, 8],
            activation: Activation::Tanh,
            prior: false,
            ..Default::default()
        };
        assert_eq!(BaseRecipe::from_text(&r.to_text()).unwrap(), r);
        assert!(BaseRecipe::from_text("widths = 3").is_err());
        assert!(BaseRecipe::from_text("hidden = 4,x").is_err());
    }

    #[test]
    fn checkpoint_round_trip_with_prior() {
        let corpus: Vec<Vec<f64>> = (0..10)
            .map(|i| PrngStream::new(i, Domain::Eval).normals(0, 0, 3))
            .collect();
        let net = small(4)
            .with_prior(GaussianPrior::fit(&corpus, 1e-4).unwrap())
            .unwrap();
        let bytes = net.to_bytes();
        let back = VectorFieldNet::from_bytes(&bytes).unwrap();
        assert_eq!(back, net.rounded_to_f32());
        assert!(VectorFieldNet::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let x = [0.1, -0.4, 0.7];
        let plain = small(4).forward(&x, 0.6, None).unwrap();
        let with = net.forward(&x, 0.6, None).unwrap();
        let g = net
            .prior()
            .unwrap()
            .field_batch(&ndarray::arr2(&[x]), &[0.6]);
        for j in 0..3 {
            assert!((with[j] - plain[j] - g[[0, j]]).abs() < 1e-12);
        }
        assert!(grad_check(&net, None, 3).unwrap().within(1e-3));
    }

    #[test]
    fn zero_steps_returns_init() {
        let net = small(1);
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (trained, losses) = train_base(&net, &[vec![0.0; 3]], &cfg).unwrap();
        assert_eq!(trained, net);
        assert!(losses.is_empty());
        assert!(train_base(&net, &[], &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let net = small(1);
        let cfg = TrainConfig {
            steps: 20,
            batch: 8,
            ..Default::default()
        };
        let corpus = vec![vec![0.1, 0.5, 0.9], vec![0.9, 0.5, 0.1]];
        let (a, la) = train_base(&net, &corpus, &cfg).unwrap();
        let (b, lb) = train_base(&net, &corpus, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn single_point_corpus_learns_optimal_field() {
        let dim = 4;
        let x = vec![0.2, 0.8, 0.5, 0.1];
        let init = VectorFieldNet::new(NetConfig {
            input_dim: dim,
            hidden_dims: vec![64, 64, 64],
            time_embed_dim: 16,
            activation: Activation::Silu,
            seed: 3,
            zero_init_output: true,
        })
        .unwrap();
        let cfg = TrainConfig {
            steps: 3000,
            batch: 64,
            lr: 2e-3,
            ..Default::default()
        };
        let (net, _) = train_base(&init, std::slice::from_ref(&x), &cfg).unwrap();
        let s = PrngStream::new(77, Domain::Eval);
        let mut ratios = Vec::new();
        for i in 0..200 {
            let (_, t, eps) = draw_fm_noise(&s, i, 0, dim, 0.05, ETA1);
            let xt: Vec<f64> = x
                .iter()
                .zip(&eps)
                .map(|(a, e)| (1.0 - t) * a + t * e)
                .collect();
            let v = net.forward(&xt, t, None).unwrap();
            let want = optimal_vf(&xt, t, &x).unwrap();
            let err: f64 = v
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = want.iter().map(|a| a * a).sum::<f64>().sqrt();
            ratios.push(err / scale);
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!(median < 0.05, "median residual ratio {median}");
    }

    #[test]
    fn gaussian_data_learns_closed_form_field() {
        // x ~ N(0, s^2): E[eps - x | x_t] = (t - (1 - t) s^2) x_t / ((1 - t)^2 s^2 + t^2).
        let sd: f64 = 0.5;
        let s = PrngStream::new(5, Domain::Corpus);
        let corpus: Vec<Vec<f64>> = s
            .normals(0, 0, 4096)
            .into_iter()
            .map(|z| vec![sd * z])
            .collect();
        let init = VectorFieldNet::new(NetConfig {
            input_dim: 1,
            hidden_dims: vec![64, 64],
            time_embed_dim: 8,
            activation: Activation::Silu,
            seed: 2,
            zero_init_output: true,
        })
        .unwrap();
        let cfg = TrainConfig {
            steps: 4000,
            batch: 128,
            lr: 2e-3,
            ..Default::default()
        };
        let (net, _) = train_base(&init, &corpus, &cfg).unwrap();
        let probe = PrngStream::new(6, Domain::Eval);
        let mut rel = Vec::new();
        for i in 0..400 {
            let u = probe.uniforms(i, 0, 2);
            let t = 0.05 + 0.9 * u[0];
            let var = (1.0 - t).powi(2) * sd * sd + t * t;
            let xt = probe.normals(i, 1, 1)[0] * var.sqrt();
            let want = (t - (1.0 - t) * sd * sd) * xt / var;
            let got = net.forward(&[xt], t, None).unwrap()[0];
            rel.push((got - want).abs() / want.abs().max(1e-12));
        }
        rel.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = rel[rel.len() / 2];
        assert!(median < 0.05, "median relative error {median}");
    }
}
