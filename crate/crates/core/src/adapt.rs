//! Low-rank adaptation driven by one hashed vector.
//!
//! Every LoRA parameter `theta_j` (all `A` then `B` entries, layer by layer,
//! row-major) reads one coordinate of the shared vector `v`:
//! `theta_j = s_j * v[h(j)] / sqrt(|bucket h(j)|)`. Buckets come from a seeded
//! permutation of parameter indices taken modulo `k`, so bucket sizes differ by
//! at most one and the map is an isometry whenever `k <= P`.

use ndarray::Array2;

use crate::dynamics::{ode_decode, VectorField};
use crate::error::{check_len, Error, Result};
use crate::eval::psnr;
use crate::net::{
    check_gradients, draw_fm_noise, loss_fm_and_grad, sample_indices, AdamW, FmSample, GradReport,
    LayerDeltas, NetGrads, TrainConfig, VectorFieldNet,
};
use crate::prng::{Domain, PrngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraLayer {
    pub layer: usize,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraSpec {
    pub rank: usize,
    pub layers: Vec<LoraLayer>,
}

impl LoraSpec {
    /// Adapts every dense layer of `net` with the given rank.
    pub fn all_layers(net: &VectorFieldNet, rank: usize) -> Result<Self> {
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .map(|(layer, d)| LoraLayer {
                layer,
                m: d.w.nrows(),
                n: d.w.ncols(),
            })
            .collect();
        let spec = Self { rank, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("no adapted layers".into()));
        }
        for l in &self.layers {
            if self.rank == 0 || self.rank > l.m.min(l.n) {
                return Err(Error::Config(format!(
                    "rank {} invalid for {}x{} layer {}",
                    self.rank, l.m, l.n, l.layer
                )));
            }
        }
        Ok(())
    }

    /// Total LoRA parameter count `P`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| self.rank * (l.m + l.n)).sum()
    }

    fn check_net(&self, net: &VectorFieldNet) -> Result<()> {
        for l in &self.layers {
            let d = net
                .layers()
                .get(l.layer)
                .ok_or_else(|| Error::Integrity(format!("net has no layer {}", l.layer)))?;
            if d.w.dim() != (l.m, l.n) {
                return Err(Error::Integrity(format!(
                    "layer {} is {:?}, expected {}x{}",
                    l.layer,
                    d.w.dim(),
                    l.m,
                    l.n
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashProjection {
    pub seed: u64,
    pub k: usize,
    pub bucket: Vec<u32>,
    pub sign: Vec<f64>,
    pub col_norm: Vec<f64>,
}

impl HashProjection {
    pub fn param_count(&self) -> usize {
        self.bucket.len()
    }

    /// `theta = Pi v`.
    pub fn expand(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.k, v.len())?;
        Ok(self
            .bucket
            .iter()
            .zip(&self.sign)
            .map(|(&b, &s)| {
                let b = b as usize;
                s * v[b] / self.col_norm[b]
            })
            .collect())
    }

    /// `Pi^T g`: pulls LoRA-parameter gradients back to the vector.
    pub fn pull_back(&self, grad_theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.param_count(), grad_theta.len())?;
        let mut out = vec![0.0; self.k];
        for ((&b, &s), g) in self.bucket.iter().zip(&self.sign).zip(grad_theta) {
            let b = b as usize;
            out[b] += s * g / self.col_norm[b];
        }
        Ok(out)
    }
}

pub fn build_projection(seed: u64, spec: &LoraSpec, k: usize) -> Result<HashProjection> {
    if k == 0 {
        return Err(Error::Config("vector length k must be >= 1".into()));
    }
    spec.validate()?;
    let p = spec.param_count();
    let stream = PrngStream::new(seed, Domain::Hash);
    let mut perm: Vec<u32> = (0..p as u32).collect();
    for i in (1..p).rev() {
        let j = stream.below(i as u32, 0, i as u32 + 1) as usize;
        perm.swap(i, j);
    }
    let bucket: Vec<u32> = perm.iter().map(|&q| q % k as u32).collect();
    let sign = (0..p)
        .map(|j| {
            if stream.words(j as u32, 1, 0)[0] >> 63 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let mut counts = vec![0usize; k];
    for &b in &bucket {
        counts[b as usize] += 1;
    }
    let col_norm = counts.iter().map(|&c| (c as f64).sqrt()).collect();
    Ok(HashProjection {
        seed,
        k,
        bucket,
        sign,
        col_norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneVector {
    pub v: Vec<f64>,
    pub spec: LoraSpec,
    pub proj_seed: u64,
}

impl OneVector {
    pub fn zeros(spec: LoraSpec, k: usize, proj_seed: u64) -> Self {
        Self {
            v: vec![0.0; k],
            spec,
            proj_seed,
        }
    }

    pub fn k(&self) -> usize {
        self.v.len()
    }
}

fn check_consistent(ov: &OneVector, proj: &HashProjection) -> Result<()> {
    if proj.seed != ov.proj_seed {
        return Err(Error::Integrity(format!(
            "projection seed {} does not match vector seed {}",
            proj.seed, ov.proj_seed
        )));
    }
    if proj.k != ov.v.len() || proj.param_count() != ov.spec.param_count() {
        return Err(Error::Integrity(format!(
            "projection (k={}, P={}) does not match vector (k={}, P={})",
            proj.k,
            proj.param_count(),
            ov.v.len(),
            ov.spec.param_count()
        )));
    }
    Ok(())
}

/// Splits flat LoRA parameters into per-layer `(A, B)` factors.
pub fn lora_factors(spec: &LoraSpec, theta: &[f64]) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    check_len(spec.param_count(), theta.len())?;
    let r = spec.rank;
    let mut off = 0;
    let mut out = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let a =
            Array2::from_shape_vec((l.m, r), theta[off..off + l.m * r].to_vec()).expect("shape");
        off += l.m * r;
        let b =
            Array2::from_shape_vec((r, l.n), theta[off..off + r * l.n].to_vec()).expect("shape");
        off += r * l.n;
        out.push((a, b));
    }
    Ok(out)
}

fn deltas_from_factors(
    spec: &LoraSpec,
    layers: usize,
    factors: &[(Array2<f64>, Array2<f64>)],
) -> LayerDeltas {
    let mut d = LayerDeltas::none(layers);
    for (l, (a, b)) in spec.layers.iter().zip(factors) {
        d.0[l.layer] = Some(a.dot(b));
    }
    d
}

/// `Delta W = A B` for every adapted layer, with `A`, `B` read from `v`.
pub fn expand_vector(ov: &OneVector, proj: &HashProjection, layers: usize) -> Result<LayerDeltas> {
    check_consistent(ov, proj)?;
    let theta = proj.expand(&ov.v)?;
    let factors = lora_factors(&ov.spec, &theta)?;
    if let Some(l) = ov.spec.layers.iter().find(|l| l.layer >= layers) {
        return Err(Error::Integrity(format!(
            "adapted layer {} out of range",
            l.layer
        )));
    }
    Ok(deltas_from_factors(&ov.spec, layers, &factors))
}

/// Chains per-layer `dL/dDelta W` through `A B` and the projection.
fn vector_grad(
    spec: &LoraSpec,
    proj: &HashProjection,
    factors: &[(Array2<f64>, Array2<f64>)],
    grads: &NetGrads,
) -> Result<Vec<f64>> {
    let mut gtheta = Vec::with_capacity(spec.param_count());
    for (l, (a, b)) in spec.layers.iter().zip(factors) {
        let gdw = &grads.dw[l.layer];
        gtheta.extend(gdw.dot(&b.t()).iter());
        gtheta.extend(a.t().dot(gdw).iter());
    }
    proj.pull_back(&gtheta)
}

/// Flow-matching loss on `batch` for the adapted net and its gradient in `v`.
pub fn loss_and_vector_grad(
    net: &VectorFieldNet,
    ov: &OneVector,
    proj: &HashProjection,
    batch: &[FmSample<'_>],
) -> Result<(f64, Vec<f64>)> {
    check_consistent(ov, proj)?;
    let theta = proj.expand(&ov.v)?;
    let factors = lora_factors(&ov.spec, &theta)?;
    let deltas = deltas_from_factors(&ov.spec, net.layers().len(), &factors);
    let (loss, grads) = loss_fm_and_grad(net, Some(&deltas), batch)?;
    let g = vector_grad(&ov.spec, proj, &factors, &grads)?;
    Ok((loss, g))
}

/// Stage-1 fitting options.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub train: TrainConfig,
    /// Standard deviation of the initial vector; `v = 0` is a saddle of `A B`.
    pub init_std: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 600,
                batch: 64,
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
            init_std: 1e-2,
        }
    }
}

pub fn initial_vector(spec: LoraSpec, k: usize, proj_seed: u64, cfg: &FitConfig) -> OneVector {
    let z = PrngStream::new(cfg.train.seed, Domain::VectorInit).normals(0, 0, k);
    OneVector {
        v: z.into_iter().map(|z| z * cfg.init_std).collect(),
        spec,
        proj_seed,
    }
}

/// Minimises the flow-matching loss for the single signal `x` over `v` only;
/// the base network is never modified.
///
/// `on_step(step, vector, loss)` is called after every update.
pub fn fit_vector_stage1_with(
    net: &VectorFieldNet,
    x: &[f64],
    spec: &LoraSpec,
    k: usize,
    proj_seed: u64,
    cfg: &FitConfig,
    on_step: &mut dyn FnMut(usize, &OneVector, f64),
) -> Result<OneVector> {
    check_len(net.input_dim(), x.len())?;
    spec.check_net(net)?;
    let proj = build_projection(proj_seed, spec, k)?;
    let mut ov = initial_vector(spec.clone(), k, proj_seed, cfg);
    let tc = &cfg.train;
    let mut opt = AdamW::new(k, tc.lr, tc.weight_decay);
    let stream = PrngStream::new(tc.seed, Domain::Train);
    for step in 0..tc.steps {
        let batch: Vec<FmSample> = (0..tc.batch)
            .map(|e| {
                let (_, t, eps) = draw_fm_noise(&stream, step, e, x.len(), tc.eta0, tc.eta1);
                FmSample { x, t, eps }
            })
            .collect();
        let (loss, g) =
            loss_and_vector_grad(net, &ov, &proj, &batch).map_err(|e| Error::Training {
                step,
                msg: e.to_string(),
            })?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Training {
                step,
                msg: "non-finite vector gradient".into(),
            });
        }
        opt.lr = tc.lr_at(step);
        opt.step(&mut ov.v, &g);
        on_step(step, &ov, loss);
    }
    Ok(ov)
}

pub fn fit_vector_stage1(
    net: &VectorFieldNet,
    x: &[f64],
    spec: &LoraSpec,
    k: usize,
    proj_seed: u64,
    cfg: &FitConfig,
) -> Result<OneVector> {
    fit_vector_stage1_with(net, x, spec, k, proj_seed, cfg, &mut |_, _, _| {})
}

/// An adapted network ready to be used as a vector field.
pub struct AdaptedNet<'a> {
    pub net: &'a VectorFieldNet,
    pub deltas: LayerDeltas,
}

impl<'a> AdaptedNet<'a> {
    pub fn new(net: &'a VectorFieldNet, ov: &OneVector) -> Result<Self> {
        ov.spec.check_net(net)?;
        let proj = build_projection(ov.proj_seed, &ov.spec, ov.k())?;
        let deltas = expand_vector(ov, &proj, net.layers().len())?;
        Ok(Self { net, deltas })
    }
}

impl VectorField for AdaptedNet<'_> {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net.forward(x, t, Some(&self.deltas))
    }
}

/// PSNR (peak 1) of an ODE decode of the adapted net from a fixed `x1`.
pub fn reconstruction_psnr(
    net: &VectorFieldNet,
    ov: &OneVector,
    x: &[f64],
    x1: &[f64],
    grid: &crate::dynamics::TimeGrid,
) -> Result<f64> {
    let field = AdaptedNet::new(net, ov)?;
    let rec = ode_decode(&field, x1.to_vec(), grid)?;
    psnr(x, &rec, 1.0)
}

/// Checks `dL/dv` through expansion, `A B` and the network against central
/// differences on up to 64 coordinates.
pub fn grad_check_vector(
    net: &VectorFieldNet,
    x: &[f64],
    ov: &OneVector,
    seed: u64,
) -> Result<GradReport> {
    let proj = build_projection(ov.proj_seed, &ov.spec, ov.k())?;
    let stream = PrngStream::new(seed, Domain::Eval);
    let batch: Vec<FmSample> = (0..4)
        .map(|e| {
            let (_, t, eps) = draw_fm_noise(&stream, 0, e, x.len(), 0.05, 0.05);
            FmSample { x, t, eps }
        })
        .collect();
    let (_, analytic) = loss_and_vector_grad(net, ov, &proj, &batch)?;
    let indices = sample_indices(ov.k(), 64, seed);
    let loss = |v: &[f64]| {
        let mut probe = ov.clone();
        probe.v.copy_from_slice(v);
        loss_and_vector_grad(net, &probe, &proj, &batch)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    };
    Ok(check_gradients(
        &ov.v, &analytic, loss, &indices, 1e-5, 1e-7,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetConfig};

    fn small_net(seed: u64) -> VectorFieldNet {
        VectorFieldNet::new(NetConfig {
            input_dim: 4,
            hidden_dims: vec![16, 16],
            time_embed_dim: 4,
            activation: Activation::Silu,
            seed,
            zero_init_output: false,
        })
        .unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn signed_permutation_when_k_equals_p() {
        let spec = LoraSpec::all_layers(&small_net(0), 1).unwrap();
        let p = spec.param_count();
        let proj = build_projection(5, &spec, p).unwrap();
        let mut seen = vec![false; p];
        for &b in &proj.bucket {
            assert!(!seen[b as usize]);
            seen[b as usize] = true;
        }
        assert!(proj.col_norm.iter().all(|&c| c == 1.0));
        let v: Vec<f64> = (0..p).map(|i| (i as f64 * 0.37).sin()).collect();
        let theta = proj.expand(&v).unwrap();
        assert!((norm(&theta) - norm(&v)).abs() < 1e-12);
        let mut sorted_t: Vec<f64> = theta.iter().map(|x| x.abs()).collect();
        let mut sorted_v: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        sorted_t.sort_by(f64::total_cmp);
        sorted_v.sort_by(f64::total_cmp);
        assert_eq!(sorted_t, sorted_v);
    }

    #[test]
    fn projection_is_deterministic() {
        let spec = LoraSpec::all_layers(&small_net(0), 2).unwrap();
        assert_eq!(
            build_projection(9, &spec, 17).unwrap(),
            build_projection(9, &spec, 17).unwrap()
        );
        assert_ne!(
            build_projection(9, &spec, 17).unwrap().bucket,
            build_projection(10, &spec, 17).unwrap().bucket
        );
        assert!(matches!(
            build_projection(9, &spec, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn norm_preserved_at_p_over_16() {
        let spec = LoraSpec::all_layers(&small_net(0), 2).unwrap();
        let p = spec.param_count();
        let k = p / 16;
        let proj = build_projection(1, &spec, k).unwrap();
        assert!(proj.col_norm.iter().all(|&c| c > 0.0));
        for seed in 0..10 {
            let v = PrngStream::new(seed, Domain::Eval).normals(0, 0, k);
            let theta = proj.expand(&v).unwrap();
            assert!((norm(&theta) - norm(&v)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_vector_is_neutral() {
        let net = small_net(1);
        let spec = LoraSpec::all_layers(&net, 1).unwrap();
        let ov = OneVector::zeros(spec, 12, 3);
        let proj = build_projection(3, &ov.spec, 12).unwrap();
        let d = expand_vector(&ov, &proj, net.layers().len()).unwrap();
        assert!(d
            .0
            .iter()
            .all(|m| m.as_ref().unwrap().iter().all(|v| *v == 0.0)));
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(
            net.forward(&x, 0.3, None).unwrap(),
            net.forward(&x, 0.3, Some(&d)).unwrap()
        );
    }

    #[test]
    fn rank_one_hand_product() {
        // One 2x2 layer, rank 1, k = P = 4. Choose v so that A = [1, 0]^T, B = [0, 1].
        let spec = LoraSpec {
            rank: 1,
            layers: vec![LoraLayer {
                layer: 0,
                m: 2,
                n: 2,
            }],
        };
        let proj = build_projection(11, &spec, 4).unwrap();
        let theta_want = [1.0, 0.0, 0.0, 1.0];
        let mut v = vec![0.0; 4];
        for j in 0..4 {
            v[proj.bucket[j] as usize] = proj.sign[j] * theta_want[j];
        }
        let ov = OneVector {
            v,
            spec,
            proj_seed: 11,
        };
        let d = expand_vector(&ov, &proj, 1).unwrap();
        let dw = d.0[0].as_ref().unwrap();
        assert_eq!(dw, &ndarray::arr2(&[[0.0, 1.0], [0.0, 0.0]]));
    }

    #[test]
    fn expand_reproduces_formula_bit_exactly() {
        let spec = LoraSpec::all_layers(&small_net(0), 1).unwrap();
        let proj = build_projection(21, &spec, 30).unwrap();
        let v = PrngStream::new(4, Domain::Eval).normals(0, 0, 30);
        let theta = proj.expand(&v).unwrap();
        for j in 0..theta.len() {
            let b = proj.bucket[j] as usize;
            assert_eq!(theta[j], proj.sign[j] * v[b] / proj.col_norm[b]);
        }
    }

    #[test]
    fn mismatched_seed_is_integrity_error() {
        let spec = LoraSpec::all_layers(&small_net(0), 1).unwrap();
        let proj = build_projection(1, &spec, 8).unwrap();
        let ov = OneVector::zeros(spec, 8, 2);
        assert!(matches!(
            expand_vector(&ov, &proj, 3),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn vector_gradients_match_finite_differences() {
        for seed in 0..4 {
            let net = small_net(seed);
            let spec = LoraSpec::all_layers(&net, 2).unwrap();
            let k = spec.param_count() / 2;
            let mut ov = OneVector::zeros(spec, k, seed + 100);
            ov.v = PrngStream::new(seed, Domain::Eval)
                .normals(9, 0, k)
                .into_iter()
                .map(|z| 0.3 * z)
                .collect();
            let r = grad_check_vector(&net, &[0.3, 0.9, 0.1, 0.5], &ov, seed).unwrap();
            assert!(r.checked_params >= 64, "{r:?}");
            assert!(r.within(1e-3), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn stage1_leaves_base_frozen_and_reduces_loss() {
        let net = small_net(2);
        let before = net.clone();
        let spec = LoraSpec::all_layers(&net, 1).unwrap();
        let x = vec![0.9, 0.1, 0.4, 0.6];
        let cfg = FitConfig {
            train: TrainConfig {
                steps: 200,
                batch: 32,
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
            init_std: 1e-2,
        };
        let mut losses = Vec::new();
        let ov =
            fit_vector_stage1_with(&net, &x, &spec, 40, 7, &cfg, &mut |_, _, l| losses.push(l))
                .unwrap();
        assert_eq!(net, before);
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(ov.k(), 40);
        let again = fit_vector_stage1(&net, &x, &spec, 40, 7, &cfg).unwrap();
        assert_eq!(ov, again);
    }
}
