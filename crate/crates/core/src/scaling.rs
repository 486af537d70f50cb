//! Encoding-time scaling: importance-sampled reverse SDE steps driven by
//! shared counter-based noise, and exact decoder replay from the chosen
//! indices.
//!
//! Step `n` (from `t_n` down to `t_{n-1}`) draws candidate `m` as
//! `mu_theta + sigma z_{n,m}` with `z_{n,m}` from `(seed, Candidate, n, m)`.
//! Candidate log-weights are `log p*(c) - log p_theta(c)` for the two Gaussian
//! kernels sharing `sigma^2`; the index is drawn from the normalised weights
//! with the uniform `(seed, Select, n, 0)`. The start point comes from
//! `(seed, Init, 0, 0)`. After the last branched step the one-step map at
//! `t_0` produces the reconstruction.

use rayon::prelude::*;

use crate::dynamics::{
    one_step_map, optimal_kernel, proposal_kernel, TimeGrid, TrajState, VectorField,
};
use crate::error::{check_len, Error, Result};
use crate::prng::{Domain, PrngStream};

/// Selected candidate per branched step, first entry for `n = N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalingTrace {
    pub steps: u32,
    pub candidates: u32,
    pub seed: u64,
    pub indices: Vec<u32>,
}

impl ScalingTrace {
    pub fn bits_per_index(candidates: u32) -> u32 {
        if candidates <= 1 {
            0
        } else {
            32 - (candidates - 1).leading_zeros()
        }
    }

    /// `N * ceil(log2 M)`.
    pub fn side_info_bits(&self) -> u64 {
        self.steps as u64 * Self::bits_per_index(self.candidates) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Config("candidate count must be >= 1".into()));
        }
        if self.indices.len() != self.steps as usize {
            return Err(Error::Integrity(format!(
                "trace holds {} indices for {} steps",
                self.indices.len(),
                self.steps
            )));
        }
        if let Some(i) = self.indices.iter().find(|&&i| i >= self.candidates) {
            return Err(Error::Integrity(format!(
                "index {i} out of range for {} candidates",
                self.candidates
            )));
        }
        Ok(())
    }

    /// Indices as fixed-width big-endian bit fields, zero-padded to a byte.
    pub fn pack_indices(&self) -> Vec<u8> {
        let w = Self::bits_per_index(self.candidates);
        let mut out = vec![0u8; (self.side_info_bits() as usize).div_ceil(8)];
        let mut bit = 0usize;
        for &i in &self.indices {
            for b in (0..w).rev() {
                if (i >> b) & 1 == 1 {
                    out[bit / 8] |= 0x80 >> (bit % 8);
                }
                bit += 1;
            }
        }
        out
    }

    pub fn unpack_indices(bytes: &[u8], steps: u32, candidates: u32) -> Result<Vec<u32>> {
        let w = Self::bits_per_index(candidates);
        let need = (steps as usize * w as usize).div_ceil(8);
        if bytes.len() != need {
            return Err(Error::Format(format!(
                "index block has {} bytes, expected {need}",
                bytes.len()
            )));
        }
        let mut bit = 0usize;
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let mut v = 0u32;
            for _ in 0..w {
                v = (v << 1) | ((bytes[bit / 8] >> (7 - bit % 8)) & 1) as u32;
                bit += 1;
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// `log p*(c) - log p_theta(c)` for kernels with shared variance `var`.
pub fn log_importance_weight(cand: &[f64], mu_theta: &[f64], mu_star: &[f64], var: f64) -> f64 {
    let d_star: f64 = cand
        .iter()
        .zip(mu_star)
        .map(|(c, m)| (c - m) * (c - m))
        .sum();
    let d_theta: f64 = cand
        .iter()
        .zip(mu_theta)
        .map(|(c, m)| (c - m) * (c - m))
        .sum();
    (d_theta - d_star) / (2.0 * var)
}

/// Importance weight of `cand` for the step `t_n -> t_n - dt`, given the
/// field value `v = v(x_t, t_n)`; unnormalised (no max subtraction).
pub fn importance_weight(
    cand: &[f64],
    x_t: &[f64],
    t_n: f64,
    dt: f64,
    x: &[f64],
    v: &[f64],
) -> Result<f64> {
    let p = proposal_kernel(x_t, t_n, dt, v)?;
    let q = optimal_kernel(x_t, t_n, dt, x)?;
    check_len(x_t.len(), cand.len())?;
    let lw = log_importance_weight(cand, &p.mean, &q.mean, p.var);
    if !lw.is_finite() {
        return Err(Error::Numeric(format!("non-finite log-weight {lw}")));
    }
    Ok(lw.exp())
}

/// `exp(lw - max lw)` normalised to sum 1.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = log_w.iter().find(|w| !w.is_finite()) {
        return Err(Error::Numeric(format!("non-finite log-weight {bad}")));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numeric("all importance weights vanished".into()));
    }
    Ok(w.into_iter().map(|w| w / sum).collect())
}

/// Inverse-CDF draw from normalised weights.
pub fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    pub grid: TimeGrid,
    pub candidates: u32,
    pub seed: u64,
}

impl ScalingConfig {
    fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Config("candidate count must be >= 1".into()));
        }
        if !(self.grid.eta0() > 0.0) {
            return Err(Error::Config("branched decoding needs eta0 > 0".into()));
        }
        Ok(())
    }
}

fn start_state(dim: usize, grid: &TimeGrid, seed: u64) -> TrajState {
    TrajState::new(
        PrngStream::new(seed, Domain::Init).normals(0, 0, dim),
        grid.t_start(),
    )
}

fn candidate_noise(seed: u64, n: usize, m: u32, dim: usize) -> Vec<f64> {
    PrngStream::new(seed, Domain::Candidate).normals(n as u32, m, dim)
}

/// Runs the branched encoder and returns the trace and its reconstruction.
pub fn encode_scaled<V: VectorField + ?Sized>(
    field: &V,
    x: &[f64],
    cfg: &ScalingConfig,
) -> Result<(ScalingTrace, Vec<f64>)> {
    cfg.validate()?;
    let dim = field.dim();
    check_len(dim, x.len())?;
    let grid = &cfg.grid;
    let select = PrngStream::new(cfg.seed, Domain::Select);
    let mut state = start_state(dim, grid, cfg.seed);
    let mut indices = Vec::with_capacity(grid.steps());
    for n in (1..=grid.steps()).rev() {
        let (t_n, dt) = (grid.t(n), grid.dt(n));
        let v = field.velocity(&state.x, t_n)?;
        let prop = proposal_kernel(&state.x, t_n, dt, &v)?;
        let target = optimal_kernel(&state.x, t_n, dt, x)?;
        let sd = prop.var.sqrt();
        let log_w: Vec<f64> = (0..cfg.candidates)
            .into_par_iter()
            .map(|m| {
                let z = candidate_noise(cfg.seed, n, m, dim);
                let c: Vec<f64> = prop
                    .mean
                    .iter()
                    .zip(&z)
                    .map(|(mu, z)| mu + sd * z)
                    .collect();
                log_importance_weight(&c, &prop.mean, &target.mean, prop.var)
            })
            .collect();
        let w = normalize_log_weights(&log_w)?;
        let i = categorical(&w, select.uniform(n as u32, 0)) as u32;
        let z = candidate_noise(cfg.seed, n, i, dim);
        state = TrajState::new(
            prop.mean
                .iter()
                .zip(&z)
                .map(|(mu, z)| mu + sd * z)
                .collect(),
            grid.t(n - 1),
        );
        indices.push(i);
    }
    let trace = ScalingTrace {
        steps: grid.steps() as u32,
        candidates: cfg.candidates,
        seed: cfg.seed,
        indices,
    };
    Ok((trace, one_step_map(&state, field)?))
}

/// Replays a trace: each step regenerates only the selected candidate, which
/// is a pure function of `(seed, n, i_n)`.
pub fn decode_scaled<V: VectorField + ?Sized>(
    field: &V,
    trace: &ScalingTrace,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    trace.validate()?;
    if trace.steps as usize != grid.steps() {
        return Err(Error::Integrity(format!(
            "trace has {} steps, grid has {}",
            trace.steps,
            grid.steps()
        )));
    }
    replay(field, grid, trace.seed, |k| trace.indices[k])
}

/// Plain seeded Euler-Maruyama decode (candidate 0 at every step).
pub fn sde_decode<V: VectorField + ?Sized>(
    field: &V,
    grid: &TimeGrid,
    seed: u64,
) -> Result<Vec<f64>> {
    replay(field, grid, seed, |_| 0)
}

fn replay<V: VectorField + ?Sized>(
    field: &V,
    grid: &TimeGrid,
    seed: u64,
    index: impl Fn(usize) -> u32,
) -> Result<Vec<f64>> {
    if !(grid.eta0() > 0.0) {
        return Err(Error::Config("branched decoding needs eta0 > 0".into()));
    }
    let dim = field.dim();
    let mut state = start_state(dim, grid, seed);
    for (k, n) in (1..=grid.steps()).rev().enumerate() {
        let (t_n, dt) = (grid.t(n), grid.dt(n));
        let v = field.velocity(&state.x, t_n)?;
        let prop = proposal_kernel(&state.x, t_n, dt, &v)?;
        let sd = prop.var.sqrt();
        let z = candidate_noise(seed, n, index(k), dim);
        state = TrajState::new(
            prop.mean
                .iter()
                .zip(&z)
                .map(|(mu, z)| mu + sd * z)
                .collect(),
            grid.t(n - 1),
        );
    }
    one_step_map(&state, field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{optimal_vf, AnalyticField, FnField};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::uniform(n, 1e-3, 1e-3).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    /// Gain-limited field with a constant offset, so the end state matters.
    fn biased(x: Vec<f64>) -> FnField<impl Fn(&[f64], f64) -> Vec<f64> + Sync> {
        let d = x.len();
        FnField::new(d, move |y: &[f64], t: f64| {
            y.iter()
                .zip(&x)
                .enumerate()
                .map(|(i, (y, x))| (y - x) / (t + 0.05) + 0.8 * ((i as f64) * 0.7).sin())
                .collect()
        })
    }

    #[test]
    fn bits_per_index() {
        assert_eq!(ScalingTrace::bits_per_index(1), 0);
        assert_eq!(ScalingTrace::bits_per_index(2), 1);
        assert_eq!(ScalingTrace::bits_per_index(4), 2);
        assert_eq!(ScalingTrace::bits_per_index(5), 3);
        assert_eq!(ScalingTrace::bits_per_index(1024), 10);
        let t = ScalingTrace {
            steps: 100,
            candidates: 1024,
            seed: 0,
            indices: vec![0; 100],
        };
        assert_eq!(t.side_info_bits(), 1000);
    }

    #[test]
    fn pack_round_trip() {
        let s = PrngStream::new(3, Domain::Eval);
        for m in [1u32, 2, 3, 4, 7, 64, 1000, 1024] {
            let indices: Vec<u32> = (0..37).map(|i| s.below(i, m, m)).collect();
            let t = ScalingTrace {
                steps: 37,
                candidates: m,
                seed: 1,
                indices,
            };
            let bytes = t.pack_indices();
            assert_eq!(bytes.len() as u64, t.side_info_bits().div_ceil(8));
            assert_eq!(
                ScalingTrace::unpack_indices(&bytes, 37, m).unwrap(),
                t.indices
            );
        }
        let t = ScalingTrace {
            steps: 2,
            candidates: 4,
            seed: 0,
            indices: vec![2, 1],
        };
        assert_eq!(t.pack_indices(), vec![0b1001_0000]);
    }

    #[test]
    fn equal_weights_when_proposal_is_optimal() {
        let x = vec![0.3, -0.2];
        let y = vec![1.1, 0.4];
        let v = optimal_vf(&y, 0.6, &x).unwrap();
        let w: Vec<f64> = [[0.5, 0.5], [2.0, -1.0], [0.0, 0.0]]
            .iter()
            .map(|c| importance_weight(c, &y, 0.6, 0.05, &x, &v).unwrap())
            .collect();
        assert!(w.iter().all(|&wi| (wi - 1.0).abs() < 1e-9), "{w:?}");
    }

    #[test]
    fn log_weight_closed_form() {
        // Candidate at the proposal mean, target shifted by d: log w = -|d|^2 / (2 var).
        let mu = vec![0.4, -1.0, 2.0];
        let d = [0.3, 0.1, -0.2];
        let star: Vec<f64> = mu.iter().zip(&d).map(|(m, d)| m + d).collect();
        let var = 0.7;
        let lw = log_importance_weight(&mu, &mu, &star, var);
        let want = -(0.09 + 0.01 + 0.04) / (2.0 * var);
        assert!((lw - want).abs() < 1e-15);
        // General candidate: difference of scaled squared distances.
        let c = [1.0, 0.0, 0.5];
        let dt: f64 = c.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum();
        let ds: f64 = c.iter().zip(&star).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(
            (log_importance_weight(&c, &mu, &star, var) - (dt - ds) / (2.0 * var)).abs() < 1e-14
        );
    }

    #[test]
    fn normalization_and_errors() {
        let w = normalize_log_weights(&[-1000.0, -1001.0, -2000.0]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w[0] > w[1] && w[2] == 0.0);
        assert!(matches!(
            normalize_log_weights(&[f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert_eq!(categorical(&[0.0, 1.0, 0.0], 0.999_999), 1);
        assert_eq!(categorical(&[0.5, 0.5, 0.0], 0.999_999_999_999_999_9), 1);
    }

    #[test]
    fn single_candidate_is_plain_sde() {
        let x = vec![0.2, 0.9, 0.5];
        let f = biased(x.clone());
        let g = grid(30);
        let cfg = ScalingConfig {
            grid: g.clone(),
            candidates: 1,
            seed: 42,
        };
        let (trace, xh) = encode_scaled(&f, &x, &cfg).unwrap();
        assert!(trace.indices.iter().all(|&i| i == 0));
        assert_eq!(trace.side_info_bits(), 0);
        assert_eq!(xh, sde_decode(&f, &g, 42).unwrap());
    }

    #[test]
    fn analytic_field_reconstructs_for_any_m() {
        let x = vec![0.2, -0.7, 1.3, 0.05];
        let f = AnalyticField::new(x.clone());
        for m in [1, 3, 16] {
            let cfg = ScalingConfig {
                grid: grid(50),
                candidates: m,
                seed: 9,
            };
            let (trace, xh) = encode_scaled(&f, &x, &cfg).unwrap();
            assert!(rel_err(&xh, &x) < 1e-6, "M = {m}: {}", rel_err(&xh, &x));
            assert_eq!(decode_scaled(&f, &trace, &cfg.grid).unwrap(), xh);
        }
    }

    #[test]
    fn replay_is_bit_exact_and_tamper_evident() {
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.4).cos()).collect();
        let f = biased(x.clone());
        for (m, seed) in [(4u32, 1u64), (16, 2), (7, 3)] {
            let cfg = ScalingConfig {
                grid: grid(40),
                candidates: m,
                seed,
            };
            let (trace, xh) = encode_scaled(&f, &x, &cfg).unwrap();
            assert_eq!(decode_scaled(&f, &trace, &cfg.grid).unwrap(), xh);
            let mut bad = trace.clone();
            bad.indices[3] = (bad.indices[3] + 1) % m;
            assert_ne!(decode_scaled(&f, &bad, &cfg.grid).unwrap(), xh);
        }
    }

    #[test]
    fn mismatched_trace_is_integrity_error() {
        let f = AnalyticField::new(vec![0.0; 2]);
        let t = ScalingTrace {
            steps: 5,
            candidates: 4,
            seed: 0,
            indices: vec![0; 5],
        };
        assert!(matches!(
            decode_scaled(&f, &t, &grid(6)),
            Err(Error::Integrity(_))
        ));
        let t = ScalingTrace {
            steps: 5,
            candidates: 4,
            seed: 0,
            indices: vec![0, 0, 9, 0, 0],
        };
        assert!(matches!(
            decode_scaled(&f, &t, &grid(5)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn more_candidates_reduce_error() {
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin()).collect();
        let f = biased(x.clone());
        let mse = |m: u32| -> f64 {
            (0..12)
                .map(|seed| {
                    let cfg = ScalingConfig {
                        grid: grid(40),
                        candidates: m,
                        seed,
                    };
                    let (_, xh) = encode_scaled(&f, &x, &cfg).unwrap();
                    xh.iter()
                        .zip(&x)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / 8.0
                })
                .sum::<f64>()
                / 12.0
        };
        let (m1, m16) = (mse(1), mse(16));
        assert!(m16 < m1, "{m1} -> {m16}");
    }
}
