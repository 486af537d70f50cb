//! Metrics, the early-stopping distortion sweep, the stability-bound
//! verifier and Monte-Carlo oracles for the samplers.
//!
//! Every oracle is a pure function of its seed and emits CSV with a fixed
//! header.

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::dynamics::{
    conditioned_drift, marginal_kernel, ode_step, one_step_map, optimal_kernel, proposal_kernel,
    schedule_coeffs, sde_step, AnalyticField, TimeGrid, TrajState, VectorField, ETA1,
};
use crate::error::{check_len, Error, Result};
use crate::prng::{derive_seed, Domain, PrngStream};
use crate::scaling::{categorical, log_importance_weight, normalize_log_weights};

/// Mean squared error.
pub fn mse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_len(x.len(), x_hat.len())?;
    if x.is_empty() {
        return Err(Error::Domain("mse of empty signals".into()));
    }
    let s: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.len() as f64)
}

/// PSNR in dB; `f64::INFINITY` when the signals are identical.
pub fn psnr(x: &[f64], x_hat: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be > 0, got {peak}")));
    }
    let m = mse(x, x_hat)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a - b).collect()
}

fn clean_point(x: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x.iter()
        .zip(x1)
        .map(|(x, e)| (1.0 - t) * x + t * e)
        .collect()
}

/// Writes a header and rows of pre-formatted fields as CSV.
pub fn csv_string<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<String> {
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Distortion of the early-stopped decode at every grid boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub taus: Vec<f64>,
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
}

impl SweepResult {
    /// Index of the lowest-distortion switch time (first on ties).
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mse.iter().enumerate() {
            if m < self.mse[best] {
                best = i;
            }
        }
        best
    }

    pub fn to_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = (0..self.taus.len())
            .map(|i| {
                vec![
                    i.to_string(),
                    self.taus[i].to_string(),
                    self.mse[i].to_string(),
                    self.psnr[i].to_string(),
                ]
            })
            .collect();
        csv_string(&["index", "tau", "mse", "psnr_db"], &rows)
    }
}

/// Integrates the ODE from `x1` at `t_N` and applies the one-step map at every
/// boundary on the way down. Rows are ordered by increasing `tau`.
pub fn dp_sweep<V: VectorField + ?Sized>(
    field: &V,
    x: &[f64],
    x1: &[f64],
    grid: &TimeGrid,
) -> Result<SweepResult> {
    check_len(field.dim(), x.len())?;
    check_len(x.len(), x1.len())?;
    let n = grid.steps();
    let mut rec = vec![Vec::new(); n + 1];
    let mut state = TrajState::new(x1.to_vec(), grid.t(n));
    rec[n] = one_step_map(&state, field)?;
    for k in (0..n).rev() {
        state = ode_step(&state, grid.dt(k + 1), field)?;
        state.t = grid.t(k);
        rec[k] = one_step_map(&state, field)?;
    }
    let mut out = SweepResult {
        taus: grid.boundaries().to_vec(),
        mse: Vec::with_capacity(n + 1),
        psnr: Vec::with_capacity(n + 1),
    };
    for r in &rec {
        out.mse.push(mse(x, r)?);
        out.psnr.push(psnr(x, r, 1.0)?);
    }
    Ok(out)
}

/// A field whose error grows along the trajectory:
/// `(y - x) / (t + a) + c t u`.
///
/// Switching at a large `tau` pays the one-step error `c tau^2 u`. Switching
/// late keeps the fraction `a / (tau + a)` of the deviation accumulated along
/// the path, because the gain is capped at `1 / a`. With `u` aligned to that
/// deviation the two terms cancel at an interior `tau`.
#[derive(Debug, Clone)]
pub struct GrowingErrorField {
    pub target: Vec<f64>,
    pub gain_offset: f64,
    pub strength: f64,
    pub direction: Vec<f64>,
}

impl VectorField for GrowingErrorField {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(self.target.len(), y.len())?;
        let g = 1.0 / (t + self.gain_offset);
        Ok(y.iter()
            .zip(&self.target)
            .zip(&self.direction)
            .map(|((y, x), u)| (y - x) * g + self.strength * t * u)
            .collect())
    }
}

/// Inputs to [`bound_check`] beyond the field and signal.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    pub quad_points: usize,
    pub probes: usize,
    pub safety: f64,
    pub probe_step: f64,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            quad_points: 201,
            probes: 256,
            safety: 1.5,
            probe_step: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub tau: f64,
    /// `||x_hat - x||` of the realised early-stopped decode.
    pub measured_delta: f64,
    /// `(tau L + 1) exp(L (1 - tau)) int ||e_t|| dt + tau ||e_tau||`.
    pub bound_value: f64,
    pub l_hat: f64,
    pub e_integral: f64,
    pub e_tau: f64,
    /// Largest secant ratio `||v(y_t) - v(x_t)|| / ||y_t - x_t||` between the
    /// realised and clean paths over `[tau, t_N]`.
    pub trajectory_lipschitz: f64,
    /// `l_hat` dominates the secant ratios the bound actually relies on.
    pub certified: bool,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.measured_delta <= self.bound_value
    }

    pub const CSV_HEADER: [&'static str; 9] = [
        "tau",
        "measured_delta",
        "bound_value",
        "l_hat",
        "e_integral",
        "e_tau",
        "trajectory_lipschitz",
        "certified",
        "holds",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.tau.to_string(),
            self.measured_delta.to_string(),
            self.bound_value.to_string(),
            self.l_hat.to_string(),
            self.e_integral.to_string(),
            self.e_tau.to_string(),
            self.trajectory_lipschitz.to_string(),
            self.certified.to_string(),
            self.holds().to_string(),
        ]
    }
}

/// Field error on the clean path: `e_t = v(x_t, t) - (x_1 - x)`.
fn clean_error<V: VectorField + ?Sized>(field: &V, x: &[f64], x1: &[f64], t: f64) -> Result<f64> {
    let v = field.velocity(&clean_point(x, x1, t), t)?;
    Ok(v.iter()
        .zip(x1.iter().zip(x))
        .map(|(v, (e, x))| (v - (e - x)).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Largest sampled central-difference directional derivative norm of the
/// field over `t in [tau, 1]`, around the clean path and perturbations of it.
pub fn lipschitz_estimate<V: VectorField + ?Sized>(
    field: &V,
    x: &[f64],
    x1: &[f64],
    tau: f64,
    cfg: &BoundConfig,
) -> Result<f64> {
    let d = field.dim();
    let stream = PrngStream::new(cfg.seed, Domain::Eval);
    let h = cfg.probe_step;
    let ratios = (0..cfg.probes as u32)
        .into_par_iter()
        .map(|p| {
            let t = tau + (1.0 - tau) * stream.uniform(p, 0);
            let mut y = clean_point(x, x1, t);
            if p % 2 == 1 {
                let w = stream.normals(p, 1, d);
                y.iter_mut().zip(&w).for_each(|(y, w)| *y += 0.1 * w);
            }
            let mut dir = stream.normals(p, 2, d);
            let n = norm(&dir);
            dir.iter_mut().for_each(|v| *v /= n);
            let plus: Vec<f64> = y.iter().zip(&dir).map(|(y, u)| y + h * u).collect();
            let minus: Vec<f64> = y.iter().zip(&dir).map(|(y, u)| y - h * u).collect();
            let dv = diff(&field.velocity(&plus, t)?, &field.velocity(&minus, t)?);
            Ok(norm(&dv) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    let l = cfg.safety * ratios.into_iter().fold(0.0, f64::max);
    if !l.is_finite() {
        return Err(Error::Numeric(format!("non-finite Lipschitz estimate {l}")));
    }
    Ok(l)
}

/// Checks the early-stopping error bound at grid boundary `tau_index`.
pub fn bound_check<V: VectorField + ?Sized>(
    field: &V,
    x: &[f64],
    x1: &[f64],
    grid: &TimeGrid,
    tau_index: usize,
    cfg: &BoundConfig,
) -> Result<BoundReport> {
    check_len(field.dim(), x.len())?;
    check_len(x.len(), x1.len())?;
    if tau_index == 0 || tau_index >= grid.steps() || cfg.quad_points < 2 {
        return Err(Error::Config(
            "bound check needs 0 < tau_index < N and >= 2 quadrature points".into(),
        ));
    }
    let tau = grid.t(tau_index);

    // Realised decode, recording secant ratios against the clean path.
    let mut state = TrajState::new(x1.to_vec(), grid.t(grid.steps()));
    let mut secant = 0.0f64;
    let mut record = |state: &TrajState| -> Result<()> {
        let c = clean_point(x, x1, state.t);
        let gap = norm(&diff(&state.x, &c));
        if gap > 1e-9 {
            let dv = diff(
                &field.velocity(&state.x, state.t)?,
                &field.velocity(&c, state.t)?,
            );
            secant = secant.max(norm(&dv) / gap);
        }
        Ok(())
    };
    record(&state)?;
    for n in (tau_index + 1..=grid.steps()).rev() {
        state = ode_step(&state, grid.dt(n), field)?;
        state.t = grid.t(n - 1);
        record(&state)?;
    }
    let x_hat = one_step_map(&state, field)?;
    let measured_delta = norm(&diff(&x_hat, x));

    let h = (1.0 - tau) / (cfg.quad_points - 1) as f64;
    let errs = (0..cfg.quad_points)
        .map(|i| clean_error(field, x, x1, (tau + h * i as f64).min(1.0)))
        .collect::<Result<Vec<f64>>>()?;
    let e_integral = h * (errs.iter().sum::<f64>() - 0.5 * (errs[0] + errs[errs.len() - 1]));
    let e_tau = errs[0];
    let l_hat = lipschitz_estimate(field, x, x1, tau, cfg)?;
    let bound_value = (tau * l_hat + 1.0) * (l_hat * (1.0 - tau)).exp() * e_integral + tau * e_tau;
    Ok(BoundReport {
        tau,
        measured_delta,
        bound_value,
        l_hat,
        e_integral,
        e_tau,
        trajectory_lipschitz: secant,
        certified: secant <= l_hat,
    })
}

/// Selected-sample statistics of one importance-selection step against the
/// proposal and target kernels (1-D).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStats {
    pub candidates: u32,
    pub trials: usize,
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub target_mean: f64,
    pub target_var: f64,
    pub proposal_mean: f64,
    pub proposal_var: f64,
}

impl KernelStats {
    /// `(mean - target_mean) / se_mean`.
    pub fn z_target(&self) -> f64 {
        (self.mean - self.target_mean) / self.se_mean
    }

    pub fn z_proposal(&self) -> f64 {
        (self.mean - self.proposal_mean) / self.se_mean
    }

    pub fn var_ratio(&self) -> f64 {
        self.var / self.target_var
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "candidates",
        "trials",
        "mean",
        "var",
        "se_mean",
        "target_mean",
        "target_var",
        "proposal_mean",
        "proposal_var",
        "z_target",
        "var_ratio",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.candidates.to_string(),
            self.trials.to_string(),
            self.mean.to_string(),
            self.var.to_string(),
            self.se_mean.to_string(),
            self.target_mean.to_string(),
            self.target_var.to_string(),
            self.proposal_mean.to_string(),
            self.proposal_var.to_string(),
            self.z_target().to_string(),
            self.var_ratio().to_string(),
        ]
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// One importance-selection step from `x_t` at `t_n`, repeated `trials`
/// times with per-trial seeds, using the mismatched proposal `v = 0` and the
/// optimal kernel for target `x` as the target.
pub fn is_kernel_check(
    x_t: f64,
    t_n: f64,
    dt: f64,
    x: f64,
    candidates: u32,
    trials: usize,
    seed: u64,
) -> Result<KernelStats> {
    if candidates == 0 || trials < 2 {
        return Err(Error::Config("need >= 1 candidate and >= 2 trials".into()));
    }
    let prop = proposal_kernel(&[x_t], t_n, dt, &[0.0])?;
    let target = optimal_kernel(&[x_t], t_n, dt, &[x])?;
    let sd = prop.var.sqrt();
    let picks = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let s = derive_seed(seed, trial);
            let cand = PrngStream::new(s, Domain::Candidate);
            let cs: Vec<f64> = (0..candidates)
                .map(|m| prop.mean[0] + sd * cand.normals(1, m, 1)[0])
                .collect();
            let lw: Vec<f64> = cs
                .iter()
                .map(|c| log_importance_weight(&[*c], &prop.mean, &target.mean, prop.var))
                .collect();
            let w = normalize_log_weights(&lw)?;
            Ok(cs[categorical(&w, PrngStream::new(s, Domain::Select).uniform(1, 0))])
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, var) = mean_var(&picks);
    Ok(KernelStats {
        candidates,
        trials,
        mean,
        var,
        se_mean: (var / trials as f64).sqrt(),
        target_mean: target.mean[0],
        target_var: target.var,
        proposal_mean: prop.mean[0],
        proposal_var: prop.var,
    })
}

/// Empirical against analytic moments at one time and coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub t: f64,
    pub coord: usize,
    pub mean: f64,
    pub se_mean: f64,
    pub var: f64,
    pub target_mean: f64,
    pub target_var: f64,
}

impl MomentRow {
    pub fn z_mean(&self) -> f64 {
        (self.mean - self.target_mean) / self.se_mean
    }

    pub fn var_rel_err(&self) -> f64 {
        (self.var - self.target_var).abs() / self.target_var
    }

    pub const CSV_HEADER: [&'static str; 9] = [
        "t",
        "coord",
        "mean",
        "se_mean",
        "var",
        "target_mean",
        "target_var",
        "z_mean",
        "var_rel_err",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.t.to_string(),
            self.coord.to_string(),
            self.mean.to_string(),
            self.se_mean.to_string(),
            self.var.to_string(),
            self.target_mean.to_string(),
            self.target_var.to_string(),
            self.z_mean().to_string(),
            self.var_rel_err().to_string(),
        ]
    }
}

fn moments(samples: &[Vec<f64>], t: f64, target_mean: &[f64], target_var: f64) -> Vec<MomentRow> {
    let n = samples.len();
    (0..target_mean.len())
        .map(|j| {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            let (mean, var) = mean_var(&col);
            MomentRow {
                t,
                coord: j,
                mean,
                se_mean: (var / n as f64).sqrt(),
                var,
                target_mean: target_mean[j],
                target_var,
            }
        })
        .collect()
}

/// Reverse-SDE ensemble under the analytic field for point mass `x`, compared
/// with the interpolant marginal `N((1 - t) x, t^2)` at the grid boundaries
/// nearest to `checkpoints`.
pub fn marginal_check(
    x: &[f64],
    particles: usize,
    checkpoints: &[f64],
    steps: usize,
    seed: u64,
) -> Result<Vec<MomentRow>> {
    if particles < 2 {
        return Err(Error::Config("need >= 2 particles".into()));
    }
    let grid = TimeGrid::uniform(steps, 1e-3, ETA1)?;
    let stops: Vec<usize> = checkpoints
        .iter()
        .map(|&c| {
            (0..=steps)
                .min_by(|&a, &b| (grid.t(a) - c).abs().total_cmp(&(grid.t(b) - c).abs()))
                .expect("non-empty grid")
        })
        .collect();
    let field = AnalyticField::new(x.to_vec());
    let d = x.len();
    let runs = (0..particles as u32)
        .into_par_iter()
        .map(|p| {
            let noise = PrngStream::new(seed, Domain::Eval);
            let mut state = TrajState::new(
                PrngStream::new(seed, Domain::Init).normals(p, 0, d),
                grid.t_start(),
            );
            let mut snaps = vec![Vec::new(); stops.len()];
            for n in (0..=steps).rev() {
                for (i, &s) in stops.iter().enumerate() {
                    if s == n {
                        snaps[i] = state.x.clone();
                    }
                }
                if n == 0 {
                    break;
                }
                state = sde_step(&state, grid.dt(n), &field, &noise.normals(p, n as u32, d))?;
                state.t = grid.t(n - 1);
            }
            Ok(snaps)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, &s) in stops.iter().enumerate() {
        let t = grid.t(s);
        let k = marginal_kernel(x, t)?;
        let samples: Vec<Vec<f64>> = runs.iter().map(|r| r[i].clone()).collect();
        rows.extend(moments(&samples, t, &k.mean, k.var));
    }
    Ok(rows)
}

/// Terminal statistics of the reverse SDE driven by the conditioned drift,
/// simulated from `t = 1 - eta` down to `t = 0` on a uniform grid with
/// `eta0 = 0`. Target moments are `x` and zero variance.
pub fn doob_check(x: &[f64], particles: usize, steps: usize, seed: u64) -> Result<Vec<MomentRow>> {
    if particles < 2 {
        return Err(Error::Config("need >= 2 particles".into()));
    }
    let grid = TimeGrid::uniform(steps, 0.0, ETA1)?;
    let d = x.len();
    let ends = (0..particles as u32)
        .into_par_iter()
        .map(|p| {
            let noise = PrngStream::new(seed, Domain::Eval);
            let mut y = PrngStream::new(seed, Domain::Init).normals(p, 0, d);
            for n in (1..=steps).rev() {
                let (t, dt) = (grid.t(n), grid.dt(n));
                let drift = conditioned_drift(&y, t, x)?;
                let sd = (schedule_coeffs(t)?.sigma.powi(2) * dt).sqrt();
                let z = noise.normals(p, n as u32, d);
                for j in 0..d {
                    y[j] = y[j] - drift[j] * dt + sd * z[j];
                }
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(moments(&ends, 0.0, x, 0.0))
}

/// Radially averaged power spectrum of a `side x side` image, one bin per
/// integer radius.
pub fn radial_power_spectrum(img: &[f64], side: usize) -> Result<Vec<f64>> {
    check_len(side * side, img.len())?;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(side);
    let mut buf: Vec<Complex<f64>> = img.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(side) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); side];
    for c in 0..side {
        for r in 0..side {
            col[r] = buf[r * side + c];
        }
        fft.process(&mut col);
        for r in 0..side {
            buf[r * side + c] = col[r];
        }
    }
    let bins = side / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    let freq = |i: usize| {
        if i <= side / 2 {
            i as f64
        } else {
            i as f64 - side as f64
        }
    };
    for r in 0..side {
        for c in 0..side {
            let rad = (freq(r).hypot(freq(c))).round() as usize;
            if rad < bins {
                power[rad] += buf[r * side + c].norm_sqr();
                count[rad] += 1;
            }
        }
    }
    Ok(power
        .iter()
        .zip(&count)
        .map(|(p, &n)| p / n.max(1) as f64)
        .collect())
}

/// Mean absolute difference of log10 radial power spectra (diagnostic only).
pub fn spectrum_distance(a: &[f64], b: &[f64], side: usize) -> Result<f64> {
    let pa = radial_power_spectrum(a, side)?;
    let pb = radial_power_spectrum(b, side)?;
    let floor = 1e-12;
    Ok(pa
        .iter()
        .zip(&pb)
        .map(|(a, b)| ((a + floor).log10() - (b + floor).log10()).abs())
        .sum::<f64>()
        / pa.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{optimal_vf, FnField};

    #[test]
    fn metric_examples() {
        let x = vec![0.2, 0.4, 0.6];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let off: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((mse(&x, &off).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr(&x, &off, 1.0).unwrap() - 20.0).abs() < 1e-10);
        assert!(psnr(&x, &off, 0.0).is_err());
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn sample(d: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let s = PrngStream::new(seed, Domain::Eval);
        (s.uniforms(0, 0, d), s.normals(1, 0, d))
    }

    #[test]
    fn sweep_with_analytic_field_is_exact() {
        let (x, x1) = sample(6, 1);
        let grid = TimeGrid::uniform(40, 1e-3, 1e-3).unwrap();
        let r = dp_sweep(&AnalyticField::new(x.clone()), &x, &x1, &grid).unwrap();
        assert_eq!(r.taus.len(), 41);
        assert!(r.mse.iter().all(|&m| m < 1e-24));
        assert!(r.to_csv().unwrap().lines().count() == 42);
    }

    #[test]
    fn additive_field_error_gives_monotone_sweep() {
        // optimal + c t g has one-step error -c tau^2 g: best at the smallest tau.
        let (x, x1) = sample(4, 2);
        let xc = x.clone();
        let f = FnField::new(4, move |y: &[f64], t: f64| {
            optimal_vf(y, t, &xc)
                .unwrap()
                .iter()
                .map(|v| v + 5.0 * t)
                .collect()
        });
        let grid = TimeGrid::uniform(20, 1e-3, 1e-3).unwrap();
        let r = dp_sweep(&f, &x, &x1, &grid).unwrap();
        assert_eq!(r.best_index(), 0);
    }

    #[test]
    fn growing_error_field_has_interior_optimum() {
        let (x, x1) = sample(8, 3);
        let u = diff(&x1, &x);
        let f = GrowingErrorField {
            target: x.clone(),
            gain_offset: 0.05,
            strength: 0.2,
            direction: u,
        };
        let grid = TimeGrid::uniform(100, 1e-3, 1e-3).unwrap();
        let r = dp_sweep(&f, &x, &x1, &grid).unwrap();
        let b = r.best_index();
        assert!(b > 0 && b < 100, "best index {b}");
        assert!(r.mse[b] < 0.5 * r.mse[0] && r.mse[b] < 0.5 * r.mse[100]);
    }

    #[test]
    fn bound_is_zero_for_analytic_field() {
        let (x, x1) = sample(5, 4);
        let grid = TimeGrid::uniform(50, 1e-3, 1e-3).unwrap();
        let r = bound_check(
            &AnalyticField::new(x.clone()),
            &x,
            &x1,
            &grid,
            20,
            &BoundConfig::default(),
        )
        .unwrap();
        assert!(r.e_integral < 1e-12 && r.e_tau < 1e-12, "{r:?}");
        assert!(r.bound_value < 1e-9 && r.measured_delta < 1e-12);
    }

    #[test]
    fn constant_perturbation_matches_hand_algebra() {
        let (x, x1) = sample(5, 5);
        let c: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();
        let (xc, cc) = (x.clone(), c.clone());
        let f = FnField::new(5, move |y: &[f64], t: f64| {
            optimal_vf(y, t, &xc)
                .unwrap()
                .iter()
                .zip(&cc)
                .map(|(v, c)| v + c)
                .collect()
        });
        let grid = TimeGrid::uniform(50, 1e-3, 1e-3).unwrap();
        let k = 30;
        let tau = grid.t(k);
        let r = bound_check(&f, &x, &x1, &grid, k, &BoundConfig::default()).unwrap();
        assert!((r.measured_delta - tau * norm(&c)).abs() < 1e-12);
        assert!((r.e_tau - norm(&c)).abs() < 1e-12);
        assert!((r.e_integral - (1.0 - tau) * norm(&c)).abs() < 1e-12);
        assert!(r.holds());
    }

    #[test]
    fn single_candidate_follows_proposal() {
        let s = is_kernel_check(1.0, 0.5, 0.1, 0.0, 1, 2000, 7).unwrap();
        assert!((s.proposal_mean - 0.8).abs() < 1e-12 && (s.target_mean - 0.4).abs() < 1e-12);
        assert!((s.target_var - 0.2).abs() < 1e-12);
        assert!(s.z_proposal().abs() < 4.0, "{s:?}");
        assert!(s.z_target().abs() > 10.0);
    }

    #[test]
    fn marginal_at_start_is_standard_normal() {
        let rows = marginal_check(&[2.0], 4000, &[1.0], 50, 3).unwrap();
        let r = &rows[0];
        assert!((r.t - 0.999).abs() < 1e-12);
        assert!(r.z_mean().abs() < 4.0 && r.var_rel_err() < 0.1, "{r:?}");
    }

    #[test]
    fn doob_terminal_mean() {
        let rows = doob_check(&[0.7, -1.3], 1000, 200, 9).unwrap();
        for r in &rows {
            assert!(
                (r.mean - r.target_mean).abs() < 4.0 * r.se_mean.max(1e-3),
                "{r:?}"
            );
            assert!(r.var < 0.05, "{r:?}");
        }
    }

    #[test]
    fn power_spectrum_of_constant_is_dc_only() {
        let p = radial_power_spectrum(&[0.5; 64], 8).unwrap();
        assert!((p[0] - 32.0 * 32.0).abs() < 1e-9);
        assert!(p[1..].iter().all(|&v| v < 1e-20));
        let img: Vec<f64> = (0..64).map(|i| ((i % 8) as f64 * 0.785).sin()).collect();
        assert!(spectrum_distance(&img, &img, 8).unwrap() == 0.0);
        assert!(spectrum_distance(&img, &[0.5; 64], 8).unwrap() > 1.0);
    }
}
