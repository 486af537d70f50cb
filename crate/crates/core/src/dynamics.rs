//! Closed-form flow-matching and diffusion mathematics for the linear
//! interpolant `x_t = (1 - t) x + t eps`.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data). Every sampler step moves
//! backwards in time. The reverse SDE used for branching is
//!
//! ```text
//! x_{t-dt} = x_t - (x_t / (1 - t) + 2 v(x_t, t)) dt + sqrt(2 t / (1 - t) dt) z
//! ```
//!
//! which shares its marginals with the flow ODE `dx = v dt`.

use crate::error::{check_len, Error, Result};

/// Default clamping margins at `t = 0` and `t = 1`.
pub const ETA0: f64 = 1e-3;
pub const ETA1: f64 = 1e-3;

/// A time-conditioned vector field `v(x, t)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<V: VectorField + ?Sized> VectorField for &V {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).velocity(x, t)
    }
}

/// The exact minimiser of the flow-matching loss for a point-mass target.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    target: Vec<f64>,
}

impl AnalyticField {
    pub fn new(target: Vec<f64>) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

impl VectorField for AnalyticField {
    fn dim(&self) -> usize {
        self.target.len()
    }
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        optimal_vf(x, t, &self.target)
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(self.dim, x.len())?;
        Ok((self.f)(x, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleCoeffs {
    pub t: f64,
    pub beta: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajState {
    pub x: Vec<f64>,
    pub t: f64,
}

impl TrajState {
    pub fn new(x: Vec<f64>, t: f64) -> Self {
        Self { x, t }
    }
}

/// Mean and scalar per-coordinate variance of an isotropic Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl KernelParams {
    /// Log density up to the shared normalising constant `-d/2 ln(2 pi var)`.
    pub fn log_density_unnormalized(&self, y: &[f64]) -> f64 {
        -sq_dist(y, &self.mean) / (2.0 * self.var)
    }
}

/// Strictly increasing time boundaries `t_0 < t_1 < ... < t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    boundaries: Vec<f64>,
    eta0: f64,
    eta1: f64,
}

impl TimeGrid {
    /// `n` uniform steps on `[eta0, 1 - eta1]`.
    pub fn uniform(n: usize, eta0: f64, eta1: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(eta0 >= 0.0 && eta1 > 0.0 && eta0 + eta1 < 1.0) {
            return Err(Error::Config(format!(
                "invalid clamping margins eta0={eta0}, eta1={eta1}"
            )));
        }
        let hi = 1.0 - eta1;
        let span = hi - eta0;
        let mut boundaries: Vec<f64> = (0..=n).map(|i| eta0 + span * i as f64 / n as f64).collect();
        boundaries[0] = eta0;
        boundaries[n] = hi;
        Self::from_boundaries(boundaries, eta0, eta1)
    }

    pub fn from_boundaries(boundaries: Vec<f64>, eta0: f64, eta1: f64) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if boundaries[0] < 0.0 || *boundaries.last().unwrap() >= 1.0 {
            return Err(Error::Config("time grid must lie in [0, 1)".into()));
        }
        if boundaries.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "time grid boundaries must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            boundaries,
            eta0,
            eta1,
        })
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn t(&self, n: usize) -> f64 {
        self.boundaries[n]
    }

    /// Step size `t_n - t_{n-1}` for `n >= 1`.
    pub fn dt(&self, n: usize) -> f64 {
        self.boundaries[n] - self.boundaries[n - 1]
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn eta1(&self) -> f64 {
        self.eta1
    }

    pub fn t_start(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// `(1 - t) x + t eps`.
pub fn interpolate(x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len(x.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "interpolation time {t} outside [0, 1]"
        )));
    }
    Ok(x.iter()
        .zip(eps)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect())
}

/// Optimal vector field for a point mass at `x`: `(x_t - x) / t`.
pub fn optimal_vf(x_t: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_len(x.len(), x_t.len())?;
    if !(t > 0.0) {
        return Err(Error::Domain(format!("optimal field needs t > 0, got {t}")));
    }
    Ok(x_t.iter().zip(x).map(|(a, b)| (a - b) / t).collect())
}

pub fn schedule_coeffs(t: f64) -> Result<ScheduleCoeffs> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!(
            "schedule needs t in (0, 1), got {t}"
        )));
    }
    Ok(ScheduleCoeffs {
        t,
        beta: -1.0 / (1.0 - t),
        sigma: (2.0 * t / (1.0 - t)).sqrt(),
        alpha: 1.0 - t,
        var: t * t,
    })
}

/// Forward marginal `p(x_t | x_0 = x) = N((1 - t) x, t^2)`.
pub fn marginal_kernel(x: &[f64], t: f64) -> Result<KernelParams> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!(
            "marginal needs t in (0, 1], got {t}"
        )));
    }
    Ok(KernelParams {
        mean: x.iter().map(|a| (1.0 - t) * a).collect(),
        var: t * t,
    })
}

/// Score recovered from a vector field: `-(x_t + (1 - t) v) / t`.
pub fn score_from_vf(v: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len(x_t.len(), v.len())?;
    if !(t > 0.0) {
        return Err(Error::Domain(format!("score needs t > 0, got {t}")));
    }
    Ok(x_t
        .iter()
        .zip(v)
        .map(|(x, v)| -(x + (1.0 - t) * v) / t)
        .collect())
}

/// Drift of the reverse SDE written backwards in time: `x / (1 - t) + 2 v`.
pub fn reverse_drift(x_t: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_len(x_t.len(), v.len())?;
    if !(t < 1.0) {
        return Err(Error::Domain(format!("reverse drift needs t < 1, got {t}")));
    }
    Ok(x_t
        .iter()
        .zip(v)
        .map(|(x, v)| x / (1.0 - t) + 2.0 * v)
        .collect())
}

/// Euler step of the flow ODE from `t` to `t - dt`.
pub fn ode_step<V: VectorField + ?Sized>(state: &TrajState, dt: f64, vf: &V) -> Result<TrajState> {
    if !(dt > 0.0) || state.t - dt < -1e-12 {
        return Err(Error::Domain(format!(
            "ODE step dt={dt} from t={} leaves [0, 1]",
            state.t
        )));
    }
    let v = vf.velocity(&state.x, state.t)?;
    check_len(state.x.len(), v.len())?;
    ensure_finite(&v, "vector field output")?;
    let x = state.x.iter().zip(&v).map(|(x, v)| x - v * dt).collect();
    Ok(TrajState::new(x, (state.t - dt).max(0.0)))
}

/// Transition kernel of the Euler-Maruyama reverse SDE step given the field
/// value `v = v(x_t, t_n)`.
pub fn proposal_kernel(x_t: &[f64], t_n: f64, dt: f64, v: &[f64]) -> Result<KernelParams> {
    if !(t_n > 0.0 && t_n < 1.0) {
        return Err(Error::Domain(format!(
            "kernel needs t in (0, 1), got {t_n}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("kernel needs dt > 0, got {dt}")));
    }
    let drift = reverse_drift(x_t, t_n, v)?;
    Ok(KernelParams {
        mean: x_t.iter().zip(&drift).map(|(x, d)| x - d * dt).collect(),
        var: 2.0 * t_n / (1.0 - t_n) * dt,
    })
}

/// Euler-Maruyama step of the reverse SDE with caller-supplied standard
/// normal noise.
pub fn sde_step<V: VectorField + ?Sized>(
    state: &TrajState,
    dt: f64,
    vf: &V,
    noise: &[f64],
) -> Result<TrajState> {
    if !(state.t > 0.0 && state.t < 1.0) {
        return Err(Error::Domain(format!(
            "SDE step needs t in (0, 1), got {}",
            state.t
        )));
    }
    check_len(state.x.len(), noise.len())?;
    let v = vf.velocity(&state.x, state.t)?;
    ensure_finite(&v, "vector field output")?;
    let k = proposal_kernel(&state.x, state.t, dt, &v)?;
    let sd = k.var.sqrt();
    let x = k.mean.iter().zip(noise).map(|(m, z)| m + sd * z).collect();
    Ok(TrajState::new(x, (state.t - dt).max(0.0)))
}

/// The kernel obtained by substituting the optimal field into the SDE step.
pub fn optimal_kernel(x_t: &[f64], t_n: f64, dt: f64, x: &[f64]) -> Result<KernelParams> {
    check_len(x.len(), x_t.len())?;
    if !(t_n > 0.0 && t_n < 1.0) {
        return Err(Error::Domain(format!(
            "optimal kernel needs t in (0, 1), got {t_n}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("kernel needs dt > 0, got {dt}")));
    }
    let mean = x_t
        .iter()
        .zip(x)
        .map(|(y, x)| y - (y / (1.0 - t_n) + 2.0 * (y - x) / t_n) * dt)
        .collect();
    Ok(KernelParams {
        mean,
        var: 2.0 * t_n / (1.0 - t_n) * dt,
    })
}

/// Jump straight to `t = 0`: `x_t - t v(x_t, t)`.
pub fn one_step_map<V: VectorField + ?Sized>(state: &TrajState, vf: &V) -> Result<Vec<f64>> {
    if !(state.t >= 0.0 && state.t <= 1.0) {
        return Err(Error::Domain(format!(
            "one-step map needs t in [0, 1], got {}",
            state.t
        )));
    }
    if state.t == 0.0 {
        return Ok(state.x.clone());
    }
    let v = vf.velocity(&state.x, state.t)?;
    check_len(state.x.len(), v.len())?;
    let out: Vec<f64> = state
        .x
        .iter()
        .zip(&v)
        .map(|(x, v)| x - state.t * v)
        .collect();
    ensure_finite(&out, "one-step reconstruction")?;
    Ok(out)
}

/// `sigma_t^2 grad log p(x_t | x_0 = x) = -sigma_t^2 (x_t - (1 - t) x) / t^2`.
pub fn doob_drift(x_t: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_len(x.len(), x_t.len())?;
    let c = schedule_coeffs(t)?;
    let s2 = c.sigma * c.sigma;
    Ok(x_t
        .iter()
        .zip(x)
        .map(|(y, x)| -s2 * (y - (1.0 - t) * x) / (t * t))
        .collect())
}

/// Drift of the base process conditioned on `x_0 = x`: `beta_t x_t - doob_drift`.
pub fn conditioned_drift(x_t: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let c = schedule_coeffs(t)?;
    let h = doob_drift(x_t, t, x)?;
    Ok(x_t.iter().zip(&h).map(|(y, h)| c.beta * y - h).collect())
}

/// Integrates the ODE from `x_start` at `t_from_index` down to `t_to_index`.
pub fn ode_integrate<V: VectorField + ?Sized>(
    field: &V,
    x_start: Vec<f64>,
    grid: &TimeGrid,
    from_index: usize,
    to_index: usize,
) -> Result<TrajState> {
    if to_index > from_index || from_index > grid.steps() {
        return Err(Error::Config(format!(
            "invalid integration range {from_index} -> {to_index}"
        )));
    }
    check_len(field.dim(), x_start.len())?;
    let mut state = TrajState::new(x_start, grid.t(from_index));
    for n in (to_index + 1..=from_index).rev() {
        state = ode_step(&state, grid.dt(n), field)?;
        state.t = grid.t(n - 1);
    }
    Ok(state)
}

/// ODE decode from `x_1` (placed at `t_N`) down to boundary `stop_index`,
/// followed by the one-step map. `stop_index = 0` is the full decode.
pub fn ode_decode_early<V: VectorField + ?Sized>(
    field: &V,
    x1: Vec<f64>,
    grid: &TimeGrid,
    stop_index: usize,
) -> Result<Vec<f64>> {
    let state = ode_integrate(field, x1, grid, grid.steps(), stop_index)?;
    one_step_map(&state, field)
}

pub fn ode_decode<V: VectorField + ?Sized>(
    field: &V,
    x1: Vec<f64>,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    ode_decode_early(field, x1, grid, 0)
}
