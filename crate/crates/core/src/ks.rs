//! Pseudo-spectral Kuramoto-Sivashinsky solver on a periodic domain.
//!
//! The equation `u_t + u_xx + u_xxxx + u u_x = 0` is advanced in Fourier
//! space with ETDRK4: the stiff linear operator `k^2 - k^4` is integrated
//! exactly and the quadratic term is treated with fourth-order exponential
//! Runge-Kutta stages. The nonlinear term is written `-(u^2/2)_x` and
//! dealiased with the 2/3 rule.
//!
//! Tangent vectors are advanced with the exact linearization of the same
//! discrete step, so the tangent map is the derivative of [`KsSolver::step`].

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tangent::Propagator;

/// Periodic grid on `[0, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub length: f64,
    pub n: usize,
    pub x: Vec<f64>,
    /// `2 pi m / L` in FFT ordering (negative frequencies in the upper half).
    pub wavenumbers: Vec<f64>,
}

impl Grid {
    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }
}

pub fn make_grid(length: f64, n: usize) -> Result<Grid> {
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::Config(format!("domain length must be positive, got {length}")));
    }
    if n < 8 || !n.is_power_of_two() {
        return Err(Error::Config(format!(
            "grid size must be a power of two >= 8, got {n}"
        )));
    }
    let dx = length / n as f64;
    let x = (0..n).map(|i| i as f64 * dx).collect();
    let wavenumbers = (0..n)
        .map(|m| {
            let signed = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
            2.0 * PI * signed / length
        })
        .collect();
    Ok(Grid {
        length,
        n,
        x,
        wavenumbers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalState {
    pub u: Vec<f64>,
    pub t: f64,
}

impl PhysicalState {
    pub fn new(u: Vec<f64>, t: f64) -> Self {
        Self { u, t }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalTrajectory {
    pub length: f64,
    pub dt_sample: f64,
    pub states: Vec<PhysicalState>,
}

impl PhysicalTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn width(&self) -> usize {
        self.states.first().map_or(0, |s| s.u.len())
    }

    /// Every `stride`-th state, keeping the first.
    pub fn subsample(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        Self {
            length: self.length,
            dt_sample: self.dt_sample * stride as f64,
            states: self.states.iter().step_by(stride).cloned().collect(),
        }
    }

    /// Contiguous sub-range of states.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            length: self.length,
            dt_sample: self.dt_sample,
            states: self.states[range].to_vec(),
        }
    }
}

/// Perturbation vectors stored as the columns of an `N_x x m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBasis {
    pub v: DMatrix<f64>,
    pub t: f64,
}

/// Default initial condition: `0.1 cos(2 pi x/L)(1 + sin(2 pi x/L))` plus
/// zero-mean uniform noise of amplitude `1e-3`.
pub fn default_initial_condition(grid: &Grid, seed: u64) -> PhysicalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = grid
        .x
        .iter()
        .map(|&x| {
            let phase = 2.0 * PI * x / grid.length;
            0.1 * phase.cos() * (1.0 + phase.sin()) + rng.random_range(-1e-3..=1e-3)
        })
        .collect();
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|v| *v -= mean);
    PhysicalState::new(u, 0.0)
}

/// Stage states of one ETDRK4 step in physical space, kept for the tangent map.
struct Stages {
    u: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

/// ETDRK4 integrator with precomputed coefficients for one `(grid, dt)` pair.
#[derive(Clone)]
pub struct KsSolver {
    grid: Grid,
    dt: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    linear: Vec<f64>,
    /// `i k` with the Nyquist entry zeroed, multiplied by the dealiasing mask.
    deriv_dealiased: Vec<Complex64>,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
}

impl std::fmt::Debug for KsSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KsSolver")
            .field("length", &self.grid.length)
            .field("n", &self.grid.n)
            .field("dt", &self.dt)
            .finish()
    }
}

const CONTOUR_POINTS: usize = 32;

impl KsSolver {
    pub fn new(grid: &Grid, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let n = grid.n;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);

        let cutoff = n as f64 / 3.0;
        let deriv_dealiased = (0..n)
            .map(|m| {
                let signed = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
                if m == n / 2 || signed.abs() >= cutoff {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, grid.wavenumbers[m])
                }
            })
            .collect();
        let linear: Vec<f64> = grid.wavenumbers.iter().map(|k| k * k - k.powi(4)).collect();

        let roots: Vec<Complex64> = (0..CONTOUR_POINTS)
            .map(|j| Complex64::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64))
            .collect();
        let contour_mean = |hl: f64, g: &dyn Fn(Complex64) -> Complex64| -> f64 {
            roots.iter().map(|&r| g(r + hl).re).sum::<f64>() / CONTOUR_POINTS as f64
        };

        let mut e = Vec::with_capacity(n);
        let mut e2 = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        let mut f1 = Vec::with_capacity(n);
        let mut f2 = Vec::with_capacity(n);
        let mut f3 = Vec::with_capacity(n);
        for &l in &linear {
            let hl = dt * l;
            e.push(hl.exp());
            e2.push((hl / 2.0).exp());
            q.push(dt * contour_mean(hl, &|z| ((z / 2.0).exp() - 1.0) / z));
            f1.push(dt * contour_mean(hl, &|z| {
                (-4.0 - z + z.exp() * (4.0 - 3.0 * z + z * z)) / (z * z * z)
            }));
            f2.push(dt * contour_mean(hl, &|z| (2.0 + z + z.exp() * (z - 2.0)) / (z * z * z)));
            f3.push(dt * contour_mean(hl, &|z| {
                (-4.0 - 3.0 * z - z * z + z.exp() * (4.0 - z)) / (z * z * z)
            }));
        }

        Ok(Self {
            grid: grid.clone(),
            dt,
            forward,
            inverse,
            linear,
            deriv_dealiased,
            e,
            e2,
            q,
            f1,
            f2,
            f3,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn to_spectral(&self, u: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    fn to_physical(&self, v: &[Complex64]) -> Vec<f64> {
        let mut buf = v.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.grid.n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// Spectral nonlinear term `-(1/2) i k P FFT(u^2)` for the physical field `u`.
    fn nonlinear(&self, u: &[f64]) -> Vec<Complex64> {
        let sq: Vec<f64> = u.iter().map(|v| 0.5 * v * v).collect();
        let mut w = self.to_spectral(&sq);
        for (w, d) in w.iter_mut().zip(&self.deriv_dealiased) {
            *w *= -d;
        }
        w
    }

    /// Derivative of [`Self::nonlinear`] at `u` in direction `du`: `-i k P FFT(u du)`.
    fn nonlinear_tangent(&self, u: &[f64], du: &[f64]) -> Vec<Complex64> {
        let prod: Vec<f64> = u.iter().zip(du).map(|(a, b)| a * b).collect();
        let mut w = self.to_spectral(&prod);
        for (w, d) in w.iter_mut().zip(&self.deriv_dealiased) {
            *w *= -d;
        }
        w
    }

    /// `f(u) = -u_xx - u_xxxx - u u_x`.
    pub fn rhs(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        check_finite(u)?;
        let mut v = self.to_spectral(u);
        let nl = self.nonlinear(u);
        for ((v, l), n) in v.iter_mut().zip(&self.linear).zip(&nl) {
            *v = *v * *l + n;
        }
        Ok(self.to_physical(&v))
    }

    /// Exact Jacobian `df/du` as a dense matrix.
    pub fn jacobian(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(u)?;
        check_finite(u)?;
        let n = self.grid.n;
        let mut jac = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let mut v = self.to_spectral(&e);
            let nl = self.nonlinear_tangent(u, &e);
            for ((v, l), n) in v.iter_mut().zip(&self.linear).zip(&nl) {
                *v = *v * *l + n;
            }
            jac.set_column(j, &nalgebra::DVector::from_vec(self.to_physical(&v)));
            e[j] = 0.0;
        }
        Ok(jac)
    }

    fn advance_spectral(&self, u: &[f64]) -> (Vec<Complex64>, Stages) {
        let n = self.grid.n;
        let v = self.to_spectral(u);
        let nv = self.nonlinear(u);
        let a_hat: Vec<Complex64> = (0..n).map(|m| v[m] * self.e2[m] + nv[m] * self.q[m]).collect();
        let a = self.to_physical(&a_hat);
        let na = self.nonlinear(&a);
        let b_hat: Vec<Complex64> = (0..n).map(|m| v[m] * self.e2[m] + na[m] * self.q[m]).collect();
        let b = self.to_physical(&b_hat);
        let nb = self.nonlinear(&b);
        let c_hat: Vec<Complex64> = (0..n)
            .map(|m| a_hat[m] * self.e2[m] + (nb[m] * 2.0 - nv[m]) * self.q[m])
            .collect();
        let c = self.to_physical(&c_hat);
        let nc = self.nonlinear(&c);
        let next: Vec<Complex64> = (0..n)
            .map(|m| {
                v[m] * self.e[m]
                    + nv[m] * self.f1[m]
                    + (na[m] + nb[m]) * (2.0 * self.f2[m])
                    + nc[m] * self.f3[m]
            })
            .collect();
        let stages = Stages {
            u: u.to_vec(),
            a,
            b,
            c,
        };
        (next, stages)
    }

    /// Linearized ETDRK4 step applied to one tangent vector.
    fn tangent_column(&self, stages: &Stages, du: &[f64]) -> Vec<f64> {
        let n = self.grid.n;
        let dv = self.to_spectral(du);
        let dnv = self.nonlinear_tangent(&stages.u, du);
        let da_hat: Vec<Complex64> = (0..n).map(|m| dv[m] * self.e2[m] + dnv[m] * self.q[m]).collect();
        let da = self.to_physical(&da_hat);
        let dna = self.nonlinear_tangent(&stages.a, &da);
        let db_hat: Vec<Complex64> = (0..n).map(|m| dv[m] * self.e2[m] + dna[m] * self.q[m]).collect();
        let db = self.to_physical(&db_hat);
        let dnb = self.nonlinear_tangent(&stages.b, &db);
        let dc_hat: Vec<Complex64> = (0..n)
            .map(|m| da_hat[m] * self.e2[m] + (dnb[m] * 2.0 - dnv[m]) * self.q[m])
            .collect();
        let dc = self.to_physical(&dc_hat);
        let dnc = self.nonlinear_tangent(&stages.c, &dc);
        let next: Vec<Complex64> = (0..n)
            .map(|m| {
                dv[m] * self.e[m]
                    + dnv[m] * self.f1[m]
                    + (dna[m] + dnb[m]) * (2.0 * self.f2[m])
                    + dnc[m] * self.f3[m]
            })
            .collect();
        self.to_physical(&next)
    }

    /// Advances the state by one `dt`.
    pub fn step(&self, state: &PhysicalState) -> Result<PhysicalState> {
        self.check_len(&state.u)?;
        let (next, _) = self.advance_spectral(&state.u);
        let u = self.to_physical(&next);
        let t = state.t + self.dt;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { time: t });
        }
        Ok(PhysicalState::new(u, t))
    }

    /// Advances the state and a tangent basis together.
    pub fn step_with_tangent(
        &self,
        state: &PhysicalState,
        basis: &DMatrix<f64>,
    ) -> Result<(PhysicalState, DMatrix<f64>)> {
        self.check_len(&state.u)?;
        if basis.nrows() != self.grid.n {
            return Err(Error::Contract(format!(
                "tangent basis has {} rows, grid has {} points",
                basis.nrows(),
                self.grid.n
            )));
        }
        let (next, stages) = self.advance_spectral(&state.u);
        let u = self.to_physical(&next);
        let t = state.t + self.dt;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { time: t });
        }
        let mut out = DMatrix::zeros(basis.nrows(), basis.ncols());
        for (j, col) in basis.column_iter().enumerate() {
            let pushed = self.tangent_column(&stages, col.as_slice());
            if pushed.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { time: t });
            }
            out.set_column(j, &nalgebra::DVector::from_vec(pushed));
        }
        Ok((PhysicalState::new(u, t), out))
    }

    /// Integrates the tangent equation over one step along the trajectory through `state`.
    pub fn tangent_step(&self, state: &PhysicalState, basis: &TangentBasis) -> Result<TangentBasis> {
        let (_, v) = self.step_with_tangent(state, &basis.v)?;
        Ok(TangentBasis {
            v,
            t: basis.t + self.dt,
        })
    }

    /// Runs the trajectory, discards `[0, t_transient)` and stores every
    /// `sample_every`-th state of `[t_transient, t_total)`.
    pub fn simulate(
        &self,
        u0: &PhysicalState,
        t_total: f64,
        t_transient: f64,
        sample_every: usize,
    ) -> Result<PhysicalTrajectory> {
        if sample_every == 0 {
            return Err(Error::Config("sample_every must be >= 1".into()));
        }
        if !(t_transient < t_total) || t_transient < 0.0 {
            return Err(Error::Config(format!(
                "transient ({t_transient}) must be in [0, t_total = {t_total})"
            )));
        }
        self.check_len(&u0.u)?;
        check_finite(&u0.u)?;
        let n_total = (t_total / self.dt).round() as usize;
        let n_transient = (t_transient / self.dt).round() as usize;
        let mut states = Vec::with_capacity((n_total - n_transient) / sample_every + 1);
        let t0 = n_transient as f64 * self.dt;
        let dt_sample = self.dt * sample_every as f64;
        let mut u = u0.u.clone();
        for s in 0..n_total {
            if s >= n_transient && (s - n_transient).is_multiple_of(sample_every) {
                let t = t0 + states.len() as f64 * dt_sample;
                states.push(PhysicalState::new(u.clone(), t));
            }
            let (next, _) = self.advance_spectral(&u);
            u = self.to_physical(&next);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp {
                    time: (s + 1) as f64 * self.dt,
                });
            }
        }
        Ok(PhysicalTrajectory {
            length: self.grid.length,
            dt_sample,
            states,
        })
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.grid.n {
            return Err(Error::Contract(format!(
                "state has {} points, grid has {}",
                u.len(),
                self.grid.n
            )));
        }
        Ok(())
    }
}

fn check_finite(u: &[f64]) -> Result<()> {
    if u.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalDomain("non-finite entry in state".into()))
    }
}

pub fn rhs(grid: &Grid, u: &PhysicalState) -> Result<Vec<f64>> {
    // dt only affects the cached ETD coefficients, which rhs does not use.
    KsSolver::new(grid, 1.0)?.rhs(&u.u)
}

pub fn jacobian(grid: &Grid, u: &PhysicalState) -> Result<DMatrix<f64>> {
    KsSolver::new(grid, 1.0)?.jacobian(&u.u)
}

pub fn step_etdrk4(grid: &Grid, u: &PhysicalState, dt: f64) -> Result<PhysicalState> {
    KsSolver::new(grid, dt)?.step(u)
}

pub fn tangent_step(grid: &Grid, u: &PhysicalState, basis: &TangentBasis, dt: f64) -> Result<TangentBasis> {
    KsSolver::new(grid, dt)?.tangent_step(u, basis)
}

pub fn simulate(
    grid: &Grid,
    u0: &PhysicalState,
    dt: f64,
    t_total: f64,
    t_transient: f64,
    sample_every: usize,
) -> Result<PhysicalTrajectory> {
    KsSolver::new(grid, dt)?.simulate(u0, t_total, t_transient, sample_every)
}

/// Circular shift by `s` grid points: `out[i] = u[i - s]`.
pub fn shift(u: &[f64], s: usize) -> Vec<f64> {
    let n = u.len();
    (0..n).map(|i| u[(i + n - s % n) % n]).collect()
}

/// The KS flow sampled every `steps_per_interval` solver steps, as a
/// [`Propagator`] for tangent-space analysis.
///
/// With `zero_mean` set, tangent vectors are confined to the zero-mean
/// subspace. The spatial mean is conserved by the flow, so that subspace is
/// invariant and the analysis ignores the neutral mean-shift direction.
#[derive(Debug, Clone)]
pub struct KsPropagator {
    pub solver: KsSolver,
    pub steps_per_interval: usize,
    pub zero_mean: bool,
}

impl KsPropagator {
    pub fn new(solver: KsSolver) -> Self {
        Self {
            solver,
            steps_per_interval: 1,
            zero_mean: true,
        }
    }
}

impl Propagator for KsPropagator {
    type State = PhysicalState;

    fn step_interval(&self) -> f64 {
        self.solver.dt * self.steps_per_interval as f64
    }

    fn dimension(&self) -> usize {
        self.solver.grid.n
    }

    fn advance(&self, state: &PhysicalState) -> Result<PhysicalState> {
        let mut s = self.solver.step(state)?;
        for _ in 1..self.steps_per_interval {
            s = self.solver.step(&s)?;
        }
        Ok(s)
    }

    fn push_tangent(&self, state: &PhysicalState, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.advance_with_tangent(state, basis)?.1)
    }

    fn advance_with_tangent(
        &self,
        state: &PhysicalState,
        basis: &DMatrix<f64>,
    ) -> Result<(PhysicalState, DMatrix<f64>)> {
        let mut state = state.clone();
        let mut basis = basis.clone();
        for _ in 0..self.steps_per_interval {
            let (s, b) = self.solver.step_with_tangent(&state, &basis)?;
            state = s;
            basis = b;
        }
        self.project_tangent(&mut basis);
        Ok((state, basis))
    }

    fn project_tangent(&self, basis: &mut DMatrix<f64>) {
        if self.zero_mean {
            for mut col in basis.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(grid: &Grid, eps: f64) -> Vec<f64> {
        grid.x
            .iter()
            .map(|&x| eps * (2.0 * PI * x / grid.length).sin())
            .collect()
    }

    #[test]
    fn grid_spacing_and_errors() {
        let g = make_grid(22.0, 64).unwrap();
        assert_eq!(g.spacing(), 0.34375);
        for w in g.x.windows(2) {
            assert!((w[1] - w[0] - 0.34375).abs() < 1e-14);
        }
        for m in 1..32 {
            assert_eq!(g.wavenumbers[64 - m], -g.wavenumbers[m]);
        }
        assert_eq!(make_grid(22.0, 512).unwrap().x.len(), 512);
        assert!(matches!(make_grid(22.0, 7), Err(Error::Config(_))));
        assert!(matches!(make_grid(22.0, 48), Err(Error::Config(_))));
        assert!(matches!(make_grid(0.0, 64), Err(Error::Config(_))));
    }

    #[test]
    fn rhs_zero_and_constant() {
        let g = make_grid(22.0, 64).unwrap();
        let f = rhs(&g, &PhysicalState::new(vec![0.0; 64], 0.0)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        let f = rhs(&g, &PhysicalState::new(vec![1.7; 64], 0.0)).unwrap();
        assert!(f.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn rhs_single_mode_growth() {
        let g = make_grid(22.0, 64).unwrap();
        let u = sine(&g, 1e-6);
        let f = rhs(&g, &PhysicalState::new(u.clone(), 0.0)).unwrap();
        let k = 2.0 * PI / 22.0;
        let sigma = k * k - k.powi(4);
        assert!((sigma - 0.0749).abs() < 1e-4);
        for (fi, ui) in f.iter().zip(&u) {
            if ui.abs() > 1e-7 {
                assert!(((fi / ui) - sigma).abs() / sigma < 1e-4);
            }
        }
    }

    #[test]
    fn rhs_rejects_non_finite() {
        let g = make_grid(22.0, 8).unwrap();
        let mut u = vec![0.0; 8];
        u[3] = f64::NAN;
        assert!(matches!(
            rhs(&g, &PhysicalState::new(u, 0.0)),
            Err(Error::NumericalDomain(_))
        ));
    }

    #[test]
    fn zero_state_is_fixed() {
        let g = make_grid(22.0, 64).unwrap();
        let solver = KsSolver::new(&g, 0.05).unwrap();
        let mut s = PhysicalState::new(vec![0.0; 64], 0.0);
        for _ in 0..100 {
            s = solver.step(&s).unwrap();
        }
        assert!(s.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_mode_linear_growth() {
        let g = make_grid(22.0, 64).unwrap();
        let solver = KsSolver::new(&g, 0.05).unwrap();
        let eps = 1e-6;
        let mut s = PhysicalState::new(sine(&g, eps), 0.0);
        let k = 2.0 * PI / 22.0;
        let sigma = k * k - k.powi(4);
        for _ in 0..1000 {
            s = solver.step(&s).unwrap();
        }
        // amplitude from the projection onto the sine mode
        let amp: f64 = s
            .u
            .iter()
            .zip(&g.x)
            .map(|(u, &x)| u * (2.0 * PI * x / 22.0).sin())
            .sum::<f64>()
            * 2.0
            / 64.0;
        let expected = eps * (sigma * 50.0).exp();
        assert!((amp - expected).abs() / expected < 1e-3, "{amp} vs {expected}");
    }

    #[test]
    fn simulate_counts_and_determinism() {
        let g = make_grid(22.0, 32).unwrap();
        let u0 = default_initial_condition(&g, 3);
        let a = simulate(&g, &u0, 0.05, 10.0, 5.0, 1).unwrap();
        assert_eq!(a.len(), 100);
        assert!((a.states[0].t - 5.0).abs() < 1e-12);
        let b = simulate(&g, &u0, 0.05, 10.0, 5.0, 1).unwrap();
        assert_eq!(a, b);
        let c = simulate(&g, &u0, 0.05, 10.0, 5.0, 3).unwrap();
        assert_eq!(c.len(), 34);
        assert!((c.dt_sample - 0.15).abs() < 1e-15);
        assert!(simulate(&g, &u0, 0.05, 10.0, 10.0, 1).is_err());
        assert!(simulate(&g, &u0, 0.05, 10.0, 5.0, 0).is_err());
    }

    #[test]
    fn tangent_zero_and_linear_growth() {
        let g = make_grid(22.0, 64).unwrap();
        let solver = KsSolver::new(&g, 0.05).unwrap();
        let zero = PhysicalState::new(vec![0.0; 64], 0.0);
        let basis = TangentBasis {
            v: DMatrix::zeros(64, 2),
            t: 0.0,
        };
        let out = solver.tangent_step(&zero, &basis).unwrap();
        assert!(out.v.iter().all(|&v| v == 0.0));

        let mut v = TangentBasis {
            v: DMatrix::from_column_slice(64, 1, &sine(&g, 1.0)),
            t: 0.0,
        };
        let norm0 = v.v.norm();
        for _ in 0..400 {
            v = solver.tangent_step(&zero, &v).unwrap();
        }
        let k = 2.0 * PI / 22.0;
        let expected = ((k * k - k.powi(4)) * 20.0).exp();
        let growth = v.v.norm() / norm0;
        assert!((growth - expected).abs() / expected < 1e-3);
    }

    #[test]
    fn shift_roundtrip() {
        let u: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(shift(&u, 1), vec![7.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(shift(&shift(&u, 3), 5), u);
    }

    #[test]
    fn etdrk4_self_convergence() {
        let g = make_grid(22.0, 64).unwrap();
        let u0 = PhysicalState::new(
            g.x.iter()
                .map(|x| {
                    let s = 2.0 * PI * x / g.length;
                    s.cos() * (1.0 + s.sin())
                })
                .collect(),
            0.0,
        );
        let run = |dt: f64| {
            let solver = KsSolver::new(&g, dt).unwrap();
            (0..(2.0 / dt).round() as usize).fold(u0.clone(), |u, _| solver.step(&u).unwrap())
        };
        let reference = run(2.0 / 4096.0);
        let err = |dt: f64| {
            let u = run(dt);
            u.u.iter().zip(&reference.u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (e1, e2) = (err(0.0125), err(0.00625));
        let order = (e1 / e2).log2();
        // stiff order reduction keeps the observed order a little below 4 here
        assert!((3.6..4.4).contains(&order), "order {order} from {e1:e} and {e2:e}");
    }
}
