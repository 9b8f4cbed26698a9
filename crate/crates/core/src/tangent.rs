//! Tangent-space stability analysis over a generic discrete-time propagator.
//!
//! Lyapunov exponents come from repeated tangent pushes with thin-QR
//! re-orthonormalization. Covariant Lyapunov vectors use the forward/backward
//! scheme of Ginelli et al.: the forward pass stores the Gram-Schmidt bases
//! `Q` and the triangular factors `R`, the backward pass iterates an upper
//! triangular coefficient matrix `C <- R^{-1} C`, and the CLVs are `Q C`.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A discrete-time dynamical system with a linear tangent map.
pub trait Propagator {
    type State: Clone;

    /// Time elapsed per call to [`Propagator::advance`].
    fn step_interval(&self) -> f64;

    /// Dimension of the tangent space.
    fn dimension(&self) -> usize;

    fn advance(&self, state: &Self::State) -> Result<Self::State>;

    /// Pushes every column of `basis` through the tangent map at `state`.
    fn push_tangent(&self, state: &Self::State, basis: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// Advances the state and pushes the basis along the same step.
    fn advance_with_tangent(
        &self,
        state: &Self::State,
        basis: &DMatrix<f64>,
    ) -> Result<(Self::State, DMatrix<f64>)> {
        let pushed = self.push_tangent(state, basis)?;
        Ok((self.advance(state)?, pushed))
    }

    /// Restricts a basis to the invariant subspace the analysis runs on.
    /// The default keeps the full tangent space.
    fn project_tangent(&self, _basis: &mut DMatrix<f64>) {}
}

/// `x -> A x` with a fixed matrix; the tangent map is `A` itself.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub matrix: DMatrix<f64>,
    pub step_interval: f64,
}

impl LinearMap {
    pub fn diagonal(entries: &[f64]) -> Self {
        Self {
            matrix: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(entries)),
            step_interval: 1.0,
        }
    }

    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            matrix: DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
            step_interval: 1.0,
        }
    }
}

impl Propagator for LinearMap {
    type State = nalgebra::DVector<f64>;

    fn step_interval(&self) -> f64 {
        self.step_interval
    }

    fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    fn advance(&self, state: &Self::State) -> Result<Self::State> {
        Ok(&self.matrix * state)
    }

    fn push_tangent(&self, _state: &Self::State, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(&self.matrix * basis)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpectrum {
    /// Exponents per unit time, sorted non-increasing.
    pub lambdas: Vec<f64>,
    /// Running estimates at each checkpoint: `(time, estimates)`.
    pub history: Vec<(f64, Vec<f64>)>,
    pub t_total: f64,
}

impl LyapunovSpectrum {
    pub fn m(&self) -> usize {
        self.lambdas.len()
    }
}

#[derive(Debug, Clone)]
pub struct ClvSet {
    pub times: Vec<f64>,
    /// One `dimension x m` matrix of unit columns per stored time.
    pub vectors: Vec<DMatrix<f64>>,
    pub lambdas: LyapunovSpectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSplit {
    pub unstable: Range<usize>,
    pub neutral: Range<usize>,
    pub stable: Range<usize>,
    pub tol_zero: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pairing {
    UnstableNeutral,
    UnstableStable,
    NeutralStable,
}

impl Pairing {
    pub const ALL: [Pairing; 3] = [
        Pairing::UnstableNeutral,
        Pairing::UnstableStable,
        Pairing::NeutralStable,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Pairing::UnstableNeutral => "unstable-neutral",
            Pairing::UnstableStable => "unstable-stable",
            Pairing::NeutralStable => "neutral-stable",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }
}

impl std::fmt::Display for Pairing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenettinConfig {
    /// Number of exponents.
    pub m: usize,
    /// Propagator steps included in the average.
    pub n_steps: usize,
    /// Propagator steps discarded before averaging, letting the random basis align.
    pub n_transient: usize,
    pub ortho_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinelliConfig {
    pub m: usize,
    /// All window lengths count QR steps of `ortho_every` propagator steps.
    pub n_forward_transient: usize,
    pub n_window: usize,
    pub n_backward_transient: usize,
    pub ortho_every: usize,
    /// Store CLVs at every `report_every`-th QR step of the window.
    pub report_every: usize,
    pub seed: u64,
}

/// Thin QR with a non-negative diagonal of `R`.
pub fn positive_qr(a: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    (q, r)
}

fn random_orthonormal<P: Propagator>(prop: &P, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = prop.dimension();
    if m == 0 || m > n {
        return Err(Error::Contract(format!(
            "number of exponents must be in 1..={n}, got {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    prop.project_tangent(&mut basis);
    Ok(positive_qr(basis).0)
}

/// Pushes the basis through `steps` propagator steps.
fn push_steps<P: Propagator>(
    prop: &P,
    state: &mut P::State,
    basis: DMatrix<f64>,
    steps: usize,
    step_counter: usize,
) -> Result<DMatrix<f64>> {
    let mut basis = basis;
    for _ in 0..steps {
        let (next, pushed) = prop.advance_with_tangent(state, &basis)?;
        *state = next;
        basis = pushed;
    }
    if basis.iter().any(|v| !v.is_finite()) {
        return Err(Error::TangentOverflow { step: step_counter + steps });
    }
    Ok(basis)
}

fn sort_order(lambdas: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    order
}

fn permute(values: &[f64], order: &[usize]) -> Vec<f64> {
    order.iter().map(|&i| values[i]).collect()
}

/// Lyapunov exponents by QR re-orthonormalization.
pub fn benettin_les<P: Propagator>(
    prop: &P,
    state0: &P::State,
    config: &BenettinConfig,
) -> Result<LyapunovSpectrum> {
    let BenettinConfig {
        m,
        n_steps,
        n_transient,
        ortho_every,
        checkpoint_every,
        seed,
    } = *config;
    if ortho_every == 0 || checkpoint_every == 0 || n_steps == 0 {
        return Err(Error::Config(
            "n_steps, ortho_every and checkpoint_every must be >= 1".into(),
        ));
    }
    let dt = prop.step_interval();
    let mut state = state0.clone();
    let mut q = random_orthonormal(prop, m, seed)?;

    let mut done = 0;
    while done < n_transient {
        let chunk = ortho_every.min(n_transient - done);
        let mut pushed = push_steps(prop, &mut state, q, chunk, done)?;
        prop.project_tangent(&mut pushed);
        q = positive_qr(pushed).0;
        done += chunk;
    }

    let mut log_sums = vec![0.0; m];
    let mut history = Vec::new();
    let mut done = 0;
    while done < n_steps {
        let chunk = ortho_every.min(n_steps - done);
        let mut pushed = push_steps(prop, &mut state, q, chunk, n_transient + done)?;
        prop.project_tangent(&mut pushed);
        let (q_new, r) = positive_qr(pushed);
        for (i, sum) in log_sums.iter_mut().enumerate() {
            let rii = r[(i, i)];
            if !(rii > 0.0) {
                return Err(Error::DegenerateTangent {
                    step: done / ortho_every,
                    index: i,
                    value: rii,
                });
            }
            *sum += rii.ln();
        }
        q = q_new;
        let before = done;
        done += chunk;
        if done / checkpoint_every != before / checkpoint_every || done == n_steps {
            let elapsed = done as f64 * dt;
            let estimates: Vec<f64> = log_sums.iter().map(|s| s / elapsed).collect();
            let order = sort_order(&estimates);
            history.push((elapsed, permute(&estimates, &order)));
        }
    }

    let t_total = n_steps as f64 * dt;
    let lambdas = history.last().map(|(_, l)| l.clone()).unwrap_or_default();
    Ok(LyapunovSpectrum {
        lambdas,
        history,
        t_total,
    })
}

/// Covariant Lyapunov vectors by the forward-backward Ginelli scheme.
///
/// Stored times are QR checkpoints `t_k` for `k = 0, report_every, ...` below
/// `n_window`, measured from the end of the forward transient.
pub fn ginelli_clvs<P: Propagator>(
    prop: &P,
    state0: &P::State,
    config: &GinelliConfig,
) -> Result<ClvSet> {
    let GinelliConfig {
        m,
        n_forward_transient,
        n_window,
        n_backward_transient,
        ortho_every,
        report_every,
        seed,
    } = *config;
    if n_window == 0 || ortho_every == 0 || report_every == 0 {
        return Err(Error::Config(
            "n_window, ortho_every and report_every must be >= 1".into(),
        ));
    }
    let dt = prop.step_interval();
    let interval = ortho_every as f64 * dt;
    let mut state = state0.clone();
    let mut q = random_orthonormal(prop, m, seed)?;

    for k in 0..n_forward_transient {
        let mut pushed = push_steps(prop, &mut state, q, ortho_every, k * ortho_every)?;
        prop.project_tangent(&mut pushed);
        q = positive_qr(pushed).0;
    }

    let total = n_window + n_backward_transient;
    let mut stored_q = Vec::with_capacity(n_window / report_every + 1);
    let mut rs: Vec<DMatrix<f64>> = Vec::with_capacity(total);
    let mut log_sums = vec![0.0; m];
    let mut history = Vec::new();
    for k in 0..total {
        if k < n_window && k % report_every == 0 {
            stored_q.push(q.clone());
        }
        let mut pushed = push_steps(
            prop,
            &mut state,
            q,
            ortho_every,
            (n_forward_transient + k) * ortho_every,
        )?;
        prop.project_tangent(&mut pushed);
        let (q_new, r) = positive_qr(pushed);
        for (i, sum) in log_sums.iter_mut().enumerate() {
            let rii = r[(i, i)];
            if !(rii >= 1e-14) {
                return Err(Error::DegenerateTangent {
                    step: k,
                    index: i,
                    value: rii,
                });
            }
            *sum += rii.ln();
        }
        let elapsed = (k + 1) as f64 * interval;
        history.push((elapsed, log_sums.iter().map(|s| s / elapsed).collect::<Vec<_>>()));
        rs.push(r);
        q = q_new;
    }

    // Backward pass: C_k = R_{k+1}^{-1} C_{k+1}, where rs[k] maps t_k to t_{k+1}.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut c = DMatrix::from_fn(m, m, |i, j| {
        use rand::Rng;
        if i < j {
            rng.random_range(-1.0..1.0)
        } else if i == j {
            rng.random_range(0.5..1.5)
        } else {
            0.0
        }
    });
    normalize_columns(&mut c);
    let mut coefficients: Vec<Option<DMatrix<f64>>> = vec![None; stored_q.len()];
    for k in (0..total).rev() {
        let r = &rs[k];
        c = r
            .solve_upper_triangular(&c)
            .ok_or(Error::DegenerateTangent {
                step: k,
                index: 0,
                value: 0.0,
            })?;
        normalize_columns(&mut c);
        if k < n_window && k % report_every == 0 {
            coefficients[k / report_every] = Some(c.clone());
        }
    }

    let mut times = Vec::with_capacity(stored_q.len());
    let mut vectors = Vec::with_capacity(stored_q.len());
    for (idx, (q, c)) in stored_q.iter().zip(coefficients).enumerate() {
        let c = c.expect("every reported checkpoint has coefficients");
        let mut v = q * c;
        normalize_columns(&mut v);
        times.push((n_forward_transient + idx * report_every) as f64 * interval);
        vectors.push(v);
    }

    let (last_time, last) = history.last().cloned().expect("total >= 1");
    let order = sort_order(&last);
    let is_sorted = order.iter().enumerate().all(|(i, &o)| i == o);
    if !is_sorted {
        for v in &mut vectors {
            let cols: Vec<_> = order.iter().map(|&i| v.column(i).clone_owned()).collect();
            *v = DMatrix::from_columns(&cols);
        }
    }
    let history = history
        .into_iter()
        .map(|(t, l)| (t, permute(&l, &order)))
        .collect();
    Ok(ClvSet {
        times,
        vectors,
        lambdas: LyapunovSpectrum {
            lambdas: permute(&last, &order),
            history,
            t_total: last_time,
        },
    })
}

fn normalize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KaplanYorke {
    pub dimension: f64,
    /// Every partial sum is non-negative: the spectrum is too short to resolve
    /// the dimension and `dimension` equals the number of exponents.
    pub saturated: bool,
}

/// `D_KY = j + (sum_{i<=j} lambda_i) / |lambda_{j+1}|` with `j` the largest
/// index whose cumulative sum is non-negative.
pub fn kaplan_yorke(lambdas: &[f64]) -> KaplanYorke {
    let mut cumsum = 0.0;
    for (j, &l) in lambdas.iter().enumerate() {
        if cumsum + l < 0.0 {
            return KaplanYorke {
                dimension: j as f64 + cumsum / l.abs(),
                saturated: false,
            };
        }
        cumsum += l;
    }
    KaplanYorke {
        dimension: lambdas.len() as f64,
        saturated: true,
    }
}

pub fn classify_subspaces(lambdas: &[f64], tol_zero: f64) -> Result<SubspaceSplit> {
    if !(tol_zero > 0.0) {
        return Err(Error::Config(format!("tol_zero must be positive, got {tol_zero}")));
    }
    let n_unstable = lambdas.iter().take_while(|&&l| l > tol_zero).count();
    let n_neutral = lambdas[n_unstable..]
        .iter()
        .take_while(|&&l| l >= -tol_zero)
        .count();
    let first_stable = n_unstable + n_neutral;
    if lambdas[first_stable..].iter().any(|&l| l >= -tol_zero) {
        return Err(Error::Contract("spectrum is not sorted non-increasing".into()));
    }
    Ok(SubspaceSplit {
        unstable: 0..n_unstable,
        neutral: n_unstable..first_stable,
        stable: first_stable..lambdas.len(),
        tol_zero,
    })
}

/// Angle in degrees between the lines spanned by two unit vectors.
pub fn clv_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for v in [a, b] {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("expected unit vector, norm = {norm}")));
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot.abs().clamp(0.0, 1.0).acos().to_degrees())
}

/// Angle between the leading vectors of two subspaces at every stored time.
pub fn angle_series(clvs: &ClvSet, split: &SubspaceSplit, pairing: Pairing) -> Result<Vec<f64>> {
    let lead = |range: &Range<usize>, name: &'static str| -> Result<usize> {
        if range.is_empty() {
            Err(Error::EmptySubspace(name))
        } else {
            Ok(range.start)
        }
    };
    let (i, j) = match pairing {
        Pairing::UnstableNeutral => (lead(&split.unstable, "unstable")?, lead(&split.neutral, "neutral")?),
        Pairing::UnstableStable => (lead(&split.unstable, "unstable")?, lead(&split.stable, "stable")?),
        Pairing::NeutralStable => (lead(&split.neutral, "neutral")?, lead(&split.stable, "stable")?),
    };
    clvs.vectors
        .iter()
        .map(|v| {
            if j >= v.ncols() {
                return Err(Error::Contract(format!(
                    "CLV set has {} vectors, split needs index {j}",
                    v.ncols()
                )));
            }
            clv_angle(v.column(i).as_slice(), v.column(j).as_slice())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn benettin(m: usize, n_steps: usize) -> BenettinConfig {
        BenettinConfig {
            m,
            n_steps,
            n_transient: 100,
            ortho_every: 1,
            checkpoint_every: 10,
            seed: 7,
        }
    }

    #[test]
    fn diagonal_map_exponents_exact() {
        let map = LinearMap::diagonal(&[2.0, 0.5]);
        let spec = benettin_les(&map, &DVector::from_vec(vec![1.0, 1.0]), &benettin(2, 200)).unwrap();
        assert!((spec.lambdas[0] - 2f64.ln()).abs() < 1e-12);
        assert!((spec.lambdas[1] + 2f64.ln()).abs() < 1e-12);
        assert_eq!(spec.history.last().unwrap().1, spec.lambdas);
        assert_eq!(spec.history.len(), 20);
    }

    #[test]
    fn rotation_has_zero_exponents() {
        let map = LinearMap::rotation(0.3);
        let spec = benettin_les(&map, &DVector::from_vec(vec![1.0, 0.0]), &benettin(2, 500)).unwrap();
        for l in spec.lambdas {
            assert!(l.abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_too_many_exponents() {
        let map = LinearMap::diagonal(&[2.0, 0.5]);
        assert!(benettin_les(&map, &DVector::from_vec(vec![1.0, 1.0]), &benettin(3, 10)).is_err());
    }

    #[test]
    fn overflow_reports_error() {
        let map = LinearMap::diagonal(&[1e200, 0.5]);
        let mut cfg = benettin(2, 10);
        cfg.ortho_every = 5;
        let err = benettin_les(&map, &DVector::from_vec(vec![1.0, 1.0]), &cfg).unwrap_err();
        assert!(matches!(err, Error::TangentOverflow { .. }));
    }

    #[test]
    fn diagonal_map_clvs_are_axes() {
        let map = LinearMap::diagonal(&[2.0, 0.5]);
        let cfg = GinelliConfig {
            m: 2,
            n_forward_transient: 60,
            n_window: 10,
            n_backward_transient: 60,
            ortho_every: 1,
            report_every: 1,
            seed: 1,
        };
        let clvs = ginelli_clvs(&map, &DVector::from_vec(vec![1.0, 1.0]), &cfg).unwrap();
        assert_eq!(clvs.vectors.len(), 10);
        for v in &clvs.vectors {
            assert!((v[(0, 0)].abs() - 1.0).abs() < 1e-12);
            assert!((v[(1, 1)].abs() - 1.0).abs() < 1e-12);
            assert!(v[(1, 0)].abs() < 1e-12 && v[(0, 1)].abs() < 1e-12);
        }
    }

    #[test]
    fn non_normal_map_clvs_are_eigenvectors() {
        // eigenvalues 2 and 0.5 with eigenvectors (1,0) and (1,-1.5)/|.|
        let map = LinearMap {
            matrix: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 0.5]),
            step_interval: 1.0,
        };
        let cfg = GinelliConfig {
            m: 2,
            n_forward_transient: 30,
            n_window: 5,
            n_backward_transient: 30,
            ortho_every: 1,
            report_every: 1,
            seed: 4,
        };
        let clvs = ginelli_clvs(&map, &DVector::from_vec(vec![1.0, 1.0]), &cfg).unwrap();
        let e2 = [1.0 / (1.0f64 + 2.25).sqrt(), -1.5 / (1.0f64 + 2.25).sqrt()];
        for v in &clvs.vectors {
            assert!(clv_angle(v.column(0).as_slice(), &[1.0, 0.0]).unwrap() < 1e-6);
            assert!(clv_angle(v.column(1).as_slice(), &e2).unwrap() < 1e-6);
        }
    }

    #[test]
    fn kaplan_yorke_examples() {
        let ky = kaplan_yorke(&[0.5, 0.1, -0.2, -1.0]);
        assert!((ky.dimension - 3.4).abs() < 1e-12 && !ky.saturated);
        assert_eq!(kaplan_yorke(&[-0.1, -0.2]).dimension, 0.0);
        let sat = kaplan_yorke(&[0.3, 0.1]);
        assert!(sat.saturated);
        assert_eq!(sat.dimension, 2.0);
        let extended = kaplan_yorke(&[0.5, 0.1, -0.2, -1.0, -3.0, -5.0]);
        assert_eq!(extended.dimension, ky.dimension);
    }

    #[test]
    fn classification() {
        let s = classify_subspaces(&[0.05, 0.001, -0.2], 0.005).unwrap();
        assert_eq!(s.unstable, 0..1);
        assert_eq!(s.neutral, 1..2);
        assert_eq!(s.stable, 2..3);
        assert!(classify_subspaces(&[0.05], 0.0).is_err());
    }

    #[test]
    fn angles() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(clv_angle(&a, &a).unwrap(), 0.0);
        assert_eq!(clv_angle(&a, &b).unwrap(), 90.0);
        assert_eq!(clv_angle(&a, &[-1.0, 0.0]).unwrap(), 0.0);
        assert!(clv_angle(&a, &[2.0, 0.0]).is_err());
    }

    #[test]
    fn axis_clvs_give_right_angles() {
        let map = LinearMap::diagonal(&[2.0, 1.0, 0.5]);
        let cfg = GinelliConfig {
            m: 3,
            n_forward_transient: 80,
            n_window: 8,
            n_backward_transient: 80,
            ortho_every: 1,
            report_every: 1,
            seed: 2,
        };
        let clvs = ginelli_clvs(&map, &DVector::from_vec(vec![1.0; 3]), &cfg).unwrap();
        let split = classify_subspaces(&clvs.lambdas.lambdas, 1e-6).unwrap();
        assert_eq!(split.neutral, 1..2);
        for p in Pairing::ALL {
            let series = angle_series(&clvs, &split, p).unwrap();
            assert_eq!(series.len(), 8);
            assert!(series.iter().all(|&a| (a - 90.0).abs() < 1e-9));
        }
        let no_neutral = SubspaceSplit {
            unstable: 0..1,
            neutral: 1..1,
            stable: 1..3,
            tol_zero: 1e-6,
        };
        assert!(matches!(
            angle_series(&clvs, &no_neutral, Pairing::NeutralStable),
            Err(Error::EmptySubspace("neutral"))
        ));
    }
}
