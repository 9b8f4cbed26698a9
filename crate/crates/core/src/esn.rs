//! Echo state network on latent trajectories.
//!
//! Update and readout follow the row-vector convention
//! `r(t+1) = tanh([y(t); 1]^T W_in + r(t)^T W)` and `y(t+1) = [r(t+1); 1]^T W_out`.
//! Latent inputs are standardized per component before entering the reservoir
//! and the readout predicts standardized values; [`EsnModel`] hides this behind
//! raw latent vectors on its public surface.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cae::{LatentSource, LatentTrajectory};
use crate::error::{Error, Result};
use crate::metrics;
use crate::tangent::Propagator;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsnHyper {
    pub n_r: usize,
    /// Scale of the input weights acting on latent components.
    pub sigma_in: f64,
    /// Scale of the input weights acting on the constant bias input.
    pub bias_in: f64,
    pub rho: f64,
    /// Mean nonzero entries per reservoir row.
    pub connectivity: f64,
    pub beta: f64,
    pub washout: usize,
    /// Standard deviation of Gaussian noise added to standardized training inputs.
    pub noise: f64,
    pub seed: u64,
}

impl Default for EsnHyper {
    fn default() -> Self {
        Self {
            n_r: 1000,
            sigma_in: 0.1,
            bias_in: 0.1,
            rho: 0.9,
            connectivity: 3.0,
            beta: 1e-6,
            washout: 200,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl EsnHyper {
    pub fn validate(&self, n_lat: usize) -> Result<()> {
        if self.n_r < n_lat || self.n_r == 0 {
            return Err(Error::Config(format!(
                "reservoir size {} must be >= latent dimension {n_lat}",
                self.n_r
            )));
        }
        if !(self.rho > 0.0)
            || !(self.beta >= 0.0)
            || !(self.connectivity >= 1.0)
            || !(self.sigma_in > 0.0)
            || !(self.bias_in >= 0.0)
            || !(self.noise >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid ESN hyperparameters (rho {}, beta {}, connectivity {}, sigma_in {}, bias_in {}, noise {})",
                self.rho, self.beta, self.connectivity, self.sigma_in, self.bias_in, self.noise
            )));
        }
        Ok(())
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n_rows + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx: triplets.iter().map(|t| t.1).collect(),
            values: triplets.iter().map(|t| t.2).collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `A x`.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_rows, |i, _| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(|k| self.values[k] * x[self.col_idx[k]])
                .sum()
        })
    }

    /// `A^T x`.
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_cols);
        for i in 0..self.n_rows {
            let xi = x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col_idx[k]] += self.values[k] * xi;
            }
        }
        out
    }

    /// `A^T V`.
    pub fn tr_mul_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_cols, v.ncols());
        for j in 0..v.ncols() {
            for i in 0..self.n_rows {
                let vij = v[(i, j)];
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    out[(self.col_idx[k], j)] += self.values[k] * vij;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[(i, self.col_idx[k])] = self.values[k];
            }
        }
        d
    }

    fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Largest eigenvalue modulus by block power iteration.
///
/// A block of four vectors is pushed through `A` and re-orthonormalized;
/// the Ritz values of the projected 4x4 matrix capture both a real dominant
/// eigenvalue and a dominant complex-conjugate pair.
pub fn spectral_radius(a: &SparseMatrix, max_iter: usize, rel_tol: f64, seed: u64) -> Result<f64> {
    let n = a.n_rows;
    let block = n.min(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    v = v.qr().q();
    let mut previous = f64::NAN;
    let mut settled = 0;
    for _ in 0..max_iter {
        let av = DMatrix::from_columns(
            &v.column_iter()
                .map(|c| a.mul_vec(&c.clone_owned()))
                .collect::<Vec<_>>(),
        );
        if av.norm() == 0.0 {
            return Err(Error::Generation("reservoir matrix is zero".into()));
        }
        let h = v.transpose() * &av;
        let estimate = h
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if (estimate - previous).abs() <= rel_tol * estimate {
            settled += 1;
            if settled >= 3 {
                return Ok(estimate);
            }
        } else {
            settled = 0;
        }
        previous = estimate;
        v = av.qr().q();
    }
    if previous.is_finite() && previous > 0.0 {
        Ok(previous)
    } else {
        Err(Error::Generation("power iteration did not converge".into()))
    }
}

/// Per-component affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn fit(ys: &[Vec<f64>]) -> Self {
        let n = ys.first().map_or(0, Vec::len);
        let count = ys.len().max(1) as f64;
        let mut mean = vec![0.0; n];
        for y in ys {
            for (m, v) in mean.iter_mut().zip(y) {
                *m += v / count;
            }
        }
        let mut std = vec![0.0; n];
        for y in ys {
            for ((s, v), m) in std.iter_mut().zip(y).zip(&mean) {
                *s += (v - m).powi(2) / count;
            }
        }
        let std = std
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn forward(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            y.len(),
            y.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s),
        )
    }

    pub fn inverse(&self, z: &DVector<f64>) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirState {
    pub r: DVector<f64>,
    pub t: f64,
}

impl ReservoirState {
    pub fn zeros(n_r: usize) -> Self {
        Self {
            r: DVector::zeros(n_r),
            t: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsnModel {
    /// `(n_lat + 1) x n_r`; the last row multiplies the bias input.
    pub w_in: DMatrix<f64>,
    /// `n_r x n_r`, applied as `r^T W`.
    pub w: SparseMatrix,
    /// `(n_r + 1) x n_lat`; the last row is the readout bias.
    pub w_out: Option<DMatrix<f64>>,
    pub hyper: EsnHyper,
    pub standardizer: Standardizer,
    /// Time between consecutive latent samples the network was trained on.
    pub dt: f64,
}

impl EsnModel {
    pub fn n_lat(&self) -> usize {
        self.w_in.nrows() - 1
    }

    pub fn n_r(&self) -> usize {
        self.w.n_rows
    }

    pub fn readout(&self) -> Result<&DMatrix<f64>> {
        self.w_out
            .as_ref()
            .ok_or_else(|| Error::Contract("ESN readout is not trained".into()))
    }

    /// One reservoir update from a standardized input.
    fn update(&self, r: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let n_lat = self.n_lat();
        let mut pre = self.w.tr_mul_vec(r);
        for (j, p) in pre.iter_mut().enumerate() {
            let mut acc = self.w_in[(n_lat, j)];
            for i in 0..n_lat {
                acc += self.w_in[(i, j)] * z[i];
            }
            *p += acc;
        }
        pre.map(f64::tanh)
    }

    /// Standardized prediction `[r; 1]^T W_out`.
    fn predict(&self, w_out: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
        let n_r = self.n_r();
        let mut y = w_out.rows(0, n_r).tr_mul(r);
        y += w_out.row(n_r).transpose();
        y
    }

    /// Latent prediction read out from a reservoir state.
    pub fn readout_latent(&self, r: &ReservoirState) -> Result<Vec<f64>> {
        let w_out = self.readout()?;
        Ok(self.standardizer.inverse(&self.predict(w_out, &r.r)))
    }

    /// Standardizes a training trajectory and records the transform.
    pub fn fit_standardizer(&mut self, latent: &LatentTrajectory) {
        self.standardizer = Standardizer::fit(&latent.ys);
    }

    /// Solves for the readout from a teacher-forced run over `latent`.
    pub fn train(&mut self, latent: &LatentTrajectory) -> Result<()> {
        let gram = self.gram(latent)?;
        self.w_out = Some(gram.solve(self.hyper.beta)?);
        Ok(())
    }

    /// Accumulates the normal-equation blocks over `latent`.
    ///
    /// With `noise > 0` the reservoir is driven by inputs perturbed in standardized
    /// units while the targets stay clean.
    pub fn gram(&self, latent: &LatentTrajectory) -> Result<RidgeGram> {
        let states = if self.hyper.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.hyper.seed.wrapping_add(0x0153));
            let noisy = LatentTrajectory {
                ys: latent
                    .ys
                    .iter()
                    .map(|y| {
                        y.iter()
                            .zip(&self.standardizer.std)
                            .map(|(v, s)| {
                                let n: f64 = StandardNormal.sample(&mut rng);
                                v + self.hyper.noise * s * n
                            })
                            .collect()
                    })
                    .collect(),
                ..latent.clone()
            };
            open_loop(self, &noisy, &ReservoirState::zeros(self.n_r()))?
        } else {
            open_loop(self, latent, &ReservoirState::zeros(self.n_r()))?
        };
        let targets: Vec<DVector<f64>> = latent.ys.iter().map(|y| self.standardizer.forward(y)).collect();
        // state k was produced from input k and predicts target k + 1
        let n_pairs = latent.len() - 1;
        RidgeGram::accumulate(
            (0..n_pairs).map(|k| (&states[k].r, &targets[k + 1])),
            self.n_r(),
            self.n_lat(),
            self.hyper.washout,
        )
    }
}

/// Samples the input and recurrent matrices and rescales `W` to spectral radius `rho`.
pub fn generate_reservoir(hyper: &EsnHyper, n_lat: usize, dt: f64) -> Result<EsnModel> {
    hyper.validate(n_lat)?;
    let n_r = hyper.n_r;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let w_in = DMatrix::from_fn(n_lat + 1, n_r, |i, _| {
        let scale = if i < n_lat { hyper.sigma_in } else { hyper.bias_in };
        rng.random_range(-scale..=scale)
    });
    let p = (hyper.connectivity / n_r as f64).min(1.0);
    let mut triplets = Vec::with_capacity((hyper.connectivity * n_r as f64 * 1.2) as usize);
    for i in 0..n_r {
        for j in 0..n_r {
            if rng.random_bool(p) {
                triplets.push((i, j, rng.random_range(-1.0..=1.0)));
            }
        }
    }
    let mut w = SparseMatrix::from_triplets(n_r, n_r, triplets);
    if w.nnz() == 0 {
        return Err(Error::Generation("reservoir matrix has no nonzeros".into()));
    }
    let radius = spectral_radius(&w, 1000, 1e-4, hyper.seed ^ 0x5eed)?;
    if !(radius > 0.0) {
        return Err(Error::Generation("reservoir matrix has zero spectral radius".into()));
    }
    w.scale(hyper.rho / radius);
    Ok(EsnModel {
        w_in,
        w,
        w_out: None,
        hyper: *hyper,
        standardizer: Standardizer::identity(n_lat),
        dt,
    })
}

/// Teacher-forced run: one reservoir update per input, returning every post-update state.
pub fn open_loop(model: &EsnModel, inputs: &LatentTrajectory, r0: &ReservoirState) -> Result<Vec<ReservoirState>> {
    if inputs.is_empty() {
        return Err(Error::Contract("open loop needs at least one input".into()));
    }
    if r0.r.len() != model.n_r() || inputs.width() != model.n_lat() {
        return Err(Error::Contract(format!(
            "shape mismatch: reservoir {} vs {}, latent {} vs {}",
            r0.r.len(),
            model.n_r(),
            inputs.width(),
            model.n_lat()
        )));
    }
    let mut r = r0.r.clone();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, y) in inputs.ys.iter().enumerate() {
        if y.len() != model.n_lat() {
            return Err(Error::Contract(format!("input {i} has width {}", y.len())));
        }
        r = model.update(&r, &model.standardizer.forward(y));
        out.push(ReservoirState {
            r: r.clone(),
            t: inputs.time(i) + inputs.dt_sample,
        });
    }
    Ok(out)
}

/// Normal-equation blocks `R^T R` and `R^T Y` of the ridge problem, where each
/// row of `R` is `[r; 1]`.
#[derive(Debug, Clone)]
pub struct RidgeGram {
    pub rtr: DMatrix<f64>,
    pub rty: DMatrix<f64>,
}

impl RidgeGram {
    fn accumulate<'a>(
        pairs: impl Iterator<Item = (&'a DVector<f64>, &'a DVector<f64>)>,
        n_r: usize,
        n_out: usize,
        washout: usize,
    ) -> Result<Self> {
        const CHUNK: usize = 512;
        let mut rtr = DMatrix::zeros(n_r + 1, n_r + 1);
        let mut rty = DMatrix::zeros(n_r + 1, n_out);
        let mut rows: Vec<(&DVector<f64>, &DVector<f64>)> = Vec::with_capacity(CHUNK);
        let mut used = 0;
        let mut flush = |rows: &mut Vec<(&DVector<f64>, &DVector<f64>)>| {
            if rows.is_empty() {
                return;
            }
            let design = DMatrix::from_fn(rows.len(), n_r + 1, |k, j| if j < n_r { rows[k].0[j] } else { 1.0 });
            let y = DMatrix::from_fn(rows.len(), n_out, |k, j| rows[k].1[j]);
            rtr.gemm_tr(1.0, &design, &design, 1.0);
            rty.gemm_tr(1.0, &design, &y, 1.0);
            rows.clear();
        };
        for (k, pair) in pairs.enumerate() {
            if pair.0.len() != n_r || pair.1.len() != n_out {
                return Err(Error::Contract(format!("training pair {k} has the wrong shape")));
            }
            if k < washout {
                continue;
            }
            rows.push(pair);
            used += 1;
            if rows.len() == CHUNK {
                flush(&mut rows);
            }
        }
        flush(&mut rows);
        if used == 0 {
            return Err(Error::Contract("washout discards every training pair".into()));
        }
        Ok(Self { rtr, rty })
    }

    /// `W_out = (R^T R + beta I)^{-1} R^T Y`.
    pub fn solve(&self, beta: f64) -> Result<DMatrix<f64>> {
        let mut a = self.rtr.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += beta;
        }
        let chol = a.clone().cholesky().ok_or(Error::SingularSystem)?;
        if beta == 0.0 {
            let pivots = chol.l_dirty().diagonal();
            let max = pivots.amax();
            let min = pivots.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            if min * min <= 1e-13 * max * max {
                return Err(Error::SingularSystem);
            }
        }
        let w = chol.solve(&self.rty);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem);
        }
        Ok(w)
    }
}

/// Ridge readout from aligned `(state, target)` pairs after discarding `washout` pairs.
pub fn train_readout(
    states: &[ReservoirState],
    targets: &[Vec<f64>],
    beta: f64,
    washout: usize,
) -> Result<DMatrix<f64>> {
    if states.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} states but {} targets",
            states.len(),
            targets.len()
        )));
    }
    if washout >= states.len() {
        return Err(Error::Contract(format!(
            "washout {washout} leaves no pairs out of {}",
            states.len()
        )));
    }
    let n_r = states[0].r.len();
    let n_out = targets[0].len();
    let targets: Vec<DVector<f64>> = targets.iter().map(|t| DVector::from_column_slice(t)).collect();
    RidgeGram::accumulate(states.iter().map(|s| &s.r).zip(&targets), n_r, n_out, washout)?.solve(beta)
}

/// Autonomous rollout: feeds each prediction back as the next input.
///
/// `r0` is the reservoir state before `y0` is consumed. Returns the `n_steps`
/// predictions following `y0` and the reservoir states that produced them.
pub fn closed_loop(
    model: &EsnModel,
    y0: &[f64],
    r0: &ReservoirState,
    n_steps: usize,
) -> Result<(LatentTrajectory, Vec<ReservoirState>)> {
    let w_out = model.readout()?;
    if y0.len() != model.n_lat() || r0.r.len() != model.n_r() {
        return Err(Error::Contract("closed loop: shape mismatch".into()));
    }
    let mut z = model.standardizer.forward(y0);
    let mut r = r0.r.clone();
    let mut ys = Vec::with_capacity(n_steps);
    let mut states = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        r = model.update(&r, &z);
        z = model.predict(w_out, &r);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        ys.push(model.standardizer.inverse(&z));
        states.push(ReservoirState {
            r: r.clone(),
            t: r0.t + (step + 1) as f64 * model.dt,
        });
    }
    Ok((
        LatentTrajectory {
            ys,
            dt_sample: model.dt,
            t0: r0.t + model.dt,
            source: LatentSource::Esn,
        },
        states,
    ))
}

/// `d r(t+1) / d r(t)` of the closed-loop map, evaluated with the post-update state.
pub fn esn_jacobian(model: &EsnModel, r_next: &ReservoirState) -> Result<DMatrix<f64>> {
    let w_out = model.readout()?;
    let n_r = model.n_r();
    let n_lat = model.n_lat();
    let w_in = model.w_in.rows(0, n_lat);
    let w_out = w_out.rows(0, n_r);
    // coupling[i, j] = sum_l W_in[l, j] W_out[i, l], i.e. (W_out W_in)^T transposed into column form
    let mut jac = (w_out * w_in).transpose() + model.w.to_dense().transpose();
    for (i, mut row) in jac.row_iter_mut().enumerate() {
        row *= 1.0 - r_next.r[i] * r_next.r[i];
    }
    Ok(jac)
}

/// The closed-loop ESN as a [`Propagator`] on reservoir states.
#[derive(Debug, Clone)]
pub struct EsnPropagator<'a> {
    model: &'a EsnModel,
    w_out: &'a DMatrix<f64>,
}

impl<'a> EsnPropagator<'a> {
    pub fn new(model: &'a EsnModel) -> Result<Self> {
        Ok(Self {
            model,
            w_out: model.readout()?,
        })
    }

    fn step(&self, r: &DVector<f64>) -> DVector<f64> {
        let z = self.model.predict(self.w_out, r);
        self.model.update(r, &z)
    }

    /// `diag(1 - r_next^2) (W_in^T W_out^T + W^T) V` without forming the Jacobian.
    fn apply_jacobian(&self, r_next: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
        let n_r = self.model.n_r();
        let n_lat = self.model.n_lat();
        let through_readout = self.w_out.rows(0, n_r).tr_mul(basis);
        let mut out = self.model.w_in.rows(0, n_lat).tr_mul(&through_readout);
        out += self.model.w.tr_mul_mat(basis);
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= 1.0 - r_next[i] * r_next[i];
        }
        out
    }
}

impl Propagator for EsnPropagator<'_> {
    type State = ReservoirState;

    fn step_interval(&self) -> f64 {
        self.model.dt
    }

    fn dimension(&self) -> usize {
        self.model.n_r()
    }

    fn advance(&self, state: &ReservoirState) -> Result<ReservoirState> {
        Ok(ReservoirState {
            r: self.step(&state.r),
            t: state.t + self.model.dt,
        })
    }

    fn push_tangent(&self, state: &ReservoirState, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.advance_with_tangent(state, basis)?.1)
    }

    fn advance_with_tangent(
        &self,
        state: &ReservoirState,
        basis: &DMatrix<f64>,
    ) -> Result<(ReservoirState, DMatrix<f64>)> {
        let next = self.step(&state.r);
        let pushed = self.apply_jacobian(&next, basis);
        Ok((
            ReservoirState {
                r: next,
                t: state.t + self.model.dt,
            },
            pushed,
        ))
    }
}

/// Validation setup for [`hyper_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSplit {
    /// Number of leading samples used for training; the rest validate.
    pub n_train: usize,
    /// Closed-loop starts spread over the validation block.
    pub n_starts: usize,
    /// Closed-loop length per start, in samples.
    pub horizon_steps: usize,
    pub lambda1: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: EsnHyper,
    /// Mean validation horizon in Lyapunov times, one per candidate (`NaN` if it diverged).
    pub scores: Vec<f64>,
}

/// Scores one trained model by its mean closed-loop horizon over the validation starts.
pub fn validation_score(model: &EsnModel, dataset: &LatentTrajectory, split: &SearchSplit) -> Result<f64> {
    let n_val = dataset.len().saturating_sub(split.n_train);
    let span = split.horizon_steps + 1;
    if n_val < span || split.n_starts == 0 {
        return Err(Error::Config(format!(
            "validation block of {n_val} samples cannot hold a {span}-sample forecast"
        )));
    }
    let states = open_loop(model, dataset, &ReservoirState::zeros(model.n_r()))?;
    let room = n_val - span;
    let mut total = 0.0;
    for s in 0..split.n_starts {
        let start = split.n_train + if split.n_starts > 1 { room * s / (split.n_starts - 1) } else { 0 };
        // state after consuming y[start - 1] precedes y[start]
        let r0 = &states[start - 1];
        let (pred, _) = closed_loop(model, &dataset.ys[start], r0, split.horizon_steps)?;
        let mut predicted = vec![dataset.ys[start].clone()];
        predicted.extend(pred.ys);
        let reference = &dataset.ys[start..start + span];
        total += metrics::horizon_from_series(reference, &predicted, model.dt, split.lambda1, split.threshold)?;
    }
    Ok(total / split.n_starts as f64)
}

/// Exhaustive search over `grid`, scored by validation prediction horizon.
pub fn hyper_search(dataset: &LatentTrajectory, grid: &[EsnHyper], split: &SearchSplit) -> Result<SearchOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if split.n_train < 2 || split.n_train >= dataset.len() {
        return Err(Error::Config("training block must leave a validation block".into()));
    }
    let train = LatentTrajectory {
        ys: dataset.ys[..split.n_train].to_vec(),
        ..dataset.clone()
    };
    let mut scores = vec![f64::NAN; grid.len()];
    // candidates differing only in beta share a reservoir and its Gram matrix
    let mut cache: Option<(EsnHyper, EsnModel, RidgeGram)> = None;
    for (i, hyper) in grid.iter().enumerate() {
        let reservoir_key = EsnHyper { beta: 0.0, ..*hyper };
        let reuse = cache.as_ref().is_some_and(|(k, _, _)| *k == reservoir_key);
        if !reuse {
            let mut model = generate_reservoir(hyper, dataset.width(), dataset.dt_sample)?;
            model.fit_standardizer(&train);
            let gram = model.gram(&train)?;
            cache = Some((reservoir_key, model, gram));
        }
        let (_, base, gram) = cache.as_ref().expect("cache filled above");
        let mut model = base.clone();
        model.hyper = *hyper;
        let Ok(w_out) = gram.solve(hyper.beta) else {
            continue;
        };
        model.w_out = Some(w_out);
        if let Ok(score) = validation_score(&model, dataset, split) {
            scores[i] = score;
        }
    }
    let best = (0..grid.len())
        .filter(|&i| scores[i].is_finite())
        .max_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(grid[b].n_r.cmp(&grid[a].n_r))
                .then(grid[b].rho.total_cmp(&grid[a].rho))
        })
        .ok_or_else(|| Error::SearchFailure { scores: scores.clone() })?;
    Ok(SearchOutcome {
        best: grid[best],
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hyper(seed: u64) -> EsnHyper {
        EsnHyper {
            n_r: 20,
            sigma_in: 0.5,
            bias_in: 0.5,
            rho: 0.8,
            connectivity: 3.0,
            beta: 1e-6,
            washout: 5,
            noise: 0.0,
            seed,
        }
    }

    fn sine_latent(n: usize) -> LatentTrajectory {
        LatentTrajectory {
            ys: (0..n)
                .map(|i| {
                    let t = i as f64 * 0.25;
                    vec![t.sin(), (0.5 * t).cos()]
                })
                .collect(),
            dt_sample: 0.25,
            t0: 0.0,
            source: LatentSource::Encoder,
        }
    }

    #[test]
    fn generation_is_deterministic_and_scaled() {
        let h = EsnHyper {
            n_r: 200,
            ..small_hyper(3)
        };
        let a = generate_reservoir(&h, 2, 0.25).unwrap();
        let b = generate_reservoir(&h, 2, 0.25).unwrap();
        assert_eq!(a, b);
        let eig = a
            .w
            .to_dense()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!((eig - 0.8).abs() / 0.8 < 1e-3, "measured radius {eig}");
        assert!(a.w_in.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn nonzero_count_follows_connectivity() {
        let h = EsnHyper {
            n_r: 100,
            ..small_hyper(1)
        };
        let m = generate_reservoir(&h, 2, 0.25).unwrap();
        assert!((250..=350).contains(&m.w.nnz()), "{}", m.w.nnz());
    }

    #[test]
    fn first_open_loop_state_from_zero() {
        let m = generate_reservoir(&small_hyper(0), 2, 0.25).unwrap();
        let inputs = LatentTrajectory {
            ys: vec![vec![0.0, 0.0]],
            ..sine_latent(1)
        };
        let states = open_loop(&m, &inputs, &ReservoirState::zeros(20)).unwrap();
        for j in 0..20 {
            assert_eq!(states[0].r[j], m.w_in[(2, j)].tanh());
        }
        assert!(open_loop(&m, &inputs, &ReservoirState::zeros(19)).is_err());
    }

    #[test]
    fn readout_exact_fit() {
        let states = vec![
            ReservoirState {
                r: DVector::from_vec(vec![1.0]),
                t: 0.0,
            },
            ReservoirState {
                r: DVector::from_vec(vec![2.0]),
                t: 1.0,
            },
        ];
        let w = train_readout(&states, &[vec![2.0], vec![4.0]], 0.0, 0).unwrap();
        for (s, t) in states.iter().zip([2.0, 4.0]) {
            let pred = w[(0, 0)] * s.r[0] + w[(1, 0)];
            assert!((pred - t).abs() < 1e-12);
        }
        let singular = vec![states[0].clone(), states[0].clone()];
        assert!(matches!(
            train_readout(&singular, &[vec![2.0], vec![2.0]], 0.0, 0),
            Err(Error::SingularSystem)
        ));
        let big = train_readout(&states, &[vec![2.0], vec![4.0]], 1e12, 0).unwrap();
        assert!(big.norm() < 1e-10);
    }

    #[test]
    fn closed_loop_matches_open_loop_on_own_output() {
        let mut m = generate_reservoir(&small_hyper(2), 2, 0.25).unwrap();
        let data = sine_latent(300);
        m.fit_standardizer(&data);
        m.train(&data).unwrap();
        let r0 = ReservoirState::zeros(20);
        let (pred, states) = closed_loop(&m, &data.ys[0], &r0, 3).unwrap();
        assert_eq!(pred.source, LatentSource::Esn);
        let fed = LatentTrajectory {
            ys: vec![data.ys[0].clone(), pred.ys[0].clone()],
            ..data.clone()
        };
        let open = open_loop(&m, &fed, &r0).unwrap();
        for (a, b) in open.iter().zip(&states) {
            assert!((&a.r - &b.r).norm() < 1e-14);
        }
        let (empty, _) = closed_loop(&m, &data.ys[0], &r0, 0).unwrap();
        assert!(empty.is_empty());
        let untrained = generate_reservoir(&small_hyper(2), 2, 0.25).unwrap();
        assert!(closed_loop(&untrained, &data.ys[0], &r0, 1).is_err());
    }

    #[test]
    fn jacobian_structure() {
        let mut m = generate_reservoir(&small_hyper(4), 2, 0.25).unwrap();
        m.w_out = Some(DMatrix::zeros(21, 2));
        let mut r = ReservoirState::zeros(20);
        r.r[3] = 1.0;
        r.r[5] = 0.3;
        let j = esn_jacobian(&m, &r).unwrap();
        assert!(j.row(3).iter().all(|&v| v == 0.0));
        let expected = m.w.to_dense().transpose();
        for c in 0..20 {
            assert!((j[(5, c)] - 0.91 * expected[(5, c)]).abs() < 1e-15);
            assert_eq!(j[(0, c)], expected[(0, c)]);
        }
    }

    #[test]
    fn ridge_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states: Vec<ReservoirState> = (0..20)
            .map(|_| ReservoirState {
                r: DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0)),
                t: 0.0,
            })
            .collect();
        let targets: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let w = train_readout(&states, &targets, 0.0, 0).unwrap();
        let design = DMatrix::from_fn(20, 6, |i, j| if j < 5 { states[i].r[j] } else { 1.0 });
        let y = DMatrix::from_fn(20, 2, |i, j| targets[i][j]);
        let oracle = design.pseudo_inverse(1e-14).unwrap() * y;
        assert!((&w - &oracle).amax() < 1e-8, "{}", (&w - &oracle).amax());
    }

    #[test]
    fn ridge_is_optimal_under_entry_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let states: Vec<ReservoirState> = (0..30)
            .map(|_| ReservoirState {
                r: DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
                t: 0.0,
            })
            .collect();
        let targets: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let beta = 0.1;
        let w = train_readout(&states, &targets, beta, 3).unwrap();
        let objective = |w: &DMatrix<f64>| {
            let fit: f64 = states[3..]
                .iter()
                .zip(&targets[3..])
                .map(|(s, t)| {
                    let pred: f64 = (0..4).map(|j| s.r[j] * w[(j, 0)]).sum::<f64>() + w[(4, 0)];
                    (pred - t[0]).powi(2)
                })
                .sum();
            fit + beta * w.norm_squared()
        };
        let best = objective(&w);
        for i in 0..5 {
            for delta in [-1e-3, 1e-3] {
                let mut p = w.clone();
                p[(i, 0)] += delta;
                assert!(objective(&p) >= best);
            }
        }
    }

    fn random_trained(seed: u64) -> EsnModel {
        let mut m = generate_reservoir(&small_hyper(seed), 3, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.w_out = Some(DMatrix::from_fn(21, 3, |_, _| rng.random_range(-0.5..0.5)));
        m.standardizer = Standardizer {
            mean: vec![0.1, -0.2, 0.3],
            std: vec![0.5, 2.0, 1.0],
        };
        m
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..5 {
            let m = random_trained(seed);
            let prop = EsnPropagator::new(&m).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let r = DVector::from_fn(20, |_, _| rng.random_range(-0.9..0.9));
            let next = ReservoirState {
                r: prop.step(&r),
                t: 0.0,
            };
            let jac = esn_jacobian(&m, &next).unwrap();
            let h = 1e-6;
            let mut fd = DMatrix::zeros(20, 20);
            for j in 0..20 {
                let mut plus = r.clone();
                let mut minus = r.clone();
                plus[j] += h;
                minus[j] -= h;
                fd.set_column(j, &((prop.step(&plus) - prop.step(&minus)) / (2.0 * h)));
            }
            let rel = (&jac - &fd).svd(false, false).singular_values[0] / jac.clone().svd(false, false).singular_values[0];
            assert!(rel < 1e-6, "seed {seed}: {rel}");
            let basis = DMatrix::identity(20, 20);
            let (_, pushed) = prop.advance_with_tangent(&ReservoirState { r, t: 0.0 }, &basis).unwrap();
            assert!((&pushed - &jac).amax() < 1e-14);
        }
    }

    #[test]
    fn echo_state_forgets_initial_condition() {
        let m = generate_reservoir(&small_hyper(9), 2, 0.25).unwrap();
        let data = sine_latent(200);
        let a = open_loop(&m, &data, &ReservoirState::zeros(20)).unwrap();
        let mut r0 = ReservoirState::zeros(20);
        r0.r.fill(0.9);
        let b = open_loop(&m, &data, &r0).unwrap();
        assert!((&a[199].r - &b[199].r).norm() < 1e-6);
        assert!(a.iter().all(|s| s.r.iter().all(|v| v.abs() < 1.0)));
    }

    #[test]
    fn input_noise_is_seeded() {
        let data = sine_latent(300);
        let fit = |noise: f64| {
            let mut m = generate_reservoir(&EsnHyper { noise, ..small_hyper(6) }, 2, 0.25).unwrap();
            m.fit_standardizer(&data);
            m.train(&data).unwrap();
            m.w_out.unwrap()
        };
        assert_eq!(fit(0.01), fit(0.01));
        assert_ne!(fit(0.01), fit(0.0));
    }

    #[test]
    fn single_candidate_search() {
        let data = sine_latent(400);
        let grid = [small_hyper(1)];
        let split = SearchSplit {
            n_train: 300,
            n_starts: 2,
            horizon_steps: 40,
            lambda1: 0.1,
            threshold: 0.5,
        };
        let out = hyper_search(&data, &grid, &split).unwrap();
        assert_eq!(out.best, grid[0]);
        let again = hyper_search(&data, &grid, &split).unwrap();
        assert_eq!(out.scores, again.scores);
        assert!(hyper_search(&data, &[], &split).is_err());
    }
}
