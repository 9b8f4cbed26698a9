//! One-dimensional convolutional autoencoder with hand-written backward passes.
//!
//! Activations for a batch are stored as matrices with one column per sample
//! and channel-major rows (`channel * len + position`). Convolutions use
//! periodic padding and are lowered to a matrix product through an im2col
//! gather, so forward and backward passes are dominated by GEMM.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ks::{PhysicalState, PhysicalTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaeArchitecture {
    pub n_x: usize,
    pub n_lat: usize,
    pub encoder_convs: Vec<ConvSpec>,
}

impl CaeArchitecture {
    /// Three stride-2 convolutions with kernel 5 and channels 1-8-16-32.
    pub fn standard(n_x: usize, n_lat: usize) -> Self {
        let convs = [(1, 8), (8, 16), (16, 32)]
            .into_iter()
            .map(|(channels_in, channels_out)| ConvSpec {
                channels_in,
                channels_out,
                kernel: 5,
                stride: 2,
            })
            .collect();
        Self {
            n_x,
            n_lat,
            encoder_convs: convs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat == 0 || self.n_x == 0 {
            return Err(Error::Config("n_x and n_lat must be positive".into()));
        }
        let mut len = self.n_x;
        let mut channels = 1;
        for (i, c) in self.encoder_convs.iter().enumerate() {
            if c.channels_in != channels {
                return Err(Error::Config(format!(
                    "conv {i} expects {} input channels, previous layer gives {channels}",
                    c.channels_in
                )));
            }
            if c.stride == 0 || c.kernel == 0 || c.channels_out == 0 || !len.is_multiple_of(c.stride) {
                return Err(Error::Config(format!(
                    "conv {i}: stride {} must divide length {len} (kernel and channels positive)",
                    c.stride
                )));
            }
            len /= c.stride;
            channels = c.channels_out;
        }
        Ok(())
    }

    /// `(channels, length)` at the output of the convolutional encoder stack.
    pub fn feature_shape(&self) -> (usize, usize) {
        let len = self
            .encoder_convs
            .iter()
            .fold(self.n_x, |len, c| len / c.stride);
        let channels = self.encoder_convs.last().map_or(1, |c| c.channels_out);
        (channels, len)
    }

    fn layers(&self) -> (Vec<Layer>, usize) {
        let mut layers = Vec::new();
        let mut len = self.n_x;
        for c in &self.encoder_convs {
            layers.push(Layer::Conv {
                cin: c.channels_in,
                cout: c.channels_out,
                kernel: c.kernel,
                stride: c.stride,
                len_in: len,
            });
            layers.push(Layer::Tanh);
            len /= c.stride;
        }
        let (channels, flat_len) = self.feature_shape();
        let flat = channels * flat_len;
        layers.push(Layer::Dense {
            inp: flat,
            out: self.n_lat,
        });
        layers.push(Layer::Tanh);
        let encoder_len = layers.len();

        layers.push(Layer::Dense {
            inp: self.n_lat,
            out: flat,
        });
        layers.push(Layer::Tanh);
        let mut len = flat_len;
        let n_convs = self.encoder_convs.len();
        for (i, c) in self.encoder_convs.iter().rev().enumerate() {
            layers.push(Layer::Upsample {
                channels: c.channels_out,
                factor: c.stride,
                len_in: len,
            });
            len *= c.stride;
            layers.push(Layer::Conv {
                cin: c.channels_out,
                cout: c.channels_in,
                kernel: c.kernel,
                stride: 1,
                len_in: len,
            });
            if i + 1 < n_convs {
                layers.push(Layer::Tanh);
            }
        }
        (layers, encoder_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        len_in: usize,
    },
    Upsample {
        channels: usize,
        factor: usize,
        len_in: usize,
    },
    Dense {
        inp: usize,
        out: usize,
    },
    Tanh,
}

impl Layer {
    fn n_params(&self) -> usize {
        match *self {
            Layer::Conv {
                cin, cout, kernel, ..
            } => cout * cin * kernel + cout,
            Layer::Dense { inp, out } => out * inp + out,
            _ => 0,
        }
    }

    /// `(fan_in, fan_out)` for the uniform initialization bound.
    fn fans(&self) -> (usize, usize) {
        match *self {
            Layer::Conv {
                cin, cout, kernel, ..
            } => (cin * kernel, cout * kernel),
            Layer::Dense { inp, out } => (inp, out),
            _ => (0, 0),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Upsample { .. } => "upsample",
            Layer::Dense { .. } => "dense",
            Layer::Tanh => "tanh",
        }
    }

    fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        match *self {
            Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                len_in,
            } => {
                let len_out = len_in / stride;
                let batch = x.ncols();
                let patches = im2col(x, cin, kernel, stride, len_in);
                let w = DMatrix::from_column_slice(cout, cin * kernel, &params[..cout * cin * kernel]);
                let bias = &params[cout * cin * kernel..];
                let y = w * patches;
                DMatrix::from_fn(cout * len_out, batch, |row, b| {
                    let (co, i) = (row / len_out, row % len_out);
                    y[(co, i * batch + b)] + bias[co]
                })
            }
            Layer::Upsample {
                channels,
                factor,
                len_in,
            } => {
                let len_out = len_in * factor;
                DMatrix::from_fn(channels * len_out, x.ncols(), |row, b| {
                    let (c, i) = (row / len_out, row % len_out);
                    x[(c * len_in + i / factor, b)]
                })
            }
            Layer::Dense { inp, out } => {
                let w = DMatrix::from_column_slice(out, inp, &params[..out * inp]);
                let bias = &params[out * inp..];
                let mut y = w * x;
                for mut col in y.column_iter_mut() {
                    for (v, b) in col.iter_mut().zip(bias) {
                        *v += b;
                    }
                }
                y
            }
            Layer::Tanh => x.map(f64::tanh),
        }
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(
        &self,
        params: &[f64],
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        dy: &DMatrix<f64>,
        grad: &mut [f64],
    ) -> DMatrix<f64> {
        match *self {
            Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                len_in,
            } => {
                let len_out = len_in / stride;
                let batch = x.ncols();
                let nw = cout * cin * kernel;
                let dy_mat = DMatrix::from_fn(cout, len_out * batch, |co, col| {
                    let (i, b) = (col / batch, col % batch);
                    dy[(co * len_out + i, b)]
                });
                let patches = im2col(x, cin, kernel, stride, len_in);
                let dw = &dy_mat * patches.transpose();
                for (g, d) in grad[..nw].iter_mut().zip(dw.iter()) {
                    *g += d;
                }
                for (co, g) in grad[nw..nw + cout].iter_mut().enumerate() {
                    *g += dy_mat.row(co).sum();
                }
                let w = DMatrix::from_column_slice(cout, cin * kernel, &params[..nw]);
                let dpatches = w.transpose() * dy_mat;
                col2im(&dpatches, cin, kernel, stride, len_in, batch)
            }
            Layer::Upsample {
                channels,
                factor,
                len_in,
            } => {
                let len_out = len_in * factor;
                DMatrix::from_fn(channels * len_in, x.ncols(), |row, b| {
                    let (c, i) = (row / len_in, row % len_in);
                    (0..factor).map(|f| dy[(c * len_out + i * factor + f, b)]).sum()
                })
            }
            Layer::Dense { inp, out } => {
                let nw = out * inp;
                let dw = dy * x.transpose();
                for (g, d) in grad[..nw].iter_mut().zip(dw.iter()) {
                    *g += d;
                }
                for (o, g) in grad[nw..nw + out].iter_mut().enumerate() {
                    *g += dy.row(o).sum();
                }
                let w = DMatrix::from_column_slice(out, inp, &params[..nw]);
                w.transpose() * dy
            }
            Layer::Tanh => dy.zip_map(y, |d, t| d * (1.0 - t * t)),
        }
    }
}

fn periodic_index(i: usize, j: usize, stride: usize, kernel: usize, len: usize) -> usize {
    (stride * i + j + len * kernel - kernel / 2) % len
}

/// Rows `ci * kernel + j`, columns `i * batch + b`.
fn im2col(x: &DMatrix<f64>, cin: usize, kernel: usize, stride: usize, len_in: usize) -> DMatrix<f64> {
    let len_out = len_in / stride;
    let batch = x.ncols();
    let mut p = DMatrix::zeros(cin * kernel, len_out * batch);
    for i in 0..len_out {
        for j in 0..kernel {
            let src = periodic_index(i, j, stride, kernel, len_in);
            for ci in 0..cin {
                let row = ci * kernel + j;
                let xrow = ci * len_in + src;
                for b in 0..batch {
                    p[(row, i * batch + b)] = x[(xrow, b)];
                }
            }
        }
    }
    p
}

fn col2im(
    dp: &DMatrix<f64>,
    cin: usize,
    kernel: usize,
    stride: usize,
    len_in: usize,
    batch: usize,
) -> DMatrix<f64> {
    let len_out = len_in / stride;
    let mut dx = DMatrix::zeros(cin * len_in, batch);
    for i in 0..len_out {
        for j in 0..kernel {
            let dst = periodic_index(i, j, stride, kernel, len_in);
            for ci in 0..cin {
                let row = ci * kernel + j;
                let xrow = ci * len_in + dst;
                for b in 0..batch {
                    dx[(xrow, b)] += dp[(row, i * batch + b)];
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaeModel {
    pub architecture: CaeArchitecture,
    /// All kernels, dense weights and biases, layer by layer.
    pub params: Vec<f64>,
    /// Inputs are divided by this before the encoder; outputs multiplied after.
    pub scale: f64,
    pub train_log: Vec<EpochLog>,
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    encoder_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaeHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for CaeHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

/// Gradient of the loss with respect to every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeGradient {
    pub loss: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub ys: Vec<Vec<f64>>,
    pub dt_sample: f64,
    pub t0: f64,
    pub source: LatentSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    Encoder,
    Esn,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ys.first().map_or(0, Vec::len)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt_sample
    }

    pub fn subsample(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        Self {
            ys: self.ys.iter().step_by(stride).cloned().collect(),
            dt_sample: self.dt_sample * stride as f64,
            t0: self.t0,
            source: self.source,
        }
    }
}

impl CaeModel {
    /// Glorot-uniform weights and zero biases.
    pub fn new(architecture: CaeArchitecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let (layers, encoder_len) = architecture.layers();
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.n_params();
        }
        offsets.push(total);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; total];
        for (l, &off) in layers.iter().zip(&offsets) {
            let (fan_in, fan_out) = l.fans();
            let n_weights = match *l {
                Layer::Conv {
                    cin, cout, kernel, ..
                } => cout * cin * kernel,
                Layer::Dense { inp, out } => out * inp,
                _ => 0,
            };
            if n_weights > 0 {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for p in &mut params[off..off + n_weights] {
                    *p = rng.random_range(-a..a);
                }
            }
        }
        Ok(Self {
            architecture,
            params,
            scale: 1.0,
            train_log: Vec::new(),
            layers,
            offsets,
            encoder_len,
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(
        architecture: CaeArchitecture,
        params: Vec<f64>,
        scale: f64,
        train_log: Vec<EpochLog>,
    ) -> Result<Self> {
        let mut model = Self::new(architecture, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "architecture needs {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) || !(scale > 0.0) {
            return Err(Error::Contract("non-finite parameters or scale".into()));
        }
        model.params = params;
        model.scale = scale;
        model.train_log = train_log;
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_params(&self, i: usize) -> &[f64] {
        &self.params[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Per-layer `(name, range into params)` for persistence.
    pub fn parameter_blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.n_params() > 0)
            .map(|(i, l)| {
                (
                    format!("layer{i:02}.{}", l.name()),
                    self.offsets[i]..self.offsets[i + 1],
                )
            })
            .collect()
    }

    fn run(&self, layers: std::ops::Range<usize>, x: DMatrix<f64>) -> DMatrix<f64> {
        layers.fold(x, |x, i| self.layers[i].forward(self.layer_params(i), &x))
    }

    fn batch_matrix(&self, batch: &[&[f64]]) -> Result<DMatrix<f64>> {
        let n_x = self.architecture.n_x;
        if let Some(bad) = batch.iter().find(|u| u.len() != n_x) {
            return Err(Error::Contract(format!(
                "snapshot has {} points, model expects {n_x}",
                bad.len()
            )));
        }
        let inv = 1.0 / self.scale;
        Ok(DMatrix::from_fn(n_x, batch.len(), |i, b| batch[b][i] * inv))
    }

    /// Latent vectors for a batch of snapshots.
    pub fn encode_batch(&self, batch: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let x = self.batch_matrix(batch)?;
        let y = self.run(0..self.encoder_len, x);
        Ok(y.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    pub fn decode_batch(&self, latents: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let n_lat = self.architecture.n_lat;
        if let Some(bad) = latents.iter().find(|y| y.len() != n_lat) {
            return Err(Error::Contract(format!(
                "latent vector has {} entries, model expects {n_lat}",
                bad.len()
            )));
        }
        let y = DMatrix::from_fn(n_lat, latents.len(), |i, b| latents[b][i]);
        let out = self.run(self.encoder_len..self.layers.len(), y);
        Ok(out
            .column_iter()
            .map(|c| c.iter().map(|v| v * self.scale).collect())
            .collect())
    }

    pub fn encode(&self, u: &PhysicalState) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[&u.u])?.remove(0))
    }

    pub fn decode(&self, y: &[f64], t: f64) -> Result<PhysicalState> {
        Ok(PhysicalState::new(self.decode_batch(&[y])?.remove(0), t))
    }

    pub fn reconstruct(&self, u: &PhysicalState) -> Result<PhysicalState> {
        let y = self.encode(u)?;
        self.decode(&y, u.t)
    }

    /// Output of the convolutional encoder stack (before the dense layer),
    /// as `channels x length` with one row per channel.
    pub fn encoder_features(&self, u: &PhysicalState) -> Result<DMatrix<f64>> {
        let x = self.batch_matrix(&[&u.u])?;
        let n_conv_layers = 2 * self.architecture.encoder_convs.len();
        let f = self.run(0..n_conv_layers, x);
        let (channels, len) = self.architecture.feature_shape();
        Ok(DMatrix::from_fn(channels, len, |c, i| f[(c * len + i, 0)]))
    }

    pub fn encode_trajectory(&self, traj: &PhysicalTrajectory) -> Result<LatentTrajectory> {
        let mut ys = Vec::with_capacity(traj.len());
        for chunk in traj.states.chunks(512) {
            let batch: Vec<&[f64]> = chunk.iter().map(|s| s.u.as_slice()).collect();
            ys.extend(self.encode_batch(&batch)?);
        }
        Ok(LatentTrajectory {
            ys,
            dt_sample: traj.dt_sample,
            t0: traj.states.first().map_or(0.0, |s| s.t),
            source: LatentSource::Encoder,
        })
    }

    pub fn decode_trajectory(&self, latent: &LatentTrajectory, length: f64) -> Result<PhysicalTrajectory> {
        let mut states = Vec::with_capacity(latent.len());
        for (c, chunk) in latent.ys.chunks(512).enumerate() {
            let batch: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            for (j, u) in self.decode_batch(&batch)?.into_iter().enumerate() {
                states.push(PhysicalState::new(u, latent.time(c * 512 + j)));
            }
        }
        Ok(PhysicalTrajectory {
            length,
            dt_sample: latent.dt_sample,
            states,
        })
    }

    /// Loss and parameter gradient of `mse_loss(batch, D(E(batch)))`.
    pub fn grad(&self, batch: &[&[f64]]) -> Result<CaeGradient> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let x = self.batch_matrix(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(self.layer_params(i), acts.last().expect("input pushed"));
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalDomain(format!(
                    "non-finite activation in layer {i} ({})",
                    layer.name()
                )));
            }
            acts.push(y);
        }
        let n = batch.len() as f64;
        let out = acts.last().expect("at least one layer");
        // residual in physical units: scale * out - u
        let residual = DMatrix::from_fn(out.nrows(), out.ncols(), |i, b| {
            self.scale * out[(i, b)] - batch[b][i]
        });
        let loss = residual.norm_squared() / n;
        let mut delta = residual * (2.0 * self.scale / n);
        let mut grad = vec![0.0; self.params.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let range = self.offsets[i]..self.offsets[i + 1];
            delta = layer.backward(
                self.layer_params(i),
                &acts[i],
                &acts[i + 1],
                &delta,
                &mut grad[range],
            );
        }
        Ok(CaeGradient { loss, params: grad })
    }
}

/// `(1/N) sum_i ||u_i - v_i||^2`.
pub fn mse_loss(a: &[PhysicalState], b: &[PhysicalState]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "batch sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (u, v) in a.iter().zip(b) {
        if u.u.len() != v.u.len() {
            return Err(Error::Contract("snapshot widths differ".into()));
        }
        total += u.u.iter().zip(&v.u).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    Ok(total / a.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mean reconstruction loss over a set of snapshots.
pub fn reconstruction_loss(model: &CaeModel, states: &[PhysicalState]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in states.chunks(512) {
        let batch: Vec<&[f64]> = chunk.iter().map(|s| s.u.as_slice()).collect();
        let latents = model.encode_batch(&batch)?;
        let lat_refs: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
        let recon = model.decode_batch(&lat_refs)?;
        for (u, r) in chunk.iter().zip(&recon) {
            total += u.u.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    Ok(total / states.len() as f64)
}

/// Trains the autoencoder with Adam on a contiguous train/validation split and
/// returns the parameters with the lowest validation loss.
pub fn train_cae(
    dataset: &PhysicalTrajectory,
    arch: &CaeArchitecture,
    hyper: &CaeHyper,
) -> Result<CaeModel> {
    if hyper.batch_size == 0 || dataset.len() < 10 * hyper.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} snapshots is smaller than 10 batches of {}",
            dataset.len(),
            hyper.batch_size
        )));
    }
    if !(0.0..1.0).contains(&hyper.validation_fraction) {
        return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
    }
    let n_val = ((dataset.len() as f64) * hyper.validation_fraction).round() as usize;
    let n_train = dataset.len() - n_val;
    let (train, validation) = dataset.states.split_at(n_train);
    let validation = if validation.is_empty() { train } else { validation };

    let mut model = CaeModel::new(arch.clone(), hyper.seed)?;
    let count = (train.len() * arch.n_x) as f64;
    let mean = train.iter().flat_map(|s| &s.u).sum::<f64>() / count;
    let var = train
        .iter()
        .flat_map(|s| &s.u)
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / count;
    model.scale = if var > 0.0 { var.sqrt() } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut adam = Adam::new(model.n_params(), hyper.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(hyper.batch_size) {
            let batch: Vec<&[f64]> = idx.iter().map(|&i| train[i].u.as_slice()).collect();
            let g = model.grad(&batch).map_err(|_| Error::TrainingFailure { epoch })?;
            if !g.loss.is_finite() || g.params.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingFailure { epoch });
            }
            epoch_loss += g.loss * idx.len() as f64;
            adam.update(&mut model.params, &g.params);
        }
        let train_loss = epoch_loss / train.len() as f64;
        let validation_loss = reconstruction_loss(&model, validation)?;
        if !validation_loss.is_finite() {
            return Err(Error::TrainingFailure { epoch });
        }
        model.train_log.push(EpochLog {
            epoch,
            train_loss,
            validation_loss,
        });
        if best.as_ref().is_none_or(|(b, _)| validation_loss < *b) {
            best = Some((validation_loss, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(model)
}

/// Held-out reconstruction error of the best rank-`rank` affine projection fitted on `train`.
///
/// The projection keeps the leading principal directions of the mean-removed
/// training snapshots; the error uses the same units as [`mse_loss`].
pub fn linear_projection_mse(train: &[PhysicalState], test: &[PhysicalState], rank: usize) -> Result<f64> {
    let n = train.first().map_or(0, |s| s.u.len());
    if train.is_empty() || test.is_empty() || rank == 0 || rank > n {
        return Err(Error::Contract(format!("rank {rank} projection needs data of width >= rank")));
    }
    let count = train.len() as f64;
    let mut mean = vec![0.0; n];
    for s in train {
        for (m, v) in mean.iter_mut().zip(&s.u) {
            *m += v / count;
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    for chunk in train.chunks(1024) {
        let x = DMatrix::from_fn(chunk.len(), n, |j, i| chunk[j].u[i] - mean[i]);
        cov.gemm_tr(1.0, &x, &x, 1.0);
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = DMatrix::from_fn(n, rank, |i, j| eig.eigenvectors[(i, order[j])]);
    let mut total = 0.0;
    for s in test {
        let d = nalgebra::DVector::from_iterator(n, s.u.iter().zip(&mean).map(|(v, m)| v - m));
        let coeffs = basis.tr_mul(&d);
        total += (&d - &basis * coeffs).norm_squared();
    }
    Ok(total / test.len() as f64)
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_rel_err: f64,
    /// Parameters with a resolvable gradient that entered the maximum.
    pub compared: usize,
    pub checked: usize,
}

/// Largest relative error between the analytic gradient and central
/// differences over `n_check` randomly chosen parameters.
///
/// Parameters whose analytic and numerical gradients are both below `1e-10`
/// are skipped; their relative error is dominated by round-off.
pub fn gradient_check(model: &CaeModel, batch: &[&[f64]], n_check: usize, seed: u64) -> Result<GradientCheck> {
    const H: f64 = 1e-5;
    let analytic = model.grad(batch)?;
    let loss = |params: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.params.copy_from_slice(params);
        Ok(m.grad(batch)?.loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.params.clone();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..n_check {
        let i = rng.random_range(0..params.len());
        let original = params[i];
        params[i] = original + H;
        let plus = loss(&params)?;
        params[i] = original - H;
        let minus = loss(&params)?;
        params[i] = original;
        let fd = (plus - minus) / (2.0 * H);
        let scale = fd.abs().max(analytic.params[i].abs());
        if scale >= 1e-10 {
            compared += 1;
            worst = worst.max((fd - analytic.params[i]).abs() / scale);
        }
    }
    Ok(GradientCheck {
        max_rel_err: worst,
        compared,
        checked: n_check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> CaeArchitecture {
        CaeArchitecture {
            n_x: 16,
            n_lat: 3,
            encoder_convs: vec![
                ConvSpec {
                    channels_in: 1,
                    channels_out: 2,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    channels_in: 2,
                    channels_out: 3,
                    kernel: 5,
                    stride: 2,
                },
            ],
        }
    }

    fn random_states(n: usize, width: usize, seed: u64) -> Vec<PhysicalState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| PhysicalState::new((0..width).map(|_| rng.random_range(-1.5..1.5)).collect(), i as f64))
            .collect()
    }

    #[test]
    fn shapes() {
        let model = CaeModel::new(CaeArchitecture::standard(64, 8), 0).unwrap();
        let u = PhysicalState::new(vec![0.3; 64], 0.0);
        let y = model.encode(&u).unwrap();
        assert_eq!(y.len(), 8);
        assert_eq!(model.decode(&y, 0.0).unwrap().u.len(), 64);
        assert_eq!(model.encode(&u).unwrap(), y);
        assert!(matches!(
            model.encode(&PhysicalState::new(vec![0.0; 32], 0.0)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(model.decode(&[0.0; 7], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_strides() {
        let mut arch = CaeArchitecture::standard(64, 8);
        arch.n_x = 60;
        assert!(CaeModel::new(arch, 0).is_err());
    }

    #[test]
    fn zero_weights() {
        let mut model = CaeModel::new(CaeArchitecture::standard(64, 8), 0).unwrap();
        model.params.iter_mut().for_each(|p| *p = 0.0);
        let u = PhysicalState::new((0..64).map(|i| (i as f64).sin()).collect(), 0.0);
        assert!(model.encode(&u).unwrap().iter().all(|&v| v == 0.0));
        let last = model.params.len() - 1;
        model.params[last] = 0.7;
        let out = model.decode(&[0.1; 8], 0.0).unwrap();
        assert!(out.u.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn mse_examples() {
        let a = vec![PhysicalState::new(vec![1.0, 0.0], 0.0)];
        let b = vec![PhysicalState::new(vec![0.0, 0.0], 0.0)];
        assert_eq!(mse_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let c = vec![PhysicalState::new(vec![3.0, 0.0], 0.0)];
        assert_eq!(mse_loss(&c, &b).unwrap(), 9.0 * mse_loss(&a, &b).unwrap());
        assert!(mse_loss(&[], &[]).is_err());
    }

    fn param_loss(model: &CaeModel, states: &[PhysicalState]) -> f64 {
        let recon: Vec<PhysicalState> = states.iter().map(|s| model.reconstruct(s).unwrap()).collect();
        mse_loss(states, &recon).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut model = CaeModel::new(small_arch(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in &mut model.params {
            *p += rng.random_range(-0.1..0.1);
        }
        model.scale = 1.3;
        let states = random_states(3, 16, 2);
        let batch: Vec<&[f64]> = states.iter().map(|s| s.u.as_slice()).collect();
        let g = model.grad(&batch).unwrap();
        assert!((g.loss - param_loss(&model, &states)).abs() < 1e-12);
        for i in 0..model.n_params() {
            let eps = 1e-5;
            let mut plus = model.clone();
            plus.params[i] += eps;
            let mut minus = model.clone();
            minus.params[i] -= eps;
            let fd = (param_loss(&plus, &states) - param_loss(&minus, &states)) / (2.0 * eps);
            let err = (fd - g.params[i]).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(g.params[i].abs()) || err < 1e-8,
                "param {i}: fd {fd} vs analytic {}",
                g.params[i]
            );
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let model = CaeModel::new(small_arch(), 3).unwrap();
        let states = random_states(2, 16, 9);
        let g = model.grad(&[&states[0].u, &states[1].u]).unwrap();
        let g0 = model.grad(&[&states[0].u]).unwrap();
        let g1 = model.grad(&[&states[1].u]).unwrap();
        for ((a, b), c) in g.params.iter().zip(&g0.params).zip(&g1.params) {
            assert!((a - 0.5 * (b + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_final_bias_gradient() {
        let mut model = CaeModel::new(small_arch(), 3).unwrap();
        model.params.iter_mut().for_each(|p| *p = 0.0);
        let last = model.n_params() - 1;
        model.params[last] = 0.4;
        let u = vec![0.4; 16];
        let g = model.grad(&[&u]).unwrap();
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.params[last], 0.0);
    }

    #[test]
    fn periodic_padding_shift_consistency() {
        let model = CaeModel::new(CaeArchitecture::standard(64, 8), 4).unwrap();
        let states = random_states(1, 64, 1);
        let u = &states[0].u;
        let shifted = crate::ks::shift(u, 8);
        let f = model.encoder_features(&PhysicalState::new(u.clone(), 0.0)).unwrap();
        let fs = model.encoder_features(&PhysicalState::new(shifted, 0.0)).unwrap();
        for c in 0..f.nrows() {
            for i in 0..f.ncols() {
                assert!((fs[(c, (i + 1) % f.ncols())] - f[(c, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fits_a_repeated_snapshot() {
        let arch = CaeArchitecture::standard(32, 4);
        // nearest upsampling followed by a periodic conv cannot emit the
        // Nyquist mode, so the target is a smooth periodic profile
        let u: Vec<f64> = (0..32)
            .map(|i| {
                let p = 2.0 * std::f64::consts::PI * i as f64 / 32.0;
                p.sin() + 0.3 * (3.0 * p).cos()
            })
            .collect();
        let traj = PhysicalTrajectory {
            length: 22.0,
            dt_sample: 0.1,
            states: (0..400).map(|i| PhysicalState::new(u.clone(), i as f64 * 0.1)).collect(),
        };
        let hyper = CaeHyper {
            lr: 3e-3,
            batch_size: 16,
            epochs: 100,
            seed: 1,
            validation_fraction: 0.1,
        };
        let model = train_cae(&traj, &arch, &hyper).unwrap();
        let last = model.train_log.last().unwrap();
        let best_val = model
            .train_log
            .iter()
            .map(|l| l.validation_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best_val < 1e-6, "best validation loss {best_val}, last train {}", last.train_loss);
        assert!(model.train_log.iter().all(|l| l.train_loss.is_finite()));
        assert_eq!(model.train_log.len(), 100);

        let again = train_cae(&traj, &arch, &hyper).unwrap();
        assert_eq!(again.train_log, model.train_log);
        assert!(train_cae(&traj.slice(0..150), &arch, &hyper).is_err());
    }

    #[test]
    fn linear_projection_oracle() {
        // data on a 2-plane is reproduced exactly at rank 2, not at rank 1
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let states: Vec<PhysicalState> = (0..50)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                PhysicalState::new((0..8).map(|i| 1.0 + a * i as f64 + b * (i as f64).sin()).collect(), 0.0)
            })
            .collect();
        assert!(linear_projection_mse(&states[..40], &states[40..], 2).unwrap() < 1e-16);
        assert!(linear_projection_mse(&states[..40], &states[40..], 1).unwrap() > 1e-3);
        assert!(linear_projection_mse(&states, &states, 9).is_err());
    }

    #[test]
    fn sampled_gradient_check_passes() {
        let model = CaeModel::new(small_arch(), 4).unwrap();
        let states = random_states(4, 16, 3);
        let batch: Vec<&[f64]> = states.iter().map(|s| s.u.as_slice()).collect();
        let check = gradient_check(&model, &batch, 50, 1).unwrap();
        assert!(check.max_rel_err <= 1e-4, "{check:?}");
        assert_eq!(check.checked, 50);
    }
}
