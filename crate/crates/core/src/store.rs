//! Binary and text persistence.
//!
//! Trajectory files: the 8-byte magic `LSTRAJ01`, a 48-byte little-endian
//! header (`width: u64`, `count: u64`, `dt_sample: f64`, `length: f64`,
//! `kind: u32`, `source: u32`, `t0: f64`), `count * width` little-endian `f64`
//! values row by row, then a SHA-256 digest of everything before it.
//!
//! Model files: the magic `LSMODEL1`, `version: u32`, `kind: u32`, a TOML
//! metadata block (`u64` length + UTF-8), a `u32` blob count and for every
//! blob its name (`u32` length + UTF-8), rank (`u32`), dims (`u64` each) and
//! `f64` data, then a SHA-256 digest.
//!
//! Files are written to a sibling temporary path and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cae::{CaeArchitecture, CaeModel, ConvSpec, EpochLog, LatentSource, LatentTrajectory};
use crate::error::{Error, Result, StoreError};
use crate::esn::{EsnHyper, EsnModel, SparseMatrix, Standardizer};
use crate::ks::{PhysicalState, PhysicalTrajectory};
use crate::tangent::{LyapunovSpectrum, Pairing};

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"LSTRAJ01";
pub const MODEL_MAGIC: &[u8; 8] = b"LSMODEL1";
pub const MODEL_VERSION: u32 = 1;
const TRAJECTORY_HEADER: usize = 8 + 48;
const DIGEST: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Physical(PhysicalTrajectory),
    Latent(LatentTrajectory),
}

impl Trajectory {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Physical(_) => "physical",
            Self::Latent(_) => "latent",
        }
    }
}

/// Payload size in bytes declared by a trajectory header.
pub fn payload_bytes(width: usize, count: usize) -> u64 {
    (width as u64) * (count as u64) * 8
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn seal(mut bytes: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    bytes
}

/// Little-endian cursor that reports truncation against the file length.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(StoreError::Truncated {
            expected: (self.pos as u64).saturating_add(n as u64),
            found: self.bytes.len() as u64,
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, StoreError> {
        usize::try_from(self.u64()?).map_err(|_| StoreError::Malformed("length overflows usize".into()))
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 8]) -> Result<(), StoreError> {
    if bytes.len() < 8 {
        return Err(StoreError::Truncated {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..8] != magic {
        return Err(StoreError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    Ok(())
}

fn check_digest(bytes: &[u8], body_end: usize) -> Result<(), StoreError> {
    let expected = (body_end + DIGEST) as u64;
    if (bytes.len() as u64) < expected {
        return Err(StoreError::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 != expected {
        return Err(StoreError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(StoreError::ChecksumMismatch);
    }
    Ok(())
}

pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<u8>> {
    let (width, rows, dt, length, kind, source, t0): (usize, Vec<&[f64]>, f64, f64, u32, u32, f64) = match traj {
        Trajectory::Physical(p) => (
            p.width(),
            p.states.iter().map(|s| s.u.as_slice()).collect(),
            p.dt_sample,
            p.length,
            0,
            0,
            p.states.first().map_or(0.0, |s| s.t),
        ),
        Trajectory::Latent(l) => (
            l.width(),
            l.ys.iter().map(Vec::as_slice).collect(),
            l.dt_sample,
            f64::NAN,
            1,
            match l.source {
                LatentSource::Encoder => 0,
                LatentSource::Esn => 1,
            },
            l.t0,
        ),
    };
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Contract("trajectory rows have unequal widths".into()));
    }
    let mut out = Vec::with_capacity(TRAJECTORY_HEADER + rows.len() * width * 8 + DIGEST);
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&(width as u64).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&dt.to_le_bytes());
    out.extend_from_slice(&length.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&source.to_le_bytes());
    out.extend_from_slice(&t0.to_le_bytes());
    for row in rows {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(seal(out))
}

/// Decodes a trajectory; state times are `t0 + i * dt_sample`.
pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    check_magic(bytes, TRAJECTORY_MAGIC)?;
    let mut r = Reader { bytes, pos: 8 };
    let width = r.len()?;
    let count = r.len()?;
    let dt_sample = r.f64()?;
    let length = r.f64()?;
    let kind = r.u32()?;
    let source = r.u32()?;
    let t0 = r.f64()?;
    let payload = width
        .checked_mul(count)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| StoreError::Malformed("payload size overflows".into()))?;
    check_digest(bytes, TRAJECTORY_HEADER + payload)?;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        rows.push((0..width).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?);
    }
    match kind {
        0 => Ok(Trajectory::Physical(PhysicalTrajectory {
            length,
            dt_sample,
            states: rows
                .into_iter()
                .enumerate()
                .map(|(i, u)| PhysicalState::new(u, t0 + i as f64 * dt_sample))
                .collect(),
        })),
        1 => Ok(Trajectory::Latent(LatentTrajectory {
            ys: rows,
            dt_sample,
            t0,
            source: match source {
                0 => LatentSource::Encoder,
                1 => LatentSource::Esn,
                other => return Err(StoreError::Malformed(format!("unknown latent source {other}")).into()),
            },
        })),
        other => Err(StoreError::Malformed(format!("unknown trajectory kind {other}")).into()),
    }
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_atomic(path, &encode_trajectory(traj)?)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    decode_trajectory(&fs::read(path)?)
}

pub fn load_physical(path: &Path) -> Result<PhysicalTrajectory> {
    match load_trajectory(path)? {
        Trajectory::Physical(p) => Ok(p),
        other => Err(kind_mismatch("physical", other.kind())),
    }
}

pub fn load_latent(path: &Path) -> Result<LatentTrajectory> {
    match load_trajectory(path)? {
        Trajectory::Latent(l) => Ok(l),
        other => Err(kind_mismatch("latent", other.kind())),
    }
}

fn kind_mismatch(expected: &str, found: &str) -> Error {
    StoreError::KindMismatch {
        expected: expected.into(),
        found: found.into(),
    }
    .into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cae,
    Esn,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            Self::Cae => 0,
            Self::Esn => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Cae => "cae",
            Self::Esn => "esn",
        }
    }
}

/// Named, shaped block of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Blob {
    pub fn new(name: &str, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    fn matrix(name: &str, m: &DMatrix<f64>) -> Self {
        Self::new(name, vec![m.nrows(), m.ncols()], m.as_slice().to_vec())
    }

    fn indices(name: &str, v: &[usize]) -> Self {
        Self::new(name, vec![v.len()], v.iter().map(|&i| i as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub metadata: String,
    pub blobs: Vec<Blob>,
}

impl ModelFile {
    fn blob(&self, name: &str) -> Result<&Blob, StoreError> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| StoreError::Malformed(format!("missing blob {name:?}")))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>, StoreError> {
        let b = self.blob(name)?;
        if b.dims != [len] {
            return Err(StoreError::Malformed(format!(
                "blob {name:?} has shape {:?}, expected [{len}]",
                b.dims
            )));
        }
        Ok(b.data.clone())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>, StoreError> {
        let b = self.blob(name)?;
        if b.dims != [rows, cols] {
            return Err(StoreError::Malformed(format!(
                "blob {name:?} has shape {:?}, expected [{rows}, {cols}]",
                b.dims
            )));
        }
        Ok(DMatrix::from_column_slice(rows, cols, &b.data))
    }

    fn indices(&self, name: &str) -> Result<Vec<usize>, StoreError> {
        let b = self.blob(name)?;
        b.data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                    Ok(v as usize)
                } else {
                    Err(StoreError::Malformed(format!("blob {name:?} holds a non-index value {v}")))
                }
            })
            .collect()
    }
}

pub fn encode_model(model: &ModelFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&model.kind.code().to_le_bytes());
    out.extend_from_slice(&(model.metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(model.metadata.as_bytes());
    out.extend_from_slice(&(model.blobs.len() as u32).to_le_bytes());
    for blob in &model.blobs {
        out.extend_from_slice(&(blob.name.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.name.as_bytes());
        out.extend_from_slice(&(blob.dims.len() as u32).to_le_bytes());
        for &d in &blob.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &blob.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    seal(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    check_magic(bytes, MODEL_MAGIC)?;
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(StoreError::UnsupportedVersion(version).into());
    }
    let kind = match r.u32()? {
        0 => ModelKind::Cae,
        1 => ModelKind::Esn,
        other => return Err(StoreError::Malformed(format!("unknown model kind {other}")).into()),
    };
    let utf8 = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| StoreError::Malformed("invalid UTF-8".into()));
    let meta_len = r.len()?;
    let metadata = utf8(r.take(meta_len)?)?;
    let n_blobs = r.u32()?;
    let mut blobs = Vec::new();
    for _ in 0..n_blobs {
        let name_len = r.u32()? as usize;
        let name = utf8(r.take(name_len)?)?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= bytes.len() / 8)
            .ok_or(StoreError::Truncated {
                expected: u64::MAX,
                found: bytes.len() as u64,
            })?;
        let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        blobs.push(Blob { name, dims, data });
    }
    check_digest(bytes, r.pos)?;
    Ok(ModelFile { kind, metadata, blobs })
}

fn read_model(path: &Path, expected: ModelKind) -> Result<ModelFile> {
    let file = decode_model(&fs::read(path)?)?;
    if file.kind != expected {
        return Err(kind_mismatch(expected.name(), file.kind.name()));
    }
    Ok(file)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaeMeta {
    n_x: usize,
    n_lat: usize,
    /// `[channels_in, channels_out, kernel, stride]` per encoder convolution.
    encoder_convs: Vec<[usize; 4]>,
    n_params: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EsnMeta {
    n_lat: usize,
    n_r: usize,
    nnz: usize,
    washout: usize,
    seed: u64,
    trained: bool,
}

fn to_toml<T: Serialize>(meta: &T) -> String {
    toml::to_string(meta).expect("metadata serializes")
}

fn from_toml<'de, T: Deserialize<'de>>(text: &'de str) -> Result<T> {
    toml::from_str(text).map_err(|e| StoreError::Malformed(format!("metadata: {e}")).into())
}

pub fn cae_to_file(model: &CaeModel) -> ModelFile {
    let arch = &model.architecture;
    let meta = CaeMeta {
        n_x: arch.n_x,
        n_lat: arch.n_lat,
        encoder_convs: arch
            .encoder_convs
            .iter()
            .map(|c| [c.channels_in, c.channels_out, c.kernel, c.stride])
            .collect(),
        n_params: model.params.len(),
    };
    let log: Vec<f64> = model
        .train_log
        .iter()
        .flat_map(|l| [l.epoch as f64, l.train_loss, l.validation_loss])
        .collect();
    ModelFile {
        kind: ModelKind::Cae,
        metadata: to_toml(&meta),
        blobs: vec![
            Blob::new("params", vec![model.params.len()], model.params.clone()),
            Blob::new("scale", vec![1], vec![model.scale]),
            Blob::new("train_log", vec![model.train_log.len(), 3], log),
        ],
    }
}

pub fn cae_from_file(file: &ModelFile) -> Result<CaeModel> {
    let meta: CaeMeta = from_toml(&file.metadata)?;
    let arch = CaeArchitecture {
        n_x: meta.n_x,
        n_lat: meta.n_lat,
        encoder_convs: meta
            .encoder_convs
            .iter()
            .map(|&[channels_in, channels_out, kernel, stride]| ConvSpec {
                channels_in,
                channels_out,
                kernel,
                stride,
            })
            .collect(),
    };
    let params = file.vector("params", meta.n_params)?;
    let scale = file.vector("scale", 1)?[0];
    let log_blob = file.blob("train_log")?;
    if log_blob.dims.len() != 2 || log_blob.dims[1] != 3 {
        return Err(StoreError::Malformed("train_log must be n x 3".into()).into());
    }
    let train_log = log_blob
        .data
        .chunks(3)
        .map(|c| EpochLog {
            epoch: c[0] as usize,
            train_loss: c[1],
            validation_loss: c[2],
        })
        .collect();
    CaeModel::from_parts(arch, params, scale, train_log)
        .map_err(|e| StoreError::Malformed(format!("CAE parameters do not fit architecture: {e}")).into())
}

pub fn esn_to_file(model: &EsnModel) -> ModelFile {
    let h = &model.hyper;
    let meta = EsnMeta {
        n_lat: model.n_lat(),
        n_r: model.n_r(),
        nnz: model.w.nnz(),
        washout: h.washout,
        seed: h.seed,
        trained: model.w_out.is_some(),
    };
    let mut blobs = vec![
        Blob::new(
            "hyper",
            vec![7],
            vec![h.sigma_in, h.bias_in, h.rho, h.connectivity, h.beta, h.noise, model.dt],
        ),
        Blob::matrix("w_in", &model.w_in),
        Blob::indices("w_row_ptr", &model.w.row_ptr),
        Blob::indices("w_col_idx", &model.w.col_idx),
        Blob::new("w_values", vec![model.w.nnz()], model.w.values.clone()),
        Blob::new("latent_mean", vec![model.n_lat()], model.standardizer.mean.clone()),
        Blob::new("latent_std", vec![model.n_lat()], model.standardizer.std.clone()),
    ];
    if let Some(w_out) = &model.w_out {
        blobs.push(Blob::matrix("w_out", w_out));
    }
    ModelFile {
        kind: ModelKind::Esn,
        metadata: to_toml(&meta),
        blobs,
    }
}

pub fn esn_from_file(file: &ModelFile) -> Result<EsnModel> {
    let meta: EsnMeta = from_toml(&file.metadata)?;
    let (n_lat, n_r) = (meta.n_lat, meta.n_r);
    let hyper = file.vector("hyper", 7)?;
    let row_ptr = file.indices("w_row_ptr")?;
    let col_idx = file.indices("w_col_idx")?;
    let values = file.vector("w_values", meta.nnz)?;
    if row_ptr.len() != n_r + 1
        || col_idx.len() != meta.nnz
        || row_ptr.windows(2).any(|w| w[0] > w[1])
        || row_ptr.last() != Some(&meta.nnz)
        || col_idx.iter().any(|&c| c >= n_r)
    {
        return Err(StoreError::Malformed("inconsistent sparse reservoir matrix".into()).into());
    }
    Ok(EsnModel {
        w_in: file.matrix("w_in", n_lat + 1, n_r)?,
        w: SparseMatrix {
            n_rows: n_r,
            n_cols: n_r,
            row_ptr,
            col_idx,
            values,
        },
        w_out: if meta.trained {
            Some(file.matrix("w_out", n_r + 1, n_lat)?)
        } else {
            None
        },
        hyper: EsnHyper {
            n_r,
            sigma_in: hyper[0],
            bias_in: hyper[1],
            rho: hyper[2],
            connectivity: hyper[3],
            beta: hyper[4],
            washout: meta.washout,
            noise: hyper[5],
            seed: meta.seed,
        },
        standardizer: Standardizer {
            mean: file.vector("latent_mean", n_lat)?,
            std: file.vector("latent_std", n_lat)?,
        },
        dt: hyper[6],
    })
}

pub fn save_cae(path: &Path, model: &CaeModel) -> Result<()> {
    write_atomic(path, &encode_model(&cae_to_file(model)))
}

pub fn load_cae(path: &Path) -> Result<CaeModel> {
    cae_from_file(&read_model(path, ModelKind::Cae)?)
}

pub fn save_esn(path: &Path, model: &EsnModel) -> Result<()> {
    write_atomic(path, &encode_model(&esn_to_file(model)))
}

pub fn load_esn(path: &Path) -> Result<EsnModel> {
    esn_from_file(&read_model(path, ModelKind::Esn)?)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a CSV with a header row; every cell is already formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Parsed CSV: header names and string cells.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| StoreError::Malformed(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_owned).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(StoreError::Malformed(format!("{} row {} has the wrong width", path.display(), bad + 1)).into());
    }
    Ok((header, rows))
}

/// Column `name` of a CSV parsed as floats.
pub fn csv_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let (header, rows) = read_csv(path)?;
    let col = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| StoreError::Malformed(format!("{} has no column {name:?}", path.display())))?;
    rows.iter()
        .map(|r| {
            r[col]
                .parse::<f64>()
                .map_err(|_| StoreError::Malformed(format!("bad number {:?}", r[col])).into())
        })
        .collect()
}

/// Columns `index, lambda, cumulative_sum`.
pub fn export_spectrum(path: &Path, lambdas: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    let rows: Vec<Vec<String>> = lambdas
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            sum += l;
            vec![(i + 1).to_string(), fmt_f64(l), fmt_f64(sum)]
        })
        .collect();
    write_csv(path, &["index", "lambda", "cumulative_sum"], &rows)
}

/// Running exponent estimates: `time, lambda_1, ..., lambda_m`.
pub fn export_convergence(path: &Path, spectrum: &LyapunovSpectrum) -> Result<()> {
    let names: Vec<String> = (1..=spectrum.m()).map(|i| format!("lambda_{i}")).collect();
    let mut header = vec!["time"];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = spectrum
        .history
        .iter()
        .map(|(t, ls)| std::iter::once(fmt_f64(*t)).chain(ls.iter().map(|&l| fmt_f64(l))).collect())
        .collect();
    write_csv(path, &header, &rows)
}

/// Columns `time, theta_deg, pairing`, one block per pairing.
pub fn export_angles(path: &Path, times: &[f64], series: &[(Pairing, Vec<f64>)]) -> Result<()> {
    let mut rows = Vec::new();
    for (pairing, angles) in series {
        if angles.len() != times.len() {
            return Err(Error::Contract(format!(
                "{} angles for {} times ({pairing})",
                angles.len(),
                times.len()
            )));
        }
        for (t, a) in times.iter().zip(angles) {
            rows.push(vec![fmt_f64(*t), fmt_f64(*a), pairing.label().to_owned()]);
        }
    }
    write_csv(path, &["time", "theta_deg", "pairing"], &rows)
}

/// Reads an angle CSV back into per-pairing series (times are dropped).
pub fn import_angles(path: &Path) -> Result<Vec<(Pairing, Vec<f64>)>> {
    let (header, rows) = read_csv(path)?;
    if header != ["time", "theta_deg", "pairing"] {
        return Err(StoreError::Malformed(format!("{} is not an angle table", path.display())).into());
    }
    let mut out: Vec<(Pairing, Vec<f64>)> = Vec::new();
    for row in rows {
        let pairing = Pairing::from_label(&row[2])
            .ok_or_else(|| StoreError::Malformed(format!("unknown pairing {:?}", row[2])))?;
        let angle: f64 = row[1]
            .parse()
            .map_err(|_| StoreError::Malformed(format!("bad angle {:?}", row[1])))?;
        match out.iter_mut().find(|(p, _)| *p == pairing) {
            Some((_, v)) => v.push(angle),
            None => out.push((pairing, vec![angle])),
        }
    }
    Ok(out)
}

/// Columns `epoch, train_loss, validation_loss`.
pub fn export_loss(path: &Path, log: &[EpochLog]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|l| vec![l.epoch.to_string(), fmt_f64(l.train_loss), fmt_f64(l.validation_loss)])
        .collect();
    write_csv(path, &["epoch", "train_loss", "validation_loss"], &rows)
}

/// Flat `key = value` document.
pub fn write_key_values(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        writeln!(text, "{k} = {v}").expect("writing to a String");
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(" = ")
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .ok_or_else(|| StoreError::Malformed(format!("not a key = value line: {l:?}")).into())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esn::generate_reservoir;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_physical(count: usize, width: usize, seed: u64) -> PhysicalTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PhysicalTrajectory {
            length: 22.0,
            dt_sample: 0.25,
            states: (0..count)
                .map(|i| {
                    PhysicalState::new(
                        (0..width).map(|_| rng.random_range(-3.0..3.0)).collect(),
                        500.0 + i as f64 * 0.25,
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn trajectory_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_physical(100, 64, 1);
        let path = dir.path().join("u.traj");
        save_trajectory(&path, &Trajectory::Physical(p.clone())).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len() as u64, TRAJECTORY_HEADER as u64 + 51200 + DIGEST as u64);
        assert_eq!(payload_bytes(64, 100), 51200);
        let back = load_physical(&path).unwrap();
        for (a, b) in p.states.iter().zip(&back.states) {
            assert!(a.u.iter().zip(&b.u).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.t.to_bits(), b.t.to_bits());
        }
        assert_eq!(back, p);

        let l = LatentTrajectory {
            ys: vec![vec![0.1, -0.2], vec![f64::MIN_POSITIVE, 1e300]],
            dt_sample: 0.25,
            t0: 3.0,
            source: LatentSource::Esn,
        };
        let lp = dir.path().join("y.traj");
        save_trajectory(&lp, &Trajectory::Latent(l.clone())).unwrap();
        assert_eq!(load_latent(&lp).unwrap(), l);
        assert!(matches!(load_physical(&lp), Err(Error::Store(StoreError::KindMismatch { .. }))));
    }

    #[test]
    fn trajectory_errors_are_typed() {
        let bytes = encode_trajectory(&Trajectory::Physical(random_physical(10, 8, 2))).unwrap();
        let truncated = &bytes[..bytes.len() - 40];
        assert!(matches!(decode_trajectory(truncated), Err(Error::Store(StoreError::Truncated { .. }))));
        assert!(matches!(decode_trajectory(&bytes[..20]), Err(Error::Store(StoreError::Truncated { .. }))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_trajectory(&bad), Err(Error::Store(StoreError::BadMagic { .. }))));
        let mut flipped = bytes.clone();
        flipped[TRAJECTORY_HEADER + 5] ^= 1;
        assert!(matches!(decode_trajectory(&flipped), Err(Error::Store(StoreError::ChecksumMismatch))));
        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_trajectory(&huge).is_err());
    }

    #[test]
    fn esn_round_trip_preserves_radius() {
        let dir = tempfile::tempdir().unwrap();
        let hyper = EsnHyper {
            n_r: 50,
            ..EsnHyper::default()
        };
        let mut m = generate_reservoir(&hyper, 3, 0.25).unwrap();
        m.w_out = Some(DMatrix::from_fn(51, 3, |i, j| (i * 3 + j) as f64 * 1e-3));
        let path = dir.path().join("esn.model");
        save_esn(&path, &m).unwrap();
        let back = load_esn(&path).unwrap();
        assert_eq!(back, m);
        let radius = |w: &SparseMatrix| w.to_dense().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert_eq!(radius(&back.w).to_bits(), radius(&m.w).to_bits());
        assert!(matches!(load_cae(&path), Err(Error::Store(StoreError::KindMismatch { .. }))));
    }

    #[test]
    fn cae_round_trip_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = CaeModel::new(CaeArchitecture::standard(32, 4), 3).unwrap();
        m.scale = 1.2345678901234567;
        m.train_log = vec![EpochLog {
            epoch: 0,
            train_loss: 0.5,
            validation_loss: 0.25,
        }];
        let path = dir.path().join("cae.model");
        save_cae(&path, &m).unwrap();
        assert_eq!(load_cae(&path).unwrap(), m);
        assert!(matches!(load_esn(&path), Err(Error::Store(StoreError::KindMismatch { .. }))));

        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(Error::Store(StoreError::UnsupportedVersion(2)))));
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(
            decode_model(&bytes[..bytes.len() / 2]),
            Err(Error::Store(StoreError::Truncated { .. }))
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - DIGEST - 1;
        flipped[last] ^= 0x10;
        assert!(matches!(decode_model(&flipped), Err(Error::Store(StoreError::ChecksumMismatch))));
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lambdas = [0.0499812345678901, 1e-17, -0.1843, -5.606012345678912, f64::MIN_POSITIVE];
        let path = dir.path().join("spectrum.csv");
        export_spectrum(&path, &lambdas).unwrap();
        let back = csv_column(&path, "lambda").unwrap();
        assert!(back.iter().zip(&lambdas).all(|(a, b)| a.to_bits() == b.to_bits()));
        let sums = csv_column(&path, "cumulative_sum").unwrap();
        assert_eq!(sums[1], lambdas[0] + lambdas[1]);
    }

    #[test]
    fn angle_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("angles.csv");
        let series = vec![
            (Pairing::UnstableNeutral, vec![10.0, 20.5]),
            (Pairing::UnstableStable, vec![45.0, 1.0 / 3.0]),
        ];
        export_angles(&path, &[0.0, 0.25], &series).unwrap();
        assert_eq!(import_angles(&path).unwrap(), series);
        assert!(export_angles(&path, &[0.0], &series).is_err());
    }

    #[test]
    fn key_values_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        let entries = vec![("a".to_owned(), "1".to_owned()), ("b.c".to_owned(), "x y".to_owned())];
        write_key_values(&path, &entries).unwrap();
        assert_eq!(read_key_values(&path).unwrap(), entries);
    }
}
