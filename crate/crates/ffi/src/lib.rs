//! C ABI over the `latstab` library.
//!
//! Objects are exposed as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`LatstabStatus`]; the message of the most recent failure on the
//! calling thread is available from [`latstab_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use latstab::esn::{closed_loop, open_loop, EsnModel, ReservoirState};
use latstab::cae::{LatentSource, LatentTrajectory};
use latstab::ks::{make_grid, KsPropagator, KsSolver, PhysicalState, PhysicalTrajectory};
use latstab::pipeline::{Pipeline, RunConfig, Stage, Workspace};
use latstab::tangent::{benettin_les, kaplan_yorke, BenettinConfig};
use latstab::{metrics, store, Error};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatstabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dependency = 4,
    Numerical = 5,
    Store = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

/// A Kuramoto-Sivashinsky solver on a fixed grid and step.
pub struct LatstabKsSolver(KsSolver);

/// A physical trajectory: `len` snapshots of `width` points.
pub struct LatstabTrajectory(PhysicalTrajectory);

/// A trained echo state network.
pub struct LatstabEsn(EsnModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> LatstabStatus {
    match err.root() {
        Error::Config(_) => LatstabStatus::Config,
        Error::Dependency { .. } => LatstabStatus::Dependency,
        Error::Store(_) => LatstabStatus::Store,
        Error::Io(_) => LatstabStatus::Io,
        Error::Contract(_) => LatstabStatus::InvalidArgument,
        Error::BlowUp { .. }
        | Error::Divergence { .. }
        | Error::TangentOverflow { .. }
        | Error::DegenerateTangent { .. }
        | Error::TrainingFailure { .. }
        | Error::SearchFailure { .. }
        | Error::SingularSystem
        | Error::NumericalDomain(_) => LatstabStatus::Numerical,
        _ => LatstabStatus::Other,
    }
}

enum Failure {
    Status(LatstabStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null() -> Failure {
    Failure::Status(LatstabStatus::NullPointer, "null pointer argument".into())
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(LatstabStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LatstabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LatstabStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LatstabStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null());
    }
    let s = CStr::from_ptr(ptr).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn out<T>(ptr: *mut T, value: T) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null());
    }
    ptr.write(value);
    Ok(())
}

unsafe fn handle<'a, T>(ptr: *const T) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(null)
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn latstab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates a solver on `n_x` points over a domain of length `length`.
///
/// # Safety
/// `solver` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn latstab_ks_solver_new(
    length: f64,
    n_x: usize,
    dt: f64,
    solver: *mut *mut LatstabKsSolver,
) -> LatstabStatus {
    guard(|| {
        let grid = make_grid(length, n_x)?;
        out(solver, boxed(LatstabKsSolver(KsSolver::new(&grid, dt)?)))
    })
}

/// # Safety
/// `solver` must be null or a handle from [`latstab_ks_solver_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn latstab_ks_solver_free(solver: *mut LatstabKsSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Advances `u` (length `n_x`) by `n_steps` steps in place.
///
/// # Safety
/// `u` must be valid for `n_x` doubles.
#[no_mangle]
pub unsafe extern "C" fn latstab_ks_step(
    solver: *const LatstabKsSolver,
    u: *mut f64,
    n_x: usize,
    n_steps: usize,
) -> LatstabStatus {
    guard(|| {
        let solver = &handle(solver)?.0;
        let u = slice_mut(u, n_x)?;
        let mut state = PhysicalState::new(u.to_vec(), 0.0);
        for _ in 0..n_steps {
            state = solver.step(&state)?;
        }
        u.copy_from_slice(&state.u);
        Ok(())
    })
}

/// Simulates from `u0` to `t_total`, dropping `[0, t_transient)` and keeping
/// every `sample_every`-th step.
///
/// # Safety
/// `u0` must be valid for `n_x` doubles and `traj` for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn latstab_ks_simulate(
    solver: *const LatstabKsSolver,
    u0: *const f64,
    n_x: usize,
    t_total: f64,
    t_transient: f64,
    sample_every: usize,
    traj: *mut *mut LatstabTrajectory,
) -> LatstabStatus {
    guard(|| {
        let solver = &handle(solver)?.0;
        let u0 = PhysicalState::new(slice(u0, n_x)?.to_vec(), 0.0);
        let t = solver.simulate(&u0, t_total, t_transient, sample_every)?;
        out(traj, boxed(LatstabTrajectory(t)))
    })
}

/// Leading `m` Lyapunov exponents of the KS flow from `u0`, written to `lambdas`.
///
/// The average runs over `n_steps` solver steps after `n_transient` steps of
/// basis alignment, re-orthonormalizing every `ortho_every` steps.
///
/// # Safety
/// `u0` must be valid for `n_x` doubles and `lambdas` for `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn latstab_ks_lyapunov(
    solver: *const LatstabKsSolver,
    u0: *const f64,
    n_x: usize,
    m: usize,
    n_steps: usize,
    n_transient: usize,
    ortho_every: usize,
    seed: u64,
    lambdas: *mut f64,
) -> LatstabStatus {
    guard(|| {
        let solver = handle(solver)?.0.clone();
        let state = PhysicalState::new(slice(u0, n_x)?.to_vec(), 0.0);
        let lambdas = slice_mut(lambdas, m)?;
        if ortho_every == 0 {
            return Err(invalid("ortho_every must be >= 1"));
        }
        let config = BenettinConfig {
            m,
            n_steps,
            n_transient,
            ortho_every,
            checkpoint_every: n_steps.max(1),
            seed,
        };
        let spectrum = benettin_les(&KsPropagator::new(solver), &state, &config)?;
        lambdas.copy_from_slice(&spectrum.lambdas);
        Ok(())
    })
}

/// Kaplan-Yorke dimension of a non-increasing spectrum.
///
/// # Safety
/// `lambdas` must be valid for `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn latstab_kaplan_yorke(lambdas: *const f64, m: usize, dimension: *mut f64) -> LatstabStatus {
    guard(|| out(dimension, kaplan_yorke(slice(lambdas, m)?).dimension))
}

/// First Wasserstein distance between two empirical samples.
///
/// # Safety
/// `a` and `b` must be valid for `n_a` and `n_b` doubles.
#[no_mangle]
pub unsafe extern "C" fn latstab_wasserstein1(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    distance: *mut f64,
) -> LatstabStatus {
    guard(|| out(distance, metrics::wasserstein1(slice(a, n_a)?, slice(b, n_b)?)?))
}

/// Loads a physical trajectory file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `traj` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn latstab_trajectory_load(path_: *const c_char, traj: *mut *mut LatstabTrajectory) -> LatstabStatus {
    guard(|| {
        let t = store::load_physical(&path(path_)?)?;
        out(traj, boxed(LatstabTrajectory(t)))
    })
}

/// Writes a trajectory file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn latstab_trajectory_save(traj: *const LatstabTrajectory, path_: *const c_char) -> LatstabStatus {
    guard(|| {
        let t = handle(traj)?.0.clone();
        Ok(store::save_trajectory(&path(path_)?, &store::Trajectory::Physical(t))?)
    })
}

/// Number of snapshots, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latstab_trajectory_len(traj: *const LatstabTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.len())
}

/// Points per snapshot, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latstab_trajectory_width(traj: *const LatstabTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.width())
}

/// Copies snapshot `index` into `u` and its time into `t`.
///
/// # Safety
/// `u` must be valid for `len` doubles and `t` for one double.
#[no_mangle]
pub unsafe extern "C" fn latstab_trajectory_snapshot(
    traj: *const LatstabTrajectory,
    index: usize,
    u: *mut f64,
    len: usize,
    t: *mut f64,
) -> LatstabStatus {
    guard(|| {
        let traj = &handle(traj)?.0;
        let state = traj
            .states
            .get(index)
            .ok_or_else(|| invalid(format!("snapshot {index} out of range ({})", traj.len())))?;
        if len < state.u.len() {
            return Err(Failure::Status(
                LatstabStatus::BufferTooSmall,
                format!("need {} doubles, got {len}", state.u.len()),
            ));
        }
        slice_mut(u, state.u.len())?.copy_from_slice(&state.u);
        out(t, state.t)
    })
}

/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latstab_trajectory_free(traj: *mut LatstabTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Loads a trained echo state network.
///
/// # Safety
/// `path` must be a NUL-terminated string and `esn` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn latstab_esn_load(path_: *const c_char, esn: *mut *mut LatstabEsn) -> LatstabStatus {
    guard(|| {
        let model = store::load_esn(&path(path_)?)?;
        model.readout()?;
        out(esn, boxed(LatstabEsn(model)))
    })
}

/// Latent dimension, or 0 for a null handle.
///
/// # Safety
/// `esn` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latstab_esn_n_lat(esn: *const LatstabEsn) -> usize {
    esn.as_ref().map_or(0, |e| e.0.n_lat())
}

/// Reservoir size, or 0 for a null handle.
///
/// # Safety
/// `esn` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latstab_esn_n_r(esn: *const LatstabEsn) -> usize {
    esn.as_ref().map_or(0, |e| e.0.n_r())
}

/// Teacher-forces the reservoir with `n_warmup` latent vectors (row-major,
/// `n_warmup x n_lat`), then predicts `n_steps` vectors autonomously into
/// `prediction` (row-major, `n_steps x n_lat`).
///
/// # Safety
/// `warmup` must be valid for `n_warmup * n_lat` doubles and `prediction` for
/// `n_steps * n_lat` doubles.
#[no_mangle]
pub unsafe extern "C" fn latstab_esn_closed_loop(
    esn: *const LatstabEsn,
    warmup: *const f64,
    n_warmup: usize,
    n_steps: usize,
    prediction: *mut f64,
) -> LatstabStatus {
    guard(|| {
        let model = &handle(esn)?.0;
        let n_lat = model.n_lat();
        if n_warmup < 2 {
            return Err(invalid("need at least two warm-up vectors"));
        }
        let rows: Vec<Vec<f64>> = slice(warmup, n_warmup * n_lat)?.chunks(n_lat).map(<[f64]>::to_vec).collect();
        let prediction = slice_mut(prediction, n_steps * n_lat)?;
        let (last, history) = rows.split_last().expect("n_warmup >= 2");
        let forced = LatentTrajectory {
            ys: history.to_vec(),
            dt_sample: model.dt,
            t0: 0.0,
            source: LatentSource::Encoder,
        };
        let r = open_loop(model, &forced, &ReservoirState::zeros(model.n_r()))?
            .pop()
            .expect("non-empty warm-up");
        let (pred, _) = closed_loop(model, last, &r, n_steps)?;
        for (dst, y) in prediction.chunks_mut(n_lat).zip(&pred.ys) {
            dst.copy_from_slice(y);
        }
        Ok(())
    })
}

/// # Safety
/// `esn` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latstab_esn_free(esn: *mut LatstabEsn) {
    if !esn.is_null() {
        drop(Box::from_raw(esn));
    }
}

/// Runs one pipeline stage (`"generate-data"`, ..., `"compare"`) from a
/// configuration file. `workspace` may be null to use the configured one.
///
/// # Safety
/// `config` and `stage` must be NUL-terminated strings; `workspace` null or one.
#[no_mangle]
pub unsafe extern "C" fn latstab_run_stage(
    config: *const c_char,
    stage: *const c_char,
    workspace: *const c_char,
) -> LatstabStatus {
    guard(|| {
        let mut cfg = RunConfig::load(&path(config)?)?;
        if !workspace.is_null() {
            cfg.paths.workspace = path(workspace)?;
        }
        let name = path(stage)?;
        let stage = Stage::from_name(&name.to_string_lossy())
            .ok_or_else(|| invalid(format!("unknown stage {}", name.display())))?;
        let ws = Workspace::new(cfg.paths.workspace.clone());
        Pipeline::new(cfg, ws, 1).run(stage)?;
        Ok(())
    })
}
