use std::ffi::CString;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use latstab_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { latstab_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn solver(n_x: usize) -> *mut LatstabKsSolver {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { latstab_ks_solver_new(22.0, n_x, 0.05, &mut s) }, LatstabStatus::Ok);
    s
}

fn initial(n_x: usize) -> Vec<f64> {
    (0..n_x)
        .map(|i| {
            let s = 2.0 * std::f64::consts::PI * i as f64 / n_x as f64;
            s.cos() * (1.0 + s.sin())
        })
        .collect()
}

#[test]
fn step_matches_library() {
    let s = solver(32);
    let mut u = initial(32);
    assert_eq!(unsafe { latstab_ks_step(s, u.as_mut_ptr(), 32, 20) }, LatstabStatus::Ok);
    let lib = latstab::ks::KsSolver::new(&latstab::ks::make_grid(22.0, 32).unwrap(), 0.05).unwrap();
    let mut st = latstab::ks::PhysicalState::new(initial(32), 0.0);
    for _ in 0..20 {
        st = lib.step(&st).unwrap();
    }
    assert_eq!(u, st.u);
    unsafe { latstab_ks_solver_free(s) };
}

#[test]
fn errors_are_codes_with_messages() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { latstab_ks_solver_new(22.0, 30, 0.05, &mut s) }, LatstabStatus::Config);
    assert!(s.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { latstab_ks_step(ptr::null(), ptr::null_mut(), 4, 1) }, LatstabStatus::NullPointer);
    let missing = CString::new("/nonexistent/file.traj").unwrap();
    let mut t = ptr::null_mut();
    let status = unsafe { latstab_trajectory_load(missing.as_ptr(), &mut t) };
    assert!(matches!(status, LatstabStatus::Io | LatstabStatus::Store), "{status:?}");
    let mut d = 0.0;
    assert_eq!(unsafe { latstab_wasserstein1(ptr::null(), 0, ptr::null(), 0, &mut d) }, LatstabStatus::InvalidArgument);
}

#[test]
fn trajectory_round_trip_and_spectrum() {
    let s = solver(32);
    let u0 = initial(32);
    let mut traj = ptr::null_mut();
    assert_eq!(
        unsafe { latstab_ks_simulate(s, u0.as_ptr(), 32, 30.0, 10.0, 4, &mut traj) },
        LatstabStatus::Ok
    );
    let len = unsafe { latstab_trajectory_len(traj) };
    assert_eq!(len, 100);
    assert_eq!(unsafe { latstab_trajectory_width(traj) }, 32);

    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("t.traj").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { latstab_trajectory_save(traj, file.as_ptr()) }, LatstabStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { latstab_trajectory_load(file.as_ptr(), &mut back) }, LatstabStatus::Ok);
    let (mut a, mut b) = (vec![0.0; 32], vec![0.0; 32]);
    let (mut ta, mut tb) = (0.0, 0.0);
    unsafe {
        assert_eq!(latstab_trajectory_snapshot(traj, 99, a.as_mut_ptr(), 32, &mut ta), LatstabStatus::Ok);
        assert_eq!(latstab_trajectory_snapshot(back, 99, b.as_mut_ptr(), 32, &mut tb), LatstabStatus::Ok);
        assert_eq!(latstab_trajectory_snapshot(back, 99, b.as_mut_ptr(), 8, &mut tb), LatstabStatus::BufferTooSmall);
        assert_eq!(latstab_trajectory_snapshot(back, 100, b.as_mut_ptr(), 32, &mut tb), LatstabStatus::InvalidArgument);
    }
    assert_eq!(a, b);
    assert_eq!(ta.to_bits(), tb.to_bits());

    let mut lambdas = vec![0.0; 3];
    let status = unsafe { latstab_ks_lyapunov(s, a.as_ptr(), 32, 3, 400, 100, 5, 0, lambdas.as_mut_ptr()) };
    assert_eq!(status, LatstabStatus::Ok, "{}", last_error());
    assert!(lambdas.windows(2).all(|w| w[0] >= w[1]));
    let mut dim = -1.0;
    assert_eq!(unsafe { latstab_kaplan_yorke(lambdas.as_ptr(), 3, &mut dim) }, LatstabStatus::Ok);
    assert!((0.0..=3.0).contains(&dim));
    unsafe {
        latstab_trajectory_free(traj);
        latstab_trajectory_free(back);
        latstab_ks_solver_free(s);
    }
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

#[test]
fn stages_and_esn_closed_loop() {
    let dir = tempfile::tempdir().unwrap();
    let config = CString::new(smoke_config().to_str().unwrap()).unwrap();
    let ws = CString::new(dir.path().to_str().unwrap()).unwrap();
    let late = CString::new("train-esn").unwrap();
    assert_eq!(unsafe { latstab_run_stage(config.as_ptr(), late.as_ptr(), ws.as_ptr()) }, LatstabStatus::Dependency);
    for stage in ["generate-data", "stability-ref", "train-cae", "train-esn"] {
        let name = CString::new(stage).unwrap();
        let status = unsafe { latstab_run_stage(config.as_ptr(), name.as_ptr(), ws.as_ptr()) };
        assert_eq!(status, LatstabStatus::Ok, "{stage}: {}", last_error());
    }
    let bogus = CString::new("bogus").unwrap();
    assert_eq!(
        unsafe { latstab_run_stage(config.as_ptr(), bogus.as_ptr(), ws.as_ptr()) },
        LatstabStatus::InvalidArgument
    );

    let model = CString::new(dir.path().join("members/esn_00.model").to_str().unwrap()).unwrap();
    let mut esn = ptr::null_mut();
    assert_eq!(unsafe { latstab_esn_load(model.as_ptr(), &mut esn) }, LatstabStatus::Ok);
    let n_lat = unsafe { latstab_esn_n_lat(esn) };
    assert_eq!(n_lat, 4);
    assert_eq!(unsafe { latstab_esn_n_r(esn) }, 40);

    let latent = latstab::store::load_latent(&dir.path().join("latent.traj")).unwrap();
    let warmup: Vec<f64> = latent.ys[..100].concat();
    let mut pred = vec![0.0; 10 * n_lat];
    let status = unsafe { latstab_esn_closed_loop(esn, warmup.as_ptr(), 100, 10, pred.as_mut_ptr()) };
    assert_eq!(status, LatstabStatus::Ok, "{}", last_error());

    let model_rs = latstab::store::load_esn(&dir.path().join("members/esn_00.model")).unwrap();
    let forced = latstab::cae::LatentTrajectory {
        ys: latent.ys[..99].to_vec(),
        ..latent.clone()
    };
    let r = latstab::esn::open_loop(&model_rs, &forced, &latstab::esn::ReservoirState::zeros(40))
        .unwrap()
        .pop()
        .unwrap();
    let (expected, _) = latstab::esn::closed_loop(&model_rs, &latent.ys[99], &r, 10).unwrap();
    assert_eq!(pred, expected.ys.concat());
    unsafe { latstab_esn_free(esn) };
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("latstab.h").exists());
    let out_dir = tempfile::tempdir().unwrap();
    let exe = out_dir.path().join("smoke");
    // integration tests link the rlib; the static archive sits next to it
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().to_path_buf();
    let archive = ["debug", "release"]
        .iter()
        .map(|p| target.join(p).join("liblatstab_ffi.a"))
        .find(|p| p.exists());
    let mut cc = Command::new("cc");
    cc.arg("-std=c11").arg("-Wall").arg("-Werror").arg("-I").arg(&header_dir).arg(crate_dir.join("tests/c/smoke.c"));
    match &archive {
        Some(a) => {
            cc.arg(a).args(["-lm", "-lpthread", "-ldl", "-o"]).arg(&exe);
        }
        None => {
            cc.arg("-fsyntax-only");
        }
    }
    let status = cc.status().expect("C compiler available");
    assert!(status.success());
    if archive.is_some() {
        let run = Command::new(&exe).output().unwrap();
        assert!(run.status.success(), "C program exited with {:?}", run.status.code());
        assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok"));
    } else {
        eprintln!("static archive not found; checked the header with -fsyntax-only");
    }
}
