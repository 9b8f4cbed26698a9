//! Acceptance criteria evaluated from the artifacts of a completed run.
//!
//! Criteria 1 to 6 read the workspace; criterion 7 runs a set of fast
//! in-process oracles that do not depend on the run at all.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{read_summary, summary_f64, Pipeline, RunConfig, Stage, Workspace, SMOKE_CONFIG};
use crate::cae::CaeModel;
use crate::error::{Error, Result};
use crate::esn::{esn_jacobian, generate_reservoir, train_readout, EsnHyper, EsnPropagator, ReservoirState};
use crate::ks::{default_initial_condition, make_grid, KsSolver, PhysicalState};
use crate::metrics::wasserstein1;
use crate::store::{self, Trajectory};
use crate::tangent::{benettin_les, clv_angle, ginelli_clvs, BenettinConfig, GinelliConfig, LinearMap, Pairing, Propagator};

#[derive(Debug, Clone)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct AcceptanceReport {
    pub criteria: Vec<Criterion>,
}

impl AcceptanceReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<u8> {
        self.criteria.iter().filter(|c| !c.passed).map(|c| c.id).collect()
    }

    pub fn get(&self, id: u8) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.id == id)
    }

    /// One line per criterion.
    pub fn table(&self) -> String {
        let mut out = String::from("acceptance:\n");
        for c in &self.criteria {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(out, "  [{verdict}] {}. {:<22} {}", c.id, c.name, c.detail).expect("string write");
        }
        out
    }
}

fn criterion(id: u8, name: &'static str, outcome: Result<(bool, String)>) -> Criterion {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("could not evaluate: {e}")));
    Criterion {
        id,
        name,
        passed,
        detail,
    }
}

fn parse_list(text: &str) -> Vec<f64> {
    text.split_whitespace().filter_map(|v| v.parse().ok()).collect()
}

/// Evaluates every criterion. Requires all stages to be current.
pub fn evaluate(pipeline: &Pipeline) -> Result<AcceptanceReport> {
    for stage in Stage::ALL {
        if !pipeline.is_current(stage)? {
            return Err(Error::Dependency {
                stage: stage.name(),
                path: pipeline.workspace.manifest(),
            });
        }
    }
    let ws = &pipeline.workspace;
    Ok(AcceptanceReport {
        criteria: vec![
            criterion(1, "reference lambda1", reference_lambda1(ws)),
            criterion(2, "reference D_KY", reference_dimension(ws)),
            criterion(3, "CAE quality", cae_quality(ws)),
            criterion(4, "forecast horizon", forecast_horizon(ws)),
            criterion(5, "latent LE spectrum", latent_spectrum(ws)),
            criterion(6, "CLV angle statistics", angle_statistics(ws)),
            criterion(7, "oracle suites", oracle_criterion()),
        ],
    })
}

fn reference_lambda1(ws: &Workspace) -> Result<(bool, String)> {
    let s = read_summary(&ws.ref_summary())?;
    let lambda1 = summary_f64(&s, "lambda1")?;
    let elapsed = summary_f64(&s, "elapsed_seconds")?;
    let passed = (0.035..=0.055).contains(&lambda1) && elapsed <= 900.0;
    Ok((
        passed,
        format!("lambda1 = {lambda1:.4} (need [0.035, 0.055]); stability runtime {elapsed:.0} s (need <= 900)"),
    ))
}

fn reference_dimension(ws: &Workspace) -> Result<(bool, String)> {
    let s = read_summary(&ws.ref_summary())?;
    let dky = summary_f64(&s, "kaplan_yorke")?;
    let n_neutral = summary_f64(&s, "n_neutral")? as usize;
    let passed = (5.5..=6.5).contains(&dky) && n_neutral == 1;
    Ok((
        passed,
        format!("D_KY = {dky:.3} (need [5.5, 6.5]); {n_neutral} neutral exponents (need exactly 1)"),
    ))
}

fn cae_quality(ws: &Workspace) -> Result<(bool, String)> {
    let s = read_summary(&ws.cae_summary())?;
    let cae = summary_f64(&s, "cae_heldout_mse")?;
    let baseline = summary_f64(&s, "baseline_heldout_mse")?;
    let n_val = summary_f64(&s, "heldout_samples")? as usize;
    let model = store::load_cae(&ws.cae_model())?;
    let data = store::load_physical(&ws.data())?;
    let held_out = &data.states[data.len() - n_val.min(data.len())..];
    let batch: Vec<&[f64]> = held_out.iter().step_by(held_out.len().max(8) / 8).take(8).map(|st| st.u.as_slice()).collect();
    let trained = crate::cae::gradient_check(&model, &batch, 50, 0)?;
    // near the optimum most gradients sit below the comparison floor, so also check a fresh model
    let fresh = crate::cae::gradient_check(&CaeModel::new(model.architecture.clone(), 1)?, &batch, 50, 0)?;
    let grad_err = trained.max_rel_err.max(fresh.max_rel_err);
    let round_trip = held_out
        .iter()
        .map(|st| {
            let rec = model.reconstruct(st)?;
            let num: f64 = rec.u.iter().zip(&st.u).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = st.u.iter().map(|v| v * v).sum();
            Ok((num / den).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_rel = round_trip.iter().sum::<f64>() / round_trip.len().max(1) as f64;
    let passed = cae < baseline && grad_err <= 1e-4;
    Ok((
        passed,
        format!(
            "held-out MSE {cae:.4} < rank-8 projection {baseline:.4}; gradient check max rel err {grad_err:.1e} on 50 params of trained and fresh models, {} resolved (need <= 1e-4); mean round-trip rel L2 {mean_rel:.3}",
            trained.compared + fresh.compared
        ),
    ))
}

fn forecast_horizon(ws: &Workspace) -> Result<(bool, String)> {
    let horizons = store::csv_column(&ws.horizons(), "horizon_lt")?;
    let median = crate::metrics::median(&horizons);
    Ok((
        median >= 1.0,
        format!("median horizon {median:.2} LT over {} closed-loop runs (need >= 1)", horizons.len()),
    ))
}

fn latent_spectrum(ws: &Workspace) -> Result<(bool, String)> {
    let s = read_summary(&ws.report())?;
    let reference = parse_list(s.get("le_reference").map_or("", String::as_str));
    let mean = parse_list(s.get("le_surrogate_mean").map_or("", String::as_str));
    let members = summary_f64(&s, "members")? as usize;
    let n = 4.min(reference.len()).min(mean.len());
    if n < 4 {
        return Ok((false, format!("only {n} exponents available")));
    }
    let deltas: Vec<f64> = (0..4).map(|i| mean[i] - reference[i]).collect();
    let dky_ref = summary_f64(&s, "dky_reference")?;
    let dky = summary_f64(&s, "dky_surrogate_mean")?;
    let passed = deltas.iter().all(|d| d.abs() <= 0.015) && (dky - dky_ref).abs() <= 0.5 && members >= 1;
    let shown: Vec<String> = deltas.iter().map(|d| format!("{d:+.4}")).collect();
    Ok((
        passed,
        format!(
            "{members} members; mean - reference for lambda1..4: {} (need |.| <= 0.015); D_KY {dky:.3} vs {dky_ref:.3} (need within 0.5)",
            shown.join(" ")
        ),
    ))
}

fn angle_statistics(ws: &Workspace) -> Result<(bool, String)> {
    let s = read_summary(&ws.report())?;
    let mut passed = true;
    let mut parts = Vec::new();
    for p in Pairing::ALL {
        match s.get(&format!("wasserstein.{}", p.label())).and_then(|v| v.parse::<f64>().ok()) {
            Some(w) => {
                passed &= w <= 5.0;
                parts.push(format!("W1 {} {w:.2} deg", p.label()));
            }
            None => {
                passed = false;
                parts.push(format!("W1 {} unavailable", p.label()));
            }
        }
    }
    let min_ref = summary_f64(&s, "min_unstable_stable.reference")?;
    let min_sur = summary_f64(&s, "min_unstable_stable.surrogate")?;
    passed &= min_ref > 1.0 && min_sur > 1.0;
    parts.push(format!("min unstable-stable angle {min_ref:.2} / {min_sur:.2} deg (need > 1)"));
    Ok((passed, format!("{} (need <= 5 each); {}", parts[..3].join(", "), parts[3])))
}

/// Outcome of one in-process oracle.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> OracleCheck {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    OracleCheck { name, passed, detail }
}

fn oracle_criterion() -> Result<(bool, String)> {
    let started = Instant::now();
    let checks = oracle_suite();
    let elapsed = started.elapsed().as_secs_f64();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let passed = failed.is_empty() && elapsed < 60.0;
    let detail = if failed.is_empty() {
        format!("{} oracles passed in {elapsed:.1} s (need < 60)", checks.len())
    } else {
        format!("failed: {}; {elapsed:.1} s", failed.join("; "))
    };
    Ok((passed, detail))
}

/// Runs every fast oracle.
pub fn oracle_suite() -> Vec<OracleCheck> {
    vec![
        check("linear-map exponents", linear_map_oracle()),
        check("Ginelli covariance", ginelli_oracle()),
        check("ridge vs pseudo-inverse", ridge_oracle()),
        check("ESN Jacobian vs finite differences", esn_jacobian_oracle()),
        check("Wasserstein axioms", wasserstein_oracle()),
        check("ETDRK4 fourth order", etdrk4_order_oracle().map(|orders| {
            let finest = orders.last().copied().unwrap_or(0.0);
            let ok = orders.iter().all(|&p| (3.2..=4.5).contains(&p)) && finest >= 3.7;
            (ok, format!("observed orders {orders:.2?}"))
        })),
        check("persistence round trips", round_trip_oracle()),
        check("config determinism", determinism_oracle()),
    ]
}

fn linear_map_oracle() -> Result<(bool, String)> {
    let map = LinearMap::diagonal(&[2.0, 1.0, 0.25]);
    let cfg = BenettinConfig {
        m: 3,
        n_steps: 200,
        n_transient: 50,
        ortho_every: 1,
        checkpoint_every: 50,
        seed: 3,
    };
    let spectrum = benettin_les(&map, &DVector::from_element(3, 1.0), &cfg)?;
    let exact = [2f64.ln(), 0.0, 0.25f64.ln()];
    let err = spectrum.lambdas.iter().zip(exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err <= 1e-12, format!("max error {err:.1e}")))
}

fn ginelli_oracle() -> Result<(bool, String)> {
    // upper-triangular map: eigenvalues 2, 1, 0.5 with non-orthogonal eigenvectors
    let matrix = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, 0.0, 1.0, 0.7, 0.0, 0.0, 0.5]);
    let eig = matrix.clone().eigen_vectors();
    let map = LinearMap {
        matrix,
        step_interval: 1.0,
    };
    let cfg = GinelliConfig {
        m: 3,
        n_forward_transient: 60,
        n_window: 10,
        n_backward_transient: 60,
        ortho_every: 1,
        report_every: 1,
        seed: 5,
    };
    let clvs = ginelli_clvs(&map, &DVector::from_element(3, 1.0), &cfg)?;
    let mut worst: f64 = 0.0;
    for v in &clvs.vectors {
        for (j, e) in eig.iter().enumerate() {
            worst = worst.max(clv_angle(v.column(j).as_slice(), e.as_slice())?);
        }
    }
    Ok((worst <= 0.1, format!("max deviation {worst:.2e} deg")))
}

trait EigenVectors {
    fn eigen_vectors(self) -> Vec<DVector<f64>>;
}

impl EigenVectors for DMatrix<f64> {
    /// Eigenvectors of an upper-triangular matrix with distinct diagonal, by back substitution.
    fn eigen_vectors(self) -> Vec<DVector<f64>> {
        let n = self.nrows();
        (0..n)
            .map(|k| {
                let lambda = self[(k, k)];
                let mut v = DVector::zeros(n);
                v[k] = 1.0;
                for i in (0..k).rev() {
                    let s: f64 = (i + 1..=k).map(|j| self[(i, j)] * v[j]).sum();
                    v[i] = s / (lambda - self[(i, i)]);
                }
                v.normalize()
            })
            .collect()
    }
}

fn ridge_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let states: Vec<ReservoirState> = (0..40)
        .map(|_| ReservoirState {
            r: DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)),
            t: 0.0,
        })
        .collect();
    let targets: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let w = train_readout(&states, &targets, 0.0, 0)?;
    let design = DMatrix::from_fn(40, 7, |i, j| if j < 6 { states[i].r[j] } else { 1.0 });
    let y = DMatrix::from_fn(40, 3, |i, j| targets[i][j]);
    let oracle = design.pseudo_inverse(1e-14).map_err(|e| Error::Contract(e.into()))? * y;
    let err = (&w - &oracle).amax();
    Ok((err <= 1e-8, format!("max entry difference {err:.1e}")))
}

fn esn_jacobian_oracle() -> Result<(bool, String)> {
    let hyper = EsnHyper {
        n_r: 30,
        sigma_in: 0.5,
        bias_in: 0.5,
        rho: 0.8,
        connectivity: 3.0,
        beta: 1e-6,
        washout: 5,
        noise: 0.0,
        seed: 4,
    };
    let mut model = generate_reservoir(&hyper, 3, 0.25)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    model.w_out = Some(DMatrix::from_fn(31, 3, |_, _| rng.random_range(-0.5..0.5)));
    let prop = EsnPropagator::new(&model)?;
    let r = ReservoirState {
        r: DVector::from_fn(30, |_, _| rng.random_range(-0.9..0.9)),
        t: 0.0,
    };
    let next = prop.advance(&r)?;
    let jac = esn_jacobian(&model, &next)?;
    let h = 1e-6;
    let mut fd = DMatrix::zeros(30, 30);
    for j in 0..30 {
        let mut plus = r.clone();
        let mut minus = r.clone();
        plus.r[j] += h;
        minus.r[j] -= h;
        fd.set_column(j, &((prop.advance(&plus)?.r - prop.advance(&minus)?.r) / (2.0 * h)));
    }
    let norm = |m: &DMatrix<f64>| m.clone().svd(false, false).singular_values[0];
    let rel = norm(&(&jac - &fd)) / norm(&jac);
    Ok((rel <= 1e-6, format!("relative spectral-norm error {rel:.1e}")))
}

fn wasserstein_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..90.0)).collect() };
    let (a, b, c) = (sample(200), sample(150), sample(170));
    let ab = wasserstein1(&a, &b)?;
    let ba = wasserstein1(&b, &a)?;
    let ac = wasserstein1(&a, &c)?;
    let cb = wasserstein1(&c, &b)?;
    let aa = wasserstein1(&a, &a)?;
    let shifted: Vec<f64> = a.iter().map(|x| x + 7.5).collect();
    let shift = wasserstein1(&a, &shifted)?;
    let ok = aa == 0.0 && ab > 0.0 && (ab - ba).abs() <= 1e-12 && ab <= ac + cb + 1e-12 && (shift - 7.5).abs() <= 1e-9;
    Ok((ok, format!("d(a,b) {ab:.3}, shift 7.5 -> {shift:.6}")))
}

/// Observed orders of the KS integrator from successive step halvings.
///
/// Smooth initial data: rough data shows stiff order reduction at these steps.
pub fn etdrk4_order_oracle() -> Result<Vec<f64>> {
    let grid = make_grid(22.0, 64)?;
    let u0 = PhysicalState::new(
        grid.x
            .iter()
            .map(|x| {
                let s = 2.0 * std::f64::consts::PI * x / grid.length;
                s.cos() * (1.0 + s.sin())
            })
            .collect(),
        0.0,
    );
    let t_end = 4.0;
    let run = |dt: f64| -> Result<PhysicalState> {
        let solver = KsSolver::new(&grid, dt)?;
        let steps = (t_end / dt).round() as usize;
        let mut u = u0.clone();
        for _ in 0..steps {
            u = solver.step(&u)?;
        }
        Ok(u)
    };
    let reference = run(t_end / 8192.0)?;
    let errors = [0.05, 0.025, 0.0125, 0.00625]
        .iter()
        .map(|&dt| {
            let u = run(dt)?;
            Ok(u.u.iter().zip(&reference.u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}

fn round_trip_oracle() -> Result<(bool, String)> {
    let grid = make_grid(22.0, 32)?;
    let solver = KsSolver::new(&grid, 0.05)?;
    let traj = solver.simulate(&default_initial_condition(&grid, 2), 20.0, 5.0, 3)?;
    let bytes = store::encode_trajectory(&Trajectory::Physical(traj.clone()))?;
    let back = match store::decode_trajectory(&bytes)? {
        Trajectory::Physical(p) => p,
        Trajectory::Latent(_) => return Ok((false, "kind changed".into())),
    };
    let traj_ok = back.states.len() == traj.states.len()
        && back
            .states
            .iter()
            .zip(&traj.states)
            .all(|(a, b)| a.t.to_bits() == b.t.to_bits() && a.u.iter().zip(&b.u).all(|(x, y)| x.to_bits() == y.to_bits()));
    let hyper = EsnHyper {
        n_r: 25,
        seed: 8,
        ..EsnHyper::default()
    };
    let mut model = generate_reservoir(&hyper, 4, 0.25)?;
    model.w_out = Some(DMatrix::from_fn(26, 4, |i, j| (i as f64 - j as f64).sin()));
    let file = store::esn_to_file(&model);
    let reloaded = store::esn_from_file(&store::decode_model(&store::encode_model(&file))?)?;
    let esn_ok = store::encode_model(&store::esn_to_file(&reloaded)) == store::encode_model(&file);
    let mut corrupted = bytes.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 1;
    let detects = store::decode_trajectory(&corrupted).is_err();
    Ok((
        traj_ok && esn_ok && detects,
        format!("trajectory bit-exact {traj_ok}, ESN bit-exact {esn_ok}, corruption detected {detects}"),
    ))
}

fn scratch_dir(tag: &str) -> PathBuf {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("latstab-{tag}-{}-{n}", std::process::id()))
}

/// Artifact contents with wall-clock lines removed.
pub fn artifact_digest(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path)?;
            if path.extension().is_some_and(|e| e == "txt") {
                let text = String::from_utf8_lossy(&bytes);
                bytes = text
                    .lines()
                    .filter(|l| !l.starts_with("elapsed_seconds"))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            let name = path.strip_prefix(root).unwrap_or(&path).display().to_string();
            files.push((name, bytes));
        }
    }
    files.sort();
    Ok(files)
}

fn determinism_oracle() -> Result<(bool, String)> {
    let config = RunConfig::from_toml(SMOKE_CONFIG)?;
    let dirs = [scratch_dir("det"), scratch_dir("det")];
    let mut digests = Vec::new();
    for (dir, workers) in dirs.iter().zip([1, 2]) {
        let pipeline = Pipeline::new(config.clone(), Workspace::new(dir), workers);
        let outcome = pipeline.run_all(true).and_then(|_| artifact_digest(dir));
        let _ = fs::remove_dir_all(dir);
        digests.push(outcome?);
    }
    let same = digests[0] == digests[1];
    Ok((
        same,
        format!("{} artifacts identical across two runs (1 and 2 workers): {same}", digests[0].len()),
    ))
}
