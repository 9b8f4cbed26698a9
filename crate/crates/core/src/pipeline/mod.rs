//! End-to-end experiment driven by a [`RunConfig`].
//!
//! Stages communicate only through files in the workspace directory. A
//! manifest records the configuration digest each stage ran with; a stage
//! refuses to start when an upstream artifact is missing or was produced by a
//! different configuration.

pub mod acceptance;
pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::cae::{linear_projection_mse, reconstruction_loss, train_cae, LatentTrajectory};
use crate::error::{Error, Result, StoreError};
use crate::esn::{
    closed_loop, generate_reservoir, hyper_search, open_loop, EsnModel, EsnPropagator, ReservoirState, SearchSplit,
};
use crate::ks::{default_initial_condition, make_grid, KsPropagator, KsSolver, PhysicalTrajectory};
use crate::metrics::{self, StabilityAnalysis};
use crate::store::{self, fmt_f64, Trajectory};
use crate::tangent::{
    angle_series, benettin_les, classify_subspaces, ginelli_clvs, kaplan_yorke, BenettinConfig, GinelliConfig,
    Pairing, Propagator, SubspaceSplit,
};

pub use config::RunConfig;

/// The desk-scale configuration shipped with the repository.
pub const DESK_CONFIG: &str = include_str!("../../../../configs/desk.toml");

/// A seconds-scale configuration for tests and smoke runs.
pub const SMOKE_CONFIG: &str = include_str!("../../../../configs/smoke.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenerateData,
    StabilityRef,
    TrainCae,
    TrainEsn,
    Predict,
    StabilityLatent,
    Compare,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenerateData,
        Stage::StabilityRef,
        Stage::TrainCae,
        Stage::TrainEsn,
        Stage::Predict,
        Stage::StabilityLatent,
        Stage::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenerateData => "generate-data",
            Stage::StabilityRef => "stability-ref",
            Stage::TrainCae => "train-cae",
            Stage::TrainEsn => "train-esn",
            Stage::Predict => "predict",
            Stage::StabilityLatent => "stability-latent",
            Stage::Compare => "compare",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenerateData => &[],
            StabilityRef | TrainCae => &[GenerateData],
            TrainEsn => &[GenerateData, StabilityRef, TrainCae],
            Predict => &[GenerateData, StabilityRef, TrainCae, TrainEsn],
            StabilityLatent => &[StabilityRef, TrainEsn],
            Compare => &[StabilityRef, Predict, StabilityLatent],
        }
    }
}

/// Fixed artifact names inside a run directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn data(&self) -> PathBuf {
        self.path("data.traj")
    }
    pub fn ref_spectrum(&self) -> PathBuf {
        self.path("ref_spectrum.csv")
    }
    pub fn ref_convergence(&self) -> PathBuf {
        self.path("ref_convergence.csv")
    }
    pub fn ref_angles(&self) -> PathBuf {
        self.path("ref_angles.csv")
    }
    pub fn ref_summary(&self) -> PathBuf {
        self.path("ref_summary.txt")
    }
    pub fn cae_model(&self) -> PathBuf {
        self.path("cae.model")
    }
    pub fn cae_loss(&self) -> PathBuf {
        self.path("cae_loss.csv")
    }
    pub fn cae_summary(&self) -> PathBuf {
        self.path("cae_summary.txt")
    }
    pub fn latent(&self) -> PathBuf {
        self.path("latent.traj")
    }
    pub fn esn_search(&self) -> PathBuf {
        self.path("esn_search.csv")
    }
    pub fn esn_summary(&self) -> PathBuf {
        self.path("esn_summary.txt")
    }
    pub fn member_model(&self, i: usize) -> PathBuf {
        self.path(&format!("members/esn_{i:02}.model"))
    }
    pub fn member_spectrum(&self, i: usize) -> PathBuf {
        self.path(&format!("members/esn_{i:02}_spectrum.csv"))
    }
    pub fn member_convergence(&self, i: usize) -> PathBuf {
        self.path(&format!("members/esn_{i:02}_convergence.csv"))
    }
    pub fn member_angles(&self, i: usize) -> PathBuf {
        self.path(&format!("members/esn_{i:02}_angles.csv"))
    }
    pub fn pred_latent(&self) -> PathBuf {
        self.path("pred_latent.traj")
    }
    pub fn pred_physical(&self) -> PathBuf {
        self.path("pred_physical.traj")
    }
    pub fn predict_error(&self) -> PathBuf {
        self.path("predict_error.csv")
    }
    pub fn horizons(&self) -> PathBuf {
        self.path("horizons.csv")
    }
    pub fn latent_summary(&self) -> PathBuf {
        self.path("latent_summary.txt")
    }
    pub fn report(&self) -> PathBuf {
        self.path("report.txt")
    }
    pub fn report_spectra(&self) -> PathBuf {
        self.path("report_spectra.csv")
    }
    pub fn report_histograms(&self) -> PathBuf {
        self.path("report_histograms.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.path("manifest.toml")
    }

    /// Files a stage must leave behind.
    pub fn outputs(&self, stage: Stage, members: usize) -> Vec<PathBuf> {
        match stage {
            Stage::GenerateData => vec![self.data()],
            Stage::StabilityRef => vec![self.ref_spectrum(), self.ref_angles(), self.ref_summary()],
            Stage::TrainCae => vec![self.cae_model(), self.cae_loss(), self.cae_summary()],
            Stage::TrainEsn => {
                let mut v = vec![self.latent(), self.esn_search(), self.esn_summary()];
                v.extend((0..members).map(|i| self.member_model(i)));
                v
            }
            Stage::Predict => vec![self.horizons(), self.predict_error(), self.pred_latent(), self.pred_physical()],
            Stage::StabilityLatent => {
                let mut v = vec![self.latent_summary()];
                v.extend((0..members).flat_map(|i| [self.member_spectrum(i), self.member_angles(i)]));
                v
            }
            Stage::Compare => vec![self.report(), self.report_spectra(), self.report_histograms()],
        }
    }

    pub fn read_manifest(&self) -> Result<BTreeMap<String, String>> {
        match fs::read_to_string(self.manifest()) {
            Ok(text) => toml::from_str(&text).map_err(|e| StoreError::Malformed(format!("manifest: {e}")).into()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn record(&self, stage: Stage, hash: &str) -> Result<()> {
        let mut manifest = self.read_manifest()?;
        manifest.insert(stage.name().to_owned(), hash.to_owned());
        fs::write(self.manifest(), toml::to_string(&manifest).expect("manifest serializes"))?;
        Ok(())
    }
}

/// Key-value summary file as a map.
pub fn read_summary(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(store::read_key_values(path)?.into_iter().collect())
}

pub fn summary_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| StoreError::Malformed(format!("summary lacks numeric {key:?}")).into())
}

fn summary_range(map: &BTreeMap<String, String>, key: &str) -> Result<std::ops::Range<usize>> {
    let bad = || Error::from(StoreError::Malformed(format!("summary lacks range {key:?}")));
    let (a, b) = map.get(key).and_then(|v| v.split_once("..")).ok_or_else(bad)?;
    Ok(a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?)
}

fn kv(entries: &mut Vec<(String, String)>, key: &str, value: impl ToString) {
    entries.push((key.to_owned(), value.to_string()));
}

/// Evenly spaced indices from `lo` to `hi` inclusive.
fn spread(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![lo];
    }
    (0..count).map(|s| lo + (hi - lo) * s / (count - 1)).collect()
}

/// Runs stages against one workspace.
pub struct Pipeline {
    pub config: RunConfig,
    pub workspace: Workspace,
    pub workers: usize,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: RunConfig, workspace: Workspace, workers: usize) -> Self {
        Self {
            config,
            workspace,
            workers: workers.max(1),
            verbose: false,
        }
    }

    fn progress(&self, msg: &str) {
        if self.verbose {
            eprintln!("[latstab] {msg}");
        }
    }

    fn members(&self) -> usize {
        self.config.esn.members
    }

    /// True when the stage's recorded digest matches the config and its outputs exist.
    pub fn is_current(&self, stage: Stage) -> Result<bool> {
        let manifest = self.workspace.read_manifest()?;
        Ok(manifest.get(stage.name()) == Some(&self.config.hash())
            && self.workspace.outputs(stage, self.members()).iter().all(|p| p.exists()))
    }

    fn check_upstream(&self, stage: Stage) -> Result<()> {
        let manifest = self.workspace.read_manifest()?;
        let hash = self.config.hash();
        for &up in stage.upstream() {
            let outputs = self.workspace.outputs(up, self.members());
            if let Some(missing) = outputs.iter().find(|p| !p.exists()) {
                return Err(Error::Dependency {
                    stage: up.name(),
                    path: missing.clone(),
                });
            }
            if manifest.get(up.name()) != Some(&hash) {
                return Err(Error::Dependency {
                    stage: up.name(),
                    path: outputs[0].clone(),
                });
            }
        }
        Ok(())
    }

    /// Runs one stage and returns its printed summary.
    pub fn run(&self, stage: Stage) -> Result<String> {
        self.check_upstream(stage)?;
        fs::create_dir_all(self.workspace.path("members"))?;
        self.progress(&format!("running {}", stage.name()));
        let summary = match stage {
            Stage::GenerateData => self.generate_data(),
            Stage::StabilityRef => self.stability_ref(),
            Stage::TrainCae => self.train_cae(),
            Stage::TrainEsn => self.train_esn(),
            Stage::Predict => self.predict(),
            Stage::StabilityLatent => self.stability_latent(),
            Stage::Compare => self.compare(),
        }?;
        self.workspace.record(stage, &self.config.hash())?;
        Ok(summary)
    }

    /// Runs every stage that is missing or stale, in order.
    pub fn run_all(&self, force: bool) -> Result<String> {
        let mut out = String::new();
        let mut dirty = force;
        for stage in Stage::ALL {
            dirty = dirty || !self.is_current(stage)?;
            if dirty {
                out.push_str(&self.run(stage)?);
            } else {
                writeln!(out, "{}: up to date", stage.name()).expect("string write");
            }
        }
        Ok(out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }

    fn solver(&self) -> Result<KsSolver> {
        let grid = make_grid(self.config.grid.length, self.config.grid.n_x)?;
        KsSolver::new(&grid, self.config.simulation.dt)
    }

    fn generate_data(&self) -> Result<String> {
        let s = &self.config.simulation;
        let solver = self.solver()?;
        let u0 = default_initial_condition(solver.grid(), s.seed);
        let traj = solver.simulate(&u0, s.t_total, s.t_transient, s.sample_every)?;
        store::save_trajectory(&self.workspace.data(), &Trajectory::Physical(traj.clone()))?;
        let energies: Vec<f64> = traj
            .states
            .iter()
            .map(|st| st.u.iter().map(|v| v * v).sum::<f64>() / st.u.len() as f64)
            .collect();
        let mean = energies.iter().sum::<f64>() / energies.len() as f64;
        let std = (energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / energies.len() as f64).sqrt();
        let bytes = fs::metadata(self.workspace.data())?.len();
        Ok(format!(
            "generate-data: {} snapshots x {} points, dt_sample {}, t in [{}, {}]\n  \
             energy <u^2> mean {mean:.4} std {std:.4}\n  wrote {} ({bytes} bytes)\n",
            traj.len(),
            traj.width(),
            traj.dt_sample,
            traj.states.first().map_or(0.0, |x| x.t),
            traj.states.last().map_or(0.0, |x| x.t),
            self.workspace.data().display()
        ))
    }

    fn stability_windows(&self, dt_step: f64) -> Result<(BenettinConfig, GinelliConfig)> {
        let st = &self.config.stability;
        let lt = self.config.lyapunov_time();
        let ortho_every = config::steps_in(st.ortho_interval, dt_step, "ortho_interval")?;
        let qr_steps = |span_lt: f64| ((span_lt * lt) / st.ortho_interval).round() as usize;
        let report_every = config::steps_in(st.report_interval, st.ortho_interval, "report_interval")?;
        let n_window = qr_steps(st.window_lt).max(1);
        let benettin = BenettinConfig {
            m: st.m,
            n_steps: n_window * ortho_every,
            n_transient: qr_steps(st.transient_lt) * ortho_every,
            ortho_every,
            checkpoint_every: report_every * ortho_every * 10,
            seed: st.seed,
        };
        let ginelli = GinelliConfig {
            m: st.clv_m,
            n_forward_transient: qr_steps(st.transient_lt),
            n_window,
            n_backward_transient: qr_steps(st.backward_transient_lt),
            ortho_every,
            report_every,
            seed: st.seed,
        };
        Ok((benettin, ginelli))
    }

    fn stability_ref(&self) -> Result<String> {
        let started = Instant::now();
        let data = store::load_physical(&self.workspace.data())?;
        let state0 = data
            .states
            .first()
            .ok_or_else(|| Error::Contract("empty data trajectory".into()))?
            .clone();
        let prop = KsPropagator::new(self.solver()?);
        let (bcfg, gcfg) = self.stability_windows(prop.step_interval())?;
        let spectrum = benettin_les(&prop, &state0, &bcfg)?;
        self.progress("reference exponents done; computing CLVs");
        let clvs = ginelli_clvs(&prop, &state0, &gcfg)?;
        let split = classify_subspaces(&spectrum.lambdas, self.config.stability.tol_zero)?;
        let angles = angle_table(&clvs, &split);
        let elapsed = started.elapsed().as_secs_f64();

        store::export_spectrum(&self.workspace.ref_spectrum(), &spectrum.lambdas)?;
        store::export_convergence(&self.workspace.ref_convergence(), &spectrum)?;
        store::export_angles(&self.workspace.ref_angles(), &clvs.times, &angles)?;
        let ky = kaplan_yorke(&spectrum.lambdas);
        let mut e = Vec::new();
        kv(&mut e, "lambda1", fmt_f64(spectrum.lambdas[0]));
        kv(&mut e, "kaplan_yorke", fmt_f64(ky.dimension));
        kv(&mut e, "kaplan_yorke_saturated", ky.saturated);
        kv(&mut e, "n_unstable", split.unstable.len());
        kv(&mut e, "n_neutral", split.neutral.len());
        kv(&mut e, "n_stable", split.stable.len());
        kv(&mut e, "split.unstable", format!("{:?}", split.unstable));
        kv(&mut e, "split.neutral", format!("{:?}", split.neutral));
        kv(&mut e, "split.stable", format!("{:?}", split.stable));
        kv(&mut e, "tol_zero", fmt_f64(split.tol_zero));
        kv(&mut e, "window_time", fmt_f64(spectrum.t_total));
        kv(&mut e, "clv_count", clvs.times.len());
        kv(&mut e, "elapsed_seconds", format!("{elapsed:.1}"));
        store::write_key_values(&self.workspace.ref_summary(), &e)?;

        let shown: Vec<String> = spectrum.lambdas.iter().take(10).map(|l| format!("{l:.4}")).collect();
        Ok(format!(
            "stability-ref: {} exponents over {:.0} time units ({elapsed:.1} s)\n  lambda: {}\n  \
             D_KY = {:.3}; unstable {}, neutral {}, stable {} at tol {}\n  {} CLV sets, pairings: {}\n",
            spectrum.m(),
            spectrum.t_total,
            shown.join(" "),
            ky.dimension,
            split.unstable.len(),
            split.neutral.len(),
            split.stable.len(),
            split.tol_zero,
            clvs.times.len(),
            angles.iter().map(|(p, _)| p.label()).collect::<Vec<_>>().join(", ")
        ))
    }

    fn train_cae(&self) -> Result<String> {
        let data = store::load_physical(&self.workspace.data())?;
        let samples = data.subsample(self.config.cae.data_stride);
        let model = train_cae(&samples, &self.config.cae_architecture(), &self.config.cae_hyper())?;
        store::save_cae(&self.workspace.cae_model(), &model)?;
        store::export_loss(&self.workspace.cae_loss(), &model.train_log)?;

        let n_val = (samples.len() as f64 * self.config.cae.validation_fraction).round() as usize;
        let (train, held_out) = samples.states.split_at(samples.len() - n_val);
        let cae_mse = reconstruction_loss(&model, held_out)?;
        let rank = self.config.cae.baseline_rank;
        let baseline = linear_projection_mse(train, held_out, rank)?;
        let energy = held_out.iter().map(|s| s.u.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n_val as f64;
        let best = model
            .train_log
            .iter()
            .min_by(|a, b| a.validation_loss.total_cmp(&b.validation_loss))
            .map_or(0, |l| l.epoch);
        let mut e = Vec::new();
        kv(&mut e, "heldout_samples", n_val);
        kv(&mut e, "cae_heldout_mse", fmt_f64(cae_mse));
        kv(&mut e, "baseline_rank", rank);
        kv(&mut e, "baseline_heldout_mse", fmt_f64(baseline));
        kv(&mut e, "heldout_energy", fmt_f64(energy));
        kv(&mut e, "best_epoch", best);
        kv(&mut e, "n_params", model.n_params());
        store::write_key_values(&self.workspace.cae_summary(), &e)?;
        Ok(format!(
            "train-cae: {} parameters, {} epochs on {} snapshots (best epoch {best})\n  \
             held-out MSE {cae_mse:.4e} vs rank-{rank} linear projection {baseline:.4e} (snapshot energy {energy:.2})\n",
            model.n_params(),
            model.train_log.len(),
            train.len(),
        ))
    }

    fn reference_lambda1(&self) -> Result<f64> {
        let lambda1 = summary_f64(&read_summary(&self.workspace.ref_summary())?, "lambda1")?;
        if lambda1 > 0.0 {
            Ok(lambda1)
        } else {
            Err(Error::NumericalDomain(format!(
                "reference lambda1 = {lambda1} is not positive; horizons in Lyapunov times are undefined"
            )))
        }
    }

    /// Sizes of the train, validation and test blocks of the latent series.
    fn latent_blocks(&self, n: usize) -> (usize, usize, usize) {
        let n_train = (n as f64 * self.config.esn.train_fraction).floor() as usize;
        let n_val = (n as f64 * self.config.esn.validation_fraction).floor() as usize;
        (n_train, n_val, n - n_train - n_val)
    }

    fn window_steps(&self, window_lt: f64, lambda1: f64) -> usize {
        ((window_lt / lambda1) / self.config.esn.dt_esn).round().max(1.0) as usize
    }

    fn train_esn(&self) -> Result<String> {
        let data = store::load_physical(&self.workspace.data())?;
        let cae = store::load_cae(&self.workspace.cae_model())?;
        let lambda1 = self.reference_lambda1()?;
        let latent = cae.encode_trajectory(&data.subsample(self.config.esn_stride()?))?;
        store::save_trajectory(&self.workspace.latent(), &Trajectory::Latent(latent.clone()))?;
        let (n_train, n_val, n_test) = self.latent_blocks(latent.len());
        let searched = LatentTrajectory {
            ys: latent.ys[..n_train + n_val].to_vec(),
            ..latent.clone()
        };
        let split = SearchSplit {
            n_train,
            n_starts: self.config.esn.search_starts,
            horizon_steps: self.window_steps(self.config.esn.search_window_lt, lambda1),
            lambda1,
            threshold: self.config.esn.threshold,
        };
        let grid = self.config.esn_grid();
        self.progress(&format!("searching {} ESN candidates", grid.len()));
        let outcome = hyper_search(&searched, &grid, &split)?;
        let rows: Vec<Vec<String>> = grid
            .iter()
            .zip(&outcome.scores)
            .enumerate()
            .map(|(i, (h, s))| {
                vec![
                    i.to_string(),
                    h.n_r.to_string(),
                    fmt_f64(h.rho),
                    fmt_f64(h.sigma_in),
                    fmt_f64(h.beta),
                    fmt_f64(*s),
                ]
            })
            .collect();
        store::write_csv(
            &self.workspace.esn_search(),
            &["candidate", "n_r", "rho", "sigma_in", "beta", "score_lt"],
            &rows,
        )?;

        let train = LatentTrajectory {
            ys: latent.ys[..n_train].to_vec(),
            ..latent.clone()
        };
        let best = outcome.best;
        self.progress(&format!("training {} ensemble members", self.members()));
        let seeds = self.config.member_seeds();
        let results: Vec<Result<()>> = self.pool()?.install(|| {
            seeds
                .par_iter()
                .enumerate()
                .map(|(i, &seed)| {
                    let hyper = crate::esn::EsnHyper { seed, ..best };
                    let mut model = generate_reservoir(&hyper, latent.width(), latent.dt_sample)?;
                    model.fit_standardizer(&train);
                    model.train(&train)?;
                    store::save_esn(&self.workspace.member_model(i), &model)
                })
                .map_err_seed(&seeds)
                .collect()
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;

        let best_score = outcome.scores.iter().copied().filter(|s| s.is_finite()).fold(f64::MIN, f64::max);
        let mut e = Vec::new();
        kv(&mut e, "n_train", n_train);
        kv(&mut e, "n_validation", n_val);
        kv(&mut e, "n_test", n_test);
        kv(&mut e, "best.n_r", best.n_r);
        kv(&mut e, "best.rho", fmt_f64(best.rho));
        kv(&mut e, "best.sigma_in", fmt_f64(best.sigma_in));
        kv(&mut e, "best.beta", fmt_f64(best.beta));
        kv(&mut e, "best.score_lt", fmt_f64(best_score));
        kv(&mut e, "members", self.members());
        store::write_key_values(&self.workspace.esn_summary(), &e)?;
        Ok(format!(
            "train-esn: latent series of {} steps (train {n_train}, validation {n_val}, test {n_test})\n  \
             best of {} candidates: n_r {} rho {} sigma_in {} beta {:e} (validation horizon {best_score:.2} LT)\n  \
             trained {} members\n",
            latent.len(),
            grid.len(),
            best.n_r,
            best.rho,
            best.sigma_in,
            best.beta,
            self.members()
        ))
    }

    fn load_members(&self) -> Result<Vec<EsnModel>> {
        self.config
            .member_seeds()
            .into_iter()
            .enumerate()
            .map(|(i, seed)| {
                store::load_esn(&self.workspace.member_model(i)).map_err(|e| Error::Member {
                    seed,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    fn predict(&self) -> Result<String> {
        let lambda1 = self.reference_lambda1()?;
        let stride = self.config.esn_stride()?;
        let reference = store::load_physical(&self.workspace.data())?.subsample(stride);
        let cae = store::load_cae(&self.workspace.cae_model())?;
        let latent = store::load_latent(&self.workspace.latent())?;
        let members = self.load_members()?;
        let (n_train, n_val, _) = self.latent_blocks(latent.len());
        let window = self.window_steps(self.config.esn.predict_window_lt, lambda1);
        let first = n_train + n_val;
        let last = latent
            .len()
            .checked_sub(window + 1)
            .filter(|&l| l >= first)
            .ok_or_else(|| Error::Config(format!("test block too short for a {window}-step forecast")))?;
        let starts = spread(first, last, self.config.esn.predict_starts);
        let threshold = self.config.esn.threshold;
        let seeds = self.config.member_seeds();

        type Forecast = (Vec<f64>, Vec<Vec<f64>>, Option<(LatentTrajectory, PhysicalTrajectory)>);
        let per_member: Vec<Result<Forecast>> = self.pool()?.install(|| {
            members
                .par_iter()
                .enumerate()
                .map(|(mi, model)| -> Result<Forecast> {
                    let mut horizons = Vec::new();
                    let mut errors = Vec::new();
                    let mut kept = None;
                    let mut r = ReservoirState::zeros(model.n_r());
                    let mut consumed = 0;
                    for &start in &starts {
                        // teacher-force up to y[start - 1]
                        let segment = LatentTrajectory {
                            ys: latent.ys[consumed..start].to_vec(),
                            t0: latent.time(consumed),
                            ..latent.clone()
                        };
                        if !segment.is_empty() {
                            r = open_loop(model, &segment, &r)?.pop().expect("non-empty segment");
                        }
                        consumed = start;
                        let (pred, _) = closed_loop(model, &latent.ys[start], &r, window)?;
                        let mut ys = vec![latent.ys[start].clone()];
                        ys.extend(pred.ys);
                        let forecast = LatentTrajectory {
                            ys,
                            dt_sample: latent.dt_sample,
                            t0: latent.time(start),
                            source: crate::cae::LatentSource::Esn,
                        };
                        let physical = cae.decode_trajectory(&forecast, self.config.grid.length)?;
                        let truth = reference.slice(start..start + window + 1);
                        let truth_rows: Vec<Vec<f64>> = truth.states.iter().map(|s| s.u.clone()).collect();
                        let pred_rows: Vec<Vec<f64>> = physical.states.iter().map(|s| s.u.clone()).collect();
                        errors.push(metrics::error_series(&truth_rows, &pred_rows)?);
                        horizons.push(metrics::prediction_horizon(&truth, &physical, lambda1, threshold)?);
                        if mi == 0 && kept.is_none() {
                            kept = Some((forecast, physical));
                        }
                    }
                    Ok((horizons, errors, kept))
                })
                .map_err_seed(&seeds)
                .collect()
        });
        let per_member = per_member.into_iter().collect::<Result<Vec<_>>>()?;

        let mut horizon_rows = Vec::new();
        let mut error_rows = Vec::new();
        let mut all = Vec::new();
        let mut member_medians = Vec::new();
        for (mi, (horizons, errors, _)) in per_member.iter().enumerate() {
            member_medians.push(metrics::median(horizons));
            for (si, (&start, h)) in starts.iter().zip(horizons).enumerate() {
                all.push(*h);
                horizon_rows.push(vec![
                    mi.to_string(),
                    seeds[mi].to_string(),
                    start.to_string(),
                    fmt_f64(latent.time(start)),
                    fmt_f64(*h),
                ]);
                for (k, e) in errors[si].iter().enumerate() {
                    error_rows.push(vec![
                        mi.to_string(),
                        start.to_string(),
                        fmt_f64(k as f64 * latent.dt_sample),
                        fmt_f64(*e),
                    ]);
                }
            }
        }
        store::write_csv(
            &self.workspace.horizons(),
            &["member", "seed", "start_index", "start_time", "horizon_lt"],
            &horizon_rows,
        )?;
        store::write_csv(
            &self.workspace.predict_error(),
            &["member", "start_index", "time", "error"],
            &error_rows,
        )?;
        let (lat, phys) = per_member[0].2.clone().expect("member 0 has at least one start");
        store::save_trajectory(&self.workspace.pred_latent(), &Trajectory::Latent(lat))?;
        store::save_trajectory(&self.workspace.pred_physical(), &Trajectory::Physical(phys))?;
        Ok(format!(
            "predict: {} members x {} starts, {window}-step windows ({:.1} LT)\n  \
             median horizon {:.2} LT; per-member medians {}\n",
            members.len(),
            starts.len(),
            window as f64 * latent.dt_sample * lambda1,
            metrics::median(&all),
            member_medians.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>().join(" ")
        ))
    }

    fn reference_split(&self) -> Result<SubspaceSplit> {
        let s = read_summary(&self.workspace.ref_summary())?;
        Ok(SubspaceSplit {
            unstable: summary_range(&s, "split.unstable")?,
            neutral: summary_range(&s, "split.neutral")?,
            stable: summary_range(&s, "split.stable")?,
            tol_zero: summary_f64(&s, "tol_zero")?,
        })
    }

    fn stability_latent(&self) -> Result<String> {
        let started = Instant::now();
        let latent = store::load_latent(&self.workspace.latent())?;
        let members = self.load_members()?;
        let split = self.reference_split()?;
        let (n_train, _, _) = self.latent_blocks(latent.len());
        let warmup = LatentTrajectory {
            ys: latent.ys[..n_train].to_vec(),
            ..latent.clone()
        };
        let (bcfg, gcfg) = self.stability_windows(self.config.esn.dt_esn)?;
        let seeds = self.config.member_seeds();
        let results: Vec<Result<(Vec<f64>, usize)>> = self.pool()?.install(|| {
            members
                .par_iter()
                .enumerate()
                .map(|(i, model)| {
                    let r0 = open_loop(model, &warmup, &ReservoirState::zeros(model.n_r()))?
                        .pop()
                        .expect("non-empty warmup");
                    let prop = EsnPropagator::new(model)?;
                    let spectrum = benettin_les(&prop, &r0, &bcfg)?;
                    let clvs = ginelli_clvs(&prop, &r0, &gcfg)?;
                    let angles = angle_table(&clvs, &split);
                    store::export_spectrum(&self.workspace.member_spectrum(i), &spectrum.lambdas)?;
                    store::export_convergence(&self.workspace.member_convergence(i), &spectrum)?;
                    store::export_angles(&self.workspace.member_angles(i), &clvs.times, &angles)?;
                    Ok((spectrum.lambdas, clvs.times.len()))
                })
                .map_err_seed(&seeds)
                .collect()
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let elapsed = started.elapsed().as_secs_f64();

        let mut e = Vec::new();
        kv(&mut e, "members", results.len());
        kv(&mut e, "elapsed_seconds", format!("{elapsed:.1}"));
        let mut text = format!(
            "stability-latent: {} members, {} exponents each ({elapsed:.1} s)\n",
            results.len(),
            self.config.stability.m
        );
        for (i, (lambdas, n_clv)) in results.iter().enumerate() {
            let ky = kaplan_yorke(lambdas);
            kv(&mut e, &format!("member_{i:02}.lambda1"), fmt_f64(lambdas[0]));
            kv(&mut e, &format!("member_{i:02}.kaplan_yorke"), fmt_f64(ky.dimension));
            let shown: Vec<String> = lambdas.iter().take(6).map(|l| format!("{l:.4}")).collect();
            writeln!(
                text,
                "  member {i:2} (seed {}): {} ... D_KY {:.2}, {n_clv} CLV sets",
                seeds[i],
                shown.join(" "),
                ky.dimension
            )
            .expect("string write");
        }
        store::write_key_values(&self.workspace.latent_summary(), &e)?;
        Ok(text)
    }

    /// Reference and member analyses as written by the stability stages.
    pub fn load_analyses(&self) -> Result<(StabilityAnalysis, Vec<StabilityAnalysis>)> {
        let load = |spectrum: PathBuf, angles: PathBuf| -> Result<StabilityAnalysis> {
            Ok(StabilityAnalysis {
                lambdas: store::csv_column(&spectrum, "lambda")?,
                angles: store::import_angles(&angles)?.into_iter().collect(),
            })
        };
        let reference = load(self.workspace.ref_spectrum(), self.workspace.ref_angles())?;
        let members = (0..self.members())
            .map(|i| load(self.workspace.member_spectrum(i), self.workspace.member_angles(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok((reference, members))
    }

    fn compare(&self) -> Result<String> {
        let (reference, members) = self.load_analyses()?;
        let horizons = store::csv_column(&self.workspace.horizons(), "horizon_lt")?;
        let report = metrics::compare(&reference, &members, &horizons)?;
        write_report(&self.workspace, &report, &reference, &members)?;
        let mut text = format!(
            "compare: {} surrogate spectra against the reference\n  \
             {:>3} {:>10} {:>10} {:>9}\n",
            report.le_members.len(),
            "i",
            "reference",
            "ensemble",
            "std"
        );
        for i in 0..report.le_reference.len().min(10) {
            writeln!(
                text,
                "  {:>3} {:>10.4} {:>10.4} {:>9.4}",
                i + 1,
                report.le_reference[i],
                report.le_surrogate_mean[i],
                report.le_surrogate_std[i]
            )
            .expect("string write");
        }
        writeln!(
            text,
            "  D_KY reference {:.3}, ensemble {:.3} +- {:.3}",
            report.dky_reference, report.dky_surrogate_mean, report.dky_surrogate_std
        )
        .expect("string write");
        for (p, w) in &report.wasserstein_per_pairing {
            writeln!(text, "  W1 {}: {w:.3} deg", p.label()).expect("string write");
        }
        writeln!(text, "  median horizon {:.2} LT", report.horizon_median).expect("string write");
        Ok(text)
    }
}

/// Angles for every pairing whose subspaces both fall inside the computed CLVs.
fn angle_table(clvs: &crate::tangent::ClvSet, split: &SubspaceSplit) -> Vec<(Pairing, Vec<f64>)> {
    let m = clvs.vectors.first().map_or(0, |v| v.ncols());
    let clipped = SubspaceSplit {
        unstable: split.unstable.start.min(m)..split.unstable.end.min(m),
        neutral: split.neutral.start.min(m)..split.neutral.end.min(m),
        stable: split.stable.start.min(m)..split.stable.end.min(m),
        tol_zero: split.tol_zero,
    };
    Pairing::ALL
        .into_iter()
        .filter_map(|p| angle_series(clvs, &clipped, p).ok().map(|a| (p, a)))
        .collect()
}

fn write_report(
    ws: &Workspace,
    report: &metrics::ComparisonReport,
    reference: &StabilityAnalysis,
    members: &[StabilityAnalysis],
) -> Result<()> {
    let mut e = Vec::new();
    let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ");
    kv(&mut e, "members", report.le_members.len());
    kv(&mut e, "le_reference", join(&report.le_reference));
    kv(&mut e, "le_surrogate_mean", join(&report.le_surrogate_mean));
    kv(&mut e, "le_surrogate_std", join(&report.le_surrogate_std));
    kv(&mut e, "dky_reference", fmt_f64(report.dky_reference));
    kv(&mut e, "dky_surrogate_mean", fmt_f64(report.dky_surrogate_mean));
    kv(&mut e, "dky_surrogate_std", fmt_f64(report.dky_surrogate_std));
    for (p, w) in &report.wasserstein_per_pairing {
        kv(&mut e, &format!("wasserstein.{}", p.label()), fmt_f64(*w));
    }
    kv(&mut e, "min_unstable_stable.reference", fmt_f64(report.min_unstable_stable.0));
    kv(&mut e, "min_unstable_stable.surrogate", fmt_f64(report.min_unstable_stable.1));
    kv(&mut e, "horizon_median_lt", fmt_f64(report.horizon_median));
    kv(&mut e, "horizon_lt", join(&report.horizon_lt));
    store::write_key_values(&ws.report(), &e)?;

    let mut header = vec!["index".to_owned(), "reference".into(), "mean".into(), "std".into()];
    header.extend((0..report.le_members.len()).map(|i| format!("member_{i:02}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..report.le_reference.len())
        .map(|i| {
            let mut row = vec![
                (i + 1).to_string(),
                fmt_f64(report.le_reference[i]),
                fmt_f64(report.le_surrogate_mean[i]),
                fmt_f64(report.le_surrogate_std[i]),
            ];
            row.extend(report.le_members.iter().map(|l| fmt_f64(l[i])));
            row
        })
        .collect();
    store::write_csv(&ws.report_spectra(), &header_refs, &rows)?;

    let mut hist_rows = Vec::new();
    for pairing in Pairing::ALL {
        let Some(ref_angles) = reference.angles.get(&pairing) else {
            continue;
        };
        let pooled: Vec<f64> = members.iter().filter_map(|m| m.angles.get(&pairing)).flatten().copied().collect();
        if ref_angles.is_empty() || pooled.is_empty() {
            continue;
        }
        let r = metrics::histogram(ref_angles, metrics::DEFAULT_BINS, Some(pairing))?;
        let s = metrics::histogram(&pooled, metrics::DEFAULT_BINS, Some(pairing))?;
        for b in 0..metrics::DEFAULT_BINS {
            hist_rows.push(vec![
                pairing.label().to_owned(),
                fmt_f64(r.edges[b]),
                fmt_f64(r.edges[b + 1]),
                fmt_f64(r.density[b]),
                fmt_f64(s.density[b]),
            ]);
        }
    }
    store::write_csv(
        &ws.report_histograms(),
        &["pairing", "bin_lo", "bin_hi", "reference_density", "surrogate_density"],
        &hist_rows,
    )
}

/// Tags per-member failures with the member's seed.
trait MapErrSeed<T>: Sized {
    fn map_err_seed(self, seeds: &[u64]) -> impl ParallelIterator<Item = Result<T>>;
}

impl<T: Send, I> MapErrSeed<T> for I
where
    I: IndexedParallelIterator<Item = Result<T>>,
{
    fn map_err_seed(self, seeds: &[u64]) -> impl ParallelIterator<Item = Result<T>> {
        self.zip(seeds.par_iter()).map(|(r, &seed)| {
            r.map_err(|e| Error::Member {
                seed,
                source: Box::new(e),
            })
        })
    }
}
