//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cae::{CaeArchitecture, CaeHyper, ConvSpec};
use crate::error::{Error, Result};
use crate::esn::EsnHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub simulation: SimulationConfig,
    pub cae: CaeConfig,
    pub esn: EsnConfig,
    pub stability: StabilityConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub length: f64,
    pub n_x: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub t_total: f64,
    pub t_transient: f64,
    /// Solver steps between stored snapshots.
    pub sample_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaeConfig {
    pub n_lat: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Stored snapshots between training samples.
    pub data_stride: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Rank of the linear projection baseline.
    pub baseline_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsnConfig {
    pub dt_esn: f64,
    pub n_r: Vec<usize>,
    pub rho: Vec<f64>,
    pub sigma_in: Vec<f64>,
    pub beta: Vec<f64>,
    pub bias_in: f64,
    pub connectivity: f64,
    pub washout: usize,
    pub noise: f64,
    pub members: usize,
    /// Member `i` uses `seed + i`; the search uses `seed`.
    pub seed: u64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub search_starts: usize,
    pub search_window_lt: f64,
    pub predict_starts: usize,
    pub predict_window_lt: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub m: usize,
    pub clv_m: usize,
    /// Converts windows given in Lyapunov times to time units.
    pub lambda1_nominal: f64,
    pub window_lt: f64,
    pub transient_lt: f64,
    pub backward_transient_lt: f64,
    /// Time between QR re-orthonormalizations.
    pub ortho_interval: f64,
    /// Time between stored CLV sets.
    pub report_interval: f64,
    pub tol_zero: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub workspace: PathBuf,
}

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what()))
    }
}

/// Whole number of `step` intervals in `span`, rejecting spans that are not multiples.
pub fn steps_in(span: f64, step: f64, what: &str) -> Result<usize> {
    let n = (span / step).round();
    ensure(n >= 1.0 && (n * step - span).abs() <= 1e-9 * span.abs().max(step), || {
        format!("{what}: {span} is not a positive multiple of {step}")
    })?;
    Ok(n as usize)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of every setting that influences artifacts (the workspace path excluded).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.paths.workspace = PathBuf::new();
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        ensure(g.length > 0.0 && g.n_x >= 8 && g.n_x.is_power_of_two(), || {
            format!("grid: need length > 0 and n_x a power of two >= 8 (got {}, {})", g.length, g.n_x)
        })?;
        let s = &self.simulation;
        ensure(s.dt > 0.0 && s.sample_every >= 1, || "simulation: dt > 0 and sample_every >= 1".into())?;
        ensure(s.t_transient >= 0.0 && s.t_transient < s.t_total, || {
            "simulation: need 0 <= t_transient < t_total".into()
        })?;
        let c = &self.cae;
        self.cae_architecture().validate()?;
        ensure(c.data_stride >= 1 && c.epochs >= 1 && c.batch_size >= 1 && c.learning_rate > 0.0, || {
            "cae: data_stride, epochs, batch_size and learning_rate must be positive".into()
        })?;
        ensure(c.validation_fraction > 0.0 && c.validation_fraction < 1.0, || {
            "cae: validation_fraction must be in (0, 1)".into()
        })?;
        ensure(c.baseline_rank >= 1 && c.baseline_rank <= g.n_x, || "cae: baseline_rank out of range".into())?;
        let e = &self.esn;
        self.esn_stride()?;
        ensure(
            !e.n_r.is_empty() && !e.rho.is_empty() && !e.sigma_in.is_empty() && !e.beta.is_empty(),
            || "esn: every hyperparameter grid needs at least one value".into(),
        )?;
        for h in self.esn_grid() {
            h.validate(c.n_lat)?;
        }
        ensure(e.members >= 1, || "esn: members must be >= 1".into())?;
        ensure(
            e.train_fraction > 0.0 && e.validation_fraction > 0.0 && e.train_fraction + e.validation_fraction < 1.0,
            || "esn: train and validation fractions must leave a test block".into(),
        )?;
        ensure(e.search_starts >= 1 && e.predict_starts >= 1, || "esn: need at least one start".into())?;
        ensure(e.search_window_lt > 0.0 && e.predict_window_lt > 0.0 && e.threshold > 0.0, || {
            "esn: windows and threshold must be positive".into()
        })?;
        let st = &self.stability;
        ensure(st.m >= 1 && st.clv_m >= 2 && st.clv_m <= st.m && st.m <= g.n_x, || {
            "stability: need 2 <= clv_m <= m <= n_x".into()
        })?;
        ensure(st.lambda1_nominal > 0.0 && st.window_lt > 0.0 && st.transient_lt >= 0.0, || {
            "stability: lambda1_nominal and window_lt must be positive".into()
        })?;
        ensure(st.backward_transient_lt >= 0.0 && st.tol_zero > 0.0, || {
            "stability: backward_transient_lt >= 0 and tol_zero > 0".into()
        })?;
        steps_in(st.ortho_interval, s.dt, "stability.ortho_interval vs simulation.dt")?;
        steps_in(st.ortho_interval, e.dt_esn, "stability.ortho_interval vs esn.dt_esn")?;
        steps_in(st.report_interval, st.ortho_interval, "stability.report_interval vs ortho_interval")?;
        Ok(())
    }

    pub fn cae_architecture(&self) -> CaeArchitecture {
        let c = &self.cae;
        let mut channels_in = 1;
        let encoder_convs = c
            .channels
            .iter()
            .map(|&channels_out| {
                let spec = ConvSpec {
                    channels_in,
                    channels_out,
                    kernel: c.kernel,
                    stride: c.stride,
                };
                channels_in = channels_out;
                spec
            })
            .collect();
        CaeArchitecture {
            n_x: self.grid.n_x,
            n_lat: c.n_lat,
            encoder_convs,
        }
    }

    pub fn cae_hyper(&self) -> CaeHyper {
        CaeHyper {
            lr: self.cae.learning_rate,
            batch_size: self.cae.batch_size,
            epochs: self.cae.epochs,
            seed: self.cae.seed,
            validation_fraction: self.cae.validation_fraction,
        }
    }

    /// Time between stored snapshots.
    pub fn dt_sample(&self) -> f64 {
        self.simulation.dt * self.simulation.sample_every as f64
    }

    /// Stored snapshots per ESN step.
    pub fn esn_stride(&self) -> Result<usize> {
        steps_in(self.esn.dt_esn, self.dt_sample(), "esn.dt_esn vs snapshot spacing")
    }

    /// Cartesian product of the grids, ordered by `n_r`, `rho`, `sigma_in`, `beta`.
    pub fn esn_grid(&self) -> Vec<EsnHyper> {
        let e = &self.esn;
        let mut out = Vec::new();
        for &n_r in &e.n_r {
            for &rho in &e.rho {
                for &sigma_in in &e.sigma_in {
                    for &beta in &e.beta {
                        out.push(EsnHyper {
                            n_r,
                            sigma_in,
                            bias_in: e.bias_in,
                            rho,
                            connectivity: e.connectivity,
                            beta,
                            washout: e.washout,
                            noise: e.noise,
                            seed: e.seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn member_seeds(&self) -> Vec<u64> {
        (0..self.esn.members as u64).map(|i| self.esn.seed + i).collect()
    }

    pub fn lyapunov_time(&self) -> f64 {
        1.0 / self.stability.lambda1_nominal
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DESK: &str = include_str!("../../../../configs/desk.toml");

    #[test]
    fn desk_config_parses() {
        let c = RunConfig::from_toml(DESK).unwrap();
        assert_eq!(c.grid.n_x, 64);
        assert_eq!(c.esn_stride().unwrap(), 5);
        assert_eq!(c.member_seeds().len(), 10);
        assert_eq!(c.cae_architecture().feature_shape(), (32, 8));
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [include_str!("../../../../configs/full.toml"), include_str!("../../../../configs/smoke.toml")] {
            RunConfig::from_toml(text).unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = DESK.replace("[grid]", "[grid]\nlenght = 3.0");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        let text = DESK.replace("n_x = 64", "n_x = 60");
        assert!(RunConfig::from_toml(&text).is_err());
        let text = DESK.replace("dt_esn = 0.25", "dt_esn = 0.3");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn workspace_does_not_change_hash() {
        let a = RunConfig::from_toml(DESK).unwrap();
        let mut b = a.clone();
        b.paths.workspace = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.esn.members = 3;
        assert_ne!(a.hash(), b.hash());
    }
}
