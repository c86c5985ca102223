//! Run configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rqpca::engine::EvolverKind;
use rqpca::model::{paper_density_matrix, Averaging, DensityMatrix, DriveParams, NoiseModel, ShotNoise, FORMAT_VERSION};
use rqpca::nvmap::{calibrated_noise, calibrated_sigma_delta, LaserConfig, NvConfig, NvParams, DEFAULT_CALIBRATION};
use rqpca::scan::AdaptiveSchedule;
use rqpca::study::{DEFAULT_DD_C_LIST, DEFAULT_DD_M_LIST};
use rqpca::{Error, Result};

pub const PAPER_RHO: &str = "paper";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "format_version")]
    pub format_version: u32,
    /// `"paper"` or a path to a density-matrix JSON file.
    #[serde(default = "paper")]
    pub rho_source: String,
    #[serde(default)]
    pub drive: DriveConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Multiplier for `calibrated-nv` noise.
    #[serde(default = "calibration")]
    pub calibration: f64,
    #[serde(default = "exact")]
    pub evolver: EvolverKind,
    #[serde(default)]
    pub nv: NvConfig,
    #[serde(default)]
    pub laser: LaserConfig,
    /// Master seed; overrides every seed inside `noise`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<u64>,
    #[serde(default = "output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub adaptive: AdaptiveSchedule,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub dd_study: DdStudyConfig,
    #[serde(default)]
    pub prep: PrepConfig,
    /// Written into meta files; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

fn format_version() -> u32 {
    FORMAT_VERSION
}
fn paper() -> String {
    PAPER_RHO.into()
}
fn calibration() -> f64 {
    DEFAULT_CALIBRATION
}
fn exact() -> EvolverKind {
    EvolverKind::Exact
}
fn output_dir() -> PathBuf {
    PathBuf::from("rqpca-out")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    /// Defaults to the largest eigenvalue of the register state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    pub c: f64,
    /// Defaults to `pi / (2c)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default)]
    pub echo_order: u32,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig { omega: None, c: 6e-4, tau: None, echo_order: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoisePreset {
    #[serde(rename = "noiseless")]
    Noiseless,
    #[serde(rename = "calibrated-nv")]
    CalibratedNv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Preset(NoisePreset),
    Explicit(NoiseModel),
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Preset(NoisePreset::Noiseless)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub omega_min: f64,
    pub omega_max: f64,
    pub points: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig { omega_min: 0.0, omega_max: 1.0, points: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Overrides `drive.omega` for this command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdStudyConfig {
    pub c_list: Vec<f64>,
    pub m_list: Vec<u32>,
}

impl Default for DdStudyConfig {
    fn default() -> Self {
        DdStudyConfig { c_list: DEFAULT_DD_C_LIST.to_vec(), m_list: DEFAULT_DD_M_LIST.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepConfig {
    pub theta1: f64,
    pub theta2: f64,
    /// Apply the laser channel between the two rotation layers.
    pub laser: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { theta1: 0.58 * std::f64::consts::PI, theta2: 0.31 * std::f64::consts::PI, laser: true }
    }
}

impl RunConfig {
    /// Reads a config (or a meta file written by an earlier run). Relative
    /// `rho_source` paths are taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported format_version {}", cfg.format_version)));
        }
        cfg.provenance = None;
        if cfg.rho_source != PAPER_RHO {
            let rho = Path::new(&cfg.rho_source);
            if rho.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.rho_source = dir.join(rho).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn rho(&self) -> Result<DensityMatrix> {
        if self.rho_source == PAPER_RHO {
            return Ok(paper_density_matrix());
        }
        let text = std::fs::read_to_string(&self.rho_source).map_err(|e| Error::Parse(format!("{}: {e}", self.rho_source)))?;
        DensityMatrix::from_json(&text)
    }

    pub fn nv_params(&self) -> Result<NvParams> {
        self.nv.resolve()
    }

    /// Checks everything that does not depend on the chosen command.
    pub fn validate(&self) -> Result<()> {
        self.evolver.validate()?;
        self.nv_params()?;
        self.laser.resolve()?;
        if !(self.calibration >= 0.0 && self.calibration.is_finite()) {
            return Err(Error::param("calibration", "must be a finite non-negative number"));
        }
        if self.shots == Some(0) {
            return Err(Error::param("shots", "must be at least 1"));
        }
        if let NoiseSpec::Explicit(n) = &self.noise {
            n.validate()?;
        }
        Ok(())
    }

    /// Fills in defaults that depend on the register state so the echoed
    /// config pins them.
    pub fn resolve_omega(&mut self, rho: &DensityMatrix) -> Result<()> {
        if self.drive.omega.is_none() {
            self.drive.omega = Some(*rho.eig()?.eigenvalues.last().expect("nonempty"));
        }
        Ok(())
    }

    pub fn drive(&self) -> Result<DriveParams> {
        let omega = self.drive.omega.ok_or_else(|| Error::param("drive.omega", "unresolved"))?;
        let mut p = DriveParams::new(omega, self.drive.c).with_echo(self.drive.echo_order);
        if let Some(tau) = self.drive.tau {
            p = p.with_tau(tau);
        }
        p.validate()?;
        Ok(p)
    }

    /// Detuning spread implied by `noise`.
    pub fn sigma_delta(&self) -> Result<f64> {
        match self.noise {
            NoiseSpec::Preset(NoisePreset::Noiseless) => Ok(0.0),
            NoiseSpec::Preset(NoisePreset::CalibratedNv) => calibrated_sigma_delta(&self.nv_params()?, self.calibration),
            NoiseSpec::Explicit(n) => Ok(n.sigma_delta),
        }
    }

    /// Noise model for drives down to strength `c`, with the master seed and
    /// shot count applied.
    pub fn noise_model(&self, c: f64) -> Result<NoiseModel> {
        let mut n = match self.noise {
            NoiseSpec::Preset(NoisePreset::Noiseless) => NoiseModel::noiseless(),
            NoiseSpec::Preset(NoisePreset::CalibratedNv) => calibrated_noise(&self.nv_params()?, self.calibration, c)?,
            NoiseSpec::Explicit(n) => n,
        };
        if let Averaging::MonteCarlo { samples, .. } = n.averaging {
            n.averaging = Averaging::MonteCarlo { samples, seed: self.seed };
        }
        n.shots = match (self.shots, n.shots) {
            (Some(shots), _) | (None, Some(ShotNoise { shots, .. })) => Some(ShotNoise { shots, seed: self.seed }),
            (None, None) => None,
        };
        n.validate()?;
        Ok(n)
    }
}
