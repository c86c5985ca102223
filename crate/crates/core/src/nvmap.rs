//! Mapping between the dimensionless algorithm and an NV-centre register.
//!
//! Physical quantities are SI throughout (seconds, rad/s, gauss). The
//! `*Config` types accept lab units (MHz, us) and convert once.

use std::f64::consts::{FRAC_PI_6, PI};

use serde::{Deserialize, Serialize};

use crate::engine::EvolverKind;
use crate::error::{Error, Result};
use crate::model::{paper_density_matrix, quadrature_for_drive, DensityMatrix, DriveParams, NoiseModel};
use crate::qmath::{apply_local_channel, state_fidelity, tensor, ComplexMatrix, C64};
use crate::scan::measure_line;

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NvParams {
    /// rad/s.
    pub f_map: f64,
    /// rad/s per gauss.
    pub gamma_e: f64,
    /// s.
    pub t2e_star: f64,
    /// rad/s.
    pub a_par_c: f64,
    /// rad/s.
    pub a_par_n: f64,
    /// rad.
    pub theta_prime: f64,
}

impl Default for NvParams {
    fn default() -> Self {
        NvParams {
            f_map: TWO_PI * 36.25e6,
            gamma_e: TWO_PI * 2.8e6,
            t2e_star: 5.8e-6,
            a_par_c: TWO_PI * 12.8e6,
            a_par_n: TWO_PI * -2.16e6,
            theta_prime: 0.0,
        }
    }
}

impl NvParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_map > 0.0 && self.f_map.is_finite()) {
            return Err(Error::param("f_map", "must be positive"));
        }
        if !(self.t2e_star > 0.0 && self.t2e_star.is_finite()) {
            return Err(Error::param("t2e_star", "must be positive"));
        }
        Ok(())
    }

    /// `A_C cos(theta')`.
    pub fn alpha(&self) -> f64 {
        self.a_par_c * self.theta_prime.cos()
    }

    /// `A_C sin(theta')`.
    pub fn beta(&self) -> f64 {
        self.a_par_c * self.theta_prime.sin()
    }
}

/// `NvParams` overrides in lab units: MHz (times 2 pi internally), MHz/G, us.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_map_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_e_mhz_per_gauss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2e_star_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_par_c_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_par_n_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_prime: Option<f64>,
}

impl NvConfig {
    pub fn resolve(&self) -> Result<NvParams> {
        let d = NvParams::default();
        let nv = NvParams {
            f_map: self.f_map_mhz.map_or(d.f_map, |v| TWO_PI * v * 1e6),
            gamma_e: self.gamma_e_mhz_per_gauss.map_or(d.gamma_e, |v| TWO_PI * v * 1e6),
            t2e_star: self.t2e_star_us.map_or(d.t2e_star, |v| v * 1e-6),
            a_par_c: self.a_par_c_mhz.map_or(d.a_par_c, |v| TWO_PI * v * 1e6),
            a_par_n: self.a_par_n_mhz.map_or(d.a_par_n, |v| TWO_PI * v * 1e6),
            theta_prime: self.theta_prime.unwrap_or(d.theta_prime),
        };
        nv.validate()?;
        Ok(nv)
    }

    /// Fully populated config describing `nv`.
    pub fn describe(nv: &NvParams) -> Self {
        NvConfig {
            f_map_mhz: Some(nv.f_map / TWO_PI / 1e6),
            gamma_e_mhz_per_gauss: Some(nv.gamma_e / TWO_PI / 1e6),
            t2e_star_us: Some(nv.t2e_star * 1e6),
            a_par_c_mhz: Some(nv.a_par_c / TWO_PI / 1e6),
            a_par_n_mhz: Some(nv.a_par_n / TWO_PI / 1e6),
            theta_prime: Some(nv.theta_prime),
        }
    }
}

/// Microwave detuning and Rabi amplitude, both in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalDrive {
    pub delta: f64,
    pub omega_mw: f64,
}

/// `delta = f_map (omega - 1/4)`, `Omega_MW = 2 f_map c`.
pub fn to_physical(omega: f64, c: f64, nv: &NvParams) -> PhysicalDrive {
    PhysicalDrive { delta: nv.f_map * (omega - 0.25), omega_mw: 2.0 * nv.f_map * c }
}

/// Inverse of `to_physical`: `(omega, c)`.
pub fn from_physical(drive: &PhysicalDrive, nv: &NvParams) -> (f64, f64) {
    (drive.delta / nv.f_map + 0.25, drive.omega_mw / (2.0 * nv.f_map))
}

/// Scan frequency seen by the algorithm when the bias field drifts by
/// `delta_b` gauss: `omega - gamma_e delta_b / f_map`.
pub fn effective_omega(omega: f64, delta_b: f64, nv: &NvParams) -> f64 {
    omega - nv.gamma_e * delta_b / nv.f_map
}

/// Dephasing-limited resolution `sqrt(ln 2) / (pi T2* f_map)`.
pub fn resolution_bound(nv: &NvParams) -> f64 {
    2f64.ln().sqrt() / (PI * nv.t2e_star * nv.f_map)
}

/// Calibration multiplier used unless a config overrides it. With 1 the
/// detuning spread follows the usual Gaussian free-induction relation
/// `T2* = sqrt(2) / sigma`.
pub const DEFAULT_CALIBRATION: f64 = 1.0;

/// `calibration * sqrt(2) / (T2* f_map)`.
pub fn calibrated_sigma_delta(nv: &NvParams, calibration: f64) -> Result<f64> {
    if !(calibration >= 0.0 && calibration.is_finite()) {
        return Err(Error::param("calibration", "must be a finite non-negative number"));
    }
    Ok(calibration * 2f64.sqrt() / (nv.t2e_star * nv.f_map))
}

/// Calibrated quasi-static noise with an averaging rule suited to drive `c`.
pub fn calibrated_noise(nv: &NvParams, calibration: f64, c: f64) -> Result<NoiseModel> {
    let sigma = calibrated_sigma_delta(nv, calibration)?;
    Ok(NoiseModel::gaussian(sigma).with_averaging(quadrature_for_drive(sigma, c)))
}

/// Outcome of `fit_calibration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub calibration: f64,
    pub sigma_delta: f64,
    pub fitted_fwhm: f64,
    pub target_fwhm: f64,
}

/// Finds the calibration whose native line at drive `c` (centred on the
/// largest eigenvalue of `rho`) has the FWHM `resolution_bound(nv)`.
///
/// Fails with `Unattainable` when the noiseless line is already wider than
/// the target, since dephasing only broadens it further.
pub fn fit_calibration(rho: &DensityMatrix, nv: &NvParams, c: f64, ev: EvolverKind) -> Result<Calibration> {
    let target = resolution_bound(nv);
    let center = *rho.eig()?.eigenvalues.last().expect("nonempty");
    let p = DriveParams::new(center, c);
    let fwhm = |cal: f64| -> Result<f64> {
        let noise = calibrated_noise(nv, cal, c)?;
        Ok(measure_line(rho, center, &p, &noise, ev, 61)?.1.fwhm)
    };
    let floor = fwhm(0.0)?;
    if floor >= target {
        return Err(Error::Unattainable(format!("noiseless FWHM {floor:.3e} at c = {c:e} already exceeds the target {target:.3e}")));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while fwhm(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Unattainable("line never reaches the target width".into()));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if fwhm(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let calibration = 0.5 * (lo + hi);
    Ok(Calibration {
        calibration,
        sigma_delta: calibrated_sigma_delta(nv, calibration)?,
        fitted_fwhm: fwhm(calibration)?,
        target_fwhm: target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserParams {
    /// Laser-induced nitrogen dephasing time, s.
    pub t2_laser: f64,
    /// Repolarisation time towards `|0>_N`, s.
    pub t1_laser: f64,
    /// Pulse length, s.
    pub duration: f64,
}

impl Default for LaserParams {
    fn default() -> Self {
        LaserParams { t2_laser: 0.6e-6, t1_laser: 2.1e-6, duration: 1.4e-6 }
    }
}

impl LaserParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t2_laser", self.t2_laser), ("t1_laser", self.t1_laser), ("duration", self.duration)] {
            if !(v > 0.0) || v.is_nan() {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// `LaserParams` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserConfig {
    pub t2_laser_us: f64,
    pub t1_laser_us: f64,
    pub duration_us: f64,
}

impl Default for LaserConfig {
    fn default() -> Self {
        LaserConfig { t2_laser_us: 0.6, t1_laser_us: 2.1, duration_us: 1.4 }
    }
}

impl LaserConfig {
    pub fn resolve(&self) -> Result<LaserParams> {
        let p = LaserParams { t2_laser: self.t2_laser_us * 1e-6, t1_laser: self.t1_laser_us * 1e-6, duration: self.duration_us * 1e-6 };
        p.validate()?;
        Ok(p)
    }
}

/// Kraus operators of the laser channel on one qubit: pure dephasing that
/// multiplies coherences by `exp(-t/T2)`, followed by amplitude damping
/// with `gamma = 1 - exp(-t/T1)`. The two commute.
pub fn laser_kraus(laser: &LaserParams) -> Vec<ComplexMatrix> {
    let t = laser.duration;
    let q = (-t / laser.t2_laser).exp();
    let keep = (-t / laser.t1_laser).exp();
    let gamma = 1.0 - keep;
    let re = |v: f64| C64::new(v, 0.0);
    let damp = [
        ComplexMatrix::from_vec(2, 2, vec![re(1.0), re(0.0), re(0.0), re(keep.sqrt())]).expect("2x2"),
        ComplexMatrix::from_vec(2, 2, vec![re(0.0), re(gamma.sqrt()), re(0.0), re(0.0)]).expect("2x2"),
    ];
    // Projector form keeps the q = 0 limit free of rounding.
    let dephase = [
        ComplexMatrix::identity(2).scale_re(q.sqrt()),
        ComplexMatrix::diag(&[1.0, 0.0]).scale_re((1.0 - q).sqrt()),
        ComplexMatrix::diag(&[0.0, 1.0]).scale_re((1.0 - q).sqrt()),
    ];
    damp.iter().flat_map(|a| dephase.iter().map(move |b| a * b)).collect()
}

/// `exp(-i theta Y / 2)`.
pub fn ry(theta: f64) -> ComplexMatrix {
    let (s, c) = (theta / 2.0).sin_cos();
    ComplexMatrix::from_real(&[&[c, -s], &[s, c]])
}

/// Register states along the preparation pipeline. Qubit order is carbon
/// (major) then nitrogen.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparationLog {
    pub initial: DensityMatrix,
    pub after_rotations: DensityMatrix,
    pub after_laser: DensityMatrix,
    pub final_state: DensityMatrix,
    /// Uhlmann fidelity of `final_state` to the built-in target matrix.
    pub fidelity: f64,
}

/// Carbon populations of the nuclear-spin pumping step.
pub const CARBON_POPULATIONS: [f64; 2] = [0.85, 0.15];

/// Runs the register preparation: `R_Y(theta1)` on N, `R_Y(theta2)` on N
/// controlled by C in `|0>`, the laser channel on N (skipped for `None`),
/// then `R_Y(pi/6)` on C and `R_Y(pi)` on N.
pub fn simulate_preparation(theta1: f64, theta2: f64, laser: Option<&LaserParams>) -> Result<PreparationLog> {
    if let Some(l) = laser {
        l.validate()?;
    }
    let n0 = ComplexMatrix::diag(&[1.0, 0.0]);
    let initial = tensor(&ComplexMatrix::diag(&CARBON_POPULATIONS), &n0);

    let i2 = ComplexMatrix::identity(2);
    let rot1 = tensor(&i2, &ry(theta1));
    let p0 = ComplexMatrix::diag(&[1.0, 0.0]);
    let p1 = ComplexMatrix::diag(&[0.0, 1.0]);
    let controlled = &tensor(&p0, &ry(theta2)) + &tensor(&p1, &i2);
    let after_rotations = initial.conjugate_by(&(&controlled * &rot1));

    let after_laser = match laser {
        Some(l) => apply_local_channel(&after_rotations, &[2, 2], 1, &laser_kraus(l))?,
        None => after_rotations.clone(),
    };

    let finish = tensor(&ry(FRAC_PI_6), &ry(PI));
    let final_state = after_laser.conjugate_by(&finish);
    let target = paper_density_matrix();
    let fidelity = state_fidelity(&final_state, target.matrix())?;

    Ok(PreparationLog {
        initial: DensityMatrix::new(initial)?,
        after_rotations: DensityMatrix::new(after_rotations)?,
        after_laser: DensityMatrix::new(after_laser)?,
        final_state: DensityMatrix::new(final_state)?,
        fidelity,
    })
}
