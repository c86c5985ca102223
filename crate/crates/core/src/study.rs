//! Parameter sweeps built on `scan::measure_line`: linewidth versus drive
//! strength, and echo order versus drive strength.

use serde::{Deserialize, Serialize};

use crate::engine::{run_sequence, EvolverKind};
use crate::error::{Error, Result};
use crate::model::{quadrature_for_drive, DensityMatrix, DriveParams, NoiseModel};
use crate::scan::{fmt_sig, measure_line};

pub const DEFAULT_DD_C_LIST: [f64; 6] = [2e-5, 5e-5, 1e-4, 2e-4, 6e-4, 2e-3];
pub const DEFAULT_DD_M_LIST: [u32; 5] = [0, 1, 2, 4, 8];
pub const DEFAULT_RESOLUTION_C_LIST: [f64; 5] = [2e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4];

/// Frequencies scanned per line.
pub const LINE_POINTS: usize = 61;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineRow {
    pub c: f64,
    pub echo_order: u32,
    pub center: f64,
    /// Success probability at `center`.
    pub amplitude: f64,
    /// NaN when no line could be fitted; `center` is then the eigenvalue.
    pub fwhm: f64,
}

fn largest_eigenvalue(rho: &DensityMatrix) -> Result<f64> {
    Ok(*rho.eig()?.eigenvalues.last().expect("nonempty"))
}

fn measure(rho: &DensityMatrix, center: f64, c: f64, m: u32, sigma: f64, ev: EvolverKind) -> Result<LineRow> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::param("c", "must be positive"));
    }
    let noise =
        if sigma > 0.0 { NoiseModel::gaussian(sigma).with_averaging(quadrature_for_drive(sigma, c)) } else { NoiseModel::noiseless() };
    let p = DriveParams::new(center, c).with_echo(m);
    let (at, fwhm) = match measure_line(rho, center, &p, &noise, ev, LINE_POINTS) {
        Ok((_, peak)) => (peak.center, peak.fwhm),
        Err(Error::FitFailed { .. }) => (center, f64::NAN),
        Err(e) => return Err(e),
    };
    let amplitude = run_sequence(rho, &p.with_omega(at), &noise, ev)?.success_probability;
    Ok(LineRow { c, echo_order: m, center: at, amplitude, fwhm })
}

/// Line of the largest eigenvalue for every `(c, M)` pair, `c` major.
pub fn dd_study(rho: &DensityMatrix, sigma_delta: f64, c_list: &[f64], m_list: &[u32], ev: EvolverKind) -> Result<Vec<LineRow>> {
    if c_list.is_empty() || m_list.is_empty() {
        return Err(Error::param("c_list/m_list", "must be nonempty"));
    }
    let center = largest_eigenvalue(rho)?;
    let mut rows = Vec::with_capacity(c_list.len() * m_list.len());
    for &c in c_list {
        for &m in m_list {
            rows.push(measure(rho, center, c, m, sigma_delta, ev)?);
        }
    }
    Ok(rows)
}

/// Native (`M = 0`) line of the largest eigenvalue for each `c`.
pub fn resolution_study(rho: &DensityMatrix, sigma_delta: f64, c_list: &[f64], ev: EvolverKind) -> Result<Vec<LineRow>> {
    if c_list.is_empty() {
        return Err(Error::param("c_list", "must be nonempty"));
    }
    let center = largest_eigenvalue(rho)?;
    c_list.iter().map(|&c| measure(rho, center, c, 0, sigma_delta, ev)).collect()
}

/// CSV with header `c,M,amplitude,fwhm`.
pub fn dd_csv(rows: &[LineRow]) -> String {
    let mut out = String::from("c,M,amplitude,fwhm\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", fmt_sig(r.c), r.echo_order, fmt_sig(r.amplitude), fmt_sig(r.fwhm)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::paper_density_matrix;

    #[test]
    fn noiseless_line_height_and_width() {
        let rho = paper_density_matrix();
        let rows = resolution_study(&rho, 0.0, &[1e-3, 5e-4], EvolverKind::Exact).unwrap();
        for r in &rows {
            assert!((r.amplitude - 0.454929).abs() < 1e-3, "{r:?}");
            assert!(r.fwhm > 2.0 * r.c && r.fwhm < 4.5 * r.c, "{r:?}");
        }
        assert!(rows[1].fwhm < rows[0].fwhm);
    }

    #[test]
    fn large_c_approaches_noiseless() {
        let rho = paper_density_matrix();
        let clean = dd_study(&rho, 0.0, &[2e-2], &[0, 1], EvolverKind::Exact).unwrap();
        let noisy = dd_study(&rho, 1e-4, &[2e-2], &[0, 1], EvolverKind::Exact).unwrap();
        for (a, b) in clean.iter().zip(&noisy) {
            assert!((a.amplitude - b.amplitude).abs() < 2e-3, "{a:?} {b:?}");
        }
    }

    #[test]
    fn csv_layout() {
        let rows = [LineRow { c: 2e-5, echo_order: 4, center: 0.45, amplitude: 0.4, fwhm: 1e-3 }];
        assert_eq!(dd_csv(&rows), "c,M,amplitude,fwhm\n0.00002,4,0.4,0.001\n");
    }

    #[test]
    fn empty_lists_rejected() {
        let rho = paper_density_matrix();
        assert!(dd_study(&rho, 0.0, &[], &[0], EvolverKind::Exact).is_err());
        assert!(dd_study(&rho, 0.0, &[1e-3], &[], EvolverKind::Exact).is_err());
    }
}
