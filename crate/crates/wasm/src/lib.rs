//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Everything runs on the built-in 4x4 register state. Results come back as
//! flat `Float64Array`s; layouts are given per function.

use wasm_bindgen::prelude::*;

use rqpca::distill::distill;
use rqpca::engine::{run_sequence, EvolverKind};
use rqpca::model::{paper_density_matrix, quadrature_for_drive, DensityMatrix, DriveParams, NoiseModel};
use rqpca::scan::{linear_grid, scan_spectrum};

fn noise(sigma: f64, c: f64) -> NoiseModel {
    if sigma > 0.0 {
        NoiseModel::gaussian(sigma).with_averaging(quadrature_for_drive(sigma, c))
    } else {
        NoiseModel::noiseless()
    }
}

fn js_err(e: rqpca::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rho() -> DensityMatrix {
    paper_density_matrix()
}

/// Eigenvalues of the register state, ascending.
#[wasm_bindgen]
pub fn eigenvalues() -> Result<Vec<f64>, JsError> {
    Ok(rho().eig().map_err(js_err)?.eigenvalues)
}

/// Success probability on `points` frequencies in `[omega_min, omega_max]`.
/// Layout: `[omega_0, p_0, omega_1, p_1, ...]`.
#[wasm_bindgen]
pub fn spectrum(c: f64, sigma: f64, echo: u32, omega_min: f64, omega_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let p = DriveParams::new(omega_min, c).with_echo(echo);
    let grid = linear_grid(omega_min, omega_max, points);
    let spec = scan_spectrum(&rho(), &p, &grid, &noise(sigma, c), EvolverKind::Exact).map_err(js_err)?;
    Ok(spec.points.iter().flat_map(|pt| [pt.omega, pt.p_success]).collect())
}

/// One distillation round aimed at the largest eigenvalue.
/// Layout: `[efficiency, fidelity, success, pi0_1..pi0_n, pi1_1..pi1_n]`.
#[wasm_bindgen]
pub fn distill_populations(omega: f64, c: f64, sigma: f64, echo: u32) -> Result<Vec<f64>, JsError> {
    let p = DriveParams::new(omega, c).with_echo(echo);
    let r = distill(&rho(), omega, &p, &noise(sigma, c), EvolverKind::Exact).map_err(js_err)?;
    let mut out = vec![r.efficiency, r.fidelity, r.success_probability];
    for row in &r.populations {
        out.extend_from_slice(row);
    }
    Ok(out)
}

/// Resonant success probability for echo orders `0..=max_order` at the
/// largest eigenvalue.
#[wasm_bindgen]
pub fn echo_comparison(c: f64, sigma: f64, max_order: u32) -> Result<Vec<f64>, JsError> {
    let rho = rho();
    let lambda = *rho.eig().map_err(js_err)?.eigenvalues.last().expect("nonempty");
    let n = noise(sigma, c);
    (0..=max_order)
        .map(|m| {
            let p = DriveParams::new(lambda, c).with_echo(m);
            run_sequence(&rho, &p, &n, EvolverKind::Exact).map(|o| o.success_probability).map_err(js_err)
        })
        .collect()
}
