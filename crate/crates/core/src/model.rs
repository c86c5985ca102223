//! Problem-domain types: the analysed density matrix, drive settings, the
//! quasi-static noise model, the coupled probe-register Hamiltonian and the
//! closed-form Rabi transition probability.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmath::{self, tensor, ComplexMatrix, HermitianEig, C64};

/// Tolerance applied to density matrices built in code.
pub const STRICT_TOL: f64 = 1e-10;
/// Tolerance applied to density matrices read from files.
pub const FILE_TOL: f64 = 1e-8;

/// Hermitian, unit-trace, positive semidefinite register state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: ComplexMatrix,
}

impl DensityMatrix {
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        Self::validated(matrix, STRICT_TOL)
    }

    /// Validates at `tol`; trace drift within `tol` is renormalized away and
    /// rounding-level anti-Hermitian parts are dropped.
    pub fn validated(matrix: ComplexMatrix, tol: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotSquare { rows: matrix.rows(), cols: matrix.cols() });
        }
        if matrix.rows() == 0 {
            return Err(Error::InvalidDensityMatrix("empty matrix".into()));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite);
        }
        let dev = matrix.hermiticity_deviation();
        if dev > tol {
            return Err(Error::InvalidDensityMatrix(format!("not Hermitian (deviation {dev:e})")));
        }
        let trace = matrix.trace();
        if (trace.re - 1.0).abs() > tol || trace.im.abs() > tol {
            return Err(Error::InvalidDensityMatrix(format!("trace {} != 1", trace.re)));
        }
        let matrix = matrix.hermitian_part().scale_re(1.0 / trace.re);
        let min_eig = qmath::hermitian_eig(&matrix)?.eigenvalues[0];
        if min_eig < -tol {
            return Err(Error::InvalidDensityMatrix(format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(Self { matrix })
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self { matrix: ComplexMatrix::identity(n).scale_re(1.0 / n as f64) }
    }

    pub fn pure(psi: &[C64]) -> Result<Self> {
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > STRICT_TOL {
            return Err(Error::NotNormalized { norm });
        }
        Self::new(ComplexMatrix::outer(psi, psi))
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn eig(&self) -> Result<HermitianEig> {
        qmath::hermitian_eig(&self.matrix)
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DensityMatrixDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        doc.into_density()
    }

    pub fn to_doc(&self) -> DensityMatrixDoc {
        let n = self.dim();
        let re = (0..n).map(|r| (0..n).map(|c| self.matrix[(r, c)].re).collect()).collect();
        let im = (0..n).map(|r| (0..n).map(|c| self.matrix[(r, c)].im).collect()).collect();
        DensityMatrixDoc { format_version: Some(FORMAT_VERSION), dim: n, re, im }
    }
}

pub const FORMAT_VERSION: u32 = 1;

/// On-disk form of a density matrix: `{"dim": n, "re": [[..]], "im": [[..]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrixDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_version: Option<u32>,
    pub dim: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl DensityMatrixDoc {
    pub fn into_density(self) -> Result<DensityMatrix> {
        if self.re.len() != self.dim {
            return Err(Error::dims(format!("dim {}", self.dim), format!("{} rows", self.re.len())));
        }
        let m = ComplexMatrix::from_parts(&self.re, &self.im)?;
        if m.cols() != self.dim {
            return Err(Error::dims(format!("dim {}", self.dim), format!("{} columns", m.cols())));
        }
        DensityMatrix::validated(m, FILE_TOL)
    }
}

/// The 4x4 test matrix `0.15 Z1 + 0.09 X1 - 0.03 Z2 + I/4`.
pub fn paper_density_matrix() -> DensityMatrix {
    let i2 = ComplexMatrix::identity(2);
    let z = qmath::pauli_z();
    let x = qmath::pauli_x();
    let m = [
        tensor(&z, &i2).scale_re(0.15),
        tensor(&x, &i2).scale_re(0.09),
        tensor(&i2, &z).scale_re(-0.03),
        ComplexMatrix::identity(4).scale_re(0.25),
    ]
    .iter()
    .fold(ComplexMatrix::zeros(4, 4), |acc, t| &acc + t);
    DensityMatrix::new(m).expect("built-in density matrix is valid")
}

/// Drive settings for one sequence (all dimensionless).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    pub omega: f64,
    pub c: f64,
    pub tau: f64,
    #[serde(default)]
    pub echo_order: u32,
    #[serde(default = "one")]
    pub trotter_steps: usize,
}

fn one() -> usize {
    1
}

impl DriveParams {
    /// Drive at `omega` with strength `c` and the optimal time `pi / (2c)`.
    pub fn new(omega: f64, c: f64) -> Self {
        Self { omega, c, tau: optimal_tau(c), echo_order: 0, trotter_steps: 1 }
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_echo(mut self, m: u32) -> Self {
        self.echo_order = m;
        self
    }

    pub fn with_steps(mut self, n: usize) -> Self {
        self.trotter_steps = n;
        self
    }

    pub fn dt(&self) -> f64 {
        self.tau / self.trotter_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::param("c", format!("must be positive, got {}", self.c)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau", format!("must be positive, got {}", self.tau)));
        }
        if !self.omega.is_finite() {
            return Err(Error::param("omega", "must be finite"));
        }
        if self.trotter_steps == 0 {
            return Err(Error::param("trotter_steps", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn optimal_tau(c: f64) -> f64 {
    FRAC_PI_2 / c
}

/// How the Gaussian detuning distribution is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Averaging {
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
    GaussHermite {
        order: usize,
    },
    /// Gaussian-weighted uniform grid over +-7 sigma; suited to integrands
    /// much narrower than sigma where a Gauss-Hermite rule would alias.
    Grid {
        points: usize,
    },
}

impl Default for Averaging {
    fn default() -> Self {
        Averaging::GaussHermite { order: DEFAULT_GH_ORDER }
    }
}

pub const DEFAULT_GH_ORDER: usize = 31;

/// Deterministic averaging rule suited to drive strength `c`. Once the line
/// is narrower than the detuning spread the integrand varies on the scale of
/// `c`, so a grid with spacing `c / 2` replaces the Gauss-Hermite rule.
pub fn quadrature_for_drive(sigma_delta: f64, c: f64) -> Averaging {
    if sigma_delta <= c {
        return Averaging::default();
    }
    let points = (28.0 * sigma_delta / c).ceil() as usize + 1;
    Averaging::Grid { points: (points.clamp(201, 20_001)) | 1 }
}

/// Binomial readout sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotNoise {
    pub shots: u64,
    #[serde(default)]
    pub seed: u64,
}

/// Quasi-static Gaussian probe detuning plus optional readout shot noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_delta: f64,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<ShotNoise>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { sigma_delta: 0.0, averaging: Averaging::default(), shots: None }
    }

    pub fn gaussian(sigma_delta: f64) -> Self {
        Self { sigma_delta, averaging: Averaging::default(), shots: None }
    }

    pub fn with_averaging(mut self, averaging: Averaging) -> Self {
        self.averaging = averaging;
        self
    }

    pub fn with_shots(mut self, shots: u64, seed: u64) -> Self {
        self.shots = Some(ShotNoise { shots, seed });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_delta >= 0.0 && self.sigma_delta.is_finite()) {
            return Err(Error::param("sigma_delta", format!("must be >= 0, got {}", self.sigma_delta)));
        }
        match self.averaging {
            Averaging::MonteCarlo { samples: 0, .. } => return Err(Error::param("samples", "must be at least 1")),
            Averaging::GaussHermite { order: 0 } => return Err(Error::param("order", "must be at least 1")),
            Averaging::Grid { points: 0 } => return Err(Error::param("points", "must be at least 1")),
            _ => {}
        }
        if let Some(ShotNoise { shots: 0, .. }) = self.shots {
            return Err(Error::param("shots", "must be at least 1"));
        }
        Ok(())
    }
}

/// `((omega + delta_f)/2) Z (x) I + c X (x) I + |1><1| (x) rho`, probe major.
pub fn build_hamiltonian(p: &DriveParams, rho: &DensityMatrix, delta_f: f64) -> ComplexMatrix {
    let n = rho.dim();
    let probe = probe_hamiltonian(p.omega + delta_f, p.c);
    let mut h = tensor(&probe, &ComplexMatrix::identity(n));
    let m = rho.matrix();
    for r in 0..n {
        for c in 0..n {
            h[(n + r, n + c)] += m[(r, c)];
        }
    }
    h
}

/// Single-qubit drive term `(w/2) Z + c X`.
pub fn probe_hamiltonian(w: f64, c: f64) -> ComplexMatrix {
    ComplexMatrix::from_real(&[&[w / 2.0, c], &[c, -w / 2.0]])
}

/// Closed-form probability that a resonantly coupled component of
/// population `weight` flips the probe: `weight D^2 sin^2(c tau / D)` with
/// `D = 2c / sqrt((2c)^2 + (omega - lambda)^2)`.
pub fn analytic_transition_probability(lambda_i: f64, weight: f64, omega: f64, c: f64, tau: f64) -> f64 {
    let two_c = 2.0 * c;
    let detuning = omega - lambda_i;
    let d2 = two_c * two_c / (two_c * two_c + detuning * detuning);
    let d = d2.sqrt();
    weight * d2 * (c * tau / d).sin().powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmath::{hermitian_eig, unitary_of, ONE, ZERO};

    #[test]
    fn paper_matrix_layout() {
        let rho = paper_density_matrix();
        let m = rho.matrix();
        assert!((m.trace().re - 1.0).abs() < 1e-15);
        let diag: Vec<f64> = (0..4).map(|i| m[(i, i)].re).collect();
        for (got, want) in diag.iter().zip([0.37, 0.43, 0.07, 0.13]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((m[(0, 2)].re - 0.09).abs() < 1e-15 && (m[(2, 0)].re - 0.09).abs() < 1e-15);
        assert!((m[(1, 3)].re - 0.09).abs() < 1e-15 && (m[(3, 1)].re - 0.09).abs() < 1e-15);
        for (r, c) in [(0, 1), (0, 3), (1, 2), (2, 3)] {
            assert_eq!(m[(r, c)], ZERO);
        }
        let e = rho.eig().unwrap();
        let want = [0.045071, 0.105071, 0.394929, 0.454929];
        for (got, w) in e.eigenvalues.iter().zip(want) {
            assert!((got - w).abs() < 1e-6);
        }
    }

    #[test]
    fn density_validation() {
        assert!(DensityMatrix::new(ComplexMatrix::diag(&[0.5, 0.6])).is_err());
        assert!(DensityMatrix::new(ComplexMatrix::diag(&[1.2, -0.2])).is_err());
        assert!(DensityMatrix::new(ComplexMatrix::from_real(&[&[0.5, 0.1], &[0.0, 0.5]])).is_err());
        assert!(DensityMatrix::new(ComplexMatrix::diag(&[0.25, 0.75])).is_ok());
    }

    #[test]
    fn json_round_trip_and_renormalization() {
        let text = r#"{"dim": 2, "re": [[0.500000001, 0.1], [0.1, 0.5]], "im": [[0, 0.05], [-0.05, 0]]}"#;
        let rho = DensityMatrix::from_json(text).unwrap();
        assert!((rho.matrix().trace().re - 1.0).abs() < 1e-15);
        let back = serde_json::to_string(&rho.to_doc()).unwrap();
        let again = DensityMatrix::from_json(&back).unwrap();
        assert!((again.matrix() - rho.matrix()).frobenius_norm() < 1e-15);

        let bad_trace = r#"{"dim": 2, "re": [[0.6, 0], [0, 0.5]], "im": [[0, 0], [0, 0]]}"#;
        assert!(DensityMatrix::from_json(bad_trace).is_err());
        let bad_dim = r#"{"dim": 3, "re": [[0.5, 0], [0, 0.5]], "im": [[0, 0], [0, 0]]}"#;
        assert!(DensityMatrix::from_json(bad_dim).is_err());
    }

    #[test]
    fn hamiltonian_degenerate_drive_is_block_diagonal() {
        let rho = paper_density_matrix();
        let h = build_hamiltonian(&DriveParams::new(0.0, 1.0).with_tau(1.0), &rho, 0.0);
        // c = 1 here; subtract the drive and compare the rest.
        let drive = tensor(&qmath::pauli_x(), &ComplexMatrix::identity(4));
        let rest = &h - &drive;
        let mut want = ComplexMatrix::zeros(8, 8);
        for r in 0..4 {
            for c in 0..4 {
                want[(4 + r, 4 + c)] = rho.matrix()[(r, c)];
            }
        }
        assert!((&rest - &want).frobenius_norm() < 1e-15);

        let zero_drive = DriveParams { omega: 0.0, c: 0.0, tau: 1.0, echo_order: 0, trotter_steps: 1 };
        assert!((&build_hamiltonian(&zero_drive, &rho, 0.0) - &want).frobenius_norm() < 1e-15);
    }

    #[test]
    fn hamiltonian_two_ladder_spectrum() {
        let lambdas = [0.1, 0.2, 0.3, 0.4];
        let rho = DensityMatrix::new(ComplexMatrix::diag(&lambdas)).unwrap();
        let omega = 0.27;
        let p = DriveParams { omega, c: 0.0, tau: 1.0, echo_order: 0, trotter_steps: 1 };
        let e = hermitian_eig(&build_hamiltonian(&p, &rho, 0.0)).unwrap();
        let mut want: Vec<f64> = vec![omega / 2.0; 4];
        want.extend(lambdas.iter().map(|l| l - omega / 2.0));
        want.sort_by(f64::total_cmp);
        for (g, w) in e.eigenvalues.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn hamiltonian_avoided_crossing_gap() {
        let rho = paper_density_matrix();
        let lambda4 = rho.eig().unwrap().eigenvalues[3];
        let (omega, c) = (0.4549, 6e-4);
        let e = hermitian_eig(&build_hamiltonian(&DriveParams::new(omega, c), &rho, 0.0)).unwrap();
        let want = ((omega - lambda4).powi(2) + (2.0 * c).powi(2)).sqrt();
        // The coupled |0,l4>,|1,l4> pair sits near energy l4/2 on both sides.
        let mut gaps: Vec<f64> = Vec::new();
        for i in 0..8 {
            for j in (i + 1)..8 {
                gaps.push((e.eigenvalues[j] - e.eigenvalues[i]).abs());
            }
        }
        let best = gaps.iter().map(|g| (g - want).abs()).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-12, "no eigenvalue pair with gap {want}");
        assert!((want / (2.0 * c) - 1.0).abs() < 2e-3);
    }

    #[test]
    fn hamiltonian_is_hermitian_and_affine() {
        let rho = paper_density_matrix();
        let p = DriveParams::new(0.31, 3e-3);
        let h = build_hamiltonian(&p, &rho, 2e-4);
        assert!(h.hermiticity_deviation() <= 1e-15);
        let shifted = build_hamiltonian(&p.with_omega(p.omega + 0.05), &rho, 2e-4);
        let diff = &shifted - &h;
        let want = tensor(&qmath::pauli_z(), &ComplexMatrix::identity(4)).scale_re(0.025);
        assert!((&diff - &want).max_abs() < 1e-15);
    }

    #[test]
    fn analytic_probability_examples() {
        let c = 6e-4;
        let tau = optimal_tau(c);
        assert!((analytic_transition_probability(0.3, 0.3, 0.3, c, tau) - 0.3).abs() < 1e-15);
        assert_eq!(analytic_transition_probability(0.3, 0.3, 0.31, c, 0.0), 0.0);
        let w = 0.454929;
        let got = analytic_transition_probability(w, w, w + 2.0 * c, c, tau);
        let want = w * 0.5 * (std::f64::consts::PI / 2f64.sqrt()).sin().powi(2);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1440).abs() < 1e-4);
    }

    #[test]
    fn analytic_probability_matches_two_level_evolution() {
        // Independent check: evolve |0> under (D/2) Z + c X on a qubit whose
        // |1> level is shifted by lambda.
        for (lambda, omega, c, tau) in [(0.45, 0.4512, 6e-4, 2400.0), (0.1, 0.13, 0.02, 30.0), (0.2, 0.2, 0.01, 77.0)] {
            let h = &probe_hamiltonian(omega, c) + &ComplexMatrix::diag(&[0.0, lambda]);
            let u = unitary_of(&h, tau).unwrap();
            let flip = u[(1, 0)].norm_sqr();
            let want = analytic_transition_probability(lambda, 1.0, omega, c, tau);
            assert!((flip - want).abs() < 1e-10, "{flip} vs {want}");
        }
        let _ = ONE;
    }

    #[test]
    fn analytic_probability_is_symmetric_with_peak_at_resonance() {
        let (lambda, c) = (0.4, 1e-3);
        let tau = optimal_tau(c);
        let peak = analytic_transition_probability(lambda, 1.0, lambda, c, tau);
        for k in 1..=1000 {
            let d = k as f64 * 2e-5;
            let up = analytic_transition_probability(lambda, 1.0, lambda + d, c, tau);
            let down = analytic_transition_probability(lambda, 1.0, lambda - d, c, tau);
            assert!((up - down).abs() < 1e-14);
            assert!(up <= peak);
        }
    }

    #[test]
    fn drive_and_noise_validation() {
        assert!(DriveParams::new(0.2, 0.0).validate().is_err());
        assert!(DriveParams::new(0.2, 1e-3).with_steps(0).validate().is_err());
        assert!(DriveParams::new(0.2, 1e-3).with_tau(-1.0).validate().is_err());
        assert!(DriveParams::new(0.2, 1e-3).validate().is_ok());
        assert!(NoiseModel::gaussian(-1.0).validate().is_err());
        assert!(NoiseModel::noiseless().with_shots(0, 1).validate().is_err());
        assert!(NoiseModel::gaussian(1e-4).with_averaging(Averaging::MonteCarlo { samples: 0, seed: 1 }).validate().is_err());
    }

    #[test]
    fn noise_model_json_shape() {
        let n = NoiseModel::gaussian(2e-4).with_averaging(Averaging::MonteCarlo { samples: 10, seed: 7 });
        let text = serde_json::to_string(&n).unwrap();
        assert!(text.contains("\"mode\":\"monte_carlo\""));
        let back: NoiseModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, n);
    }
}
