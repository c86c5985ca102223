//! Principal-component distillation by post-selecting the probe on `|1>`.

use serde::{Deserialize, Serialize};

use crate::engine::{initial_state, run_sequence_from, success_probability, EvolverKind, SequenceOptions, SystemState};
use crate::error::{Error, Result};
use crate::model::{DensityMatrix, DensityMatrixDoc, DriveParams, NoiseModel};
use crate::qmath::HermitianEig;
use crate::scan::fmt_sig;

/// Post-selection is refused below this branch probability.
pub const MIN_BRANCH_PROBABILITY: f64 = 1e-12;

/// Populations `<k, lambda_i| s |k, lambda_i>`: row `k` is the probe level,
/// column `i` the eigenvector of `rho` (ascending eigenvalues).
pub fn eigenbasis_populations(s: &SystemState, eig: &HermitianEig) -> Result<Vec<Vec<f64>>> {
    if eig.dim() != s.register_dim() {
        return Err(Error::dims(format!("register dim {}", s.register_dim()), format!("eigenbasis dim {}", eig.dim())));
    }
    Ok((0..2)
        .map(|k| {
            let block = s.block(k, k);
            (0..eig.dim()).map(|i| block.expectation(&eig.vector(i)).re).collect()
        })
        .collect())
}

/// Register state conditioned on probe level `k`, with its probability.
pub fn post_select_branch(s: &SystemState, k: usize) -> Result<(DensityMatrix, f64)> {
    if k > 1 {
        return Err(Error::param("branch", "probe level must be 0 or 1"));
    }
    let block = s.block(k, k);
    let probability = block.trace().re;
    if !(probability >= MIN_BRANCH_PROBABILITY) {
        return Err(Error::NoTransfer { probability });
    }
    let state = DensityMatrix::validated(block.scale_re(1.0 / probability), 1e-8)?;
    Ok((state, probability))
}

/// Register state conditioned on the probe reading `|1>`.
pub fn post_select(s: &SystemState) -> Result<(DensityMatrix, f64)> {
    post_select_branch(s, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub omega_used: f64,
    /// Index of the target eigenvector in ascending eigenvalue order.
    pub target_index: usize,
    pub target_eigenvalue: f64,
    /// Fraction of the target's population moved into the probe `|1>` block.
    pub efficiency: f64,
    /// `<lambda_n| post_state |lambda_n>`.
    pub fidelity: f64,
    /// Square root of `fidelity`, the amplitude-overlap convention.
    pub fidelity_sqrt: f64,
    pub success_probability: f64,
    pub populations: Vec<Vec<f64>>,
    pub post_state: Option<DensityMatrixDoc>,
    pub no_transfer: bool,
    pub drive: DriveParams,
    pub noise: NoiseModel,
    pub evolver: EvolverKind,
}

impl DistillReport {
    /// Fig.-4-style table: rows `Pi0`, `Pi1`; columns `lambda_1..lambda_n`.
    pub fn populations_csv(&self) -> String {
        let n = self.populations.first().map_or(0, Vec::len);
        let mut out = String::from("subspace");
        for i in 1..=n {
            out.push_str(&format!(",lambda_{i}"));
        }
        out.push('\n');
        for (k, row) in self.populations.iter().enumerate() {
            out.push_str(&format!("Pi{k}"));
            for v in row {
                out.push(',');
                out.push_str(&fmt_sig(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Distills the largest principal component of `rho` with the probe tuned
/// to `omega`.
pub fn distill(rho: &DensityMatrix, omega: f64, p: &DriveParams, noise: &NoiseModel, ev: EvolverKind) -> Result<DistillReport> {
    let target = rho.dim() - 1;
    distill_round(rho, rho, omega, p, noise, ev, target)
}

/// One distillation round on an arbitrary register state. The Hamiltonian
/// (and the DME copies) use `rho`; efficiency is measured against the
/// eigenvalue of `rho`, so repeated rounds on depleted registers compare on
/// the same scale.
pub fn distill_round(
    register: &DensityMatrix,
    rho: &DensityMatrix,
    omega: f64,
    p: &DriveParams,
    noise: &NoiseModel,
    ev: EvolverKind,
    target: usize,
) -> Result<DistillReport> {
    let eig = rho.eig()?;
    if target >= eig.dim() {
        return Err(Error::param("target", format!("index {target} out of range for dimension {}", eig.dim())));
    }
    let final_state = evolve(register, rho, omega, p, noise, ev)?;
    let populations = eigenbasis_populations(&final_state, &eig)?;
    let success = success_probability(&final_state);
    let lambda = eig.eigenvalues[target];
    let transferred = populations[1][target];
    let efficiency = if lambda > 0.0 { (transferred / lambda).clamp(0.0, 1.0) } else { 0.0 };
    let drive = p.with_omega(omega);
    let (post_state, fidelity, no_transfer) = match post_select(&final_state) {
        Ok((post, _)) => {
            let f = post.matrix().expectation(&eig.vector(target)).re.clamp(0.0, 1.0);
            (Some(post.to_doc()), f, false)
        }
        Err(Error::NoTransfer { .. }) => (None, 0.0, true),
        Err(e) => return Err(e),
    };
    Ok(DistillReport {
        omega_used: omega,
        target_index: target,
        target_eigenvalue: lambda,
        efficiency,
        fidelity,
        fidelity_sqrt: fidelity.sqrt(),
        success_probability: success,
        populations,
        post_state,
        no_transfer,
        drive,
        noise: *noise,
        evolver: ev,
    })
}

fn evolve(
    register: &DensityMatrix,
    rho: &DensityMatrix,
    omega: f64,
    p: &DriveParams,
    noise: &NoiseModel,
    ev: EvolverKind,
) -> Result<SystemState> {
    let start = initial_state(register);
    let out = run_sequence_from(&start, rho, &p.with_omega(omega), noise, ev, &SequenceOptions::default())?;
    Ok(out.final_state)
}

/// Register left behind when the probe reads `|0>`: the state the algorithm
/// restarts from on a failed round.
pub fn depleted_register(
    register: &DensityMatrix,
    rho: &DensityMatrix,
    omega: f64,
    p: &DriveParams,
    noise: &NoiseModel,
    ev: EvolverKind,
) -> Result<DensityMatrix> {
    let final_state = evolve(register, rho, omega, p, noise, ev)?;
    Ok(post_select_branch(&final_state, 0)?.0)
}

/// `|1><1| (x) sigma`, handy for tests and demos.
pub fn excited_product(sigma: &DensityMatrix) -> SystemState {
    SystemState::product(1, sigma.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{paper_density_matrix, Averaging};
    use crate::qmath::{tensor, ComplexMatrix};
    use proptest::prelude::*;

    fn l4() -> f64 {
        paper_density_matrix().eig().unwrap().eigenvalues[3]
    }

    #[test]
    fn initial_state_populations() {
        let rho = paper_density_matrix();
        let eig = rho.eig().unwrap();
        let table = eigenbasis_populations(&initial_state(&rho), &eig).unwrap();
        for (got, want) in table[0].iter().zip(&eig.eigenvalues) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(table[1].iter().all(|v| v.abs() < 1e-15));
        assert!((table[0][3] - 0.4549).abs() < 1e-4);
    }

    #[test]
    fn excited_eigenvector_populations() {
        let rho = paper_density_matrix();
        let eig = rho.eig().unwrap();
        let sigma = DensityMatrix::new(eig.projector(3)).unwrap();
        let table = eigenbasis_populations(&excited_product(&sigma), &eig).unwrap();
        let want = [0.0, 0.0, 0.0, 1.0];
        for (g, w) in table[1].iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(eigenbasis_populations(&excited_product(&DensityMatrix::maximally_mixed(2)), &eig).is_err());
    }

    #[test]
    fn post_select_cases() {
        let rho = paper_density_matrix();
        let (post, prob) = post_select(&excited_product(&rho)).unwrap();
        assert_eq!(prob, 1.0);
        assert!((post.matrix() - rho.matrix()).max_abs() < 1e-15);

        assert!(matches!(post_select(&initial_state(&rho)), Err(Error::NoTransfer { .. })));

        let a = DensityMatrix::maximally_mixed(4);
        let half = ComplexMatrix::diag(&[0.5, 0.0]);
        let other = ComplexMatrix::diag(&[0.0, 0.5]);
        let m = &tensor(&half, a.matrix()) + &tensor(&other, rho.matrix());
        let s = SystemState::new(m, 4).unwrap();
        let (post, prob) = post_select(&s).unwrap();
        assert!((prob - 0.5).abs() < 1e-15);
        assert!((post.matrix() - rho.matrix()).max_abs() < 1e-15);
    }

    #[test]
    fn noiseless_distillation_is_clean() {
        let rho = paper_density_matrix();
        let r = distill(&rho, 0.454929, &DriveParams::new(0.0, 6e-4), &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        assert!(r.fidelity >= 0.99, "fidelity {}", r.fidelity);
        assert!(r.efficiency >= 0.98, "efficiency {}", r.efficiency);
        assert!((r.fidelity * r.success_probability - r.populations[1][3]).abs() < 1e-12);
        assert!(!r.no_transfer);
        assert_eq!(r.target_index, 3);
    }

    #[test]
    fn population_rows_sum_to_branch_probabilities() {
        let rho = paper_density_matrix();
        let noise = NoiseModel::gaussian(1e-3).with_averaging(Averaging::GaussHermite { order: 21 });
        let r = distill(&rho, 0.45, &DriveParams::new(0.0, 6e-4).with_echo(1), &noise, EvolverKind::Exact).unwrap();
        let p1: f64 = r.populations[1].iter().sum();
        let p0: f64 = r.populations[0].iter().sum();
        assert!((p1 - r.success_probability).abs() < 1e-9);
        assert!((p0 + p1 - 1.0).abs() < 1e-9);
        assert!((r.fidelity * r.success_probability - r.populations[1][3]).abs() < 1e-12);
    }

    #[test]
    fn far_detuned_probe_barely_transfers() {
        let rho = paper_density_matrix();
        let c = 6e-4;
        let r = distill(&rho, 0.25, &DriveParams::new(0.0, c), &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        assert!(r.success_probability <= 2e-4);
    }

    #[test]
    fn fully_detuned_probe_reports_no_transfer() {
        let rho = DensityMatrix::new(ComplexMatrix::diag(&[1.0, 0.0])).unwrap();
        // The drive is zero to within rounding, so nothing transfers.
        let p = DriveParams::new(0.0, 1e-300).with_tau(1.0);
        let r = distill(&rho, 0.5, &p, &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        assert!(r.no_transfer);
        assert!(r.post_state.is_none());
    }

    #[test]
    fn fidelity_improves_as_drive_weakens() {
        let rho = paper_density_matrix();
        let fids: Vec<f64> = [2e-3, 1e-3, 5e-4, 2.5e-4]
            .iter()
            .map(|&c| distill(&rho, l4(), &DriveParams::new(0.0, c), &NoiseModel::noiseless(), EvolverKind::Exact).unwrap().fidelity)
            .collect();
        for w in fids.windows(2) {
            assert!(w[1] > w[0], "{fids:?}");
        }
    }

    #[test]
    fn failed_round_depletes_the_principal_component() {
        let rho = paper_density_matrix();
        let p = DriveParams::new(0.0, 6e-4);
        let left = depleted_register(&rho, &rho, l4(), &p, &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        let eig = rho.eig().unwrap();
        let pop = left.matrix().expectation(&eig.vector(3)).re;
        assert!(pop < eig.eigenvalues[3]);
        // A second round still distills, with efficiency measured against rho.
        let r = distill_round(&left, &rho, l4(), &p, &NoiseModel::noiseless(), EvolverKind::Exact, 3).unwrap();
        assert!(r.efficiency < 0.05);
    }

    #[test]
    fn report_json_and_csv() {
        let rho = paper_density_matrix();
        let r = distill(&rho, l4(), &DriveParams::new(0.0, 6e-4), &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: DistillReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        let csv = r.populations_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "subspace,lambda_1,lambda_2,lambda_3,lambda_4");
        assert!(lines[1].starts_with("Pi0,") && lines[2].starts_with("Pi1,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn populations_are_a_distribution(omega in 0.0f64..1.0, c in 1e-3f64..0.05, m in 0u32..3) {
            let rho = paper_density_matrix();
            let r = distill(&rho, omega, &DriveParams::new(0.0, c).with_echo(m), &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
            let total: f64 = r.populations.iter().flatten().sum();
            prop_assert!(r.populations.iter().flatten().all(|&v| v >= -1e-12));
            prop_assert!((total - 1.0).abs() < 1e-9);
            if !r.no_transfer {
                prop_assert!((r.fidelity * r.success_probability - r.populations[1][3]).abs() < 1e-12);
            }
        }
    }
}
