//! Time evolution of the probe + register system.
//!
//! Three evolvers are available: the exact propagator, the first-order
//! Trotter circuit (probe drive, then controlled `exp(-i rho dt)`), and a
//! density-matrix-exponentiation (DME) circuit that realises the controlled
//! exponential with fresh copies of `rho` and a partial swap.
//!
//! `run_sequence` wraps an evolver in the native (`M = 0`) or echo
//! (`(tau/2M - pi - tau/2M - pi)^M`) pulse sequence and averages over a
//! quasi-static Gaussian probe detuning.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_hamiltonian, Averaging, DensityMatrix, DriveParams, NoiseModel};
use crate::qmath::{self, mul_adjoint, partial_trace, tensor, ComplexMatrix, HermitianEig, C64, I, ONE, ZERO};

/// Validity tolerance for evolved joint states.
pub const STATE_TOL: f64 = 1e-9;

/// Joint probe (x) register density matrix, probe index major.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    matrix: ComplexMatrix,
    register_dim: usize,
}

impl SystemState {
    pub fn new(matrix: ComplexMatrix, register_dim: usize) -> Result<Self> {
        let s = Self::from_matrix_unchecked(matrix, register_dim)?;
        s.validate()?;
        Ok(s)
    }

    pub(crate) fn from_matrix_unchecked(matrix: ComplexMatrix, register_dim: usize) -> Result<Self> {
        if !matrix.is_square() || matrix.rows() != 2 * register_dim {
            return Err(Error::dims(format!("{0}x{0}", 2 * register_dim), format!("{}x{}", matrix.rows(), matrix.cols())));
        }
        Ok(Self { matrix, register_dim })
    }

    /// Checks Hermiticity, unit trace and positivity at `STATE_TOL`.
    pub fn validate(&self) -> Result<()> {
        let dev = self.matrix.hermiticity_deviation();
        if dev > STATE_TOL {
            return Err(Error::InvalidDensityMatrix(format!("joint state not Hermitian ({dev:e})")));
        }
        let tr = self.matrix.trace();
        if (tr.re - 1.0).abs() > STATE_TOL || tr.im.abs() > STATE_TOL {
            return Err(Error::InvalidDensityMatrix(format!("joint state trace {}", tr.re)));
        }
        let min = qmath::hermitian_eig(&self.matrix.hermitian_part())?.eigenvalues[0];
        if min < -STATE_TOL {
            return Err(Error::InvalidDensityMatrix(format!("joint state eigenvalue {min:e}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn register_dim(&self) -> usize {
        self.register_dim
    }

    /// Register block `<k| s |l>` for probe levels `k`, `l`.
    pub fn block(&self, k: usize, l: usize) -> ComplexMatrix {
        let n = self.register_dim;
        self.matrix.submatrix(k * n, l * n, n, n)
    }

    pub fn probe_reduced(&self) -> ComplexMatrix {
        partial_trace(&self.matrix, &[2, self.register_dim], &[0]).expect("shape checked at construction")
    }

    pub fn register_reduced(&self) -> ComplexMatrix {
        partial_trace(&self.matrix, &[2, self.register_dim], &[1]).expect("shape checked at construction")
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    /// Probe `|k><k|` (x) `register`.
    pub fn product(k: usize, register: &ComplexMatrix) -> Self {
        let mut probe = ComplexMatrix::zeros(2, 2);
        probe[(k, k)] = ONE;
        let n = register.rows();
        Self { matrix: tensor(&probe, register), register_dim: n }
    }
}

/// `|0><0| (x) rho`.
pub fn initial_state(rho: &DensityMatrix) -> SystemState {
    SystemState::product(0, rho.matrix())
}

/// `Tr[(|1><1| (x) I) s]`.
pub fn success_probability(s: &SystemState) -> f64 {
    let n = s.register_dim;
    (0..n).map(|i| s.matrix[(n + i, n + i)].re).sum::<f64>().clamp(0.0, 1.0)
}

/// `U s U^dagger` with `U = exp(-i h t)`.
pub fn evolve_exact(s: &SystemState, h: &ComplexMatrix, t: f64) -> Result<SystemState> {
    if h.rows() != s.dim() || !h.is_square() {
        return Err(Error::dims(s.dim(), h.rows()));
    }
    if t == 0.0 {
        return Ok(s.clone());
    }
    let u = qmath::unitary_of(h, t)?;
    Ok(conjugated(s, &u))
}

fn conjugated(s: &SystemState, u: &ComplexMatrix) -> SystemState {
    SystemState { matrix: s.matrix.conjugate_by(u), register_dim: s.register_dim }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvolverKind {
    Exact,
    Trotter(usize),
    Dme(usize),
}

impl EvolverKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            EvolverKind::Trotter(0) | EvolverKind::Dme(0) => Err(Error::param("evolver", "step count must be at least 1")),
            _ => Ok(()),
        }
    }

    fn steps(&self) -> usize {
        match *self {
            EvolverKind::Exact => 1,
            EvolverKind::Trotter(n) | EvolverKind::Dme(n) => n,
        }
    }
}

impl fmt::Display for EvolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvolverKind::Exact => write!(f, "exact"),
            EvolverKind::Trotter(n) => write!(f, "trotter:{n}"),
            EvolverKind::Dme(n) => write!(f, "dme:{n}"),
        }
    }
}

impl FromStr for EvolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("evolver `{s}`: expected exact | trotter:N | dme:N"));
        let kind = match s.split_once(':') {
            None if s == "exact" => EvolverKind::Exact,
            Some(("trotter", n)) => EvolverKind::Trotter(n.parse().map_err(|_| bad())?),
            Some(("dme", n)) => EvolverKind::Dme(n.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl Serialize for EvolverKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EvolverKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrotterOrder {
    /// Drive factor, then controlled-rho factor.
    #[default]
    First,
    /// Half drive, controlled-rho, half drive.
    Strang,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseAxis {
    #[default]
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SequenceOptions {
    pub pulse_axis: PulseAxis,
    pub trotter_order: TrotterOrder,
    /// Keep per-sample success probabilities even for deterministic rules.
    pub keep_per_sample: bool,
}

/// `exp(-i ((w/2) Z + c X) t)` on the probe.
pub fn drive_unitary(w: f64, c: f64, t: f64) -> ComplexMatrix {
    let [a, b, cc, d] = rotation_2x2(w, c, t);
    ComplexMatrix::from_vec(2, 2, vec![a, b, cc, d]).expect("2x2")
}

/// Closed form of `exp(-i ((w/2) Z + c X) t)` as `[u00, u01, u10, u11]`.
fn rotation_2x2(w: f64, c: f64, t: f64) -> [C64; 4] {
    let half = w / 2.0;
    let rate = (half * half + c * c).sqrt();
    let (cos, sinc_t) =
        if rate * t.abs() < 1e-8 { (1.0 - 0.5 * (rate * t).powi(2), t) } else { ((rate * t).cos(), (rate * t).sin() / rate) };
    let off = C64::new(0.0, -c * sinc_t);
    [C64::new(cos, -half * sinc_t), off, off, C64::new(cos, half * sinc_t)]
}

/// Ideal instantaneous pi pulse on the probe, `exp(-i pi sigma/2) = -i sigma`.
pub fn pi_pulse(axis: PulseAxis) -> ComplexMatrix {
    match axis {
        PulseAxis::X => qmath::pauli_x().scale(-I),
        PulseAxis::Y => qmath::pauli_y().scale(-I),
    }
}

/// `|0><0| (x) I + |1><1| (x) exp(-i rho dt)`.
pub fn controlled_rho_unitary(rho_eig: &HermitianEig, dt: f64) -> ComplexMatrix {
    let n = rho_eig.dim();
    let inner = rho_eig.propagator(dt);
    let mut u = ComplexMatrix::identity(2 * n);
    for r in 0..n {
        for c in 0..n {
            u[(n + r, n + c)] = inner[(r, c)];
        }
    }
    u
}

fn probe_op_on_joint(op: &ComplexMatrix, n: usize) -> ComplexMatrix {
    tensor(op, &ComplexMatrix::identity(n))
}

/// One Trotter step propagator for the given drive and detuning.
fn trotter_step(w: f64, c: f64, dt: f64, rho_eig: &HermitianEig, order: TrotterOrder) -> ComplexMatrix {
    let n = rho_eig.dim();
    let controlled = controlled_rho_unitary(rho_eig, dt);
    match order {
        TrotterOrder::First => &controlled * &probe_op_on_joint(&drive_unitary(w, c, dt), n),
        TrotterOrder::Strang => {
            let half = probe_op_on_joint(&drive_unitary(w, c, dt / 2.0), n);
            &(&half * &controlled) * &half
        }
    }
}

/// Full Trotter propagator for `p.trotter_steps` steps over `p.tau`.
pub fn trotter_propagator(p: &DriveParams, rho: &DensityMatrix, delta_f: f64, order: TrotterOrder) -> Result<ComplexMatrix> {
    p.validate()?;
    let eig = rho.eig()?;
    let step = trotter_step(p.omega + delta_f, p.c, p.dt(), &eig, order);
    Ok(matrix_power(&step, p.trotter_steps))
}

/// Exact propagator `exp(-i H tau)` for comparison with the split forms.
pub fn exact_propagator(p: &DriveParams, rho: &DensityMatrix, delta_f: f64) -> Result<ComplexMatrix> {
    qmath::unitary_of(&build_hamiltonian(p, rho, delta_f), p.tau)
}

fn matrix_power(m: &ComplexMatrix, mut k: usize) -> ComplexMatrix {
    let mut result = ComplexMatrix::identity(m.rows());
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

/// First-order Trotter evolution of `s` over `p.tau` in `p.trotter_steps` steps.
pub fn evolve_trotter(s: &SystemState, p: &DriveParams, rho: &DensityMatrix, delta_f: f64) -> Result<SystemState> {
    check_register(s, rho)?;
    let u = trotter_propagator(p, rho, delta_f, TrotterOrder::First)?;
    Ok(conjugated(s, &u))
}

fn check_register(s: &SystemState, rho: &DensityMatrix) -> Result<()> {
    if s.register_dim != rho.dim() {
        return Err(Error::dims(format!("register dim {}", s.register_dim), format!("rho dim {}", rho.dim())));
    }
    Ok(())
}

/// Generator-free form of `exp(-i (|1><1| (x) SWAP) dt)` on probe (x) register (x) copy.
fn controlled_partial_swap(n: usize, dt: f64) -> ComplexMatrix {
    let dim = 2 * n * n;
    let (cos, sin) = (dt.cos(), dt.sin());
    let mut u = ComplexMatrix::zeros(dim, dim);
    // |0> branch: identity.
    for i in 0..n * n {
        u[(i, i)] = ONE;
    }
    // |1> branch: cos I - i sin SWAP.
    let base = n * n;
    for a in 0..n {
        for b in 0..n {
            let row = base + a * n + b;
            u[(row, row)] += C64::new(cos, 0.0);
            let swapped = base + b * n + a;
            u[(row, swapped)] += C64::new(0.0, -sin);
        }
    }
    u
}

/// Controlled density-matrix-exponentiation step.
///
/// Attaches a fresh copy of `rho_copy`, applies the probe-controlled partial
/// swap for `dt` and discards the copy. Approximates conjugation by the
/// controlled `exp(-i rho dt)` up to `O(dt^2)`.
pub fn dme_controlled_step(s: &SystemState, rho_copy: &DensityMatrix, dt: f64) -> Result<SystemState> {
    check_register(s, rho_copy)?;
    if dt == 0.0 {
        return Ok(s.clone());
    }
    let n = s.register_dim;
    let joint = tensor(&s.matrix, rho_copy.matrix());
    let u = controlled_partial_swap(n, dt);
    let evolved = joint.conjugate_by(&u);
    let reduced = partial_trace(&evolved, &[2, n, n], &[0, 1])?;
    SystemState::from_matrix_unchecked(reduced, n)
}

/// `p.trotter_steps` steps of drive followed by a DME controlled step.
pub fn evolve_dme(s: &SystemState, p: &DriveParams, rho: &DensityMatrix, delta_f: f64) -> Result<SystemState> {
    check_register(s, rho)?;
    p.validate()?;
    let dt = p.dt();
    let drive = probe_op_on_joint(&drive_unitary(p.omega + delta_f, p.c, dt), s.register_dim);
    let mut state = s.clone();
    for _ in 0..p.trotter_steps {
        state = conjugated(&state, &drive);
        state = dme_controlled_step(&state, rho, dt)?;
    }
    Ok(state)
}

/// Result of a noise-averaged pulse sequence.
#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub final_state: SystemState,
    pub success_probability: f64,
    pub per_sample_success: Option<Vec<f64>>,
    /// Number of noise samples (circuit repetitions) folded into the average.
    pub samples: usize,
    /// Monte-Carlo standard error of `success_probability`; zero for
    /// deterministic quadrature.
    pub std_error: f64,
}

/// Detuning samples `(delta_f, weight)` with weights summing to one.
pub fn noise_samples(noise: &NoiseModel) -> Result<Vec<(f64, f64)>> {
    noise.validate()?;
    let sigma = noise.sigma_delta;
    if sigma == 0.0 {
        return Ok(vec![(0.0, 1.0)]);
    }
    Ok(match noise.averaging {
        Averaging::MonteCarlo { samples, seed } => {
            let w = 1.0 / samples as f64;
            (0..samples).map(|k| (sigma * standard_normal(seed, k as u64), w)).collect()
        }
        Averaging::GaussHermite { order } => {
            let (nodes, weights) = gauss_hermite(order)?;
            nodes.into_iter().zip(weights).map(|(x, w)| (sigma * x, w)).collect()
        }
        Averaging::Grid { points } => gaussian_grid(points).into_iter().map(|(x, w)| (sigma * x, w)).collect(),
    })
}

/// Stable per-index seed derivation (splitmix64 finaliser).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index))
}

fn standard_normal(master: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, index));
    StandardNormal.sample(&mut rng)
}

/// Nodes and normalized weights of the Gauss-Hermite rule for the standard
/// normal density (Golub-Welsch on the Hermite Jacobi matrix).
pub fn gauss_hermite(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::param("order", "must be at least 1"));
    }
    let mut jacobi = ComplexMatrix::zeros(order, order);
    for k in 1..order {
        let off = C64::new((k as f64).sqrt(), 0.0);
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = qmath::hermitian_eig(&jacobi)?;
    let weights: Vec<f64> = (0..order).map(|i| eig.eigenvectors[(0, i)].norm_sqr()).collect();
    let total: f64 = weights.iter().sum();
    Ok((eig.eigenvalues, weights.into_iter().map(|w| w / total).collect()))
}

fn gaussian_grid(points: usize) -> Vec<(f64, f64)> {
    if points == 1 {
        return vec![(0.0, 1.0)];
    }
    const SPAN: f64 = 7.0;
    let step = 2.0 * SPAN / (points - 1) as f64;
    let raw: Vec<(f64, f64)> = (0..points)
        .map(|k| {
            let x = -SPAN + step * k as f64;
            (x, (-0.5 * x * x).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(x, w)| (x, w / total)).collect()
}

/// Segments of a sequence: `(duration, pulse_after)`.
fn sequence_segments(tau: f64, echo_order: u32) -> Vec<(f64, bool)> {
    if echo_order == 0 {
        return vec![(tau, false)];
    }
    let seg = tau / (2.0 * echo_order as f64);
    vec![(seg, true); 2 * echo_order as usize]
}

/// Runs the pulse sequence from `|0><0| (x) rho` and averages over noise.
pub fn run_sequence(rho: &DensityMatrix, p: &DriveParams, noise: &NoiseModel, ev: EvolverKind) -> Result<SequenceOutcome> {
    run_sequence_from(&initial_state(rho), rho, p, noise, ev, &SequenceOptions::default())
}

/// Runs the pulse sequence from an arbitrary joint state. The Hamiltonian
/// uses `rho`; the register content of `state` may differ from it.
pub fn run_sequence_from(
    state: &SystemState,
    rho: &DensityMatrix,
    p: &DriveParams,
    noise: &NoiseModel,
    ev: EvolverKind,
    opts: &SequenceOptions,
) -> Result<SequenceOutcome> {
    let members = ensemble(state, rho, p, noise, ev, opts)?;
    let samples = members.len();
    let mut avg = ComplexMatrix::zeros(state.dim(), state.dim());
    let mut per_sample = Vec::with_capacity(samples);
    // Fixed-order reduction keeps results independent of worker count.
    for (_, w, s) in &members {
        avg = &avg + &s.matrix.scale_re(*w);
        per_sample.push(success_probability(s));
    }
    let final_state = SystemState { matrix: avg, register_dim: state.register_dim };
    let success = success_probability(&final_state);
    let monte_carlo = matches!(noise.averaging, Averaging::MonteCarlo { .. }) && noise.sigma_delta > 0.0;
    let std_error = if monte_carlo && samples > 1 {
        let mean = per_sample.iter().sum::<f64>() / samples as f64;
        let var = per_sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        (var / samples as f64).sqrt()
    } else {
        0.0
    };
    let keep = monte_carlo || opts.keep_per_sample;
    Ok(SequenceOutcome { final_state, success_probability: success, per_sample_success: keep.then_some(per_sample), samples, std_error })
}

/// Per-sample evolved states `(delta_f, weight, state)` in sample order.
pub fn ensemble(
    state: &SystemState,
    rho: &DensityMatrix,
    p: &DriveParams,
    noise: &NoiseModel,
    ev: EvolverKind,
    opts: &SequenceOptions,
) -> Result<Vec<(f64, f64, SystemState)>> {
    check_register(state, rho)?;
    p.validate()?;
    ev.validate()?;
    let deltas = noise_samples(noise)?;
    let eig = rho.eig()?;
    let n = rho.dim();
    let pulse = probe_op_on_joint(&pi_pulse(opts.pulse_axis), n);

    match ev {
        EvolverKind::Exact => {
            let frame = EigenFrame::new(&eig, state);
            let evolve = |&(delta, w): &(f64, f64)| -> (f64, f64, SystemState) { (delta, w, frame.evolve(p, delta, opts.pulse_axis)) };
            Ok(par_map(&deltas, evolve))
        }
        EvolverKind::Trotter(_) | EvolverKind::Dme(_) => {
            let evolve = |&(delta, w): &(f64, f64)| -> Result<(f64, f64, SystemState)> {
                let s = propagate_dense(state, rho, &eig, p, delta, ev, opts, &pulse)?;
                Ok((delta, w, s))
            };
            par_map(&deltas, evolve).into_iter().collect()
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Dense-matrix propagation of one noise sample through the sequence.
#[allow(clippy::too_many_arguments)]
pub(crate) fn propagate_dense(
    state: &SystemState,
    rho: &DensityMatrix,
    eig: &HermitianEig,
    p: &DriveParams,
    delta: f64,
    ev: EvolverKind,
    opts: &SequenceOptions,
    pulse: &ComplexMatrix,
) -> Result<SystemState> {
    let segments = sequence_segments(p.tau, p.echo_order);
    let seg_steps = (ev.steps() / segments.len()).max(1);
    let mut s = state.clone();
    for (duration, pulse_after) in segments {
        let seg = DriveParams { tau: duration, trotter_steps: seg_steps, ..*p };
        s = match ev {
            EvolverKind::Exact => evolve_exact(&s, &build_hamiltonian(&seg, rho, delta), duration)?,
            EvolverKind::Trotter(_) => {
                let step = trotter_step(seg.omega + delta, seg.c, seg.dt(), eig, opts.trotter_order);
                conjugated(&s, &matrix_power(&step, seg_steps))
            }
            EvolverKind::Dme(_) => evolve_dme(&s, &seg, rho, delta)?,
        };
        if pulse_after {
            s = conjugated(&s, pulse);
        }
    }
    Ok(s)
}

/// The state expressed in the eigenbasis of `rho`, where the Hamiltonian is
/// a direct sum of 2x2 probe blocks `((w + delta - lambda_i)/2) Z + c X`
/// (plus a scalar `lambda_i / 2`).
struct EigenFrame<'a> {
    eig: &'a HermitianEig,
    /// `(I (x) V)^dagger s (I (x) V)`.
    rotated: ComplexMatrix,
    n: usize,
}

impl<'a> EigenFrame<'a> {
    fn new(eig: &'a HermitianEig, state: &SystemState) -> Self {
        let n = eig.dim();
        let frame = tensor(&ComplexMatrix::identity(2), &eig.eigenvectors);
        let rotated = mul_adjoint(&(&frame.adjoint() * &state.matrix), &frame.adjoint());
        Self { eig, rotated, n }
    }

    /// Block propagators `U_i` for one noise sample.
    fn block_unitaries(&self, p: &DriveParams, delta: f64, axis: PulseAxis) -> Vec<[C64; 4]> {
        let pulse = pi_pulse(axis);
        let pulse = [pulse[(0, 0)], pulse[(0, 1)], pulse[(1, 0)], pulse[(1, 1)]];
        let segments = sequence_segments(p.tau, p.echo_order);
        self.eig
            .eigenvalues
            .iter()
            .map(|&lambda| {
                let mut u = [ONE, ZERO, ZERO, ONE];
                for &(duration, pulse_after) in &segments {
                    let phase = C64::from_polar(1.0, -lambda * duration / 2.0);
                    let r = rotation_2x2(p.omega + delta - lambda, p.c, duration).map(|z| z * phase);
                    u = mul2(&r, &u);
                    if pulse_after {
                        u = mul2(&pulse, &u);
                    }
                }
                u
            })
            .collect()
    }

    fn evolve(&self, p: &DriveParams, delta: f64, axis: PulseAxis) -> SystemState {
        let n = self.n;
        let us = self.block_unitaries(p, delta, axis);
        let mut out = ComplexMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                let b = [self.rotated[(i, j)], self.rotated[(i, n + j)], self.rotated[(n + i, j)], self.rotated[(n + i, n + j)]];
                let ub = mul2(&us[i], &b);
                let r = mul2(&ub, &adjoint2(&us[j]));
                out[(i, j)] = r[0];
                out[(i, n + j)] = r[1];
                out[(n + i, j)] = r[2];
                out[(n + i, n + j)] = r[3];
            }
        }
        let frame = tensor(&ComplexMatrix::identity(2), &self.eig.eigenvectors);
        SystemState { matrix: out.conjugate_by(&frame), register_dim: n }
    }
}

fn mul2(a: &[C64; 4], b: &[C64; 4]) -> [C64; 4] {
    [a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]]
}

fn adjoint2(a: &[C64; 4]) -> [C64; 4] {
    [a[0].conj(), a[2].conj(), a[1].conj(), a[3].conj()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{analytic_transition_probability, optimal_tau, paper_density_matrix};
    use crate::qmath::{op_distance, trace_distance, unitary_of};

    fn lambda4() -> f64 {
        paper_density_matrix().eig().unwrap().eigenvalues[3]
    }

    fn analytic_sum(rho: &DensityMatrix, omega: f64, c: f64, tau: f64) -> f64 {
        rho.eig().unwrap().eigenvalues.iter().map(|&l| analytic_transition_probability(l, l, omega, c, tau)).sum()
    }

    fn assert_channel_sane(s: &SystemState) {
        assert!((s.matrix().trace().re - 1.0).abs() < 1e-10);
        assert!(s.matrix().hermiticity_deviation() < 1e-12);
        s.validate().unwrap();
    }

    #[test]
    fn initial_state_structure() {
        let half = DensityMatrix::maximally_mixed(2);
        let s = initial_state(&half);
        assert_eq!(s.matrix(), &ComplexMatrix::diag(&[0.5, 0.5, 0.0, 0.0]));
        let rho = paper_density_matrix();
        let s = initial_state(&rho);
        assert_eq!(&s.register_reduced(), rho.matrix());
        assert_eq!(s.probe_reduced(), ComplexMatrix::diag(&[1.0, 0.0]));
        assert_eq!(success_probability(&s), 0.0);
    }

    #[test]
    fn success_probability_cases() {
        let rho = paper_density_matrix();
        let flipped = conjugated(&initial_state(&rho), &probe_op_on_joint(&qmath::pauli_x(), 4));
        assert!((success_probability(&flipped) - 1.0).abs() < 1e-15);
        let mixed = SystemState::new(ComplexMatrix::identity(8).scale_re(0.125), 4).unwrap();
        assert!((success_probability(&mixed) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_evolution_examples() {
        let rho = paper_density_matrix();
        let s = initial_state(&rho);
        let h = build_hamiltonian(&DriveParams::new(0.3, 1e-2), &rho, 0.0);
        assert_eq!(evolve_exact(&s, &h, 0.0).unwrap(), s);

        let c = 6e-4;
        let p = DriveParams::new(lambda4(), c);
        let out = evolve_exact(&s, &build_hamiltonian(&p, &rho, 0.0), p.tau).unwrap();
        assert!((success_probability(&out) - 0.4549).abs() < 1e-3);
        assert!((out.purity() - s.purity()).abs() < 1e-12);
        assert_channel_sane(&out);

        assert!(evolve_exact(&s, &ComplexMatrix::identity(4), 1.0).is_err());
    }

    #[test]
    fn block_route_matches_dense_route() {
        let rho = paper_density_matrix();
        let eig = rho.eig().unwrap();
        let opts = SequenceOptions::default();
        let pulse = probe_op_on_joint(&pi_pulse(PulseAxis::X), 4);
        // A state with probe coherence and register content unlike rho.
        let plus = ComplexMatrix::from_real(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let reg = DensityMatrix::new(ComplexMatrix::from_real(&[
            &[0.4, 0.1, 0.0, 0.05],
            &[0.1, 0.3, 0.02, 0.0],
            &[0.0, 0.02, 0.2, 0.0],
            &[0.05, 0.0, 0.0, 0.1],
        ]))
        .unwrap();
        let start = SystemState::new(tensor(&plus, reg.matrix()), 4).unwrap();
        for (omega, c, m, delta) in [(0.45, 6e-4, 0, 0.0), (0.39, 2e-3, 1, 3e-4), (0.1, 1e-2, 3, -1e-3)] {
            let p = DriveParams::new(omega, c).with_echo(m);
            let dense = propagate_dense(&start, &rho, &eig, &p, delta, EvolverKind::Exact, &opts, &pulse).unwrap();
            let frame = EigenFrame::new(&eig, &start);
            let block = frame.evolve(&p, delta, PulseAxis::X);
            assert!((dense.matrix() - block.matrix()).max_abs() < 1e-9, "omega {omega} m {m}");
        }
    }

    #[test]
    fn noiseless_native_run_matches_analytic() {
        let rho = paper_density_matrix();
        let p = DriveParams::new(lambda4(), 6e-4);
        let out = run_sequence(&rho, &p, &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        assert!((out.success_probability - 0.4549).abs() < 1e-3);
        assert!((out.success_probability - analytic_sum(&rho, p.omega, p.c, p.tau)).abs() < 1e-9);
        assert_eq!(out.samples, 1);
        assert_channel_sane(&out.final_state);
    }

    #[test]
    fn echo_is_nearly_transparent_on_resonance() {
        let rho = paper_density_matrix();
        let p = DriveParams::new(lambda4(), 6e-4);
        let native = run_sequence(&rho, &p, &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        let echo = run_sequence(&rho, &p.with_echo(1), &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        assert!((native.success_probability - echo.success_probability).abs() < 2e-3);
    }

    #[test]
    fn echo_recovers_dephased_amplitude() {
        let rho = paper_density_matrix();
        let p = DriveParams::new(lambda4(), 6e-4);
        let noise = NoiseModel::gaussian(2e-3);
        let clean = run_sequence(&rho, &p, &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
        let native = run_sequence(&rho, &p, &noise, EvolverKind::Exact).unwrap();
        let echo = run_sequence(&rho, &p.with_echo(1), &noise, EvolverKind::Exact).unwrap();
        assert!(native.success_probability < clean.success_probability);
        assert!(echo.success_probability > native.success_probability);
    }

    #[test]
    fn y_axis_pulses_undo_the_drive() {
        // Y pulses anticommute with both the drive and the detuning, so a
        // noiseless resonant echo returns the probe to |0>.
        let rho = paper_density_matrix();
        let p = DriveParams::new(lambda4(), 6e-4).with_echo(1);
        let opts = SequenceOptions { pulse_axis: PulseAxis::Y, ..Default::default() };
        let out = run_sequence_from(&initial_state(&rho), &rho, &p, &NoiseModel::noiseless(), EvolverKind::Exact, &opts).unwrap();
        assert!(out.success_probability < 0.01);
    }

    #[test]
    fn trotter_single_factor_and_commuting_cases() {
        let rho = paper_density_matrix();
        let eig = rho.eig().unwrap();
        let tau = 3.7;
        let p = DriveParams { omega: 0.0, c: 1e-300, tau, echo_order: 0, trotter_steps: 1 };
        let u = trotter_propagator(&p, &rho, 0.0, TrotterOrder::First).unwrap();
        assert!(op_distance(&u, &controlled_rho_unitary(&eig, tau)).unwrap() < 1e-12);

        let diag = DensityMatrix::new(ComplexMatrix::diag(&[0.1, 0.2, 0.3, 0.4])).unwrap();
        for n in [1, 3, 17] {
            let p = DriveParams { omega: 0.3, c: 1e-300, tau: 50.0, echo_order: 0, trotter_steps: n };
            let u = trotter_propagator(&p, &diag, 0.0, TrotterOrder::First).unwrap();
            let exact = exact_propagator(&p, &diag, 0.0).unwrap();
            assert!(op_distance(&u, &exact).unwrap() < 1e-12);
        }
    }

    #[test]
    fn trotter_error_is_first_order_in_asymptotic_regime() {
        // Asymptotic once omega * dt << 1; for omega = 0.45, tau = pi/2c
        // that needs N well above omega * tau ~ 1200.
        let rho = paper_density_matrix();
        let base = DriveParams::new(0.45, 6e-4);
        let exact = exact_propagator(&base, &rho, 0.0).unwrap();
        let err = |n: usize| {
            let u = trotter_propagator(&base.with_steps(n), &rho, 0.0, TrotterOrder::First).unwrap();
            op_distance(&u, &exact).unwrap()
        };
        let errs: Vec<f64> = [2048, 4096, 8192].iter().map(|&n| err(n)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
        }
    }

    #[test]
    fn strang_splitting_is_second_order() {
        let rho = paper_density_matrix();
        let base = DriveParams::new(0.3, 0.05).with_tau(20.0);
        let exact = exact_propagator(&base, &rho, 0.0).unwrap();
        let err = |n: usize| {
            let u = trotter_propagator(&base.with_steps(n), &rho, 0.0, TrotterOrder::Strang).unwrap();
            op_distance(&u, &exact).unwrap()
        };
        let ratio = err(64) / err(128);
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn dme_step_edge_cases() {
        let rho = paper_density_matrix();
        let s = initial_state(&rho);
        assert_eq!(dme_controlled_step(&s, &rho, 0.0).unwrap(), s);
        let out = dme_controlled_step(&s, &rho, 0.3).unwrap();
        assert!((out.matrix() - s.matrix()).max_abs() < 1e-12);
        assert!(dme_controlled_step(&s, &DensityMatrix::maximally_mixed(2), 0.1).is_err());
    }

    #[test]
    fn partial_swap_matches_generator_exponential() {
        let n = 2;
        let dim = 2 * n * n;
        let mut gen = ComplexMatrix::zeros(dim, dim);
        for a in 0..n {
            for b in 0..n {
                gen[(n * n + a * n + b, n * n + b * n + a)] = ONE;
            }
        }
        let oracle = unitary_of(&gen, 0.37).unwrap();
        assert!((&controlled_partial_swap(n, 0.37) - &oracle).max_abs() < 1e-12);
    }

    #[test]
    fn dme_local_error_is_second_order() {
        let rho = paper_density_matrix();
        let eig = rho.eig().unwrap();
        let plus = ComplexMatrix::from_real(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let reg = DensityMatrix::new(ComplexMatrix::diag(&[0.7, 0.1, 0.1, 0.1])).unwrap();
        let s = SystemState::new(tensor(&plus, reg.matrix()), 4).unwrap();
        let err = |dt: f64| {
            let dme = dme_controlled_step(&s, &rho, dt).unwrap();
            let exact = conjugated(&s, &controlled_rho_unitary(&eig, dt));
            trace_distance(dme.matrix(), exact.matrix()).unwrap()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn dme_converges_to_trotter_with_exact_controlled_step() {
        let rho = paper_density_matrix();
        let s = initial_state(&rho);
        let tau = 3.0;
        let err = |n: usize| {
            let p = DriveParams { omega: 0.45, c: 0.3, tau, echo_order: 0, trotter_steps: n };
            let dme = evolve_dme(&s, &p, &rho, 0.0).unwrap();
            let trotter = evolve_trotter(&s, &p, &rho, 0.0).unwrap();
            trace_distance(dme.matrix(), trotter.matrix()).unwrap()
        };
        let (e1, e2) = (err(50), err(100));
        assert!(e2 < e1);
        // Accumulated error ~ K tau dt: halving dt roughly halves it.
        assert!((e1 / e2 - 2.0).abs() < 0.3, "ratio {}", e1 / e2);
        assert!(e2 < 0.05);
    }

    #[test]
    fn all_evolvers_keep_states_valid() {
        let rho = paper_density_matrix();
        let p = DriveParams::new(0.4, 0.05).with_tau(10.0).with_steps(20).with_echo(1);
        for ev in [EvolverKind::Exact, EvolverKind::Trotter(20), EvolverKind::Dme(20)] {
            let out = run_sequence(&rho, &p, &NoiseModel::gaussian(1e-2), ev).unwrap();
            assert_channel_sane(&out.final_state);
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(21).unwrap();
        let moment = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-13);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(6) - 15.0).abs() < 1e-9);
    }

    #[test]
    fn grid_rule_moments() {
        let g = gaussian_grid(401);
        let m2: f64 = g.iter().map(|(x, w)| w * x * x).sum();
        assert!((m2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn evolver_kind_parsing() {
        assert_eq!("exact".parse::<EvolverKind>().unwrap(), EvolverKind::Exact);
        assert_eq!("trotter:64".parse::<EvolverKind>().unwrap(), EvolverKind::Trotter(64));
        assert_eq!("dme:8".parse::<EvolverKind>().unwrap(), EvolverKind::Dme(8));
        assert!("trotter:0".parse::<EvolverKind>().is_err());
        assert!("magic".parse::<EvolverKind>().is_err());
        assert_eq!(EvolverKind::Dme(3).to_string(), "dme:3");
    }

    #[test]
    fn monte_carlo_is_deterministic_and_order_free() {
        let rho = paper_density_matrix();
        let p = DriveParams::new(lambda4(), 6e-4);
        let noise = NoiseModel::gaussian(4e-4).with_averaging(Averaging::MonteCarlo { samples: 64, seed: 11 });
        let a = run_sequence(&rho, &p, &noise, EvolverKind::Exact).unwrap();
        let b = run_sequence(&rho, &p, &noise, EvolverKind::Exact).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.per_sample_success, b.per_sample_success);
        assert!(a.std_error > 0.0);

        // Sample k depends only on (seed, k).
        let first = noise_samples(&noise).unwrap();
        let more = NoiseModel { averaging: Averaging::MonteCarlo { samples: 128, seed: 11 }, ..noise };
        assert_eq!(
            &noise_samples(&more).unwrap()[..64].iter().map(|x| x.0).collect::<Vec<_>>(),
            &first.iter().map(|x| x.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn oracle_equivalence_over_random_drives() {
        let rho = paper_density_matrix();
        let mut seed = 5u64;
        for k in 0..100 {
            seed = derive_seed(seed, k);
            let omega = (seed >> 11) as f64 / (1u64 << 53) as f64;
            let c = 1e-4 + 0.05 * (derive_seed(seed, 1) >> 11) as f64 / (1u64 << 53) as f64;
            let tau = optimal_tau(c);
            let p = DriveParams::new(omega, c);
            let got = run_sequence(&rho, &p, &NoiseModel::noiseless(), EvolverKind::Exact).unwrap();
            assert!((got.success_probability - analytic_sum(&rho, omega, c, tau)).abs() < 1e-9);
        }
    }
}
