//! Frequency scans, peak detection and Gaussian peak fitting.
//!
//! The adaptive scan starts from a coarse sweep with a strong drive and then
//! zooms in on every surviving peak with progressively weaker drives, which
//! narrows the lines while keeping the number of sampled frequencies small.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::engine::{derive_seed, run_sequence, EvolverKind};
use crate::error::{Error, Result};
use crate::model::{optimal_tau, DensityMatrix, DriveParams, NoiseModel};

/// `2 sqrt(2 ln 2)`: FWHM of a Gaussian with unit standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

pub const LM_MAX_ITERATIONS: usize = 200;
pub const LM_STEP_TOL: f64 = 1e-10;

/// Fraction of the spectrum's max-minus-min used as default prominence.
pub const DEFAULT_PROMINENCE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub omega: f64,
    pub p_success: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub points: Vec<SpectrumPoint>,
    pub drive: DriveParams,
    pub noise: NoiseModel,
    pub evolver: EvolverKind,
    /// Grid evaluations times noise samples.
    pub repetitions: u64,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.omega).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.p_success).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("omega,p_success,std_error\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", fmt_sig(p.omega), fmt_sig(p.p_success), fmt_sig(p.std_error)));
        }
        out
    }
}

/// Formats `x` with 12 significant digits, trailing zeros trimmed.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        let s = format!("{x:.11e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{e}")
    }
}

/// Evenly spaced grid with `points` entries on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect(),
    }
}

/// Runs the sequence at every `omega` of `grid`. `p.omega` is ignored.
pub fn scan_spectrum(rho: &DensityMatrix, p: &DriveParams, grid: &[f64], noise: &NoiseModel, ev: EvolverKind) -> Result<Spectrum> {
    if grid.is_empty() {
        return Err(Error::param("grid", "must not be empty"));
    }
    if grid.iter().any(|w| !w.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("grid", "must be finite and strictly increasing"));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut repetitions = 0u64;
    for &omega in grid {
        let out = run_sequence(rho, &p.with_omega(omega), noise, ev)?;
        repetitions += out.samples as u64;
        let (p_success, std_error) = match noise.shots {
            None => (out.success_probability, 0.0),
            Some(shots) => {
                let seed = derive_seed(derive_seed(shots.seed, p.c.to_bits()), omega.to_bits());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let binomial = Binomial::new(shots.shots, out.success_probability).map_err(|e| Error::param("shots", e.to_string()))?;
                let mean = binomial.sample(&mut rng) as f64 / shots.shots as f64;
                (mean, (mean * (1.0 - mean) / shots.shots as f64).sqrt())
            }
        };
        points.push(SpectrumPoint { omega, p_success, std_error });
    }
    Ok(Spectrum { points, drive: *p, noise: *noise, evolver: ev, repetitions })
}

/// A local maximum found on the sampled grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarsePeak {
    pub index: usize,
    pub omega: f64,
    pub height: f64,
    pub prominence: f64,
    /// Base level the prominence is measured from.
    pub base: f64,
    /// Full width at half prominence, interpolated on the grid.
    pub fwhm_estimate: f64,
    /// Positions of the lowest points between this maximum and the
    /// neighbouring higher terrain.
    pub valleys: (f64, f64),
    /// Centroid of the excess over the lower valley, between the valleys.
    pub centroid: f64,
    /// Fit window: `+-1.5 fwhm_estimate` around the maximum, clipped to the
    /// valleys.
    pub window: (f64, f64),
}

/// Default prominence threshold for `spec`.
pub fn default_prominence(spec: &Spectrum) -> f64 {
    let ps = spec.probabilities();
    let max = ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ps.iter().cloned().fold(f64::INFINITY, f64::min);
    DEFAULT_PROMINENCE_FRACTION * (max - min)
}

/// Interior local maxima whose topographic prominence reaches `min_prominence`.
pub fn detect_peaks(spec: &Spectrum, min_prominence: f64) -> Vec<CoarsePeak> {
    let n = spec.len();
    if n < 3 {
        return vec![];
    }
    let x = spec.omegas();
    let y = spec.probabilities();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if y[i] > y[i - 1] {
            // Walk across a flat top, if any.
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                let top = (i + j) / 2;
                if let Some(peak) = describe_peak(&x, &y, top) {
                    if peak.prominence >= min_prominence && peak.prominence > 0.0 {
                        peaks.push(peak);
                    }
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

fn describe_peak(x: &[f64], y: &[f64], top: usize) -> Option<CoarsePeak> {
    let h = y[top];
    let mut left_min = h;
    let mut l = top;
    while l > 0 && y[l - 1] <= h {
        l -= 1;
        left_min = left_min.min(y[l]);
    }
    let mut right_min = h;
    let mut r = top;
    while r + 1 < y.len() && y[r + 1] <= h {
        r += 1;
        right_min = right_min.min(y[r]);
    }
    let base = left_min.max(right_min);
    let prominence = h - base;
    let half = base + 0.5 * prominence;
    let cross_left = {
        let mut k = top;
        while k > l && y[k - 1] > half {
            k -= 1;
        }
        if k > l {
            interpolate(x[k - 1], y[k - 1], x[k], y[k], half)
        } else {
            x[l]
        }
    };
    let cross_right = {
        let mut k = top;
        while k < r && y[k + 1] > half {
            k += 1;
        }
        if k < r {
            interpolate(x[k], y[k], x[k + 1], y[k + 1], half)
        } else {
            x[r]
        }
    };
    let spacing = if top + 1 < x.len() { x[top + 1] - x[top] } else { x[top] - x[top - 1] };
    let fwhm_estimate = (cross_right - cross_left).max(spacing);
    let omega = x[top];
    let argmin = |range: std::ops::RangeInclusive<usize>| range.min_by(|&a, &b| y[a].total_cmp(&y[b])).expect("nonempty");
    let (lv, rv) = (argmin(l..=top), argmin(top..=r));
    let floor = y[lv].min(y[rv]);
    let (mut num, mut den) = (0.0, 0.0);
    for k in lv..=rv {
        num += x[k] * (y[k] - floor).max(0.0);
        den += (y[k] - floor).max(0.0);
    }
    let centroid = if den > 0.0 { num / den } else { omega };
    Some(CoarsePeak {
        index: top,
        omega,
        height: h,
        prominence,
        base,
        fwhm_estimate,
        valleys: (x[lv], x[rv]),
        centroid,
        window: ((omega - 1.5 * fwhm_estimate).max(x[lv]), (omega + 1.5 * fwhm_estimate).min(x[rv])),
    })
}

fn interpolate(x0: f64, y0: f64, x1: f64, y1: f64, level: f64) -> f64 {
    if y1 == y0 {
        return 0.5 * (x0 + x1);
    }
    x0 + (level - y0) * (x1 - x0) / (y1 - y0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center: f64,
    pub fwhm: f64,
    pub amplitude: f64,
    pub baseline: f64,
    pub center_uncertainty: f64,
    /// Root-mean-square residual of the fit.
    pub fit_residual: f64,
    pub window: (f64, f64),
    pub iterations: usize,
    /// Two maxima could not be separated; the values describe the merged line.
    #[serde(default)]
    pub unresolved: bool,
    /// The fit failed and the values come from the grid maximum.
    #[serde(default)]
    pub coarse_only: bool,
}

impl Peak {
    pub fn sigma(&self) -> f64 {
        self.fwhm / FWHM_PER_SIGMA
    }

    fn from_coarse(c: &CoarsePeak, spacing: f64) -> Self {
        Peak {
            center: c.centroid,
            fwhm: c.fwhm_estimate,
            amplitude: c.prominence,
            baseline: c.base,
            center_uncertainty: 0.5 * spacing,
            fit_residual: 0.0,
            window: c.window,
            iterations: 0,
            unresolved: false,
            coarse_only: true,
        }
    }
}

fn gaussian(x: f64, mu: f64, s: f64, a: f64) -> f64 {
    a * (-0.5 * ((x - mu) / s).powi(2)).exp()
}

/// Points of a spectrum restricted to a fit window.
struct Samples {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Inverse-variance weights, present when the spectrum carries shot
    /// noise errors.
    weights: Option<Vec<f64>>,
}

fn window_points(spec: &Spectrum, window: (f64, f64)) -> Samples {
    let pts: Vec<&SpectrumPoint> = spec.points.iter().filter(|p| p.omega >= window.0 && p.omega <= window.1).collect();
    let x = pts.iter().map(|p| p.omega).collect();
    let y = pts.iter().map(|p| p.p_success).collect();
    let max_err = pts.iter().map(|p| p.std_error).fold(0.0, f64::max);
    // Points with a zero binomial estimate still carry some uncertainty.
    let weights = (max_err > 0.0).then(|| {
        let floor = 0.05 * max_err;
        pts.iter().map(|p| p.std_error.max(floor).powi(-2)).collect()
    });
    Samples { x, y, weights }
}

/// Normalisation used while fitting: `u = (x - x0)/xs`, `v = (y - y0)/ys`.
struct Frame {
    x0: f64,
    xs: f64,
    y0: f64,
    ys: f64,
}

impl Frame {
    fn new(x: &[f64], y: &[f64]) -> Option<Self> {
        let (xmin, xmax) = (x[0], x[x.len() - 1]);
        let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ys = ymax - ymin;
        if !(ys > 1e-12 * ymax.abs()) {
            return None;
        }
        Some(Frame { x0: 0.5 * (xmin + xmax), xs: 0.5 * (xmax - xmin), y0: ymin, ys })
    }

    fn u(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.x0) / self.xs).collect()
    }

    fn v(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y0) / self.ys).collect()
    }
}

/// Initial `(mu, s, a)` guess from the maximum and its half-height crossings.
fn guess_single(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let (imax, &vmax) = v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("nonempty");
    let half = 0.5 * vmax;
    let mut l = imax;
    while l > 0 && v[l] > half {
        l -= 1;
    }
    let left = if v[l] <= half && l < imax { interpolate(u[l], v[l], u[l + 1], v[l + 1], half) } else { u[0] };
    let mut r = imax;
    while r + 1 < v.len() && v[r] > half {
        r += 1;
    }
    let right = if v[r] <= half && r > imax { interpolate(u[r - 1], v[r - 1], u[r], v[r], half) } else { u[u.len() - 1] };
    let spacing = (u[u.len() - 1] - u[0]) / (u.len() - 1) as f64;
    let s = ((right - left) / FWHM_PER_SIGMA).max(0.5 * spacing);
    (u[imax], s, vmax)
}

/// Least-squares fit of `A exp(-(w - mu)^2 / 2 s^2) + b` to the points of
/// `spec` inside `window`.
pub fn fit_gaussian_peak(spec: &Spectrum, window: (f64, f64)) -> Result<Peak> {
    fit_gaussian_points(&window_points(spec, window), window)
}

fn fit_gaussian_points(samples: &Samples, window: (f64, f64)) -> Result<Peak> {
    let (x, y) = (&samples.x, &samples.y);
    if x.len() < 5 {
        return Err(Error::FitFailed { iterations: 0, reason: format!("{} points in window, need at least 5", x.len()) });
    }
    let frame = Frame::new(x, y).ok_or_else(|| Error::FitFailed { iterations: 0, reason: "flat data".into() })?;
    let (u, v) = (frame.u(x), frame.v(y));
    let (mu, s, a) = guess_single(&u, &v);
    let model = |p: &[f64], t: f64| gaussian(t, p[0], p[1], p[2]) + p[3];
    let fit = levenberg_marquardt(&model, &u, &v, samples.weights.as_deref(), vec![mu, s, a, 0.0])?;
    let p = &fit.params;
    let peak = Peak {
        center: frame.x0 + frame.xs * p[0],
        fwhm: FWHM_PER_SIGMA * frame.xs * p[1].abs(),
        amplitude: frame.ys * p[2],
        baseline: frame.y0 + frame.ys * p[3],
        center_uncertainty: frame.xs * fit.std_errors.as_ref().map_or(f64::NAN, |e| e[0]),
        fit_residual: frame.ys * fit.rms,
        window,
        iterations: fit.iterations,
        unresolved: false,
        coarse_only: false,
    };
    check_peak(peak, x)
}

fn check_peak(peak: Peak, x: &[f64]) -> Result<Peak> {
    let fail = |reason: String| Err(Error::FitFailed { iterations: peak.iterations, reason });
    if !(peak.fwhm > 0.0) || !peak.center.is_finite() {
        return fail(format!("degenerate width {}", peak.fwhm));
    }
    if peak.amplitude < 0.0 {
        return fail(format!("negative amplitude {}", peak.amplitude));
    }
    if peak.center < x[0] || peak.center > x[x.len() - 1] {
        return fail(format!("center {} outside the fitted window", peak.center));
    }
    Ok(peak)
}

/// Two overlapping Gaussians on a shared baseline. Falls back to a single
/// merged peak flagged `unresolved` when the two lines are not separable.
pub fn fit_two_gaussians(spec: &Spectrum, window: (f64, f64), guesses: (f64, f64)) -> Result<Vec<Peak>> {
    let samples = window_points(spec, window);
    let (x, y) = (&samples.x, &samples.y);
    if x.len() < 8 {
        return merged(&samples, window);
    }
    let frame = Frame::new(x, y).ok_or_else(|| Error::FitFailed { iterations: 0, reason: "flat data".into() })?;
    let (u, v) = (frame.u(x), frame.v(y));
    let (g1, g2) = ((guesses.0 - frame.x0) / frame.xs, (guesses.1 - frame.x0) / frame.xs);
    let height = |g: f64| {
        let k = u.iter().enumerate().min_by(|a, b| (a.1 - g).abs().total_cmp(&(b.1 - g).abs())).expect("nonempty").0;
        v[k]
    };
    let s0 = ((g2 - g1).abs() / 4.0).max(1e-3);
    let model = |p: &[f64], t: f64| gaussian(t, p[0], p[1], p[2]) + gaussian(t, p[3], p[4], p[5]) + p[6];
    let start = vec![g1, s0, height(g1), g2, s0, height(g2), 0.0];
    let fit = match levenberg_marquardt(&model, &u, &v, samples.weights.as_deref(), start) {
        Ok(fit) => fit,
        Err(_) => return merged(&samples, window),
    };
    let p = &fit.params;
    let Some(errors) = fit.std_errors.as_ref() else {
        return merged(&samples, window);
    };
    let separation = (p[3] - p[0]).abs();
    if errors[0] > separation || errors[3] > separation || !errors.iter().all(|e| e.is_finite()) {
        return merged(&samples, window);
    }
    let mut peaks = Vec::with_capacity(2);
    for k in [0, 3] {
        let peak = Peak {
            center: frame.x0 + frame.xs * p[k],
            fwhm: FWHM_PER_SIGMA * frame.xs * p[k + 1].abs(),
            amplitude: frame.ys * p[k + 2],
            baseline: frame.y0 + frame.ys * p[6],
            center_uncertainty: frame.xs * errors[k],
            fit_residual: frame.ys * fit.rms,
            window,
            iterations: fit.iterations,
            unresolved: false,
            coarse_only: false,
        };
        match check_peak(peak, x) {
            Ok(peak) => peaks.push(peak),
            Err(_) => return merged(&samples, window),
        }
    }
    peaks.sort_by(|a, b| a.center.total_cmp(&b.center));
    Ok(peaks)
}

fn merged(samples: &Samples, window: (f64, f64)) -> Result<Vec<Peak>> {
    let mut peak = fit_gaussian_points(samples, window)?;
    peak.unresolved = true;
    Ok(vec![peak])
}

/// Detects peaks and fits each. Maxima that share a fit window are fitted
/// together with two Gaussians. Failed fits fall back to the grid estimate.
pub fn fit_peaks(spec: &Spectrum, coarse: &[CoarsePeak]) -> Vec<Peak> {
    let spacing = grid_spacing(spec);
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < coarse.len() {
        let a = &coarse[i];
        let paired = coarse.get(i + 1).filter(|b| b.omega - a.omega < 1.5 * a.fwhm_estimate.max(b.fwhm_estimate));
        if let Some(b) = paired {
            let window = ((a.omega - 1.5 * a.fwhm_estimate).max(a.valleys.0), (b.omega + 1.5 * b.fwhm_estimate).min(b.valleys.1));
            match fit_two_gaussians(spec, window, (a.omega, b.omega)) {
                Ok(found) => peaks.extend(found),
                Err(_) => peaks.extend([Peak::from_coarse(a, spacing), Peak::from_coarse(b, spacing)]),
            }
            i += 2;
        } else {
            peaks.push(fit_gaussian_points(&window_points(spec, a.window), a.window).unwrap_or_else(|_| Peak::from_coarse(a, spacing)));
            i += 1;
        }
    }
    peaks
}

fn grid_spacing(spec: &Spectrum) -> f64 {
    let x = spec.omegas();
    if x.len() < 2 {
        return 0.0;
    }
    (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64
}

struct LmFit {
    params: Vec<f64>,
    /// `None` when the covariance matrix is singular.
    std_errors: Option<Vec<f64>>,
    rms: f64,
    iterations: usize,
}

/// Levenberg-Marquardt with a central-difference Jacobian. Covariance is
/// `s^2 (J^T W J)^-1` with `s^2 = chi^2 / (m - p)`; `W` defaults to identity.
fn levenberg_marquardt(
    model: &dyn Fn(&[f64], f64) -> f64,
    x: &[f64],
    y: &[f64],
    weights: Option<&[f64]>,
    start: Vec<f64>,
) -> Result<LmFit> {
    let m = x.len();
    let np = start.len();
    let sqrt_w: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; m],
    };
    let residuals = |p: &[f64]| -> Vec<f64> { x.iter().zip(y).zip(&sqrt_w).map(|((&t, &v), w)| w * (model(p, t) - v)).collect() };
    let ssr = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let jacobian = |p: &[f64]| -> Vec<f64> {
        let mut jac = vec![0.0; m * np];
        let mut q = p.to_vec();
        for j in 0..np {
            let h = 1e-7 * p[j].abs().max(1e-3);
            q[j] = p[j] + h;
            let plus: Vec<f64> = x.iter().map(|&t| model(&q, t)).collect();
            q[j] = p[j] - h;
            let minus: Vec<f64> = x.iter().map(|&t| model(&q, t)).collect();
            q[j] = p[j];
            for i in 0..m {
                jac[i * np + j] = sqrt_w[i] * (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        jac
    };
    let normal = |jac: &[f64], r: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut jtj = vec![0.0; np * np];
        let mut jtr = vec![0.0; np];
        for i in 0..m {
            let row = &jac[i * np..(i + 1) * np];
            for a in 0..np {
                jtr[a] += row[a] * r[i];
                for b in 0..np {
                    jtj[a * np + b] += row[a] * row[b];
                }
            }
        }
        (jtj, jtr)
    };

    let mut p = start;
    let mut r = residuals(&p);
    let mut cost = ssr(&r);
    if !cost.is_finite() {
        return Err(Error::FitFailed { iterations: 0, reason: "non-finite start".into() });
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < LM_MAX_ITERATIONS {
        iterations += 1;
        let jac = jacobian(&p);
        let (jtj, jtr) = normal(&jac, &r);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[k * np + k] += lambda * jtj[k * np + k].max(1e-12);
            }
            let rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let Some(step) = solve(&a, &rhs, np) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(&step).map(|(a, b)| a + b).collect();
            let trial_r = residuals(&trial);
            let trial_cost = ssr(&trial_r);
            if trial_cost.is_finite() && trial_cost <= cost {
                let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                let p_norm = trial.iter().map(|v| v * v).sum::<f64>().sqrt();
                p = trial;
                r = trial_r;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if step_norm <= LM_STEP_TOL * (p_norm + LM_STEP_TOL) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        // No downhill step at any damping: already at the minimum.
        if !accepted || converged || cost == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::FitFailed { iterations, reason: format!("no convergence in {LM_MAX_ITERATIONS} iterations") });
    }
    let dof = m.saturating_sub(np).max(1) as f64;
    let s2 = cost / dof;
    let (jtj, _) = normal(&jacobian(&p), &r);
    let std_errors = invert(&jtj, np).and_then(|inv| {
        let e: Vec<f64> = (0..np).map(|k| (s2 * inv[k * np + k]).sqrt()).collect();
        e.iter().all(|v| v.is_finite()).then_some(e)
    });
    let plain = x.iter().zip(y).map(|(&t, &v)| (model(&p, t) - v).powi(2)).sum::<f64>();
    Ok(LmFit { params: p, std_errors, rms: (plain / m as f64).sqrt(), iterations })
}

/// Gaussian elimination with partial pivoting; `None` if (near) singular.
fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
        if m[pivot * n + col].abs() <= 1e-14 * scale {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
            x.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = m[row * n + col] / m[col * n + col];
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in col + 1..n {
            acc -= m[col * n + k] * x[k];
        }
        x[col] = acc / m[col * n + col];
    }
    Some(x)
}

fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = solve(a, &e, n)?;
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    Some(inv)
}

/// One zoom stage of an adaptive schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub c: f64,
    pub points_per_window: usize,
    /// Window halfwidth multiplier. The halfwidth is
    /// `kappa * fwhm_prev * c / c_prev`, i.e. `kappa` times the linewidth
    /// expected at this stage's drive.
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackPolicy {
    #[default]
    All,
    Rightmost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSchedule {
    pub stages: Vec<Stage>,
    pub initial_range: (f64, f64),
    pub initial_points: usize,
    #[serde(default)]
    pub track: TrackPolicy,
    /// Prominence threshold as a fraction of each spectrum's max-minus-min.
    #[serde(default = "default_prominence_fraction")]
    pub min_prominence: f64,
}

/// Default prominence fraction for adaptive stages. Lower than the generic
/// default so a weak merged line next to a strong one survives stage 0.
pub const ADAPTIVE_PROMINENCE_FRACTION: f64 = 0.1;

fn default_prominence_fraction() -> f64 {
    ADAPTIVE_PROMINENCE_FRACTION
}

impl Default for AdaptiveSchedule {
    fn default() -> Self {
        let stage = |c| Stage { c, points_per_window: 15, kappa: 3.0 };
        AdaptiveSchedule {
            stages: vec![stage(0.05), stage(0.01), stage(2e-3), stage(6e-4)],
            initial_range: (0.0, 1.0),
            initial_points: 15,
            track: TrackPolicy::All,
            min_prominence: ADAPTIVE_PROMINENCE_FRACTION,
        }
    }
}

impl AdaptiveSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::param("stages", "at least one stage is required"));
        }
        for s in &self.stages {
            if !(s.c > 0.0 && s.c.is_finite()) {
                return Err(Error::param("stages", format!("drive strength {} must be positive", s.c)));
            }
            if s.points_per_window < 5 {
                return Err(Error::param("stages", "points_per_window must be at least 5"));
            }
            if !(s.kappa > 0.0) {
                return Err(Error::param("stages", "kappa must be positive"));
            }
        }
        if self.stages.windows(2).any(|w| w[1].c >= w[0].c) {
            return Err(Error::param("stages", "drive strengths must be strictly decreasing"));
        }
        let (lo, hi) = self.initial_range;
        if !(lo < hi) {
            return Err(Error::param("initial_range", "must satisfy lo < hi"));
        }
        if self.initial_points < 3 {
            return Err(Error::param("initial_points", "must be at least 3"));
        }
        if !(0.0..1.0).contains(&self.min_prominence) {
            return Err(Error::param("min_prominence", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub c: f64,
    /// One spectrum per scanned window (a single one for stage 0).
    pub spectra: Vec<Spectrum>,
    pub peaks: Vec<Peak>,
    pub grid_points: usize,
    pub repetitions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveResult {
    /// Peaks of the last completed stage, sorted by center.
    pub peaks: Vec<Peak>,
    pub stages: Vec<StageLog>,
    pub total_grid_points: usize,
    pub total_repetitions: u64,
    /// Set when a stage lost every peak; `peaks` then come from the last
    /// good stage.
    pub aborted: Option<String>,
}

/// Runs the adaptive schedule. Stage 0 sweeps `initial_range`; every later
/// stage re-scans a window around each surviving peak with a weaker drive.
/// `base` supplies the echo order and Trotter step count.
pub fn adaptive_scan(
    rho: &DensityMatrix,
    schedule: &AdaptiveSchedule,
    base: &DriveParams,
    noise: &NoiseModel,
    ev: EvolverKind,
) -> Result<AdaptiveResult> {
    schedule.validate()?;
    let mut logs: Vec<StageLog> = Vec::new();
    let mut tracked: Vec<Peak> = Vec::new();
    let mut aborted = None;

    for (k, stage) in schedule.stages.iter().enumerate() {
        let p = DriveParams { c: stage.c, tau: optimal_tau(stage.c), ..*base };
        let mut spectra = Vec::new();
        let mut found = Vec::new();
        if k == 0 {
            let (lo, hi) = schedule.initial_range;
            let spec = scan_spectrum(rho, &p, &linear_grid(lo, hi, schedule.initial_points), noise, ev)?;
            found = fit_spectrum(&spec, schedule.min_prominence);
            spectra.push(spec);
        } else {
            let ratio = stage.c / schedule.stages[k - 1].c;
            for peak in &tracked {
                let half = stage.kappa * peak.fwhm * ratio;
                let grid = linear_grid(peak.center - half, peak.center + half, stage.points_per_window);
                let spec = scan_spectrum(rho, &p, &grid, noise, ev)?;
                found.extend(fit_spectrum(&spec, schedule.min_prominence));
                spectra.push(spec);
            }
            found = drop_sidelobes(dedupe(found), stage.c);
        }
        if schedule.track == TrackPolicy::Rightmost {
            found.sort_by(|a, b| a.center.total_cmp(&b.center));
            found = found.pop().into_iter().collect();
        }
        let grid_points = spectra.iter().map(Spectrum::len).sum();
        let repetitions = spectra.iter().map(|s| s.repetitions).sum();
        let lost = found.is_empty();
        logs.push(StageLog { stage: k, c: stage.c, spectra, peaks: found.clone(), grid_points, repetitions });
        if lost {
            aborted = Some(format!("stage {k} (c = {}) lost every peak", stage.c));
            break;
        }
        tracked = found;
    }

    tracked.sort_by(|a, b| a.center.total_cmp(&b.center));
    Ok(AdaptiveResult {
        peaks: tracked,
        total_grid_points: logs.iter().map(|l| l.grid_points).sum(),
        total_repetitions: logs.iter().map(|l| l.repetitions).sum(),
        stages: logs,
        aborted,
    })
}

/// Detects peaks at `fraction` of the spectrum's range and fits them.
pub fn fit_spectrum(spec: &Spectrum, fraction: f64) -> Vec<Peak> {
    let ps = spec.probabilities();
    let max = ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ps.iter().cloned().fold(f64::INFINITY, f64::min);
    let coarse = detect_peaks(spec, fraction * (max - min));
    drop_sidelobes(fit_peaks(spec, &coarse), spec.drive.c)
}

/// Removes maxima low enough to be Rabi sidelobes of a taller line driven
/// at strength `c`. A line of height `h` is bounded away from its centre by
/// the envelope `h / (1 + (d / 2c)^2)`.
pub fn drop_sidelobes(peaks: Vec<Peak>, c: f64) -> Vec<Peak> {
    const MARGIN: f64 = 1.5;
    let keep: Vec<bool> = peaks
        .iter()
        .map(|p| {
            !peaks.iter().any(|q| {
                let x = (p.center - q.center) / (2.0 * c);
                q.amplitude > p.amplitude && p.amplitude <= MARGIN * q.amplitude / (1.0 + x * x)
            })
        })
        .collect();
    peaks.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect()
}

/// Drops peaks closer than half a linewidth to a taller one.
fn dedupe(mut peaks: Vec<Peak>) -> Vec<Peak> {
    peaks.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    let mut kept: Vec<Peak> = Vec::new();
    for p in peaks {
        if kept.iter().all(|q| (q.center - p.center).abs() >= 0.5 * q.fwhm.max(p.fwhm)) {
            kept.push(p);
        }
    }
    kept.sort_by(|a, b| a.center.total_cmp(&b.center));
    kept
}

/// Scans `points` frequencies around `center` and fits the line closest
/// to it. The window spans three expected linewidths on each side, where
/// the expected width is the larger of the power-broadened (`~3.2 c`, times
/// the `2M` echo segments) and the dephasing-broadened (`~2.355 sigma`) value.
pub fn measure_line(
    rho: &DensityMatrix,
    center: f64,
    p: &DriveParams,
    noise: &NoiseModel,
    ev: EvolverKind,
    points: usize,
) -> Result<(Spectrum, Peak)> {
    let segments = (2 * p.echo_order).max(1) as f64;
    let width = (3.2 * p.c * segments).max(FWHM_PER_SIGMA * noise.sigma_delta);
    let grid = linear_grid(center - 3.0 * width, center + 3.0 * width, points);
    let spec = scan_spectrum(rho, p, &grid, noise, ev)?;
    let peak = fit_spectrum(&spec, DEFAULT_PROMINENCE_FRACTION)
        .into_iter()
        .min_by(|a, b| (a.center - center).abs().total_cmp(&(b.center - center).abs()))
        .ok_or_else(|| Error::FitFailed { iterations: 0, reason: format!("no line found near {center}") })?;
    Ok((spec, peak))
}
