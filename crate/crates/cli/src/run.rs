//! Command bodies. Each returns the complete set of files to write; nothing
//! touches the disk until the computation has finished.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use rqpca::distill::{distill as run_distill, DistillReport};
use rqpca::model::{DensityMatrixDoc, NoiseModel, FORMAT_VERSION};
use rqpca::nvmap::{simulate_preparation, LaserParams};
use rqpca::scan::{adaptive_scan, fmt_sig, linear_grid, scan_spectrum, Peak};
use rqpca::study::{dd_csv, dd_study as run_dd_study};
use rqpca::Error;

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::FitFailed { .. } | Error::NoConvergence { .. } | Error::NoTransfer { .. } | Error::Unattainable(_) => {
                Failure::Numerical(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl Failure {
    fn parts(&self) -> (&'static str, u8, &str) {
        match self {
            Failure::Config(m) => ("config", 2, m),
            Failure::Numerical(m) => ("numerical", 3, m),
            Failure::Io(m) => ("io", 2, m),
        }
    }

    /// Prints one JSON line on stderr and yields the exit code.
    pub fn report(&self) -> ExitCode {
        let (kind, code, message) = self.parts();
        eprintln!("{}", json!({ "error": kind, "code": code, "message": message }));
        ExitCode::from(code)
    }
}

pub struct Output {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
    /// Files are still written, but the run exits with this failure.
    pub flag: Option<Failure>,
}

impl Output {
    fn new(cfg: &RunConfig) -> Self {
        Output { dir: cfg.output_dir.clone(), files: Vec::new(), flag: None }
    }

    fn text(&mut self, name: impl Into<String>, body: String) {
        self.files.push((name.into(), body.into_bytes()));
    }

    fn json(&mut self, name: impl Into<String>, value: &impl Serialize) {
        let mut body = serde_json::to_string_pretty(value).expect("serializable");
        body.push('\n');
        self.text(name, body);
    }

    fn meta(&mut self, command: &str, cfg: &RunConfig, started: Instant, noise: Option<&NoiseModel>, extra: Value) {
        let mut echoed = cfg.clone();
        let mut prov = json!({
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "wall_time_s": started.elapsed().as_secs_f64(),
            "seed": cfg.seed,
            "evolver": cfg.evolver,
            "resolved_nv": cfg.nv_params().ok(),
        });
        if let Some(n) = noise {
            prov["resolved_noise"] = json!(n);
        }
        if let (Value::Object(p), Value::Object(e)) = (&mut prov, extra) {
            p.extend(e);
        }
        echoed.provenance = Some(prov);
        self.json(format!("{command}.meta.json"), &echoed);
    }

    /// Writes every file through a temporary name and a rename.
    pub fn write(&self) -> Result<(), Failure> {
        let io = |e: std::io::Error, what: &str| Failure::Io(format!("{what}: {e}"));
        fs::create_dir_all(&self.dir).map_err(|e| io(e, &self.dir.display().to_string()))?;
        for (name, body) in &self.files {
            let tmp = self.dir.join(format!(".{name}.tmp"));
            fs::write(&tmp, body).map_err(|e| io(e, &tmp.display().to_string()))?;
            fs::rename(&tmp, self.dir.join(name)).map_err(|e| io(e, name))?;
        }
        Ok(())
    }
}

/// Config as embedded in data files: resolved, without run provenance.
fn embedded(cfg: &RunConfig) -> RunConfig {
    RunConfig { provenance: None, ..cfg.clone() }
}

pub fn spectrum(mut cfg: RunConfig) -> Result<Output, Failure> {
    let started = Instant::now();
    let rho = cfg.rho()?;
    cfg.resolve_omega(&rho)?;
    let s = cfg.spectrum;
    if s.points == 0 {
        return Err(Failure::Config("spectrum.points must be at least 1".into()));
    }
    let ordered = s.omega_min.is_finite() && s.omega_max.is_finite() && s.omega_min <= s.omega_max;
    if !ordered || (s.points > 1 && s.omega_min == s.omega_max) {
        return Err(Failure::Config("spectrum range must satisfy omega_min < omega_max".into()));
    }
    let p = cfg.drive()?;
    let noise = cfg.noise_model(p.c)?;
    let grid = linear_grid(s.omega_min, s.omega_max, s.points);
    let spec = scan_spectrum(&rho, &p, &grid, &noise, cfg.evolver)?;

    let mut out = Output::new(&cfg);
    out.text("spectrum.csv", spec.to_csv());
    out.meta("spectrum", &cfg, started, Some(&noise), json!({ "repetitions": spec.repetitions }));
    Ok(out)
}

fn stage_csv(spectra: &[rqpca::scan::Spectrum]) -> String {
    let mut body = String::from("window,omega,p_success,std_error\n");
    for (w, s) in spectra.iter().enumerate() {
        for pt in &s.points {
            body.push_str(&format!("{w},{},{},{}\n", fmt_sig(pt.omega), fmt_sig(pt.p_success), fmt_sig(pt.std_error)));
        }
    }
    body
}

pub fn adaptive(mut cfg: RunConfig) -> Result<Output, Failure> {
    let started = Instant::now();
    let rho = cfg.rho()?;
    cfg.resolve_omega(&rho)?;
    cfg.adaptive.validate()?;
    let base = cfg.drive()?;
    let c_min = cfg.adaptive.stages.iter().map(|s| s.c).fold(f64::INFINITY, f64::min);
    let noise = cfg.noise_model(c_min)?;
    let result = adaptive_scan(&rho, &cfg.adaptive, &base, &noise, cfg.evolver)?;

    let mut out = Output::new(&cfg);
    for log in &result.stages {
        out.text(format!("stage_{}.csv", log.stage), stage_csv(&log.spectra));
    }
    #[derive(Serialize)]
    struct PeaksDoc<'a> {
        format_version: u32,
        config: RunConfig,
        peaks: &'a [Peak],
        aborted: &'a Option<String>,
    }
    out.json(
        "peaks.json",
        &PeaksDoc { format_version: FORMAT_VERSION, config: embedded(&cfg), peaks: &result.peaks, aborted: &result.aborted },
    );
    let stages: Vec<Value> = result
        .stages
        .iter()
        .map(|l| json!({ "stage": l.stage, "c": l.c, "windows": l.spectra.len(), "peaks": l.peaks.len(), "grid_points": l.grid_points, "repetitions": l.repetitions }))
        .collect();
    out.json(
        "summary.json",
        &json!({
            "format_version": FORMAT_VERSION,
            "config": embedded(&cfg),
            "stages": stages,
            "total_grid_points": result.total_grid_points,
            "total_repetitions": result.total_repetitions,
            "aborted": result.aborted,
        }),
    );
    out.meta("adaptive", &cfg, started, Some(&noise), json!({ "aborted": result.aborted }));
    if let Some(reason) = &result.aborted {
        out.flag = Some(Failure::Numerical(format!("adaptive scan stopped early: {reason}")));
    }
    Ok(out)
}

pub fn distill(mut cfg: RunConfig) -> Result<Output, Failure> {
    let started = Instant::now();
    let rho = cfg.rho()?;
    cfg.resolve_omega(&rho)?;
    if cfg.distill.omega.is_none() {
        cfg.distill.omega = cfg.drive.omega;
    }
    let omega = cfg.distill.omega.expect("resolved");
    let p = cfg.drive()?;
    let noise = cfg.noise_model(p.c)?;
    let report = run_distill(&rho, omega, &p, &noise, cfg.evolver)?;

    let mut out = Output::new(&cfg);
    #[derive(Serialize)]
    struct DistillDoc<'a> {
        format_version: u32,
        config: RunConfig,
        #[serde(flatten)]
        report: &'a DistillReport,
    }
    out.json("distill.json", &DistillDoc { format_version: FORMAT_VERSION, config: embedded(&cfg), report: &report });
    out.text("populations.csv", report.populations_csv());
    out.meta("distill", &cfg, started, Some(&noise), json!({ "no_transfer": report.no_transfer }));
    if report.no_transfer {
        out.flag = Some(Failure::Numerical(format!("no-transfer: probe |1> probability {:e}", report.success_probability)));
    }
    Ok(out)
}

pub fn dd_study(mut cfg: RunConfig) -> Result<Output, Failure> {
    let started = Instant::now();
    let rho = cfg.rho()?;
    cfg.resolve_omega(&rho)?;
    let sigma = cfg.sigma_delta()?;
    let rows = run_dd_study(&rho, sigma, &cfg.dd_study.c_list, &cfg.dd_study.m_list, cfg.evolver)?;

    let mut out = Output::new(&cfg);
    out.text("ddstudy.csv", dd_csv(&rows));
    out.meta("ddstudy", &cfg, started, None, json!({ "sigma_delta": sigma }));
    Ok(out)
}

pub fn prep(cfg: RunConfig) -> Result<Output, Failure> {
    let started = Instant::now();
    let laser: Option<LaserParams> = if cfg.prep.laser { Some(cfg.laser.resolve()?) } else { None };
    let log = simulate_preparation(cfg.prep.theta1, cfg.prep.theta2, laser.as_ref())?;

    let mut out = Output::new(&cfg);
    #[derive(Serialize)]
    struct PrepDoc {
        format_version: u32,
        config: RunConfig,
        laser: Option<LaserParams>,
        initial: DensityMatrixDoc,
        after_rotations: DensityMatrixDoc,
        after_laser: DensityMatrixDoc,
        final_state: DensityMatrixDoc,
        fidelity: f64,
    }
    out.json(
        "prep.json",
        &PrepDoc {
            format_version: FORMAT_VERSION,
            config: embedded(&cfg),
            laser,
            initial: log.initial.to_doc(),
            after_rotations: log.after_rotations.to_doc(),
            after_laser: log.after_laser.to_doc(),
            final_state: log.final_state.to_doc(),
            fidelity: log.fidelity,
        },
    );
    out.meta("prep", &cfg, started, None, json!({ "fidelity": log.fidelity }));
    Ok(out)
}
