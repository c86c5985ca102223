mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rqpca::engine::EvolverKind;

use crate::config::RunConfig;
use crate::run::Failure;

#[derive(Debug, Parser)]
#[command(name = "rqpca", version, about = "Resonant principal-component analysis simulator")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration (a meta file from an earlier run also works)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for Monte-Carlo averaging and shot noise
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// exact | trotter:N | dme:N
    #[arg(long, global = true)]
    evolver: Option<EvolverKind>,

    /// Echo order M (2M pi pulses)
    #[arg(long, global = true)]
    echo: Option<u32>,

    /// Binomial readout with this many shots per point
    #[arg(long, global = true)]
    shots: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Success probability over a uniform frequency grid
    Spectrum {
        #[arg(long, allow_hyphen_values = true)]
        omega_min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        omega_max: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Multi-stage zoom onto every eigenvalue
    Adaptive {
        /// JSON stage schedule
        #[arg(long)]
        stages: Option<PathBuf>,
    },
    /// One distillation round at a fixed probe frequency
    Distill {
        #[arg(long, allow_hyphen_values = true)]
        omega: Option<f64>,
    },
    /// Line height and width over a grid of drive strengths and echo orders
    DdStudy {
        /// Comma-separated drive strengths
        #[arg(long, value_delimiter = ',')]
        c_list: Option<Vec<f64>>,
        /// Comma-separated echo orders
        #[arg(long, value_delimiter = ',')]
        m_list: Option<Vec<u32>>,
    },
    /// Register preparation pipeline
    Prep {
        #[arg(long, allow_hyphen_values = true)]
        theta1: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        theta2: Option<f64>,
        /// Skip the laser channel
        #[arg(long)]
        no_laser: bool,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.output {
        cfg.output_dir = o.clone();
    }
    if let Some(e) = g.evolver {
        cfg.evolver = e;
    }
    if let Some(m) = g.echo {
        cfg.drive.echo_order = m;
    }
    if let Some(n) = g.shots {
        cfg.shots = Some(n);
    }
    match &cli.command {
        Command::Spectrum { omega_min, omega_max, points } => {
            let s = &mut cfg.spectrum;
            s.omega_min = omega_min.unwrap_or(s.omega_min);
            s.omega_max = omega_max.unwrap_or(s.omega_max);
            s.points = points.unwrap_or(s.points);
        }
        Command::Adaptive { stages: Some(path) } => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            cfg.adaptive = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        }
        Command::Adaptive { stages: None } => {}
        Command::Distill { omega } => {
            if omega.is_some() {
                cfg.distill.omega = *omega;
            }
        }
        Command::DdStudy { c_list, m_list } => {
            if let Some(c) = c_list {
                cfg.dd_study.c_list = c.clone();
            }
            if let Some(m) = m_list {
                cfg.dd_study.m_list = m.clone();
            }
        }
        Command::Prep { theta1, theta2, no_laser } => {
            cfg.prep.theta1 = theta1.unwrap_or(cfg.prep.theta1);
            cfg.prep.theta2 = theta2.unwrap_or(cfg.prep.theta2);
            if *no_laser {
                cfg.prep.laser = false;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Option<Failure>, Failure> {
    let cfg = build_config(cli)?;
    let out = match cli.command {
        Command::Spectrum { .. } => run::spectrum(cfg)?,
        Command::Adaptive { .. } => run::adaptive(cfg)?,
        Command::Distill { .. } => run::distill(cfg)?,
        Command::DdStudy { .. } => run::dd_study(cfg)?,
        Command::Prep { .. } => run::prep(cfg)?,
    };
    out.write()?;
    Ok(out.flag)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return Failure::Config(if detail.is_empty() { msg } else { detail }).report();
        }
    };
    match execute(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(flag)) | Err(flag) => flag.report(),
    }
}
