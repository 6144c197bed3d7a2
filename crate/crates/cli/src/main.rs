use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pqkd_core::analysis::{
    noise_study_cmd, report_cmd, run_selftest, shot_study_cmd, sweep_cmd, train_pqkd_cmd, train_teacher_cmd, Outcome,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "pqkd", version, about = "Photonic-conditioned knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense teacher CNN.
    TrainTeacher(RunArgs),
    /// Distill a photonic-conditioned student (trains a teacher unless one is configured).
    TrainPqkd(RunArgs),
    /// Compression frontier over scope x rank x dim(theta) x widths.
    Sweep(RunArgs),
    /// Student accuracy under feature corruption and parameter drift.
    NoiseStudy(RunArgs),
    /// Accuracy gain and feature error against the shot budget.
    ShotStudy(RunArgs),
    /// Accounting, bound suite, EMA report and fits for a run directory.
    Report {
        /// Run directory (defaults to --out).
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fast invariant checks.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_parser = ["conv1", "conv12", "all"])]
    scope: Option<String>,
    /// R1[,R2[,R3]]
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long)]
    dim_theta: Option<usize>,
    #[arg(long, value_enum)]
    ema: Option<Switch>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = ["none", "dict", "randz", "fixedtheta"])]
    baseline: Option<String>,
}

/// Failure classes mapped to distinct exit codes.
enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) if !p.is_file() => return Err(Failure::Usage(format!("config file not found: {}", p.display()))),
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let mut o: Vec<(&str, String)> = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seeds", s.to_string()));
        }
        if let Some(p) = &self.out {
            o.push(("out", p.display().to_string()));
        }
        if let Some(s) = self.shots {
            o.push(("shots", s.to_string()));
        }
        if let Some(s) = &self.scope {
            o.push(("scope", s.clone()));
        }
        if let Some(r) = &self.ranks {
            o.push(("ranks", r.clone()));
        }
        if let Some(d) = self.dim_theta {
            o.push(("dim_theta", d.to_string()));
        }
        if let Some(e) = self.ema {
            o.push(("ema", if matches!(e, Switch::On) { "on" } else { "off" }.into()));
        }
        if let Some(g) = self.gamma {
            o.push(("gamma", g.to_string()));
        }
        if let Some(b) = &self.baseline {
            o.push(("baseline", b.clone()));
        }
        cfg.apply(&o).context("invalid option combination")?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Outcome, Failure> {
    let out = match cli.command {
        Command::TrainTeacher(a) => train_teacher_cmd(&a.resolve()?),
        Command::TrainPqkd(a) => train_pqkd_cmd(&a.resolve()?),
        Command::Sweep(a) => sweep_cmd(&a.resolve()?),
        Command::NoiseStudy(a) => noise_study_cmd(&a.resolve()?),
        Command::ShotStudy(a) => shot_study_cmd(&a.resolve()?),
        Command::Report { dir, out } => {
            let dir = dir.or(out).ok_or_else(|| Failure::Usage("report needs a run directory".into()))?;
            report_cmd(&dir)
        }
        Command::Selftest => {
            let checks = run_selftest();
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Failure::Run(anyhow::anyhow!("{failed} of {} checks failed", checks.len())));
            }
            return Ok(Outcome::default());
        }
    };
    Ok(out.map_err(anyhow::Error::from)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for line in outcome.lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
