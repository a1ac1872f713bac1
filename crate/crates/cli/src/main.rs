//! `metriccalc`: run calculus pipelines on finite metric measure spaces
//! from a JSON config.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Config {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Calc(#[from] metriccalc::Error),
}

#[derive(Parser, Debug)]
#[command(
    name = "metriccalc",
    version,
    about = "First-order calculus on finite metric measure spaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: the config's `out`, else `.`].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Relative rank tolerance.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Scale ladder as `r0:ratio:floor`.
    #[arg(long, global = true)]
    ladder: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Summarise the space: size, diameter, doubling profile, ladder.
    Space,
    /// Lipschitz profiles of the fields.
    Lip,
    /// Apply derivations to the fields; Leibniz and operator-norm checks.
    Derive,
    /// Rank stratification of the derivations against the generators.
    Stratify,
    /// Build an atlas from the generators; partial derivatives of the fields.
    Atlas,
    /// Derivation inequalities over the field corpus.
    CheckIneq,
    /// Sobolev norms of the fields.
    Sobolev,
    /// Independence of the fields against the number of derivations.
    ProbeDim,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Space => "space",
            Command::Lip => "lip",
            Command::Derive => "derive",
            Command::Stratify => "stratify",
            Command::Atlas => "atlas",
            Command::CheckIneq => "check-ineq",
            Command::Sobolev => "sobolev",
            Command::ProbeDim => "probe-dim",
        }
    }
}

fn load(cli: &Cli) -> Result<(RunConfig, PathBuf), CliError> {
    let path = cli
        .config
        .clone()
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let text = fs::read_to_string(&path).map_err(|source| CliError::Read {
        path: path.clone(),
        source,
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| CliError::Config {
        path: path.clone(),
        source,
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = cli.tau {
        cfg.thresholds.tau = tau;
    }
    if let Some(ladder) = &cli.ladder {
        cfg.ladder = Some(ladder.clone());
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Write { path, source })
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let (cfg, base) = load(cli)?;
    let ctx = cfg.context(&base)?;
    let outcome = match cli.command {
        Command::Space => commands::space(&cfg, &ctx),
        Command::Lip => commands::lip(&cfg, &ctx),
        Command::Derive => commands::derive(&cfg, &ctx),
        Command::Stratify => commands::stratify(&cfg, &ctx),
        Command::Atlas => commands::atlas(&cfg, &ctx),
        Command::CheckIneq => commands::check_ineq(&cfg, &ctx),
        Command::Sobolev => commands::sobolev(&cfg, &ctx),
        Command::ProbeDim => commands::probe_dim(&cfg, &ctx),
    }?;

    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|source| CliError::Write {
        path: dir.clone(),
        source,
    })?;
    for a in &outcome.artifacts {
        write(&dir, &a.name, &a.contents)?;
    }
    let run = json!({
        "subcommand": cli.command.name(),
        "config": cfg,
        "resolved": {
            "points": ctx.space.len(),
            "ladder": ctx.calc.ladder().radii(),
            "derivations": ctx.derivations.len(),
            "generators": ctx.generators.len(),
            "fields": ctx.fields.len(),
        },
        "artifacts": outcome.artifacts.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(),
    });
    write(
        &dir,
        "run.json",
        &(serde_json::to_string_pretty(&run)? + "\n"),
    )?;
    let violated = !outcome.violations.is_empty();
    if violated {
        let text =
            serde_json::to_string_pretty(&json!({ "violations": outcome.violations }))? + "\n";
        write(&dir, "violations.json", &text)?;
        eprintln!(
            "{}: {} invariant violation(s), see {}",
            cli.command.name(),
            outcome.violations.len(),
            dir.join("violations.json").display()
        );
    }
    Ok(violated)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
