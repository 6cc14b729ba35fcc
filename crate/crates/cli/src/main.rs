//! `franson`: experiment runner for the Franson interferometer simulator.
//!
//! Every config key is also a flag (`--delta_L_mm 45`), applied on top of the
//! config file. Exit codes: 0 ok, 1 other failure, 2 config error, 3 regime
//! violation, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Args, FromArgMatches, Parser, Subcommand, ValueEnum};
use franson::analysis::{ChshTerm, FringeScan, ScanVariable};
use franson::config::{ConfigError, ExperimentConfig, CONFIG_KEYS};
use franson::io::{self, IoError};
use franson::pipeline::{self, CoincidenceSummary, PipelineError};
use serde_json::json;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_REGIME: u8 = 3;
const EXIT_IO: u8 = 4;

const COINCIDENCE_FILE: &str = "coincidences.json";
const HISTOGRAM_FILE: &str = "histogram.csv";

#[derive(Parser)]
#[command(name = "franson", version, about = "Franson interferometer simulator")]
struct Cli {
    /// Config file (flat TOML).
    #[arg(long, env = "FRANSON_CONFIG", global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and print the regime report as JSON.
    Validate,
    /// Simulate one run and write the four tag files plus a manifest.
    Simulate {
        /// Run directory; defaults to <output_dir>/run or <output_dir>/chsh_<term>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Simulate one CHSH setting of the configured analyzer angles.
        #[arg(long, value_enum)]
        chsh_term: Option<Term>,
    },
    /// Count coincidences in a simulated run directory.
    Coincide {
        /// Run directory written by `simulate`.
        run: PathBuf,
        /// Where to write the summary and histogram; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a phase and write per-point rates as CSV.
    Scan {
        /// Closed-form probabilities (the default).
        #[arg(long, conflicts_with = "event")]
        analytic: bool,
        /// Event-mode Monte Carlo counts; also writes the scan as JSON.
        #[arg(long)]
        event: bool,
        /// Scan φ_A + φ_B.
        #[arg(long, group = "variable")]
        joint: bool,
        /// Scan φ_A = φ_B.
        #[arg(long, group = "variable")]
        synchronized: bool,
        #[arg(long, group = "variable")]
        phi_a: bool,
        #[arg(long, group = "variable")]
        phi_b: bool,
        /// CSV path; defaults to <output_dir>/scan_<mode>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CHSH parameter, in process or from four coincidence summaries.
    Chsh {
        /// Coincidence summaries (or run directories holding one), one per setting.
        #[arg(long, num_args = 4)]
        from: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic expectations against an event-mode scan.
    Compare {
        /// Scan JSON from `scan --event`; simulated in process when absent.
        #[arg(long)]
        mc: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Term {
    Ab,
    AbPrime,
    APrimeB,
    APrimeBPrime,
}

impl From<Term> for ChshTerm {
    fn from(t: Term) -> Self {
        match t {
            Term::Ab => ChshTerm::AB,
            Term::AbPrime => ChshTerm::ABPrime,
            Term::APrimeB => ChshTerm::APrimeB,
            Term::APrimeBPrime => ChshTerm::APrimeBPrime,
        }
    }
}

/// One `--<key> VALUE` flag per config key.
#[derive(Default)]
struct Overrides(Vec<(&'static str, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = Overrides::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        for &key in CONFIG_KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.0.push((key, v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        CONFIG_KEYS.iter().fold(cmd, |cmd, &key| {
            cmd.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .global(true)
                    .allow_hyphen_values(true)
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::default(),
    };
    for (key, value) in &cli.overrides.0 {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    match out {
        Some(path) => {
            ensure_parent(path)?;
            io::write_json(path, value)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{}", io::to_json_string(value)),
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(COINCIDENCE_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    match cli.command {
        Command::Validate => {
            let report = pipeline::regime_report(&cfg)?;
            emit(
                None,
                &json!({
                    "config_hash": cfg.config_hash(),
                    "tau_ps": cfg.tau_ps(),
                    "regime": report,
                    "all_conditions_hold": report.all_conditions_hold(),
                }),
            )?;
            if !report.event_mode_permitted {
                return Ok(EXIT_REGIME);
            }
        }
        Command::Simulate { out, chsh_term } => {
            let (manifest, default_dir) = match chsh_term {
                Some(t) => {
                    let term = ChshTerm::from(t);
                    let name = format!("chsh_{}", t.to_possible_value().unwrap().get_name());
                    (pipeline::chsh_manifest(&cfg, term), out_dir.join(name))
                }
                None => (pipeline::run_manifest(&cfg), out_dir.join("run")),
            };
            let dir = out.unwrap_or(default_dir);
            let sim = pipeline::simulate(manifest)?;
            io::write_run(&dir, sim.manifest, &sim.streams)?;
            let counts: Vec<usize> = sim.streams.iter().map(|s| s.len()).collect();
            eprintln!("wrote {} (tags per channel {counts:?})", dir.display());
        }
        Command::Coincide { run, out } => {
            let loaded = io::read_run(&run)?;
            let summary = pipeline::coincide(&loaded.manifest, &loaded.streams)?;
            let dir = out.unwrap_or(run);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            io::write_histogram_csv(&dir.join(HISTOGRAM_FILE), &summary.histogram, &summary.config_hash)?;
            emit(Some(&dir.join(COINCIDENCE_FILE)), &summary)?;
        }
        Command::Scan {
            analytic: _,
            event,
            joint,
            synchronized,
            phi_a,
            phi_b,
            out,
        } => {
            let mut cfg = cfg;
            for (flag, var) in [
                (joint, ScanVariable::Joint),
                (synchronized, ScanVariable::Synchronized),
                (phi_a, ScanVariable::PhiA),
                (phi_b, ScanVariable::PhiB),
            ] {
                if flag {
                    cfg.scan_variable = var;
                }
            }
            let mode = if event { "event" } else { "analytic" };
            let path = out.unwrap_or_else(|| out_dir.join(format!("scan_{mode}.csv")));
            ensure_parent(&path)?;
            let hash = cfg.config_hash();
            if event {
                let scan = pipeline::scan_event(&cfg)?;
                io::write_table_csv(&path, &hash, pipeline::EVENT_COLUMNS, &pipeline::event_table(&scan))?;
                let json_path = path.with_extension("json");
                io::write_json(&json_path, &scan)?;
                eprintln!("wrote {}", json_path.display());
            } else {
                io::write_table_csv(&path, &hash, pipeline::ANALYTIC_COLUMNS, &pipeline::analytic_table(&cfg)?)?;
            }
            eprintln!("wrote {}", path.display());
        }
        Command::Chsh { from, out } => {
            let report = if from.is_empty() {
                pipeline::chsh(&cfg)?.0
            } else {
                let summaries = from
                    .iter()
                    .map(|p| Ok(io::read_json::<CoincidenceSummary>(&summary_path(p))?))
                    .collect::<Result<Vec<_>>>()?;
                pipeline::chsh_from_summaries(&cfg, &summaries)?
            };
            emit(out.as_deref(), &report)?;
        }
        Command::Compare { mc, out } => {
            let scan: FringeScan = match mc {
                Some(p) => io::read_json(&p)?,
                None => pipeline::scan_event(&cfg)?,
            };
            let report = pipeline::compare(&cfg, &scan)?;
            emit(out.as_deref(), &report)?;
            if !report.all_consistent() {
                eprintln!("{} of {} rows exceed |z| = {}", report.flagged, report.rows.len(), franson::analysis::Z_FLAG);
            }
        }
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    if err.downcast_ref::<IoError>().is_some() || err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_IO;
    }
    match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::Config(_)) => EXIT_CONFIG,
        Some(e) if e.is_regime_violation() => EXIT_REGIME,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
