//! `privatefind`: manufacture finders, run scenario scripts, audit transcripts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use privatefind::manufacture::{manufacture, write_batch};
use privatefind::scenario::{
    audit_transcript, bundled, run, run_with_log, Overrides, Scenario, BUNDLED, EXIT_AUDIT,
    EXIT_OK, EXIT_PARSE,
};
use privatefind::server::{ManufacturerRegistry, TokenPolicy};
use privatefind::transport::Transcript;

const EXIT_IO: u8 = 1;

#[derive(Parser)]
#[command(
    name = "privatefind",
    version,
    about = "Private crowd-sourced finder protocol simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Provision finders and write the server registry.
    Manufacture {
        #[arg(long, default_value_t = 1)]
        count: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Registry output (JSON lines).
        #[arg(long, default_value = "registry.jsonl")]
        registry: PathBuf,
        /// Directory for per-finder provisioning records.
        #[arg(long, default_value = "finders")]
        out: PathBuf,
    },
    /// Run a scenario script (a path, or the name of a bundled scenario).
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        epoch_ms: Option<u64>,
        /// Server registry; provisioned finders take their identities from it.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Directory for the transcript and summary.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_parser = parse_policy)]
        token_policy: Option<TokenPolicy>,
        #[arg(long, value_enum)]
        mac_randomization: Option<OnOff>,
        #[arg(long, value_parser = parse_prob)]
        drop_prob: Option<f64>,
        /// Persist server state to this event log.
        #[arg(long)]
        server_log: Option<PathBuf>,
    },
    /// Check a transcript for plaintext locations and non-anonymous uploads.
    Audit {
        transcript: PathBuf,
        scenario: String,
    },
    /// List bundled scenarios.
    Scenarios,
}

fn parse_policy(s: &str) -> Result<TokenPolicy, String> {
    s.parse()
}

fn parse_prob(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(p) if (0.0..=1.0).contains(&p) => Ok(p),
        _ => Err(format!("{s:?} is not a probability")),
    }
}

enum Failure {
    Io(String),
    Parse(String),
}

fn load_scenario(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    let text = if path.exists() {
        fs::read_to_string(path).map_err(|e| Failure::Io(format!("{arg}: {e}")))?
    } else if let Some(text) = bundled(arg) {
        text.to_string()
    } else {
        return Err(Failure::Parse(format!(
            "{arg}: no such file or bundled scenario"
        )));
    };
    Scenario::parse(&text).map_err(|e| Failure::Parse(format!("{arg}: {e}")))
}

fn cmd_manufacture(count: u32, seed: u64, registry: &Path, out: &Path) -> Result<u8, Failure> {
    let records = manufacture(count, seed);
    let paths = write_batch(&records, registry, out).map_err(|e| Failure::Io(e.to_string()))?;
    println!("registry {} entries {}", registry.display(), records.len());
    for (r, p) in records.iter().zip(&paths) {
        println!(
            "finder {} id_init {} {}",
            r.serial,
            r.id_init.to_hex(),
            p.display()
        );
    }
    Ok(EXIT_OK as u8)
}

fn cmd_run(
    scenario: &str,
    overrides: Overrides,
    registry: Option<&Path>,
    out: &Path,
    server_log: Option<&Path>,
) -> Result<u8, Failure> {
    let mut sc = load_scenario(scenario)?;
    sc.apply(&overrides);
    let registry = match registry {
        Some(p) => Some(ManufacturerRegistry::load(p).map_err(|e| Failure::Parse(e.to_string()))?),
        None => None,
    };
    let outcome = match server_log {
        Some(log) => run_with_log(&sc, registry, log).map_err(|e| Failure::Io(e.to_string()))?,
        None => run(&sc, registry),
    };
    fs::create_dir_all(out).map_err(|e| Failure::Io(e.to_string()))?;
    let transcript_path = out.join(format!("{}.transcript.jsonl", sc.name));
    outcome
        .transcript
        .write_to(&transcript_path)
        .map_err(|e| Failure::Io(e.to_string()))?;
    let summary = outcome.summary.to_string();
    fs::write(
        out.join(format!("{}.summary.txt", sc.name)),
        summary.clone() + "\n",
    )
    .map_err(|e| Failure::Io(e.to_string()))?;
    println!("{summary}");
    println!("transcript {}", transcript_path.display());
    Ok(outcome.summary.exit_code() as u8)
}

fn cmd_audit(transcript: &Path, scenario: &str) -> Result<u8, Failure> {
    let sc = load_scenario(scenario)?;
    let t = Transcript::read_from(transcript)
        .map_err(|e| Failure::Parse(format!("{}: {e}", transcript.display())))?;
    let report = audit_transcript(&t, &sc);
    println!("{report}");
    Ok(if report.passed() { EXIT_OK } else { EXIT_AUDIT } as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_PARSE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Manufacture {
            count,
            seed,
            registry,
            out,
        } => cmd_manufacture(count, seed, &registry, &out),
        Command::Run {
            scenario,
            seed,
            epoch_ms,
            registry,
            out,
            token_policy,
            mac_randomization,
            drop_prob,
            server_log,
        } => {
            let overrides = Overrides {
                seed,
                epoch_ms,
                token_policy,
                mac_randomization: mac_randomization.map(|v| matches!(v, OnOff::On)),
                drop_prob,
            };
            cmd_run(
                &scenario,
                overrides,
                registry.as_deref(),
                &out,
                server_log.as_deref(),
            )
        }
        Command::Audit {
            transcript,
            scenario,
        } => cmd_audit(&transcript, &scenario),
        Command::Scenarios => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            Ok(EXIT_OK as u8)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_IO)
        }
        Err(Failure::Parse(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_PARSE as u8)
        }
    }
}
