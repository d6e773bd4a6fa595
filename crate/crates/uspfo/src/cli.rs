//! `uspfo` command line: boot services, register clients, run flows and
//! attacks, and report metrics.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use serde_json::json;
use uspfo_core::{Algorithm, JwkSet, SigningKeyPair};

use crate::attack::{builtin_scenarios, find_scenario, run_catalog};
use crate::client::{ClientConfig, ReferenceClient};
use crate::clock::{Clock, SystemClock};
use crate::http::HttpTransport;
use crate::registry::{ClientRegistry, ClientType, RedirectPolicy, Registration};
use crate::report::{instrument_flow, FlowReport};
use crate::stack::{ServiceStack, StackOptions, Ttls};

#[derive(Debug, Parser)]
#[command(name = "uspfo", version, about = "Unified single-flow OAuth reference services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve all three services on one address.
    Serve {
        #[arg(long, default_value = "fixtures")]
        fixtures: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long = "ttl-override", value_name = "KEY=SECONDS")]
        ttl_override: Vec<String>,
        /// Directory for per-service audit logs.
        #[arg(long)]
        audit_dir: Option<PathBuf>,
    },
    /// Add a client to a registry file.
    Register {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long = "type", default_value = "unified")]
        client_type: ClientType,
        #[arg(long)]
        redirect_uri: String,
        #[arg(long)]
        assertion_verification_uri: Option<String>,
        /// JWK Set file with the client's public keys.
        #[arg(long)]
        backup_jwks: Option<PathBuf>,
        /// Accept http://localhost redirect URIs.
        #[arg(long)]
        allow_loopback: bool,
    },
    /// Run the reference client once.
    Flow(FlowArgs),
    /// Run adversary scenarios.
    Attack {
        #[command(subcommand)]
        command: AttackCommand,
    },
    /// Recompute metrics from a saved flow report.
    Metrics {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        table: bool,
    },
    /// Generate a JWK Set with private keys, one per `KID:ALG`.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "key", value_name = "KID:ALG", required = true)]
        keys: Vec<String>,
    },
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Run against a stack built in this process (the default).
    #[arg(long, conflicts_with = "bind")]
    in_process: bool,
    /// Address of a running `uspfo serve`.
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    auto_consent: bool,
    #[arg(long = "ttl-override", value_name = "KEY=SECONDS")]
    ttl_override: Vec<String>,
    /// Fixtures for the in-process stack; defaults to the config's directory.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    table: bool,
}

#[derive(Debug, Subcommand)]
enum AttackCommand {
    /// List the built-in scenarios.
    List,
    Run {
        #[arg(long)]
        scenario: Option<String>,
        /// Write one JSON result per line.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        concurrent: bool,
        #[arg(long, default_value = "fixtures")]
        fixtures: PathBuf,
    },
}

/// An error that ends the command with exit status 1.
struct Failure {
    code: String,
    message: String,
}

impl Failure {
    fn new(code: &str, message: impl std::fmt::Display) -> Self {
        Failure {
            code: code.to_string(),
            message: message.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new("IoError", format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn ttls(overrides: &[String]) -> Result<Ttls, Failure> {
    let mut ttls = Ttls::default();
    for o in overrides {
        ttls.apply_override(o).map_err(|e| Failure::new(e.code(), e))?;
    }
    Ok(ttls)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": "UsageError", "error_description": message.trim() }));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.code, "error_description": f.message }));
            1
        }
    }
}

fn run(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Serve {
            fixtures,
            bind,
            ttl_override,
            audit_dir,
        } => {
            let options = StackOptions {
                ttls: ttls(&ttl_override)?,
                audit_dir,
                ..StackOptions::default()
            };
            let stack = ServiceStack::from_fixtures(&fixtures, options).map_err(|e| Failure::new(e.code(), e))?;
            crate::server::serve_forever(stack.network.clone(), &bind, |addr| {
                eprintln!("{}", json!({ "listening": addr.to_string() }));
            })
            .map_err(|e| Failure::new("IoError", e))?;
            Ok(0)
        }
        Command::Register {
            registry,
            client_type,
            redirect_uri,
            assertion_verification_uri,
            backup_jwks,
            allow_loopback,
        } => {
            let policy = RedirectPolicy {
                allow_loopback_http: allow_loopback,
            };
            let store = ClientRegistry::open(&registry, policy, Arc::new(SystemClock))
                .map_err(|e| Failure::new(crate::http::WireError::code(&e), e))?;
            let backup_jwks = match backup_jwks {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
                    Some(serde_json::from_str::<JwkSet>(&text).map_err(|e| Failure::new("InvalidRecord", e))?)
                }
                None => None,
            };
            let record = store
                .register_client(Registration {
                    client_type,
                    redirect_uri,
                    assertion_verification_uri,
                    backup_jwks,
                })
                .map_err(|e| Failure::new(crate::http::WireError::code(&e), e))?;
            println!("{}", serde_json::to_string_pretty(&record).expect("record serializes"));
            Ok(0)
        }
        Command::Flow(args) => flow(args),
        Command::Attack { command } => attack(command),
        Command::Metrics { report, table } => {
            let text = std::fs::read_to_string(&report).map_err(|e| io_failure(&report, e))?;
            let report: FlowReport = serde_json::from_str(&text).map_err(|e| Failure::new("IncompleteReport", e))?;
            let metrics = instrument_flow(&report).map_err(|e| Failure::new("IncompleteReport", e))?;
            if table {
                print!("{}", metrics.to_table());
            } else {
                println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
            }
            Ok(0)
        }
        Command::Keygen { out, keys } => {
            let mut generated = Vec::new();
            for spec in &keys {
                let (kid, alg) = spec
                    .rsplit_once(':')
                    .ok_or_else(|| Failure::new("UsageError", format!("`{spec}` is not KID:ALG")))?;
                let alg = Algorithm::from_name(alg).map_err(|e| Failure::new("UsageError", e))?;
                let key = SigningKeyPair::generate(alg, kid, &mut OsRng).map_err(|e| Failure::new("KeyError", e))?;
                generated.push(key.private_jwk());
            }
            let set = JwkSet::new(generated);
            write_file(&out, &serde_json::to_string_pretty(&set).expect("jwks serializes"))?;
            Ok(0)
        }
    }
}

fn flow(args: FlowArgs) -> Result<i32, Failure> {
    let mut config = ClientConfig::load(&args.config).map_err(|e| Failure::new("ConfigInvalid", e))?;
    if args.auto_consent {
        config.auto_consent = true;
    }
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    // The stack must outlive the client in in-process mode.
    let (_stack, mut client) = match &args.bind {
        Some(addr) => {
            let client = ReferenceClient::from_config(config, Arc::new(HttpTransport::new(addr)), clock)
                .map_err(|e| Failure::new("ConfigInvalid", e))?;
            (None, client)
        }
        None => {
            let fixtures = match &args.fixtures {
                Some(dir) => dir.clone(),
                None => args
                    .config
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let options = StackOptions {
                ttls: ttls(&args.ttl_override)?,
                ..StackOptions::default()
            };
            let stack = ServiceStack::from_fixtures(&fixtures, options).map_err(|e| Failure::new(e.code(), e))?;
            let client = stack.client_for(config).map_err(|e| Failure::new(e.code(), e))?;
            (Some(stack), client)
        }
    };
    let (report, error) = match client.run_flow() {
        Ok(report) => (report, None),
        Err(failure) => (*failure.report, Some(failure.error)),
    };
    if let Some(path) = &args.report {
        write_file(path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    if let Some(e) = error {
        return Err(Failure::new(&e.code, format!("step {}: {}", e.step, e.message)));
    }
    let metrics = instrument_flow(&report).map_err(|e| Failure::new("IncompleteReport", e))?;
    if args.table {
        print!("{}", metrics.to_table());
    } else {
        println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    }
    Ok(0)
}

fn attack(command: AttackCommand) -> Result<i32, Failure> {
    match command {
        AttackCommand::List => {
            for s in builtin_scenarios() {
                println!("{}", serde_json::to_string(&s).expect("scenario serializes"));
            }
            Ok(0)
        }
        AttackCommand::Run {
            scenario,
            report,
            concurrent,
            fixtures,
        } => {
            let scenarios = match scenario {
                Some(name) => vec![find_scenario(&name).map_err(|e| Failure::new(e.code(), e))?],
                None => builtin_scenarios(),
            };
            let mut sink = match &report {
                Some(path) => Some(File::create(path).map_err(|e| io_failure(path, e))?),
                None => None,
            };
            let mut all_passed = true;
            for result in run_catalog(&scenarios, &fixtures, concurrent) {
                let result = result.map_err(|e| Failure::new(e.code(), e))?;
                all_passed &= result.passed;
                println!(
                    "{} {:<36} {}",
                    if result.passed { "PASS" } else { "FAIL" },
                    result.scenario,
                    serde_json::to_string(&result.outcome).expect("outcome serializes").trim_matches('"'),
                );
                if let (Some(file), Some(path)) = (sink.as_mut(), report.as_ref()) {
                    let line = serde_json::to_string(&result).expect("result serializes");
                    writeln!(file, "{line}").map_err(|e| io_failure(path, e))?;
                }
            }
            Ok(if all_passed { 0 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["uspfo", "frobnicate"]), 2);
        assert_eq!(cli_main(["uspfo"]), 2);
        assert_eq!(cli_main(["uspfo", "flow"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(cli_main(["uspfo", "--help"]), 0);
    }

    #[test]
    fn missing_config_exits_1() {
        assert_eq!(cli_main(["uspfo", "flow", "--config", "/nonexistent.json"]), 1);
    }
}
