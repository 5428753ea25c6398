//! `fhirfn`: operator CLI for the function gateway.
//!
//! Exit codes: 0 success, 1 usage, 2 validation failure, 3 transport
//! failure, 4 the server answered with an OperationOutcome.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fhirfn_core::config::ServerConfig;
use fhirfn_core::fhir::{self, Resource, FHIR_JSON};
use fhirfn_core::gateway::{http, VERSION_HEADER};
use fhirfn_core::loadsim::{simulate, LoadProfile};
use fhirfn_core::model::ManifestFile;
use fhirfn_core::registry::RegistryError;

#[derive(Parser)]
#[command(name = "fhirfn", version, about = "Serve, register and invoke FHIR model functions")]
struct Cli {
    /// Gateway base URL for client commands.
    #[arg(long, global = true, env = "FHIRFN_URL", default_value = "http://localhost:8080")]
    url: String,

    /// Client request timeout in seconds.
    #[arg(long, global = true, default_value_t = 60)]
    timeout: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway.
    Serve {
        /// JSON config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        base_url: Option<String>,
        /// Derive generated ids from request hashes.
        #[arg(long)]
        deterministic: bool,
        /// Register the bundled reference functions at boot.
        #[arg(long)]
        reference: bool,
    },
    /// Register a function or pipeline manifest.
    Register { manifest: PathBuf },
    /// Deregister one version of a function.
    Deregister { name: String, version: String },
    /// Print a function's Endpoint document.
    Describe { name: String },
    /// Print the discovery index.
    List,
    /// POST a Bundle to a function and print the response.
    Invoke {
        name: String,
        bundle: PathBuf,
        /// Pin a version instead of the active one.
        #[arg(long)]
        version: Option<String>,
    },
    /// Pipeline tools.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
    /// Replay a load profile on an in-process gateway with a logical clock.
    SimulateLoad {
        profile: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the subscription delivery report of a request.
    Deliveries { request_id: String },
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Check stage compatibility against the gateway's registry.
    Validate { manifest: PathBuf },
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Transport(String),
    /// Server reply body, printed as received.
    Outcome(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Transport(_) => 3,
            Failure::Outcome(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

struct Response {
    status: u16,
    body: String,
}

impl Client {
    fn new(base: &str, timeout: Duration) -> Result<Self, Failure> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Failure::Transport(e.to_string()))?;
        Ok(Client { base: base.trim_end_matches('/').to_owned(), http })
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<Response, Failure> {
        let res = req.send().map_err(|e| Failure::Transport(format!("{}: {e}", self.base)))?;
        let status = res.status().as_u16();
        let body = res.text().map_err(|e| Failure::Transport(e.to_string()))?;
        Ok(Response { status, body })
    }

    fn get(&self, path: &str) -> Result<Response, Failure> {
        self.send(self.http.get(format!("{}{path}", self.base)))
    }

    fn post(&self, path: &str, content_type: &str, body: String, pin: Option<&str>) -> Result<Response, Failure> {
        let mut req = self
            .http
            .post(format!("{}{path}", self.base))
            .header(reqwest::header::CONTENT_TYPE, content_type)
            .body(body);
        if let Some(v) = pin {
            req = req.header(VERSION_HEADER, v);
        }
        self.send(req)
    }

    fn delete(&self, path: &str) -> Result<Response, Failure> {
        self.send(self.http.delete(format!("{}{path}", self.base)))
    }
}

/// Pretty-prints a FHIR body for the terminal.
fn pretty(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| serde_json::to_string_pretty(&v).ok())
        .unwrap_or_else(|| body.to_owned())
}

/// 2xx bodies go to stdout; anything else is the server's outcome.
fn expect_ok(res: Response) -> Result<(), Failure> {
    if (200..300).contains(&res.status) {
        println!("{}", pretty(&res.body));
        Ok(())
    } else {
        Err(Failure::Outcome(res.body))
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn read_manifest(path: &Path) -> Result<(ManifestFile, String), Failure> {
    let text = read_file(path)?;
    let file = ManifestFile::from_json(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    Ok((file, text))
}

fn read_bundle(path: &Path) -> Result<String, Failure> {
    let text = read_file(path)?;
    match fhir::parse_resource(&text) {
        Ok(Resource::Bundle(_)) => Ok(text),
        Ok(other) => Err(Failure::Validation(format!(
            "{}: expected a Bundle, found {}",
            path.display(),
            other.resource_type()
        ))),
        Err(e) => Err(Failure::Validation(format!("{}: {e}", path.display()))),
    }
}

fn serve(
    config: Option<PathBuf>,
    port: Option<u16>,
    base_url: Option<String>,
    deterministic: bool,
    reference: bool,
) -> Result<(), Failure> {
    let mut cfg = match &config {
        Some(path) => ServerConfig::from_file(path).map_err(|e| Failure::Validation(e.to_string()))?,
        None => ServerConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok()).map_err(|e| Failure::Validation(e.to_string()))?;
    if let Some(p) = port {
        cfg.gateway.bind_port = p;
        if base_url.is_none() && std::env::var(fhirfn_core::config::BASE_URL_ENV).is_err() {
            cfg.gateway.base_url = format!("http://localhost:{p}");
        }
    }
    if let Some(url) = base_url {
        cfg.gateway.base_url = url;
    }
    cfg.gateway.deterministic_mode |= deterministic;
    let gateway = cfg.build_gateway().map_err(|e| Failure::Validation(e.to_string()))?;
    if reference {
        for m in fhirfn_core::reference::reference_manifests() {
            match gateway.register_file(&m) {
                Ok(_) | Err(RegistryError::DuplicateVersion { .. }) => {}
                Err(e) => return Err(Failure::Validation(format!("{}: {e}", m.name))),
            }
        }
    }
    let gateway = Arc::new(gateway);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        let addr = std::net::SocketAddr::from(([0, 0, 0, 0], cfg.gateway.bind_port));
        let listener =
            tokio::net::TcpListener::bind(addr).await.map_err(|e| Failure::Transport(format!("bind {addr}: {e}")))?;
        http::serve(gateway, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::Transport(e.to_string()))
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let client = || Client::new(&cli.url, Duration::from_secs(cli.timeout));
    match cli.command {
        Command::Serve { config, port, base_url, deterministic, reference } => {
            serve(config, port, base_url, deterministic, reference)
        }
        Command::Register { manifest } => {
            let (_, text) = read_manifest(&manifest)?;
            expect_ok(client()?.post("/registry", "application/json", text, None)?)
        }
        Command::Deregister { name, version } => {
            expect_ok(client()?.delete(&format!("/registry/{name}/{version}"))?)
        }
        Command::Describe { name } => expect_ok(client()?.get(&format!("/function/{name}"))?),
        Command::List => expect_ok(client()?.get("/functions")?),
        Command::Invoke { name, bundle, version } => {
            let body = read_bundle(&bundle)?;
            expect_ok(client()?.post(&format!("/function/{name}"), FHIR_JSON, body, version.as_deref())?)
        }
        Command::Pipeline { command: PipelineCommand::Validate { manifest } } => {
            let (file, text) = read_manifest(&manifest)?;
            if file.pipeline.is_none() {
                return Err(Failure::Validation(format!("{}: no pipeline field", manifest.display())));
            }
            let res = client()?.post("/pipelines/validate", "application/json", text, None)?;
            match res.status {
                200 => {
                    println!("{}", pretty(&res.body));
                    Ok(())
                }
                422 => Err(Failure::Validation(pretty(&res.body))),
                _ => Err(Failure::Outcome(res.body)),
            }
        }
        Command::SimulateLoad { profile, json } => {
            let profile = LoadProfile::from_file(&profile).map_err(|e| Failure::Validation(e.to_string()))?;
            let report = simulate(&profile).map_err(|e| Failure::Validation(e.to_string()))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
            } else {
                print!("{}", report.render());
            }
            Ok(())
        }
        Command::Deliveries { request_id } => expect_ok(client()?.get(&format!("/deliveries/{request_id}"))?),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Outcome(body) => eprintln!("{}", pretty(body)),
                Failure::Validation(msg) | Failure::Transport(msg) => eprintln!("fhirfn: {msg}"),
                Failure::Other(e) => eprintln!("fhirfn: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
