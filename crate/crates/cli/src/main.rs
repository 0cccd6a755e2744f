//! Scenario-driven simulation CLI.
//!
//! Every subcommand is a client of the HTTP service: with `--server` it talks
//! to a running instance, otherwise it hosts a private one on a loopback port
//! for the duration of the command. File content travels through the API as
//! text, so artifacts written here are byte-identical to what the service
//! produced.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hetsim_client::{
    ApiClient, ClientError, DeriveRequest, ProfileRequest, ReportRequest, RunScenarioRequest,
};

#[derive(Parser)]
#[command(name = "hetsim", version, about = "Heterogeneous scheduling and auto-tuning simulator")]
struct Cli {
    /// Service URL (e.g. http://127.0.0.1:8080); a private in-process
    /// service is used when absent.
    #[arg(long, global = true)]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the HTTP service and block.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Execute a scenario schedule; writes trace.toml, kb.toml and
    /// series.csv into the output directory.
    Run {
        scenario: PathBuf,
        /// Knowledge-base file to start from and persist back to.
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Seed for the simulated noise model.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Disable the profile-construction branch of the decision workflow.
        #[arg(long)]
        no_profiling: bool,
    },
    /// Force profile construction for one (sct, workload) pair.
    Profile {
        scenario: PathBuf,
        #[arg(long)]
        sct: String,
        #[arg(long)]
        workload: String,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the configuration the knowledge base derives, without running.
    Derive {
        scenario: PathBuf,
        #[arg(long)]
        sct: String,
        #[arg(long)]
        workload: String,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Render a stored trace into summary tables.
    Report { trace: PathBuf },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn read_optional(path: &Option<PathBuf>) -> Result<Option<String>, Failure> {
    match path {
        Some(p) if p.exists() => Ok(Some(read_input(p)?)),
        _ => Ok(None),
    }
}

fn write_output(path: &Path, content: &str) -> Result<(), Failure> {
    std::fs::write(path, content)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Connect to `--server` or host a private service on a loopback port.
async fn connect(server: &Option<String>) -> Result<ApiClient, Failure> {
    match server {
        Some(url) => Ok(ApiClient::new(url)),
        None => {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
                .await
                .map_err(|e| Failure::Runtime(format!("cannot bind a loopback port: {e}")))?;
            let addr = listener.local_addr().expect("bound listener has an address");
            tokio::spawn(hetsim_service::serve(listener));
            Ok(ApiClient::new(&format!("http://{addr}")))
        }
    }
}

async fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Serve { addr } => {
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .map_err(|e| Failure::Runtime(format!("cannot bind {addr}: {e}")))?;
            println!("listening on http://{}", listener.local_addr().unwrap());
            hetsim_service::serve(listener)
                .await
                .map_err(|e| Failure::Runtime(e.to_string()))
        }
        Command::Run { scenario, kb, seed, out, no_profiling } => {
            let client = connect(&cli.server).await?;
            let req = RunScenarioRequest {
                scenario: read_input(&scenario)?,
                seed,
                no_profiling,
                kb: read_optional(&kb)?,
            };
            let resp = client.run_scenario(&req).await?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
            write_output(&out.join("trace.toml"), &resp.trace)?;
            write_output(&out.join("kb.toml"), &resp.kb)?;
            write_output(&out.join("series.csv"), &resp.series_csv)?;
            if let Some(kb_path) = &kb {
                write_output(kb_path, &resp.kb)?;
            }
            print!("{}", resp.summary.text);
            println!("artifacts written to {}", out.display());
            Ok(())
        }
        Command::Profile { scenario, sct, workload, kb, seed } => {
            let client = connect(&cli.server).await?;
            let req = ProfileRequest {
                scenario: read_input(&scenario)?,
                sct,
                workload,
                seed,
                kb: read_optional(&kb)?,
            };
            let resp = client.profile(&req).await?;
            let p = &resp.profile;
            println!("sct_id     = \"{}\"", p.sct_id.0);
            println!("workload   = \"{}\"", p.workload.label());
            println!("split_cpu  = {}", p.split.cpu);
            println!("split_gpu  = {}", p.split.gpu);
            println!("fission    = \"{}\"", p.platform.fission_level.label());
            println!("overlap    = {}", p.platform.overlap);
            for (k, w) in &p.platform.wgs_per_kernel {
                println!("wgs.{k}    = {w}");
            }
            println!("best_time  = {}", p.best_time_ms);
            println!("provenance = \"{}\"", p.provenance.label());
            println!("search evaluations: {}", resp.search.len());
            if let Some(kb_path) = &kb {
                write_output(kb_path, &resp.kb)?;
                println!("knowledge base written to {}", kb_path.display());
            }
            Ok(())
        }
        Command::Derive { scenario, sct, workload, kb } => {
            let client = connect(&cli.server).await?;
            let req = DeriveRequest {
                scenario: read_input(&scenario)?,
                sct,
                workload,
                kb: read_optional(&kb)?,
            };
            let resp = client.derive(&req).await?;
            println!("scope      = \"{}\"", resp.scope);
            println!("split_cpu  = {}", resp.split_cpu);
            println!("split_gpu  = {}", resp.split_gpu);
            println!("fission    = \"{}\"", resp.fission);
            println!("overlap    = {}", resp.overlap);
            match &resp.wgs {
                Some(wgs) => {
                    for (k, w) in wgs {
                        println!("wgs.{k}    = {w}");
                    }
                }
                None => println!("wgs        = best-occupancy"),
            }
            if let Some(stored) = &resp.stored {
                println!("stored profile (exact hit):");
                println!("  best_time  = {}", stored.best_time_ms);
                println!("  provenance = \"{}\"", stored.provenance.label());
            }
            Ok(())
        }
        Command::Report { trace } => {
            let client = connect(&cli.server).await?;
            let resp = client.report(&ReportRequest { trace: read_input(&trace)? }).await?;
            print!("{}", resp.summary.text);
            Ok(())
        }
    }
}
