use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracelab_cli::simulate::{simulate, tree_digest, Profile};
use tracelab_cli::{find_workspaces, study_from_journals, summary_of, summary_table, validate};
use tracelab_client::daemon::{self, Daemon, DaemonOptions};
use tracelab_client::sync::HttpTransport;
use tracelab_core::config::parse_study_config;
use tracelab_core::progsnap2::{convert, validate_bundle, write_bundle, StudyInput};
use tracelab_core::record::now_ms;
use tracelab_server::{AppState, Repository, SqliteStore};

#[derive(Parser)]
#[command(name = "tracelab", version, about = "Collect, store and convert programming-process study data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a study configuration directory and print its plan.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a participant session and serve the local API.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workspace: PathBuf,
        /// Serve the API only (no bundled web UI is built into this binary).
        #[arg(long)]
        headless: bool,
        /// Ingestion server; defaults to the one named in research.yaml.
        #[arg(long, env = "TRACELAB_SERVER_URL")]
        server: Option<String>,
        /// Loopback address of the local API.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
        /// Also upload every N seconds.
        #[arg(long)]
        flush_every: Option<u64>,
        /// Poll files instead of using native change notifications.
        #[arg(long)]
        polling: bool,
    },
    /// Run the ingestion server.
    Serve {
        #[arg(long, env = "TRACELAB_DATA", default_value = "data")]
        data: PathBuf,
        #[arg(long, env = "TRACELAB_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "TRACELAB_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: Option<String>,
        /// Parent directory of admin backups; defaults to <data>/backups.
        #[arg(long)]
        backup_root: Option<PathBuf>,
    },
    /// Convert a study to a ProgSnap2 bundle.
    Convert {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print study statistics.
    Stats {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        json: bool,
    },
    /// Generate deterministic synthetic sessions.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        sessions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Traffic shape: `balanced` or `course`.
        #[arg(long, default_value = "balanced")]
        profile: String,
    },
    /// Copy the server store to a new directory.
    Backup {
        #[arg(long, env = "TRACELAB_DATA", default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Source {
    /// Research id; required with --data.
    #[arg(long)]
    study: Option<String>,
    /// Server data directory.
    #[arg(long, env = "TRACELAB_DATA", conflicts_with = "journals")]
    data: Option<PathBuf>,
    /// A session workspace, or a directory of them.
    #[arg(long)]
    journals: Option<PathBuf>,
    /// Study configuration, used for the research id with --journals.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<StudyInput> {
        match (&self.data, &self.journals) {
            (_, Some(dir)) => {
                let research = match (&self.study, &self.config) {
                    (Some(s), _) => s.clone(),
                    (None, Some(c)) => parse_study_config(c)?.research_id().to_owned(),
                    (None, None) => "study".to_owned(),
                };
                let ws = find_workspaces(dir)?;
                if ws.is_empty() {
                    bail!("no session journals under {}", dir.display());
                }
                study_from_journals(&research, &ws)
            }
            (Some(data), None) => {
                let study = self.study.as_deref().context("--study is required with --data")?;
                let store = SqliteStore::open_data_dir(data)?;
                Ok(store.study_input(study)?)
            }
            (None, None) => bail!("one of --data or --journals is required"),
        }
    }
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { config } => {
            let report = validate(&config);
            for line in &report.lines {
                println!("{line}");
            }
            Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Run {
            config,
            workspace,
            headless,
            server,
            listen,
            flush_every,
            polling,
        } => {
            let study = parse_study_config(&config)?;
            if !headless {
                tracing::info!("web UI is not bundled; serving the local API only");
            }
            std::fs::create_dir_all(&workspace)?;
            let server = server.unwrap_or_else(|| study.metadata.server_url.clone());
            let mut opts = DaemonOptions::new(&workspace, study);
            opts.force_polling = polling;
            opts.flush_every = flush_every.map(Duration::from_secs);
            let rt = runtime()?;
            rt.block_on(async move {
                let d = Daemon::start(opts, Arc::new(HttpTransport::new(&server)))?;
                let listener = tokio::net::TcpListener::bind(listen)
                    .await
                    .with_context(|| format!("cannot listen on {listen}"))?;
                println!("listening on http://{}", listener.local_addr()?);
                if let Some(status) = daemon::serve(listener, d, shutdown_signal()).await? {
                    match status.error {
                        None => println!("uploaded {} records", status.report.acked),
                        Some(e) => eprintln!("records kept for the next run: {e}"),
                    }
                }
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Serve {
            data,
            addr,
            admin_token,
            backup_root,
        } => {
            std::fs::create_dir_all(&data)?;
            let store = SqliteStore::open_data_dir(&data)?;
            let state = AppState {
                repo: Arc::new(store),
                admin_token,
                backup_root: backup_root.unwrap_or_else(|| data.join("backups")),
            };
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("cannot listen on {addr}"))?;
                println!("listening on http://{}", listener.local_addr()?);
                tracelab_server::serve(listener, state, shutdown_signal()).await?;
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Convert { source, out } => {
            let study = source.load()?;
            let (bundle, report) = convert(&study);
            let violations = validate_bundle(&bundle);
            write_bundle(&bundle, &out)?;
            println!(
                "{} events, {} code states written to {}",
                report.rows,
                report.code_states,
                out.display()
            );
            if report.quarantined_excluded > 0 {
                println!("{} quarantined items excluded", report.quarantined_excluded);
            }
            for v in &violations {
                eprintln!("violation: {v}");
            }
            Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Stats { source, json } => {
            let summary = summary_of(&source.load()?);
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", summary_table(&summary));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            config,
            sessions,
            seed,
            out,
            profile,
        } => {
            let Some(profile) = Profile::by_name(&profile) else {
                bail!("unknown profile `{profile}` (expected balanced or course)");
            };
            let study = parse_study_config(&config)?;
            let made = simulate(&study, &profile, &out, sessions, seed)?;
            for s in &made {
                println!("{}  {} records  {} actions", s.name, s.records, s.actions);
            }
            println!("digest {}", tree_digest(&out)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Backup { data, out } => {
            let store = SqliteStore::open_data_dir(&data)?;
            let manifest = store.backup(&out, now_ms())?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
