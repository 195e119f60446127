//! `pubcluster`: run the gateway, drive it over HTTP, and build job bundles.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pubcluster_core::allocator::Inventory;
use pubcluster_core::fleet::wire::FleetServer;
use pubcluster_core::fleet::{build_job_archive, Fleet, Manifest, SimJobScript};
use pubcluster_core::gateway::{serve, ClusterService, GatewayConfig, ADMIN_HEADER};
use pubcluster_core::{Clock, SystemClock};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "pubcluster", version, about = "Public cluster control plane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Remote {
    /// Gateway base URL.
    #[arg(
        long,
        env = "PUBCLUSTER_URL",
        default_value = "http://127.0.0.1:8080",
        global = true
    )]
    url: String,
}

#[derive(Args)]
struct Admin {
    #[arg(long, env = "PUBCLUSTER_ADMIN_SECRET")]
    admin_secret: String,
}

#[derive(Args)]
struct Token {
    /// Access token issued at approval.
    #[arg(long, env = "PUBCLUSTER_TOKEN")]
    token: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway and the sentinel loop.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Serve a simulated fleet over the line protocol.
    FleetServe {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long, default_value_t = 10)]
        nodes: usize,
        /// Inventory file; overrides --nodes.
        #[arg(long)]
        inventory: Option<PathBuf>,
        #[arg(long, default_value = "gateway")]
        identity: String,
    },
    /// Build a simulated job archive.
    PackJob {
        /// Simulated seconds each rank runs.
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        runtime: u64,
        /// Per-rank output; `{rank}` is replaced by the rank number.
        #[arg(long, default_value = "rank {rank} done")]
        output: String,
        /// Make this rank exit non-zero.
        #[arg(long)]
        fail_rank: Option<u32>,
        /// Never finish.
        #[arg(long)]
        runaway: bool,
        #[arg(long, short)]
        out: PathBuf,
        /// Extra files to include.
        files: Vec<PathBuf>,
    },
    /// Submit a registration.
    Register {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        name: String,
        #[arg(long)]
        contact: String,
        #[arg(long)]
        description: String,
        #[arg(long)]
        nodes: i64,
    },
    /// List applications (admin).
    Applications {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        admin: Admin,
    },
    /// Approve or reject an application (admin).
    Review {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        admin: Admin,
        app_id: String,
        #[arg(long, conflicts_with = "approve")]
        reject: bool,
        #[arg(long, required_unless_present = "reject")]
        approve: bool,
        #[arg(long, default_value_t = 2)]
        nodes: u32,
        #[arg(long, default_value_t = 24)]
        hours: u32,
        #[arg(long, default_value_t = 0)]
        min_perf: u32,
        #[arg(long)]
        dry_run: bool,
    },
    /// Confirm an approved application.
    Confirm {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        token: Token,
        app_id: String,
    },
    /// Show an application and its jobs.
    Show {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        token: Token,
        app_id: String,
    },
    /// Upload a job archive.
    Upload {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        token: Token,
        app_id: String,
        archive: PathBuf,
        #[arg(long, default_value = "mpich2")]
        environment: String,
    },
    /// Start an uploaded job.
    Execute {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        token: Token,
        job_id: String,
    },
    /// Show a job.
    Status {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        token: Token,
        job_id: String,
    },
    /// Save a finished job's result archive.
    Download {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        token: Token,
        job_id: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Cluster node table. With an admin secret, includes owners and blocks.
    Snapshot {
        #[command(flatten)]
        remote: Remote,
        #[arg(long, env = "PUBCLUSTER_ADMIN_SECRET")]
        admin_secret: Option<String>,
    },
    /// Run a command on many nodes at once (admin).
    Fanout {
        #[command(flatten)]
        remote: Remote,
        #[command(flatten)]
        admin: Admin,
        /// `all`, `block:<id>`, `tier:<label>` or `n01,n02,...`
        selector: String,
        #[arg(trailing_var_arg = true, required = true)]
        command: Vec<String>,
    },
}

fn send(req: RequestBuilder) -> Result<Vec<u8>> {
    let resp = req.send().context("gateway unreachable")?;
    let status = resp.status();
    let bytes = resp.bytes()?.to_vec();
    if !status.is_success() {
        let v: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        bail!(
            "{} {}: {}",
            status.as_u16(),
            v["code"].as_str().unwrap_or("?"),
            v["message"].as_str().unwrap_or_default()
        );
    }
    Ok(bytes)
}

fn print_json(bytes: &[u8]) -> Result<()> {
    let v: Value = serde_json::from_slice(bytes).context("gateway sent invalid JSON")?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn bearer(req: RequestBuilder, token: &Token) -> RequestBuilder {
    req.bearer_auth(&token.token)
}

fn run_serve(config: PathBuf) -> Result<()> {
    let cfg = GatewayConfig::load(&config)?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let service = Arc::new(ClusterService::boot(&cfg, Arc::clone(&clock))?);
    let stop = Arc::new(AtomicBool::new(false));
    let ticker = service.sentinel().spawn_loop(clock, Arc::clone(&stop));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
        println!("listening on {}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve(listener, service, shutdown).await
    })?;
    stop.store(true, Ordering::Relaxed);
    let _ = ticker.join();
    Ok(())
}

fn run_fleet(
    listen: String,
    nodes: usize,
    inventory: Option<PathBuf>,
    identity: String,
) -> Result<()> {
    let inv = match inventory {
        Some(p) => Inventory::load(p)?,
        None => Inventory::demo(nodes),
    };
    let fleet = Arc::new(Fleet::new(
        &inv,
        Manifest::default(),
        identity,
        Arc::new(SystemClock),
    ));
    let server = FleetServer::bind(fleet, &listen)?;
    println!(
        "fleet of {} nodes listening on {}",
        inv.len(),
        server.local_addr()?
    );
    server.serve()?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let http = Client::new();
    match cli.command {
        Command::Serve { config } => run_serve(config)?,
        Command::FleetServe {
            listen,
            nodes,
            inventory,
            identity,
        } => run_fleet(listen, nodes, inventory, identity)?,
        Command::PackJob {
            runtime,
            output,
            fail_rank,
            runaway,
            out,
            files,
        } => {
            let mut script = SimJobScript::new(runtime, &output);
            if fail_rank.is_some() {
                script = script.failing(fail_rank);
            }
            if runaway {
                script = script.runaway();
            }
            let mut payload = Vec::new();
            for f in &files {
                let name = f
                    .file_name()
                    .context("file has no name")?
                    .to_string_lossy()
                    .into_owned();
                payload.push((
                    name,
                    std::fs::read(f).with_context(|| format!("reading {}", f.display()))?,
                ));
            }
            let refs: Vec<(&str, &[u8])> = payload
                .iter()
                .map(|(n, b)| (n.as_str(), b.as_slice()))
                .collect();
            let bytes = build_job_archive(&script, &refs);
            std::fs::write(&out, &bytes)?;
            println!("wrote {} ({} bytes)", out.display(), bytes.len());
        }
        Command::Register {
            remote,
            name,
            contact,
            description,
            nodes,
        } => {
            let body = json!({"name": name, "contact": contact, "job_description": description, "nodes_requested": nodes});
            print_json(&send(
                http.post(format!("{}/applications", remote.url))
                    .json(&body),
            )?)?;
        }
        Command::Applications { remote, admin } => {
            let req = http
                .get(format!("{}/admin/applications", remote.url))
                .header(ADMIN_HEADER, admin.admin_secret);
            print_json(&send(req)?)?;
        }
        Command::Review {
            remote,
            admin,
            app_id,
            reject,
            nodes,
            hours,
            min_perf,
            dry_run,
            ..
        } => {
            let body = if reject {
                json!({"decision": "reject"})
            } else {
                json!({"decision": "approve", "node_count": nodes, "period_hours": hours,
                       "min_perf_score": min_perf, "dry_run": dry_run})
            };
            let req = http
                .post(format!("{}/admin/applications/{app_id}/review", remote.url))
                .header(ADMIN_HEADER, admin.admin_secret)
                .json(&body);
            print_json(&send(req)?)?;
        }
        Command::Confirm {
            remote,
            token,
            app_id,
        } => {
            let req = http.post(format!("{}/applications/{app_id}/confirm", remote.url));
            print_json(&send(bearer(req, &token))?)?;
        }
        Command::Show {
            remote,
            token,
            app_id,
        } => {
            let req = http.get(format!("{}/applications/{app_id}", remote.url));
            print_json(&send(bearer(req, &token))?)?;
        }
        Command::Upload {
            remote,
            token,
            app_id,
            archive,
            environment,
        } => {
            let bytes = std::fs::read(&archive)
                .with_context(|| format!("reading {}", archive.display()))?;
            let form = reqwest::blocking::multipart::Form::new()
                .text("environment", environment)
                .part(
                    "archive",
                    reqwest::blocking::multipart::Part::bytes(bytes).file_name("job.tar"),
                );
            let req = http
                .post(format!("{}/applications/{app_id}/jobs", remote.url))
                .multipart(form);
            print_json(&send(bearer(req, &token))?)?;
        }
        Command::Execute {
            remote,
            token,
            job_id,
        } => {
            let req = http.post(format!("{}/jobs/{job_id}/execute", remote.url));
            print_json(&send(bearer(req, &token))?)?;
        }
        Command::Status {
            remote,
            token,
            job_id,
        } => {
            let req = http.get(format!("{}/jobs/{job_id}", remote.url));
            print_json(&send(bearer(req, &token))?)?;
        }
        Command::Download {
            remote,
            token,
            job_id,
            out,
        } => {
            let req = http.get(format!("{}/jobs/{job_id}/result", remote.url));
            let bytes = send(bearer(req, &token))?;
            std::fs::write(&out, &bytes)?;
            println!("wrote {} ({} bytes)", out.display(), bytes.len());
        }
        Command::Snapshot {
            remote,
            admin_secret,
        } => {
            let mut req = http.get(format!("{}/cluster", remote.url));
            if let Some(s) = admin_secret {
                req = req.header(ADMIN_HEADER, s);
            }
            print_json(&send(req)?)?;
        }
        Command::Fanout {
            remote,
            admin,
            selector,
            command,
        } => {
            let body = json!({"selector": selector, "command": command.join(" ")});
            let req = http
                .post(format!("{}/admin/fanout", remote.url))
                .header(ADMIN_HEADER, admin.admin_secret)
                .json(&body);
            print_json(&send(req)?)?;
        }
    }
    Ok(())
}
