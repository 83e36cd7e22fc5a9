//! The `lp` command-line tool.
//!
//! Every administrative action goes through the public HTTP API with a
//! bearer token from `LP_TOKEN` or `--token-file`. `serve` and `agent` run
//! the long-lived processes.

pub mod exit;
pub mod load;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use labpipe_client::{ApiClient, DEFAULT_SERVER_URL, ENV_SERVER_URL, ENV_TOKEN};
use labpipe_core::api::RecordFilter;
use labpipe_core::transport::TransportError;
use labpipe_core::Timestamp;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "lp", version, about = "LabPipe server, agent and admin tool")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Server base URL.
    #[arg(long, global = true, env = ENV_SERVER_URL, default_value = DEFAULT_SERVER_URL)]
    pub server: String,
    /// Read the bearer secret from this file instead of LP_TOKEN.
    #[arg(long, global = true)]
    pub token_file: Option<PathBuf>,
    /// Emit exactly one JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the server.
    Serve(ServeArgs),
    /// Run the collection agent.
    Agent {
        /// Agent TOML config file.
        #[arg(long)]
        config: PathBuf,
    },
    #[command(subcommand)]
    Config(ConfigCmd),
    #[command(subcommand)]
    Principal(PrincipalCmd),
    #[command(subcommand)]
    Token(TokenCmd),
    #[command(subcommand)]
    Records(RecordsCmd),
    #[command(subcommand)]
    Audit(AuditCmd),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// smtp://host:port for the email plugin; mail is captured in memory
    /// when unset.
    #[arg(long)]
    pub smtp_url: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum ConfigCmd {
    /// Upsert every JSON document in a file or directory tree.
    Load { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum PrincipalCmd {
    Add {
        principal_id: String,
        #[arg(long)]
        name: Option<String>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum TokenCmd {
    /// Issue a token; the secret is printed once.
    Create {
        principal_id: String,
        /// Comma-separated role names.
        #[arg(long, value_delimiter = ',', required = true)]
        roles: Vec<String>,
    },
    Revoke { principal_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum RecordsCmd {
    Export {
        #[arg(long)]
        study: Option<String>,
        #[arg(long)]
        site: Option<String>,
        #[arg(long)]
        protocol: Option<String>,
        /// Inclusive; RFC 3339 or YYYY-MM-DD.
        #[arg(long, value_parser = parse_time)]
        from: Option<Timestamp>,
        /// Exclusive; RFC 3339 or YYYY-MM-DD.
        #[arg(long, value_parser = parse_time)]
        to: Option<Timestamp>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: ExportFormat,
        #[arg(long, default_value_t = 200)]
        page_size: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// Events with seq > N.
    Tail {
        #[arg(long, default_value_t = 0)]
        since: u64,
    },
}

pub fn parse_time(s: &str) -> Result<Timestamp, String> {
    if let Ok(t) = Timestamp::parse(s) {
        return Ok(t);
    }
    let date = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| format!("'{s}' is not RFC 3339 or YYYY-MM-DD"))?;
    Ok(Timestamp::from_datetime(date.and_hms_opt(0, 0, 0).unwrap().and_utc()))
}

pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

fn token(global: &Global) -> Result<Option<String>, String> {
    if let Some(path) = &global.token_file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read token file {}: {e}", path.display()))?;
        return Ok(Some(text.trim().to_string()));
    }
    Ok(std::env::var(ENV_TOKEN).ok().filter(|t| !t.trim().is_empty()).map(|t| t.trim().to_string()))
}

fn client(global: &Global) -> Result<ApiClient, String> {
    ApiClient::new(&global.server, token(global)?)
}

fn emit(io: &mut Io, global: &Global, doc: &Value, human: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) {
    let _ = if global.json {
        writeln!(io.out, "{doc}")
    } else {
        human(io.out)
    };
}

fn fail(io: &mut Io, global: &Global, e: &TransportError) -> i32 {
    let code = exit::for_transport(e);
    if global.json {
        let body = match e {
            TransportError::Network(m) => json!({"error": {"code": "network", "message": m}}),
            TransportError::Rejected { status, body } => json!({"error": body, "status": status}),
        };
        let _ = writeln!(io.out, "{body}");
    }
    let _ = writeln!(io.err, "lp: {e}");
    if let TransportError::Rejected { body, .. } = e {
        for d in &body.details {
            let _ = writeln!(io.err, "  {d}");
        }
    }
    code
}

fn local_error(io: &mut Io, global: &Global, message: &str) -> i32 {
    if global.json {
        let _ = writeln!(io.out, "{}", json!({"error": {"code": "local", "message": message}}));
    }
    let _ = writeln!(io.err, "lp: {message}");
    exit::REJECTED
}

/// Runs one admin command and returns the exit code. `serve` and `agent`
/// are handled by the binary.
pub fn run(cli: &Cli, io: &mut Io) -> i32 {
    let g = &cli.global;
    let api = match client(g) {
        Ok(c) => c,
        Err(m) => return local_error(io, g, &m),
    };
    match &cli.command {
        Command::Serve(_) | Command::Agent { .. } => local_error(io, g, "long-running commands are not available here"),
        Command::Config(ConfigCmd::Load { path }) => config_load(&api, path, g, io),
        Command::Principal(PrincipalCmd::Add { principal_id, name }) => {
            match api.create_principal(principal_id, name.as_deref().unwrap_or(principal_id)) {
                Ok(p) => {
                    emit(io, g, &json!(p), |w| writeln!(w, "principal {} created", p.principal_id));
                    exit::OK
                }
                Err(e) => fail(io, g, &e),
            }
        }
        Command::Principal(PrincipalCmd::List) => match api.list_principals() {
            Ok(list) => {
                emit(io, g, &json!({ "principals": list }), |w| {
                    for p in &list {
                        writeln!(w, "{}\t{}\t{}\t{}", p.principal_id, p.display_name, p.roles.join(","), if p.has_token { "token" } else { "no-token" })?;
                    }
                    Ok(())
                });
                exit::OK
            }
            Err(e) => fail(io, g, &e),
        },
        Command::Token(TokenCmd::Create { principal_id, roles }) => match api.issue_token(principal_id, roles) {
            Ok(t) => {
                emit(io, g, &json!(t), |w| writeln!(w, "{}", t.secret));
                exit::OK
            }
            Err(e) => fail(io, g, &e),
        },
        Command::Token(TokenCmd::Revoke { principal_id }) => match api.revoke_token(principal_id) {
            Ok(p) => {
                emit(io, g, &json!(p), |w| writeln!(w, "token for {} revoked", p.principal_id));
                exit::OK
            }
            Err(e) => fail(io, g, &e),
        },
        Command::Records(RecordsCmd::Export { study, site, protocol, from, to, format: _, page_size }) => {
            let filter = RecordFilter {
                study: study.clone(),
                site: site.clone(),
                protocol: protocol.clone(),
                from: *from,
                to: *to,
                participant: None,
            };
            export(&api, &filter, *page_size, g, io)
        }
        Command::Audit(AuditCmd::Tail { since }) => match api.read_audit(*since) {
            Ok(events) => {
                emit(io, g, &json!({ "events": events }), |w| {
                    for e in &events {
                        let outcome = serde_json::to_value(e.outcome).unwrap_or_default();
                        writeln!(w, "{}\t{}\t{}\t{}\t{}\t{}", e.seq, e.at, e.principal_id, e.action, e.resource, outcome.as_str().unwrap_or(""))?;
                    }
                    Ok(())
                });
                exit::OK
            }
            Err(e) => fail(io, g, &e),
        },
    }
}

fn config_load(api: &ApiClient, path: &Path, g: &Global, io: &mut Io) -> i32 {
    let (rows, code) = match load::load(api, path) {
        Ok(r) => r,
        Err(e) => return local_error(io, g, &format!("cannot read {}: {e}", path.display())),
    };
    let applied = rows.iter().filter(|r| matches!(r.outcome, load::Outcome::Applied { .. })).count();
    let doc = json!({ "results": rows, "applied": applied, "failed": rows.len() - applied });
    emit(io, g, &doc, |w| {
        for r in &rows {
            let what = format!("{}/{}", r.kind.as_deref().unwrap_or("?"), r.id.as_deref().unwrap_or("?"));
            match &r.outcome {
                load::Outcome::Applied { version, .. } => writeln!(w, "applied  {what} v{version}  {}", r.path)?,
                load::Outcome::Rejected { code, message, details } => {
                    writeln!(w, "rejected {what}  {}: {code}: {message}", r.path)?;
                    for d in details {
                        writeln!(w, "           {d}")?;
                    }
                }
                load::Outcome::Skipped { reason } => writeln!(w, "skipped  {what}  {}: {reason}", r.path)?,
            }
        }
        writeln!(w, "{applied} applied, {} failed", rows.len() - applied)
    });
    code
}

fn export(api: &ApiClient, filter: &RecordFilter, page_size: u64, g: &Global, io: &mut Io) -> i32 {
    let mut count = 0u64;
    let mut all = Vec::new();
    let mut page = 1;
    loop {
        let result = match api.query_records(filter, page, page_size) {
            Ok(r) => r,
            Err(e) => {
                if count > 0 && !g.json {
                    let _ = writeln!(io.err, "lp: export interrupted; output is partial ({count} records written)");
                }
                return fail(io, g, &e);
            }
        };
        let n = result.records.len() as u64;
        for view in result.records {
            if g.json {
                all.push(view);
            } else if let Ok(line) = serde_json::to_string(&view) {
                let _ = writeln!(io.out, "{line}");
            }
            count += 1;
        }
        if n == 0 || page * page_size >= result.total {
            break;
        }
        page += 1;
    }
    if g.json {
        let _ = writeln!(io.out, "{}", json!({ "count": count, "records": all }));
    }
    let _ = writeln!(io.err, "{count} records");
    exit::OK
}

/// Starts the server and blocks.
pub fn serve(args: &ServeArgs, out: &mut dyn Write) -> Result<(), String> {
    let options = labpipe_server::ServerOptions::default()
        .with_default_plugins(args.smtp_url.as_deref())
        .map_err(|e| e.to_string())?;
    let server = labpipe_server::Server::open(&args.data_dir, options).map_err(|e| e.to_string())?;
    if let Some(secret) = server.bootstrap_admin("admin").map_err(|e| e.to_string())? {
        let _ = writeln!(out, "bootstrap admin token (shown once): {secret}");
        let _ = out.flush();
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .map_err(|e| format!("cannot bind {}: {e}", args.bind))?;
        tracing::info!(addr = %listener.local_addr().map_err(|e| e.to_string())?, "serving");
        let _ = writeln!(out, "listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        let _ = out.flush();
        labpipe_server::http::serve(listener, Arc::new(server)).await.map_err(|e| e.to_string())
    })
}

/// Starts the agent's loops and local API and blocks.
pub fn agent(config_path: &Path, out: &mut dyn Write) -> Result<(), String> {
    let config = labpipe_agent::AgentConfig::load(config_path).map_err(|e| e.to_string())?;
    let token = config.resolve_token().map_err(|e| e.to_string())?;
    let client = ApiClient::new(&config.server_url, token)?;
    let agent = Arc::new(
        labpipe_agent::Agent::open(&config, labpipe_agent::AgentOptions::new(Arc::new(client))).map_err(|e| e.to_string())?,
    );
    let api = labpipe_agent::local_api::LocalApi::start(agent.clone(), &config.local_bind, config.ui_dir.clone())
        .map_err(|e| format!("cannot start local API on {}: {e}", config.local_bind))?;
    let _runtime = labpipe_agent::runtime::AgentRuntime::start(agent.clone(), config.scan_interval(), config.sync_interval());
    let _ = writeln!(out, "agent {} listening on {}", agent.agent_id(), api.url());
    let _ = out.flush();
    loop {
        std::thread::park();
    }
}
