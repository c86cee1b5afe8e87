use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use rand::RngCore;

use cloudgate::client::{self, ClientConfig, Console, Mode, StdConsole};
use cloudgate::clock::{Clock, SystemClock};
use cloudgate::gateway::{self, GatewayConfig};
use cloudgate::netsim;
use cloudgate::vault::{audit_key, AuditLog, AuthzLevel, Vault};

#[derive(Parser)]
#[command(
    name = "cloudgate",
    version,
    about = "Two-stage authenticated gateway to encrypted cloud storage"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the gateway daemon.
    Gateway(GatewayArgs),
    /// Customer-side client.
    #[command(subcommand)]
    Client(ClientCmd),
    /// Provision the credential vault.
    #[command(subcommand)]
    Vault(VaultCmd),
    /// Print a fresh random master key as 32 hex characters.
    Keygen,
    /// Run a network simulation scenario and print its transcript.
    Simulate { scenario: PathBuf },
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long)]
    listen: String,
    #[arg(long)]
    vault: PathBuf,
    /// Hex key file; CLOUDGATE_MASTER_KEY_HEX is used when omitted.
    #[arg(long)]
    master_key: Option<PathBuf>,
    #[arg(long)]
    audit: PathBuf,
    /// Object store directory (defaults to the vault's directory).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 5)]
    lockout_failures: u32,
    #[arg(long, default_value_t = 60)]
    lockout_secs: u64,
    #[arg(long, default_value_t = gateway::DEFAULT_MAX_OBJECT_BYTES)]
    max_object_bytes: u64,
}

#[derive(Args)]
struct ConnectArgs {
    #[arg(long)]
    gateway: String,
    #[arg(long)]
    user: String,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Stage-two user; prompted for when omitted.
    #[arg(long)]
    service_user: Option<String>,
}

#[derive(Subcommand)]
enum ClientCmd {
    /// Connect, log in, then read commands from the prompt.
    Connect(ConnectArgs),
    /// Connect, log in, then run commands from a file.
    Run {
        #[command(flatten)]
        conn: ConnectArgs,
        #[arg(long)]
        script: PathBuf,
    },
}

#[derive(Args)]
struct VaultFiles {
    #[arg(long)]
    vault: PathBuf,
    #[arg(long)]
    master_key: Option<PathBuf>,
    /// Audit log to record provisioning in.
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VaultCmd {
    /// Create an empty vault.
    Init(VaultFiles),
    /// Add a user; the password comes from CLOUDGATE_PASSWORD or a prompt.
    AddUser {
        #[command(flatten)]
        files: VaultFiles,
        #[arg(long)]
        user: String,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        level: u8,
    },
}

fn gateway_cmd(args: GatewayArgs) -> ExitCode {
    let config = GatewayConfig {
        listen: args.listen,
        vault_path: args.vault,
        master_key_path: args.master_key,
        audit_path: args.audit,
        data_dir: args.data_dir,
        timeout_secs: args.timeout_secs,
        lockout_failures: args.lockout_failures,
        lockout_secs: args.lockout_secs,
        max_object_bytes: args.max_object_bytes,
    };
    let gw = match gateway::Gateway::bind(&config) {
        Ok(g) => g,
        Err(e) => {
            log::error!("{e}");
            eprintln!("gateway: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let flag = gw.shutdown_flag();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("no signal handler: {e}");
    }
    match gw.serve() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gateway: {e}");
            ExitCode::from(2)
        }
    }
}

fn client_cmd(cmd: ClientCmd) -> ExitCode {
    let (conn, script) = match cmd {
        ClientCmd::Connect(conn) => (conn, None),
        ClientCmd::Run { conn, script } => (conn, Some(script)),
    };
    let script_text = match script.map(std::fs::read_to_string).transpose() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read script: {e}");
            return ExitCode::from(client::exit::ERROR as u8);
        }
    };
    let config = ClientConfig {
        gateway: conn.gateway.clone(),
        username: conn.user,
        timeout_secs: conn.timeout_secs,
        service_user: conn.service_user,
    };
    let mode = match &script_text {
        Some(t) => Mode::Script(t),
        None => Mode::Interactive,
    };
    let mut connector = client::tcp_connector(conn.gateway);
    let code = client::run_client(
        &config,
        mode,
        &mut StdConsole,
        &mut connector,
        &SystemClock::new(),
    );
    ExitCode::from(code as u8)
}

fn master_key(path: Option<&std::path::Path>) -> Result<cloudgate::aes::Key128, String> {
    gateway::load_master_key(path).map_err(|e| e.to_string())
}

fn vault_cmd(cmd: VaultCmd) -> Result<(), String> {
    let clock = SystemClock::new();
    match cmd {
        VaultCmd::Init(files) => {
            if files.vault.exists() {
                return Err(format!("{} already exists", files.vault.display()));
            }
            let key = master_key(files.master_key.as_deref())?;
            Vault::create(&key)
                .save(&files.vault)
                .map_err(|e| e.to_string())?;
            println!("created {}", files.vault.display());
        }
        VaultCmd::AddUser { files, user, level } => {
            let key = master_key(files.master_key.as_deref())?;
            let mut vault = Vault::load(&files.vault, &key).map_err(|e| e.to_string())?;
            if let Some(path) = &files.audit {
                vault = vault
                    .with_audit(AuditLog::open(path, audit_key(&key)).map_err(|e| e.to_string())?);
            }
            let mut console = StdConsole;
            let pw = match console.env(client::PASSWORD_ENV) {
                Some(p) => p,
                None => console
                    .prompt_password(&format!("Password for {user}: "))
                    .ok_or("no password given")?,
            };
            let level = AuthzLevel::try_from(level).map_err(|e| e.to_string())?;
            vault
                .add_user(
                    "provisioning",
                    &user,
                    pw.as_bytes(),
                    level,
                    clock.unix_time(),
                )
                .map_err(|e| e.to_string())?;
            vault.save(&files.vault).map_err(|e| e.to_string())?;
            println!("added {user} (level {})", level as u8);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Cmd::Gateway(_) => "info",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .init();
    match cli.command {
        Cmd::Gateway(args) => gateway_cmd(args),
        Cmd::Client(cmd) => client_cmd(cmd),
        Cmd::Vault(cmd) => match vault_cmd(cmd) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("vault: {e}");
                ExitCode::from(2)
            }
        },
        Cmd::Keygen => {
            let mut key = [0u8; 16];
            OsRng.fill_bytes(&mut key);
            println!("{}", hex::encode(key));
            ExitCode::SUCCESS
        }
        Cmd::Simulate { scenario } => {
            let text = match std::fs::read_to_string(&scenario) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("{}: {e}", scenario.display());
                    return ExitCode::from(2);
                }
            };
            match netsim::run_scenario_text(&text) {
                Ok((_, transcript)) => {
                    print!("{transcript}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{}: {e}", scenario.display());
                    ExitCode::from(2)
                }
            }
        }
    }
}
