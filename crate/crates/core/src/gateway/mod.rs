//! The provider-side daemon.

pub mod protocol;
pub mod service;
pub mod store;

use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{error, info, warn};
use thiserror::Error;

use crate::aes::Key128;
use crate::clock::{Clock, SystemClock};
use crate::vault::{audit_key, AuditError, AuditLog, LockoutPolicy, Vault, VaultError};

pub use protocol::{Command, ObjectInfo, Request, Response, Status, CHUNK_SIZE};
pub use service::{serve_connection, ServiceContext, SessionEnd, Stage2, MAX_STAGE2_FAILURES};
pub use store::{data_keys, ObjectStore, StoreError, StoredObject};

pub const MASTER_KEY_ENV: &str = "CLOUDGATE_MASTER_KEY_HEX";
pub const DEFAULT_MAX_OBJECT_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("master key: {0}")]
    MasterKey(String),
    #[error("cannot load vault {path}: {source}")]
    Vault { path: PathBuf, source: VaultError },
    #[error("cannot open audit log {path}: {source}")]
    Audit { path: PathBuf, source: AuditError },
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

impl GatewayError {
    /// Every startup failure exits with 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub listen: String,
    pub vault_path: PathBuf,
    /// Hex key file; when absent the key comes from `CLOUDGATE_MASTER_KEY_HEX`.
    pub master_key_path: Option<PathBuf>,
    pub audit_path: PathBuf,
    /// Object store root; defaults to the vault's directory.
    pub data_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    pub lockout_failures: u32,
    pub lockout_secs: u64,
    pub max_object_bytes: u64,
}

impl GatewayConfig {
    pub fn new(
        listen: impl Into<String>,
        vault_path: impl Into<PathBuf>,
        audit_path: impl Into<PathBuf>,
    ) -> Self {
        GatewayConfig {
            listen: listen.into(),
            vault_path: vault_path.into(),
            master_key_path: None,
            audit_path: audit_path.into(),
            data_dir: None,
            timeout_secs: 30,
            lockout_failures: 5,
            lockout_secs: 60,
            max_object_bytes: DEFAULT_MAX_OBJECT_BYTES,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let checks = [
            (self.timeout_secs == 0, "timeout_secs must be positive"),
            (
                self.lockout_failures == 0,
                "lockout_failures must be positive",
            ),
            (self.lockout_secs == 0, "lockout_secs must be positive"),
            (
                self.max_object_bytes == 0,
                "max_object_bytes must be positive",
            ),
        ];
        match checks.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(GatewayError::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| match self.vault_path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
                _ => PathBuf::from("."),
            })
    }
}

/// Parses 32 hex characters, ignoring surrounding whitespace.
pub fn parse_master_key(text: &str) -> Result<Key128, GatewayError> {
    let bytes = hex::decode(text.trim()).map_err(|e| GatewayError::MasterKey(e.to_string()))?;
    Key128::from_slice(&bytes)
        .map_err(|_| GatewayError::MasterKey(format!("expected 16 bytes, got {}", bytes.len())))
}

/// Reads the key from `path`, or from the environment when no path is given.
pub fn load_master_key(path: Option<&Path>) -> Result<Key128, GatewayError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| GatewayError::MasterKey(format!("{}: {e}", p.display())))?;
            parse_master_key(&text)
        }
        None => match std::env::var(MASTER_KEY_ENV) {
            Ok(v) => parse_master_key(&v),
            Err(_) => Err(GatewayError::MasterKey(format!(
                "no --master-key and {MASTER_KEY_ENV} is unset"
            ))),
        },
    }
}

pub struct Gateway {
    listener: TcpListener,
    ctx: Arc<ServiceContext>,
}

impl Gateway {
    /// Loads the master key, vault and audit log, then binds.
    pub fn bind(config: &GatewayConfig) -> Result<Self, GatewayError> {
        Self::bind_with_clock(config, Arc::new(SystemClock::new()))
    }

    pub fn bind_with_clock(
        config: &GatewayConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let master = load_master_key(config.master_key_path.as_deref())?;
        let vault =
            Vault::load(&config.vault_path, &master).map_err(|source| GatewayError::Vault {
                path: config.vault_path.clone(),
                source,
            })?;
        let audit = AuditLog::open(&config.audit_path, audit_key(&master)).map_err(|source| {
            GatewayError::Audit {
                path: config.audit_path.clone(),
                source,
            }
        })?;
        let mut vault = vault.with_audit(audit);
        vault.set_policy(LockoutPolicy {
            max_failures: config.lockout_failures,
            lockout_secs: config.lockout_secs,
        });
        let listener = TcpListener::bind(&config.listen).map_err(|source| GatewayError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
        let ctx = ServiceContext {
            vault: Mutex::new(vault),
            vault_path: Some(config.vault_path.clone()),
            store: ObjectStore::new(config.data_dir(), master),
            clock,
            timeout: Duration::from_secs(config.timeout_secs),
            max_object_bytes: config.max_object_bytes,
            shutdown: Arc::new(AtomicBool::new(false)),
        };
        Ok(Gateway {
            listener,
            ctx: Arc::new(ctx),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Setting this flag stops accepting and drains open sessions.
    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.ctx.shutdown.clone()
    }

    pub fn context(&self) -> &Arc<ServiceContext> {
        &self.ctx
    }

    /// Accepts connections until the shutdown flag is set, then waits for
    /// in-flight sessions to finish their current command.
    pub fn serve(&self) -> io::Result<()> {
        self.listener.set_nonblocking(true)?;
        info!("gateway ready, listening on {}", self.local_addr());
        let next_id = AtomicU64::new(1);
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.ctx.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let id = next_id.fetch_add(1, Ordering::Relaxed);
                    info!("connection {id} from {peer}");
                    workers.retain(|h| !h.is_finished());
                    workers.push(self.spawn_worker(id, stream));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20))
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => {
                    error!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(100));
                }
            }
        }
        info!(
            "shutting down, draining {} sessions",
            workers.iter().filter(|h| !h.is_finished()).count()
        );
        for w in workers {
            let _ = w.join();
        }
        info!("gateway stopped");
        Ok(())
    }

    fn spawn_worker(&self, id: u64, stream: TcpStream) -> JoinHandle<()> {
        let ctx = self.ctx.clone();
        thread::spawn(move || {
            if let Err(e) = stream
                .set_nonblocking(false)
                .and_then(|_| stream.set_nodelay(true))
            {
                warn!("connection {id}: {e}");
                return;
            }
            match serve_connection(&ctx, stream) {
                Ok(end) => info!("connection {id} closed: {end:?}"),
                Err(e) => info!("connection {id} handshake failed: {e}"),
            }
        })
    }
}

/// Binds and serves until `shutdown` is set.
pub fn run_gateway(
    config: &GatewayConfig,
    shutdown: Option<Arc<AtomicBool>>,
) -> Result<(), GatewayError> {
    let gateway = Gateway::bind(config)?;
    if let Some(flag) = shutdown {
        let inner = gateway.shutdown_flag();
        thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(50));
            }
            inner.store(true, Ordering::SeqCst);
        });
    }
    gateway.serve().map_err(|source| GatewayError::Bind {
        addr: config.listen.clone(),
        source,
    })
}
