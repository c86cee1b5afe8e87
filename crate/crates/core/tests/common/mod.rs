#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use cloudgate::aes::Key128;
use cloudgate::client::GatewayClient;
use cloudgate::clock::{Clock, SystemClock};
use cloudgate::gateway::{
    serve_connection, Gateway, GatewayConfig, ObjectStore, ServiceContext, SessionEnd,
};
use cloudgate::tunnel::{
    client_connect, memory_pair, HandshakeError, MemoryTransport, Sniffer, WireLog, DEFAULT_TIMEOUT,
};
use cloudgate::vault::{audit_key, AuditLog, AuthzLevel, Vault};

pub const MASTER_HEX: &str = "8f3a61c2d4e5b6a7980112233445566a";

pub const TUNNEL_USER: (&str, &str) = ("vpncustomer", "tunnel-Secret-7Q");
pub const ADMIN: (&str, &str) = ("admin", "admin-Secret-9Z");
pub const WRITER: (&str, &str) = ("writer", "writer-Secret-4K");
pub const READER: (&str, &str) = ("reader", "reader-Secret-2M");

pub fn master() -> Key128 {
    Key128::from_slice(&hex::decode(MASTER_HEX).unwrap()).unwrap()
}

pub fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Non-comment lines of a fixture, split on whitespace.
pub fn fixture_rows(name: &str) -> Vec<Vec<String>> {
    fixture(name)
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect()
}

pub fn unhex(s: &str) -> Vec<u8> {
    if s == "-" {
        Vec::new()
    } else {
        hex::decode(s).unwrap()
    }
}

pub fn block(s: &str) -> [u8; 16] {
    unhex(s).try_into().unwrap()
}

pub fn provisioned_vault() -> Vault {
    let mut v = Vault::create(&master());
    for ((user, pw), level) in [
        (TUNNEL_USER, AuthzLevel::Read),
        (ADMIN, AuthzLevel::Admin),
        (WRITER, AuthzLevel::ReadWrite),
        (READER, AuthzLevel::Read),
    ] {
        v.add_user("setup", user, pw.as_bytes(), level, 0).unwrap();
    }
    v
}

pub fn context_with(dir: &Path, vault: Vault, clock: Arc<dyn Clock>) -> Arc<ServiceContext> {
    Arc::new(ServiceContext {
        vault: Mutex::new(vault),
        vault_path: Some(dir.join("vault.bin")),
        store: ObjectStore::new(dir, master()),
        clock,
        timeout: DEFAULT_TIMEOUT,
        max_object_bytes: 16 << 20,
        shutdown: Arc::new(AtomicBool::new(false)),
    })
}

pub fn memory_context(dir: &Path) -> Arc<ServiceContext> {
    context_with(dir, provisioned_vault(), Arc::new(SystemClock::new()))
}

pub type MemClient = GatewayClient<Sniffer<MemoryTransport>>;
pub type ServerThread = JoinHandle<Result<SessionEnd, HandshakeError>>;

/// Stage-one connects a client to a fresh server thread over an in-memory
/// pipe, recording the client's side of the wire into `log`.
pub fn memory_session(ctx: &Arc<ServiceContext>, log: &WireLog) -> (MemClient, ServerThread) {
    let (c, s) = memory_pair();
    let server_ctx = ctx.clone();
    let server = thread::spawn(move || serve_connection(&server_ctx, s));
    let transport = Sniffer::new(c, log.clone());
    let session = client_connect(
        transport,
        TUNNEL_USER.0,
        TUNNEL_USER.1.as_bytes(),
        &SystemClock::new(),
        DEFAULT_TIMEOUT,
        &mut |_| {},
    )
    .expect("stage-1 handshake");
    (GatewayClient::new(session), server)
}

/// A gateway on 127.0.0.1 with an ephemeral port, stopped on drop.
pub struct LiveGateway {
    pub addr: String,
    pub dir: tempfile::TempDir,
    pub ctx: Arc<ServiceContext>,
    flag: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl LiveGateway {
    pub fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let key_path = dir.path().join("master.key");
        std::fs::write(&key_path, MASTER_HEX).unwrap();
        let vault_path = dir.path().join("vault.bin");
        provisioned_vault().save(&vault_path).unwrap();
        let mut config =
            GatewayConfig::new("127.0.0.1:0", &vault_path, dir.path().join("audit.log"));
        config.master_key_path = Some(key_path);
        let gw = Gateway::bind(&config).expect("gateway starts");
        let addr = gw.local_addr().to_string();
        let flag = gw.shutdown_flag();
        let ctx = gw.context().clone();
        let handle = thread::spawn(move || gw.serve().unwrap());
        LiveGateway {
            addr,
            dir,
            ctx,
            flag,
            handle: Some(handle),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn stop(&mut self) {
        self.flag.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
    }

    pub fn audit_key(&self) -> Key128 {
        audit_key(&master())
    }

    pub fn reopen_audit(&self) -> AuditLog {
        AuditLog::open(&self.path("audit.log"), self.audit_key()).unwrap()
    }
}

impl Drop for LiveGateway {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Polls until `f` holds or two seconds pass.
pub fn eventually(mut f: impl FnMut() -> bool) -> bool {
    for _ in 0..200 {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    false
}
