//! The per-connection command loop: stage-one handshake, then AUTH2, then
//! authorized storage commands. Every command leaves exactly one audit
//! entry, whatever its outcome.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, info, warn};

use super::protocol::{
    encode_listing, valid_object_name, Command, Request, Response, Status, CHUNK_SIZE,
};
use super::store::{ObjectStore, StoreError};
use crate::clock::Clock;
use crate::tunnel::{server_accept, HandshakeError, Session, SessionError, Transport};
use crate::vault::{AuditAction, AuthzLevel, Vault, VaultError, VerifyOutcome};

/// Stage-two failures tolerated on one session before it is closed.
pub const MAX_STAGE2_FAILURES: u32 = 3;

const POLL_INTERVAL: Duration = Duration::from_millis(100);

/// Everything a connection handler shares with the rest of the gateway.
pub struct ServiceContext {
    pub vault: Mutex<Vault>,
    /// Where the vault is persisted after each mutation; `None` keeps it in memory.
    pub vault_path: Option<PathBuf>,
    pub store: ObjectStore,
    pub clock: Arc<dyn Clock>,
    /// Handshake wait and mid-command stall limit.
    pub timeout: Duration,
    pub max_object_bytes: u64,
    pub shutdown: Arc<AtomicBool>,
}

impl ServiceContext {
    fn audit(&self, actor: &str, action: AuditAction, detail: impl Into<String>) {
        let mut vault = self.vault.lock().unwrap();
        if let Err(e) = vault
            .audit_mut()
            .record(self.clock.unix_time(), actor, action, detail)
        {
            warn!("audit append failed: {e}");
        }
    }

    fn persist(&self, vault: &Vault) {
        if let Some(path) = &self.vault_path {
            if let Err(e) = vault.save(path) {
                warn!("saving vault to {} failed: {e}", path.display());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage2 {
    Pending,
    Authed { username: String, level: AuthzLevel },
}

/// Why a session ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEnd {
    ClientClosed,
    Stage2Exhausted,
    Shutdown,
    Error(String),
}

impl SessionEnd {
    fn describe(&self) -> String {
        match self {
            SessionEnd::ClientClosed => "closed by client".into(),
            SessionEnd::Stage2Exhausted => "too many stage-2 failures".into(),
            SessionEnd::Shutdown => "gateway shutting down".into(),
            SessionEnd::Error(e) => format!("error: {e}"),
        }
    }
}

struct Connection<'a, T: Transport> {
    ctx: &'a ServiceContext,
    session: Session<T>,
    stage2: Stage2,
    failures: u32,
}

/// Serves one transport connection to completion.
pub fn serve_connection<T: Transport>(
    ctx: &ServiceContext,
    transport: T,
) -> Result<SessionEnd, HandshakeError> {
    let session = server_accept(transport, &ctx.vault, &*ctx.clock, ctx.timeout)?;
    let created_at = ctx.clock.unix_time();
    let tunnel_user = session.username().to_owned();
    let mut conn = Connection {
        ctx,
        session,
        stage2: Stage2::Pending,
        failures: 0,
    };
    let end = conn.run();
    let actor = conn.actor().to_owned();
    let secs = ctx.clock.unix_time().saturating_sub(created_at);
    ctx.audit(
        &actor,
        AuditAction::Close,
        format!("{} after {secs}s", end.describe()),
    );
    info!("session for {tunnel_user} ended: {}", end.describe());
    if end != SessionEnd::ClientClosed {
        let _ = conn.session.close();
    }
    Ok(end)
}

impl<T: Transport> Connection<'_, T> {
    fn actor(&self) -> &str {
        match &self.stage2 {
            Stage2::Authed { username, .. } => username,
            Stage2::Pending => self.session.username(),
        }
    }

    fn audit(&self, action: AuditAction, detail: impl Into<String>) {
        self.ctx.audit(self.actor(), action, detail);
    }

    fn respond(&mut self, response: Response) -> Result<(), SessionError> {
        self.session.send_data(&response.encode())
    }

    fn run(&mut self) -> SessionEnd {
        loop {
            if self.ctx.shutdown.load(Ordering::SeqCst) {
                return SessionEnd::Shutdown;
            }
            let msg = match self.session.recv_data_timeout(Some(POLL_INTERVAL)) {
                Ok(Some(m)) => m,
                Ok(None) => continue,
                Err(SessionError::PeerClosed) => return SessionEnd::ClientClosed,
                Err(e) => return SessionEnd::Error(e.to_string()),
            };
            let result = match Request::decode(&msg) {
                Ok(req) => {
                    debug!("{}: {req:?}", self.actor());
                    self.handle(req)
                }
                Err(e) => {
                    debug!("{}: {e}", self.actor());
                    self.respond(Response::status(Status::BadRequest))
                        .map(|_| None)
                }
            };
            match result {
                Ok(None) => {}
                Ok(Some(end)) => return end,
                Err(SessionError::PeerClosed) => return SessionEnd::ClientClosed,
                Err(e) => return SessionEnd::Error(e.to_string()),
            }
        }
    }

    /// The stage-two identity if it may run `cmd`, else the status to refuse with.
    fn authorize(&self, cmd: Command) -> Result<String, Status> {
        match &self.stage2 {
            Stage2::Authed { username, level } if cmd.allowed(*level) => Ok(username.clone()),
            _ => Err(Status::NotAuthorized),
        }
    }

    fn refuse(
        &mut self,
        action: AuditAction,
        what: &str,
        status: Status,
    ) -> Result<Option<SessionEnd>, SessionError> {
        let why = match (&self.stage2, status) {
            (Stage2::Pending, Status::NotAuthorized) => "before stage-2 authentication".to_owned(),
            _ => status.name().to_owned(),
        };
        self.audit(action, format!("{what}: denied, {why}"));
        self.respond(Response::status(status))?;
        Ok(None)
    }

    fn handle(&mut self, req: Request) -> Result<Option<SessionEnd>, SessionError> {
        match req {
            Request::Auth2 { username, password } => self.auth2(&username, &password),
            Request::Put { name, size } => self.put(name, size),
            Request::Get { name } => self.get(name),
            Request::List => self.list(),
            Request::AddUser {
                username,
                password,
                level,
            } => self.add_user(&username, &password, level),
            Request::Data(_) => self
                .respond(Response::status(Status::BadRequest))
                .map(|_| None),
        }
    }

    fn auth2(
        &mut self,
        username: &str,
        password: &[u8],
    ) -> Result<Option<SessionEnd>, SessionError> {
        if let Stage2::Authed { .. } = self.stage2 {
            return self.refuse(AuditAction::Auth2Fail, username, Status::BadRequest);
        }
        let now = self.ctx.clock.unix_time();
        let outcome = {
            let mut vault = self.ctx.vault.lock().unwrap();
            let outcome = vault.verify_password(username, password, now);
            self.ctx.persist(&vault);
            outcome
        };
        let status = match outcome {
            Ok(VerifyOutcome::Ok(level)) => {
                info!("stage-2 authenticated {username} at level {}", level as u8);
                self.ctx.audit(
                    username,
                    AuditAction::Auth2Ok,
                    format!("level {}", level as u8),
                );
                self.stage2 = Stage2::Authed {
                    username: username.to_owned(),
                    level,
                };
                return self
                    .respond(Response::new(Status::Ok, vec![level as u8]))
                    .map(|_| None);
            }
            Ok(VerifyOutcome::Fail) => {
                self.ctx
                    .audit(username, AuditAction::Auth2Fail, "bad service credentials");
                Status::NotAuthorized
            }
            // the vault has already written the LOCKOUT entry
            Ok(VerifyOutcome::Locked) => Status::Locked,
            Err(e) => {
                self.ctx
                    .audit(username, AuditAction::Auth2Fail, e.to_string());
                Status::NotAuthorized
            }
        };
        self.failures += 1;
        self.respond(Response::status(status))?;
        if self.failures >= MAX_STAGE2_FAILURES {
            return Ok(Some(SessionEnd::Stage2Exhausted));
        }
        Ok(None)
    }

    fn put(&mut self, name: String, size: u64) -> Result<Option<SessionEnd>, SessionError> {
        let owner = match self.authorize(Command::Put) {
            Ok(o) => o,
            Err(status) => return self.refuse(AuditAction::Put, &name, status),
        };
        if !valid_object_name(&name) {
            return self.refuse(AuditAction::Put, &name, Status::BadRequest);
        }
        if size > self.ctx.max_object_bytes {
            return self.refuse(AuditAction::Put, &name, Status::TooLarge);
        }
        self.respond(Response::status(Status::Ok))?;
        let data = match self.receive_upload(size) {
            Ok(Some(d)) => d,
            Ok(None) => return self.refuse(AuditAction::Put, &name, Status::BadRequest),
            Err(e) => {
                // nothing was written, so the store keeps its previous state
                self.audit(AuditAction::Put, format!("{name}: aborted, {e}"));
                return Err(e);
            }
        };
        match self.ctx.store.put(&owner, &name, &data) {
            Ok(()) => {
                self.audit(AuditAction::Put, format!("{name}: {size} bytes"));
                self.respond(Response::status(Status::Ok))?;
            }
            Err(e) => {
                warn!("storing {owner}/{name} failed: {e}");
                self.audit(AuditAction::Put, format!("{name}: failed, {e}"));
                self.respond(Response::status(Status::BadRequest))?;
            }
        }
        Ok(None)
    }

    /// Collects `size` bytes of DATA chunks. `None` means the client broke
    /// the upload protocol.
    fn receive_upload(&mut self, size: u64) -> Result<Option<Vec<u8>>, SessionError> {
        let size = size as usize;
        let mut data = Vec::with_capacity(size);
        while data.len() < size {
            let Some(msg) = self.session.recv_data_timeout(Some(self.ctx.timeout))? else {
                return Err(SessionError::Io(std::io::ErrorKind::TimedOut.into()));
            };
            match Request::decode(&msg) {
                Ok(Request::Data(chunk))
                    if chunk.len() <= CHUNK_SIZE && data.len() + chunk.len() <= size =>
                {
                    data.extend_from_slice(&chunk)
                }
                _ => return Ok(None),
            }
        }
        Ok(Some(data))
    }

    fn get(&mut self, name: String) -> Result<Option<SessionEnd>, SessionError> {
        let owner = match self.authorize(Command::Get) {
            Ok(o) => o,
            Err(status) => return self.refuse(AuditAction::Get, &name, status),
        };
        let data = match self.ctx.store.get(&owner, &name) {
            Ok(d) => d,
            Err(StoreError::NotFound) => {
                return self.refuse(AuditAction::Get, &name, Status::NotFound)
            }
            Err(e) => {
                warn!("reading {owner}/{name} failed: {e}");
                return self.refuse(AuditAction::Get, &name, Status::BadRequest);
            }
        };
        self.audit(AuditAction::Get, format!("{name}: {} bytes", data.len()));
        self.respond(Response::new(
            Status::Ok,
            (data.len() as u64).to_be_bytes().to_vec(),
        ))?;
        for chunk in data.chunks(CHUNK_SIZE) {
            self.respond(Response::new(Status::Ok, chunk.to_vec()))?;
        }
        Ok(None)
    }

    fn list(&mut self) -> Result<Option<SessionEnd>, SessionError> {
        let owner = match self.authorize(Command::List) {
            Ok(o) => o,
            Err(status) => return self.refuse(AuditAction::List, "*", status),
        };
        match self.ctx.store.list(&owner) {
            Ok(items) => {
                self.audit(AuditAction::List, format!("{} objects", items.len()));
                self.respond(Response::new(Status::Ok, encode_listing(&items)))?;
            }
            Err(e) => {
                warn!("listing {owner} failed: {e}");
                return self.refuse(AuditAction::List, "*", Status::BadRequest);
            }
        }
        Ok(None)
    }

    fn add_user(
        &mut self,
        username: &str,
        password: &[u8],
        level: u8,
    ) -> Result<Option<SessionEnd>, SessionError> {
        let actor = match self.authorize(Command::AddUser) {
            Ok(a) => a,
            Err(status) => return self.refuse(AuditAction::AddUser, username, status),
        };
        let Ok(level) = AuthzLevel::try_from(level) else {
            return self.refuse(AuditAction::AddUser, username, Status::BadRequest);
        };
        let now = self.ctx.clock.unix_time();
        let result = {
            let mut vault = self.ctx.vault.lock().unwrap();
            let result = vault.add_user(&actor, username, password, level, now);
            if result.is_ok() {
                self.ctx.persist(&vault);
            }
            result
        };
        match result {
            // add_user wrote the ADD_USER entry
            Ok(()) => self.respond(Response::status(Status::Ok)).map(|_| None),
            Err(VaultError::Conflict(_)) => {
                self.refuse(AuditAction::AddUser, username, Status::Conflict)
            }
            Err(_) => self.refuse(AuditAction::AddUser, username, Status::BadRequest),
        }
    }
}
