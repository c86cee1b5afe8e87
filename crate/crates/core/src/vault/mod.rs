//! Credential vault: salted one-way password verifiers, per-user
//! authorization levels, failure lockout, and the audit trail.
//!
//! A verifier is `cmac(derive_user_key(password, salt), username)`. The
//! same 16 bytes serve as the user's stage-one tunnel secret, so the
//! gateway can check handshake proofs without ever holding the password.
//!
//! On disk the vault is `CGV1 || master_salt(16) || record_count(4, BE) ||
//! envelope`, the envelope sealing every record under keys derived from
//! the master key, with the 24-byte header as associated data.

pub mod audit;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;

use crate::aes::{Block, Key128};
use crate::cipher::{self, ct_eq, derive_key, Cmac, KeyPairSym, Label};

pub use audit::{AuditAction, AuditEntry, AuditError, AuditFields, AuditLog, ChainVerdict};

pub const VAULT_MAGIC: &[u8; 4] = b"CGV1";
pub const USER_KEY_ITERATIONS: u32 = 10_000;
pub const MAX_USERNAME_LEN: usize = 64;

const VAULT_CONTEXT: &Block = b"cloudgate/vault\0";
const DUMMY_CONTEXT: &Block = b"cloudgate/dummy\0";
const AUDIT_CONTEXT: &Block = b"cloudgate/audit\0";
const HEADER_LEN: usize = 4 + 16 + 4;

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("user {0:?} already exists")]
    Conflict(String),
    #[error("invalid username")]
    InvalidUsername,
    #[error("password must not be empty")]
    EmptyPassword,
    #[error("authorization level must be 1, 2 or 3, got {0}")]
    InvalidLevel(u8),
    #[error("vault file is corrupt or the master key is wrong")]
    Corrupt,
    #[error("vault I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum AuthzLevel {
    Read = 1,
    ReadWrite = 2,
    Admin = 3,
}

impl TryFrom<u8> for AuthzLevel {
    type Error = VaultError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(AuthzLevel::Read),
            2 => Ok(AuthzLevel::ReadWrite),
            3 => Ok(AuthzLevel::Admin),
            other => Err(VaultError::InvalidLevel(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialRecord {
    pub username: String,
    pub salt: Block,
    pub verifier: Block,
    pub authz_level: AuthzLevel,
    pub failed_count: u32,
    pub locked_until: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockoutPolicy {
    pub max_failures: u32,
    pub lockout_secs: u64,
}

impl Default for LockoutPolicy {
    fn default() -> Self {
        LockoutPolicy {
            max_failures: 5,
            lockout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyOutcome {
    Ok(AuthzLevel),
    Fail,
    Locked,
}

/// What the handshake needs for a username. Unknown names get stable
/// per-name dummies, so the challenge looks the same either way.
#[derive(Debug, Clone)]
pub struct HandshakeMaterial {
    pub salt: Block,
    pub secret: Key128,
    pub known: bool,
}

/// Iterated CMAC chain: `k0 = cmac(salt, pw)`, `ki = cmac(k(i-1), pw || salt || i)`.
pub fn derive_user_key(password: &[u8], salt: &Block) -> Result<Key128, VaultError> {
    if password.is_empty() {
        return Err(VaultError::EmptyPassword);
    }
    let mut key = Key128::new(cipher::cmac(&Key128::new(*salt), password));
    for i in 1..=USER_KEY_ITERATIONS {
        key = Key128::new(Cmac::new(&key).mac_parts(&[password, salt, &i.to_be_bytes()]));
    }
    Ok(key)
}

/// The stored verifier, which doubles as the stage-one tunnel secret.
pub fn password_verifier(
    username: &str,
    password: &[u8],
    salt: &Block,
) -> Result<Block, VaultError> {
    Ok(cipher::cmac(
        &derive_user_key(password, salt)?,
        username.as_bytes(),
    ))
}

/// Key for the audit chain, independent of any vault file.
pub fn audit_key(master_key: &Key128) -> Key128 {
    derive_key(master_key, &Label::Audit, AUDIT_CONTEXT, &[0u8; 16])
}

fn validate_username(username: &str) -> Result<(), VaultError> {
    let allowed = |c: char| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '@');
    if username.is_empty()
        || username.len() > MAX_USERNAME_LEN
        || username.starts_with('.')
        || !username.chars().all(allowed)
    {
        return Err(VaultError::InvalidUsername);
    }
    Ok(())
}

#[derive(Debug)]
pub struct Vault {
    master_salt: Block,
    keys: KeyPairSym,
    dummy: Cmac,
    records: BTreeMap<String, CredentialRecord>,
    audit: AuditLog,
    policy: LockoutPolicy,
}

impl Vault {
    /// A fresh, empty vault with an in-memory audit log.
    pub fn create(master_key: &Key128) -> Self {
        let mut master_salt = [0u8; 16];
        OsRng.fill_bytes(&mut master_salt);
        Self::with_salt(master_key, master_salt)
    }

    fn with_salt(master_key: &Key128, master_salt: Block) -> Self {
        let keys = KeyPairSym::derive(
            master_key,
            &Label::EncC2s,
            &Label::MacC2s,
            (&master_salt, VAULT_CONTEXT),
        );
        let dummy = Cmac::new(&derive_key(
            master_key,
            &Label::MacS2c,
            &master_salt,
            DUMMY_CONTEXT,
        ));
        Vault {
            master_salt,
            keys,
            dummy,
            records: BTreeMap::new(),
            audit: AuditLog::in_memory(audit_key(master_key)),
            policy: LockoutPolicy::default(),
        }
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = audit;
        self
    }

    pub fn set_policy(&mut self, policy: LockoutPolicy) {
        self.policy = policy;
    }

    pub fn policy(&self) -> LockoutPolicy {
        self.policy
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn audit_mut(&mut self) -> &mut AuditLog {
        &mut self.audit
    }

    pub fn record(&self, username: &str) -> Option<&CredentialRecord> {
        self.records.get(username)
    }

    pub fn records(&self) -> impl Iterator<Item = &CredentialRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn add_user(
        &mut self,
        actor: &str,
        username: &str,
        password: &[u8],
        level: AuthzLevel,
        now: u64,
    ) -> Result<(), VaultError> {
        validate_username(username)?;
        if password.is_empty() {
            return Err(VaultError::EmptyPassword);
        }
        if self.records.contains_key(username) {
            return Err(VaultError::Conflict(username.to_owned()));
        }
        let mut salt = [0u8; 16];
        OsRng.fill_bytes(&mut salt);
        let verifier = password_verifier(username, password, &salt)?;
        self.records.insert(
            username.to_owned(),
            CredentialRecord {
                username: username.to_owned(),
                salt,
                verifier,
                authz_level: level,
                failed_count: 0,
                locked_until: None,
            },
        );
        self.audit.record(
            now,
            actor,
            AuditAction::AddUser,
            format!("added {username} level {}", level as u8),
        )?;
        Ok(())
    }

    /// Checks a stage-two password. Failures count toward lockout; the
    /// failure that reaches the limit, and every attempt while locked,
    /// returns `Locked` and appends a LOCKOUT entry.
    pub fn verify_password(
        &mut self,
        username: &str,
        password: &[u8],
        now: u64,
    ) -> Result<VerifyOutcome, VaultError> {
        let policy = self.policy;
        let Some(rec) = self.records.get_mut(username) else {
            // same work as a real check
            let salt = self.dummy.mac_parts(&[b"salt", username.as_bytes()]);
            if !password.is_empty() {
                let _ = password_verifier(username, password, &salt)?;
            }
            return Ok(VerifyOutcome::Fail);
        };
        if let Some(until) = rec.locked_until {
            if now < until {
                self.audit.record(
                    now,
                    username,
                    AuditAction::Lockout,
                    format!("locked until {until}"),
                )?;
                return Ok(VerifyOutcome::Locked);
            }
            rec.locked_until = None;
            rec.failed_count = 0;
        }
        let matches = !password.is_empty()
            && ct_eq(
                &password_verifier(username, password, &rec.salt)?,
                &rec.verifier,
            );
        if matches {
            rec.failed_count = 0;
            return Ok(VerifyOutcome::Ok(rec.authz_level));
        }
        rec.failed_count += 1;
        if rec.failed_count >= policy.max_failures {
            let until = now + policy.lockout_secs;
            rec.locked_until = Some(until);
            let detail = format!(
                "{} consecutive failures, locked until {until}",
                rec.failed_count
            );
            self.audit
                .record(now, username, AuditAction::Lockout, detail)?;
            return Ok(VerifyOutcome::Locked);
        }
        Ok(VerifyOutcome::Fail)
    }

    pub fn handshake_material(&self, username: &str) -> HandshakeMaterial {
        match self.records.get(username) {
            Some(rec) => HandshakeMaterial {
                salt: rec.salt,
                secret: Key128::new(rec.verifier),
                known: true,
            },
            None => HandshakeMaterial {
                salt: self.dummy.mac_parts(&[b"salt", username.as_bytes()]),
                secret: Key128::new(self.dummy.mac_parts(&[b"verifier", username.as_bytes()])),
                known: false,
            },
        }
    }

    fn encode_records(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for rec in self.records.values() {
            out.push(rec.username.len() as u8);
            out.extend_from_slice(rec.username.as_bytes());
            out.extend_from_slice(&rec.salt);
            out.extend_from_slice(&rec.verifier);
            out.push(rec.authz_level as u8);
            out.extend_from_slice(&rec.failed_count.to_be_bytes());
            match rec.locked_until {
                Some(t) => {
                    out.push(1);
                    out.extend_from_slice(&t.to_be_bytes());
                }
                None => out.push(0),
            }
        }
        out
    }

    fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(VAULT_MAGIC);
        h[4..20].copy_from_slice(&self.master_salt);
        h[20..].copy_from_slice(&(self.records.len() as u32).to_be_bytes());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let env = cipher::seal(&self.encode_records(), &self.keys, &header, &mut OsRng);
        let mut out = header.to_vec();
        out.extend_from_slice(&env.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], master_key: &Key128) -> Result<Self, VaultError> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != VAULT_MAGIC {
            return Err(VaultError::Corrupt);
        }
        let (header, body) = bytes.split_at(HEADER_LEN);
        let master_salt: Block = header[4..20].try_into().unwrap();
        let count = u32::from_be_bytes(header[20..].try_into().unwrap()) as usize;
        let mut vault = Self::with_salt(master_key, master_salt);
        let plain =
            cipher::open_bytes(body, &vault.keys, header).map_err(|_| VaultError::Corrupt)?;
        vault.records = decode_records(&plain).ok_or(VaultError::Corrupt)?;
        if vault.records.len() != count {
            return Err(VaultError::Corrupt);
        }
        Ok(vault)
    }

    /// Writes to a sibling temporary file, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), VaultError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, master_key: &Key128) -> Result<Self, VaultError> {
        Self::from_bytes(&fs::read(path)?, master_key)
    }
}

fn decode_records(mut buf: &[u8]) -> Option<BTreeMap<String, CredentialRecord>> {
    fn take<'a>(buf: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
        if buf.len() < n {
            return None;
        }
        let (h, t) = buf.split_at(n);
        *buf = t;
        Some(h)
    }
    let mut records = BTreeMap::new();
    while !buf.is_empty() {
        let ulen = take(&mut buf, 1)?[0] as usize;
        let username = std::str::from_utf8(take(&mut buf, ulen)?).ok()?.to_owned();
        validate_username(&username).ok()?;
        let salt = take(&mut buf, 16)?.try_into().ok()?;
        let verifier = take(&mut buf, 16)?.try_into().ok()?;
        let authz_level = AuthzLevel::try_from(take(&mut buf, 1)?[0]).ok()?;
        let failed_count = u32::from_be_bytes(take(&mut buf, 4)?.try_into().ok()?);
        let locked_until = match take(&mut buf, 1)?[0] {
            0 => None,
            1 => Some(u64::from_be_bytes(take(&mut buf, 8)?.try_into().ok()?)),
            _ => return None,
        };
        let rec = CredentialRecord {
            username: username.clone(),
            salt,
            verifier,
            authz_level,
            failed_count,
            locked_until,
        };
        if records.insert(username, rec).is_some() {
            return None;
        }
    }
    Some(records)
}
