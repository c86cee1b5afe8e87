//! Append-only audit trail. Each entry's tag is
//! `cmac(k_audit, prev_tag || canonical(entry))`, the first entry chaining
//! from sixteen zero bytes, so any in-place edit breaks every tag from the
//! edited entry onward.
//!
//! Truncating the tail leaves a shorter chain that still verifies; callers
//! that care must compare against an externally recorded length.
//!
//! File layout: `CGA1` followed by records of
//! `len(4, BE) || canonical entry || tag(16)`, where `len` counts the entry
//! and the tag.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::aes::{Block, Key128};
use crate::cipher::{ct_eq, Cmac};

pub const AUDIT_MAGIC: &[u8; 4] = b"CGA1";
pub const MAX_DETAIL_LEN: usize = 256;
pub const MAX_ACTOR_LEN: usize = 64;
const GENESIS_TAG: Block = [0u8; 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AuditAction {
    Connect = 0,
    Auth1Ok = 1,
    Auth1Fail = 2,
    Auth2Ok = 3,
    Auth2Fail = 4,
    Put = 5,
    Get = 6,
    List = 7,
    Lockout = 8,
    Close = 9,
    AddUser = 10,
}

impl AuditAction {
    pub fn from_u8(b: u8) -> Option<Self> {
        use AuditAction::*;
        Some(match b {
            0 => Connect,
            1 => Auth1Ok,
            2 => Auth1Fail,
            3 => Auth2Ok,
            4 => Auth2Fail,
            5 => Put,
            6 => Get,
            7 => List,
            8 => Lockout,
            9 => Close,
            10 => AddUser,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        use AuditAction::*;
        match self {
            Connect => "CONNECT",
            Auth1Ok => "AUTH1_OK",
            Auth1Fail => "AUTH1_FAIL",
            Auth2Ok => "AUTH2_OK",
            Auth2Fail => "AUTH2_FAIL",
            Put => "PUT",
            Get => "GET",
            List => "LIST",
            Lockout => "LOCKOUT",
            Close => "CLOSE",
            AddUser => "ADD_USER",
        }
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("out-of-order audit sequence: expected {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("audit chain broken at entry {0}")]
    Broken(u64),
    #[error("audit log I/O: {0}")]
    Io(#[from] io::Error),
}

/// The caller-supplied part of an entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditFields {
    pub seq: u64,
    pub timestamp: u64,
    pub actor: String,
    pub action: AuditAction,
    pub detail: String,
}

impl AuditFields {
    /// `seq(8) || timestamp(8) || actor_len(1) || actor || action(1) || detail_len(2) || detail`,
    /// integers big-endian.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let actor = clip(&self.actor, MAX_ACTOR_LEN);
        let detail = clip(&self.detail, MAX_DETAIL_LEN);
        let mut out = Vec::with_capacity(20 + actor.len() + detail.len());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.push(actor.len() as u8);
        out.extend_from_slice(actor.as_bytes());
        out.push(self.action as u8);
        out.extend_from_slice(&(detail.len() as u16).to_be_bytes());
        out.extend_from_slice(detail.as_bytes());
        out
    }

    fn parse(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader(bytes);
        let seq = u64::from_be_bytes(r.take(8)?.try_into().ok()?);
        let timestamp = u64::from_be_bytes(r.take(8)?.try_into().ok()?);
        let actor_len = r.take(1)?[0] as usize;
        let actor = std::str::from_utf8(r.take(actor_len)?).ok()?.to_owned();
        let action = AuditAction::from_u8(r.take(1)?[0])?;
        let detail_len = u16::from_be_bytes(r.take(2)?.try_into().ok()?) as usize;
        if detail_len > MAX_DETAIL_LEN || actor_len > MAX_ACTOR_LEN {
            return None;
        }
        let detail = std::str::from_utf8(r.take(detail_len)?).ok()?.to_owned();
        if !r.0.is_empty() {
            return None;
        }
        Some(AuditFields {
            seq,
            timestamp,
            actor,
            action,
            detail,
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Some(head)
    }
}

fn clip(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub fields: AuditFields,
    pub chain_tag: Block,
}

impl AuditEntry {
    pub fn seq(&self) -> u64 {
        self.fields.seq
    }

    fn encode(&self) -> Vec<u8> {
        let body = self.fields.canonical_bytes();
        let mut out = Vec::with_capacity(4 + body.len() + 16);
        out.extend_from_slice(&((body.len() + 16) as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&self.chain_tag);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVerdict {
    Intact { entries: u64 },
    BrokenAt(u64),
}

fn chain_tag(mac: &Cmac, prev: &Block, fields: &AuditFields) -> Block {
    mac.mac_parts(&[prev, &fields.canonical_bytes()])
}

/// Recomputes every tag and reports the first entry that does not match.
pub fn verify_audit_chain(entries: &[AuditEntry], key: &Key128) -> ChainVerdict {
    let mac = Cmac::new(key);
    let mut prev = GENESIS_TAG;
    for (i, entry) in entries.iter().enumerate() {
        let i = i as u64;
        if entry.fields.seq != i || !ct_eq(&chain_tag(&mac, &prev, &entry.fields), &entry.chain_tag)
        {
            return ChainVerdict::BrokenAt(i);
        }
        prev = entry.chain_tag;
    }
    ChainVerdict::Intact {
        entries: entries.len() as u64,
    }
}

/// Parses a serialized log. Returns the entries decoded before the first
/// structural error and the index at which parsing stopped, if it did.
pub fn parse_audit_bytes(bytes: &[u8]) -> (Vec<AuditEntry>, Option<u64>) {
    let mut entries = Vec::new();
    if bytes.len() < 4 || &bytes[..4] != AUDIT_MAGIC {
        return (entries, Some(0));
    }
    let mut rest = &bytes[4..];
    while !rest.is_empty() {
        let index = entries.len() as u64;
        if rest.len() < 4 {
            return (entries, Some(index));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        if len < 16 || rest.len() - 4 < len {
            return (entries, Some(index));
        }
        let record = &rest[4..4 + len];
        let (body, tag) = record.split_at(len - 16);
        match AuditFields::parse(body) {
            Some(fields) => entries.push(AuditEntry {
                fields,
                chain_tag: tag.try_into().unwrap(),
            }),
            None => return (entries, Some(index)),
        }
        rest = &rest[4 + len..];
    }
    (entries, None)
}

/// Verifies a serialized log, treating undecodable records as breaks.
pub fn verify_audit_bytes(bytes: &[u8], key: &Key128) -> ChainVerdict {
    let (entries, stopped) = parse_audit_bytes(bytes);
    match (verify_audit_chain(&entries, key), stopped) {
        (ChainVerdict::BrokenAt(i), _) => ChainVerdict::BrokenAt(i),
        (ChainVerdict::Intact { .. }, Some(i)) => ChainVerdict::BrokenAt(i),
        (intact, None) => intact,
    }
}

/// The live log: in memory, optionally mirrored to an append-only file.
#[derive(Debug)]
pub struct AuditLog {
    mac: Cmac,
    key: Key128,
    entries: Vec<AuditEntry>,
    sink: Option<File>,
}

impl AuditLog {
    pub fn in_memory(key: Key128) -> Self {
        AuditLog {
            mac: Cmac::new(&key),
            key,
            entries: Vec::new(),
            sink: None,
        }
    }

    /// Opens (or creates) a log file. An existing file must verify intact.
    pub fn open(path: &Path, key: Key128) -> Result<Self, AuditError> {
        let mut log = Self::in_memory(key);
        let exists = path.exists();
        if exists {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            if let ChainVerdict::BrokenAt(i) = verify_audit_bytes(&bytes, &key) {
                return Err(AuditError::Broken(i));
            }
            log.entries = parse_audit_bytes(&bytes).0;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if !exists {
            file.write_all(AUDIT_MAGIC)?;
            file.flush()?;
        }
        log.sink = Some(file);
        Ok(log)
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.len() as u64
    }

    /// Appends an entry whose `seq` must be exactly the next sequence number.
    pub fn append(&mut self, fields: AuditFields) -> Result<&AuditEntry, AuditError> {
        let expected = self.next_seq();
        if fields.seq != expected {
            return Err(AuditError::OutOfOrder {
                expected,
                got: fields.seq,
            });
        }
        let prev = self.entries.last().map_or(GENESIS_TAG, |e| e.chain_tag);
        let fields = AuditFields {
            actor: clip(&fields.actor, MAX_ACTOR_LEN).to_owned(),
            detail: clip(&fields.detail, MAX_DETAIL_LEN).to_owned(),
            ..fields
        };
        let entry = AuditEntry {
            chain_tag: chain_tag(&self.mac, &prev, &fields),
            fields,
        };
        if let Some(file) = self.sink.as_mut() {
            file.write_all(&entry.encode())?;
            file.flush()?;
        }
        self.entries.push(entry);
        Ok(self.entries.last().unwrap())
    }

    /// Appends with the next sequence number filled in.
    pub fn record(
        &mut self,
        timestamp: u64,
        actor: &str,
        action: AuditAction,
        detail: impl Into<String>,
    ) -> Result<&AuditEntry, AuditError> {
        let fields = AuditFields {
            seq: self.next_seq(),
            timestamp,
            actor: actor.to_owned(),
            action,
            detail: detail.into(),
        };
        self.append(fields)
    }

    pub fn verify(&self) -> ChainVerdict {
        verify_audit_chain(&self.entries, &self.key)
    }

    /// Serialized form identical to what [`AuditLog::open`] writes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = AUDIT_MAGIC.to_vec();
        for e in &self.entries {
            out.extend_from_slice(&e.encode());
        }
        out
    }
}
