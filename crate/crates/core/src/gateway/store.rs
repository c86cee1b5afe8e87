//! Per-user encrypted object files under `objects/<user>/<hex(name)>`.
//!
//! Each file is a bare envelope sealed under the owner's data keys, with
//! `owner || 0x00 || name` as associated data so a file moved to another
//! name or owner no longer opens.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use rand::rngs::OsRng;
use thiserror::Error;

use super::protocol::{valid_object_name, ObjectInfo};
use crate::aes::{Block, Key128};
use crate::cipher::{self, derive_key, Envelope, KeyPairSym, Label};

const OBJECT_ENC_CONTEXT: &Block = b"cloudgate/objenc";
const OBJECT_MAC_CONTEXT: &Block = b"cloudgate/objmac";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object not found")]
    NotFound,
    #[error("invalid object name")]
    InvalidName,
    #[error("stored object failed authentication")]
    Corrupt,
    #[error("object store I/O: {0}")]
    Io(#[from] io::Error),
}

/// An object as held on disk.
#[derive(Debug, Clone)]
pub struct StoredObject {
    pub owner: String,
    pub name: String,
    pub envelope: Envelope,
    pub created_at: Option<SystemTime>,
}

/// Encryption and MAC keys for one user's objects.
pub fn data_keys(master_key: &Key128, username: &str) -> KeyPairSym {
    let label = Label::Data(username.to_owned());
    let k_enc = derive_key(master_key, &label, OBJECT_ENC_CONTEXT, &[0; 16]);
    let k_mac = derive_key(master_key, &label, OBJECT_MAC_CONTEXT, &[0; 16]);
    KeyPairSym::new(k_enc, k_mac).expect("distinct contexts")
}

fn object_aad(owner: &str, name: &str) -> Vec<u8> {
    [owner.as_bytes(), &[0], name.as_bytes()].concat()
}

#[derive(Debug)]
pub struct ObjectStore {
    root: PathBuf,
    master_key: Key128,
    locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
}

impl ObjectStore {
    pub fn new(root: impl Into<PathBuf>, master_key: Key128) -> Self {
        ObjectStore {
            root: root.into(),
            master_key,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn user_dir(&self, owner: &str) -> PathBuf {
        self.root.join("objects").join(owner)
    }

    pub fn object_path(&self, owner: &str, name: &str) -> PathBuf {
        self.user_dir(owner).join(hex::encode(name.as_bytes()))
    }

    fn lock_for(&self, path: &Path) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(path.to_owned())
            .or_default()
            .clone()
    }

    /// Seals and writes atomically, replacing any existing object.
    pub fn put(&self, owner: &str, name: &str, data: &[u8]) -> Result<(), StoreError> {
        if !valid_object_name(name) {
            return Err(StoreError::InvalidName);
        }
        let keys = data_keys(&self.master_key, owner);
        let env = cipher::seal(data, &keys, &object_aad(owner, name), &mut OsRng);
        let path = self.object_path(owner, name);
        let lock = self.lock_for(&path);
        let _guard = lock.lock().unwrap();
        fs::create_dir_all(self.user_dir(owner))?;
        let tmp = path.with_extension("partial");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&env.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(&self, owner: &str, name: &str) -> Result<StoredObject, StoreError> {
        if !valid_object_name(name) {
            return Err(StoreError::InvalidName);
        }
        let path = self.object_path(owner, name);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(StoreError::NotFound),
            Err(e) => return Err(e.into()),
        };
        let envelope = Envelope::from_bytes(&bytes).map_err(|_| StoreError::Corrupt)?;
        let created_at = fs::metadata(&path).and_then(|m| m.modified()).ok();
        Ok(StoredObject {
            owner: owner.to_owned(),
            name: name.to_owned(),
            envelope,
            created_at,
        })
    }

    pub fn get(&self, owner: &str, name: &str) -> Result<Vec<u8>, StoreError> {
        let obj = self.load(owner, name)?;
        let keys = data_keys(&self.master_key, owner);
        cipher::open(&obj.envelope, &keys, &object_aad(owner, name))
            .map_err(|_| StoreError::Corrupt)
    }

    /// Names and plaintext sizes, sorted by name. Objects that fail
    /// authentication are skipped.
    pub fn list(&self, owner: &str) -> Result<Vec<ObjectInfo>, StoreError> {
        let dir = self.user_dir(owner);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let keys = data_keys(&self.master_key, owner);
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry?;
            let file_name = entry.file_name();
            let Some(name) = file_name
                .to_str()
                .and_then(|s| hex::decode(s).ok())
                .and_then(|b| String::from_utf8(b).ok())
            else {
                continue;
            };
            let Ok(env) = Envelope::from_bytes(&fs::read(entry.path())?) else {
                continue;
            };
            if let Ok(size) = cipher::open_len(&env, &keys, &object_aad(owner, &name)) {
                out.push(ObjectInfo {
                    name,
                    size: size as u64,
                });
            }
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }
}
