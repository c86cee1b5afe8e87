//! Writes a chained audit log, verifies it, then edits one byte on disk.

use cloudgate::aes::Key128;
use cloudgate::vault::audit::verify_audit_bytes;
use cloudgate::vault::{AuditAction, AuditLog};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.log");
    let key = Key128::new([0x42; 16]);

    let mut log = AuditLog::open(&path, key).unwrap();
    log.record(1_700_000_000, "alice", AuditAction::Auth2Ok, "level 3")
        .unwrap();
    log.record(
        1_700_000_005,
        "alice",
        AuditAction::Put,
        "report.pdf 5120 bytes",
    )
    .unwrap();
    log.record(
        1_700_000_009,
        "alice",
        AuditAction::Close,
        "client closed after 9s",
    )
    .unwrap();
    for e in log.entries() {
        println!(
            "{} {} {:?} {}",
            e.fields.timestamp, e.fields.actor, e.fields.action, e.fields.detail
        );
    }
    drop(log);

    let mut bytes = std::fs::read(&path).unwrap();
    println!("intact:   {:?}", verify_audit_bytes(&bytes, &key));
    let at = bytes.len() / 2;
    bytes[at] ^= 0x20;
    println!("byte {at} edited: {:?}", verify_audit_bytes(&bytes, &key));
}
