//! Runs the stage-one handshake over an in-memory pipe and exchanges a few
//! sealed messages, printing what a passive observer saw.

use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use cloudgate::aes::Key128;
use cloudgate::clock::SystemClock;
use cloudgate::tunnel::{client_connect, memory_pair, server_accept, Sniffer, WireLog};
use cloudgate::vault::{AuthzLevel, Vault};

fn main() {
    let mut vault = Vault::create(&Key128::new([7; 16]));
    vault
        .add_user("setup", "vpncustomer", b"open sesame", AuthzLevel::Read, 0)
        .unwrap();
    let vault = Mutex::new(vault);
    let timeout = Duration::from_secs(30);

    let (client_end, server_end) = memory_pair();
    let wire = WireLog::new();
    thread::scope(|s| {
        s.spawn(|| {
            let mut session =
                server_accept(server_end, &vault, &SystemClock::new(), timeout).unwrap();
            while let Ok(msg) = session.recv_data() {
                let mut reply = b"echo: ".to_vec();
                reply.extend_from_slice(&msg);
                session.send_data(&reply).unwrap();
            }
        });
        let mut session = client_connect(
            Sniffer::new(client_end, wire.clone()),
            "vpncustomer",
            b"open sesame",
            &SystemClock::new(),
            timeout,
            &mut |line| println!("client: {line}"),
        )
        .unwrap();
        for msg in ["hello", "attack at dawn"] {
            session.send_data(msg.as_bytes()).unwrap();
            let reply = session.recv_data().unwrap();
            println!("reply: {}", String::from_utf8_lossy(&reply));
        }
        session.close().unwrap();
    });

    let chunks = wire.chunks();
    println!("{} chunks on the wire", chunks.len());
    println!("plaintext visible: {}", wire.contains(b"attack at dawn"));
    println!("password visible: {}", wire.contains(b"open sesame"));
    let audit = vault.lock().unwrap();
    for e in audit.audit().entries() {
        println!(
            "audit: {:?} {} {}",
            e.fields.action, e.fields.actor, e.fields.detail
        );
    }
}
