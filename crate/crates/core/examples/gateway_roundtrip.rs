//! Starts a gateway on a loopback port and drives the scripted client
//! against it: upload, list, download.

use std::sync::Arc;
use std::thread;

use cloudgate::aes::Key128;
use cloudgate::client::{run_client, tcp_connector, ClientConfig, Mode, ScriptedConsole};
use cloudgate::clock::SystemClock;
use cloudgate::gateway::{Gateway, GatewayConfig};
use cloudgate::vault::{AuthzLevel, Vault};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let key_hex = "00112233445566778899aabbccddeeff";
    let key_path = dir.path().join("master.key");
    std::fs::write(&key_path, key_hex).unwrap();
    let master = Key128::from_slice(&hex::decode(key_hex).unwrap()).unwrap();

    let vault_path = dir.path().join("vault.bin");
    let mut vault = Vault::create(&master);
    vault
        .add_user("setup", "vpncustomer", b"tunnel-pw", AuthzLevel::Read, 0)
        .unwrap();
    vault
        .add_user("setup", "carol", b"carol-pw", AuthzLevel::ReadWrite, 0)
        .unwrap();
    vault.save(&vault_path).unwrap();

    let mut config = GatewayConfig::new("127.0.0.1:0", &vault_path, dir.path().join("audit.log"));
    config.master_key_path = Some(key_path);
    let gateway = Gateway::bind(&config).unwrap();
    let addr = gateway.local_addr().to_string();
    let stop = gateway.shutdown_flag();
    let ctx = gateway.context().clone();
    let server = thread::spawn(move || gateway.serve());

    let upload = dir.path().join("notes.txt");
    std::fs::write(&upload, "remember the milk\n".repeat(10_000)).unwrap();
    let download = dir.path().join("notes.copy");
    let script = format!(
        "put notes {}\nls\nget notes {}\n",
        upload.display(),
        download.display()
    );

    let mut console = ScriptedConsole::new()
        .with_passwords(["tunnel-pw", "carol-pw"])
        .with_lines(["carol"]);
    let code = run_client(
        &ClientConfig::new(addr.clone(), "vpncustomer"),
        Mode::Script(&script),
        &mut console,
        &mut tcp_connector(addr),
        &SystemClock::new(),
    );
    for line in &console.out {
        println!("client: {line}");
    }
    println!("exit code {code}");
    println!(
        "identical: {}",
        std::fs::read(&upload).unwrap() == std::fs::read(&download).unwrap()
    );

    stop.store(true, std::sync::atomic::Ordering::SeqCst);
    server.join().unwrap().unwrap();
    let ctx: Arc<_> = ctx;
    for e in ctx.vault.lock().unwrap().audit().entries() {
        println!(
            "audit: {:?} {} {}",
            e.fields.action, e.fields.actor, e.fields.detail
        );
    }
}
