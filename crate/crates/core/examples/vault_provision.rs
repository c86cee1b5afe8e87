//! Creates a vault, adds users, saves it and checks passwords, including
//! the lockout after repeated failures.

use cloudgate::aes::Key128;
use cloudgate::vault::{AuthzLevel, Vault};
use rand::rngs::OsRng;
use rand::Rng;

fn main() {
    let master = Key128::new(OsRng.gen());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vault.bin");

    let mut vault = Vault::create(&master);
    vault
        .add_user("provisioning", "alice", b"alice-pw", AuthzLevel::Admin, 0)
        .unwrap();
    vault
        .add_user("provisioning", "bob", b"bob-pw", AuthzLevel::Read, 0)
        .unwrap();
    vault.save(&path).unwrap();
    println!(
        "saved {} users, {} bytes",
        vault.len(),
        std::fs::metadata(&path).unwrap().len()
    );

    let mut vault = Vault::load(&path, &master).unwrap();
    println!(
        "alice, right password: {:?}",
        vault.verify_password("alice", b"alice-pw", 100).unwrap()
    );
    for attempt in 1..=5 {
        let outcome = vault.verify_password("bob", b"guess", 100).unwrap();
        println!("bob, wrong password #{attempt}: {outcome:?}");
    }
    println!(
        "bob, right password while locked: {:?}",
        vault.verify_password("bob", b"bob-pw", 130).unwrap()
    );
    println!(
        "bob, right password at +60 s: {:?}",
        vault.verify_password("bob", b"bob-pw", 160).unwrap()
    );

    match Vault::load(&path, &Key128::new([0; 16])) {
        Ok(_) => println!("unexpected: wrong master key accepted"),
        Err(e) => println!("wrong master key: {e}"),
    }
}
