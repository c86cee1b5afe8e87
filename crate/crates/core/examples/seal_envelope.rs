//! Seals a message, opens it, then shows that a flipped bit is rejected.

use cloudgate::aes::Key128;
use cloudgate::cipher::{open, seal, Envelope, KeyPairSym};
use rand::rngs::OsRng;
use rand::Rng;

fn main() {
    let keys = KeyPairSym::new(Key128::new(OsRng.gen()), Key128::new(OsRng.gen())).unwrap();
    let aad = b"owner=alice";
    let env = seal(b"quarterly numbers", &keys, aad, &mut OsRng);
    let wire = env.to_bytes();
    println!("iv   {}", hex::encode(env.iv));
    println!("ct   {}", hex::encode(&env.ciphertext));
    println!("tag  {}", hex::encode(env.tag));

    let back = open(&Envelope::from_bytes(&wire).unwrap(), &keys, aad).unwrap();
    println!("opened: {}", String::from_utf8_lossy(&back));

    let mut tampered = wire.clone();
    tampered[20] ^= 0x01;
    let err = open(&Envelope::from_bytes(&tampered).unwrap(), &keys, aad).unwrap_err();
    println!("after one bit flip: {err}");
    let err = open(&env, &keys, b"owner=mallory").unwrap_err();
    println!("with other aad: {err}");
}
