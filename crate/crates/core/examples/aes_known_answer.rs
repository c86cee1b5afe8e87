//! Encrypts the FIPS-197 appendix C.1 block and prints the key schedule.

use cloudgate::aes::{decrypt_block, encrypt_block, key_expansion, Key128};

fn main() {
    let key = Key128::new(hex_block("000102030405060708090a0b0c0d0e0f"));
    let pt = hex_block("00112233445566778899aabbccddeeff");
    let ks = key_expansion(&key);
    let ct = encrypt_block(&pt, &ks);
    println!("plaintext  {}", hex::encode(pt));
    println!("ciphertext {}", hex::encode(ct));
    assert_eq!(hex::encode(ct), "69c4e0d86a7b0430d8cdb78070b4c55a");
    assert_eq!(decrypt_block(&ct, &ks), pt);

    for (round, words) in ks.words().chunks(4).enumerate() {
        let w: Vec<String> = words.iter().map(|w| format!("{w:08x}")).collect();
        println!("round {round:2}: {}", w.join(" "));
    }
}

fn hex_block(s: &str) -> [u8; 16] {
    hex::decode(s).unwrap().try_into().unwrap()
}
