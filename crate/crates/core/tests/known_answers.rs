mod common;

use cloudgate::aes::{decrypt_block, encrypt_block, key_expansion, Aes128, Key128};
use cloudgate::cipher::{cbc_decrypt, cbc_encrypt, cmac, pad};
use common::{block, fixture, fixture_rows, unhex};

#[test]
fn fips197_and_standard_block_vectors() {
    for row in fixture_rows("aes128_kat.txt") {
        let key = key_expansion(&Key128::new(block(&row[0])));
        let (pt, ct) = (block(&row[1]), block(&row[2]));
        assert_eq!(encrypt_block(&pt, &key), ct, "encrypt {}", row[0]);
        assert_eq!(decrypt_block(&ct, &key), pt, "decrypt {}", row[0]);
    }
}

#[test]
fn full_key_schedule() {
    let expected: Vec<u32> = fixture("aes128_schedule.txt")
        .split_whitespace()
        .map(|w| u32::from_str_radix(w, 16).unwrap())
        .collect();
    assert_eq!(expected.len(), 44);
    let ks = key_expansion(&Key128::new(block("2b7e151628aed2a6abf7158809cf4f3c")));
    assert_eq!(ks.words().to_vec(), expected);
}

#[test]
fn random_blocks_match_independent_implementation() {
    let rows = fixture_rows("aes128_oracle.txt");
    assert_eq!(rows.len(), 64);
    for row in rows {
        let aes = Aes128::new(&Key128::new(block(&row[0])));
        assert_eq!(aes.encrypt(&block(&row[1])), block(&row[2]));
        assert_eq!(aes.decrypt(&block(&row[2])), block(&row[1]));
    }
}

#[test]
fn sp800_38a_cbc() {
    let rows = fixture_rows("sp800_38a_cbc.txt");
    assert_eq!(rows.len(), 4);
    let mut chained_pt = Vec::new();
    let mut chained_ct = Vec::new();
    for row in &rows {
        let key = Key128::new(block(&row[0]));
        let (iv, pt, ct) = (block(&row[1]), unhex(&row[2]), unhex(&row[3]));
        assert_eq!(cbc_encrypt(&pt, &key, &iv).unwrap(), ct);
        assert_eq!(cbc_decrypt(&ct, &key, &iv).unwrap(), pt);
        chained_pt.extend(pt);
        chained_ct.extend(ct);
    }
    // the four rows are one chained message
    let key = Key128::new(block(&rows[0][0]));
    let iv = block(&rows[0][1]);
    assert_eq!(cbc_encrypt(&chained_pt, &key, &iv).unwrap(), chained_ct);
}

#[test]
fn rfc4493_cmac() {
    let rows = fixture_rows("rfc4493_cmac.txt");
    assert_eq!(rows.len(), 4);
    for row in rows {
        let key = Key128::new(block(&row[0]));
        let msg = unhex(&row[1]);
        assert_eq!(cmac(&key, &msg), block(&row[2]), "len {}", msg.len());
    }
}

#[test]
fn cbc_padding_and_cmac_match_independent_implementation() {
    for row in fixture_rows("cbc_cmac_oracle.txt") {
        let key = Key128::new(block(&row[0]));
        let (iv, pt, ct, tag) = (
            block(&row[1]),
            unhex(&row[2]),
            unhex(&row[3]),
            block(&row[4]),
        );
        assert_eq!(
            cbc_encrypt(&pad(&pt), &key, &iv).unwrap(),
            ct,
            "len {}",
            pt.len()
        );
        assert_eq!(cmac(&key, &pt), tag, "len {}", pt.len());
    }
}
