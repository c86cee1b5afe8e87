//! AES-128 block cipher.
//!
//! The 16-byte state is laid out column-major: byte `i` sits at row `i % 4`,
//! column `i / 4`, the same mapping the AES standard uses for its input
//! array. Encryption runs the initial `AddRoundKey`, nine full rounds
//! (`SubBytes`, `ShiftRows`, `MixColumns`, `AddRoundKey`) and a final round
//! without `MixColumns`. Decryption walks the schedule backwards applying
//! `InvShiftRows`, `InvSubBytes`, `AddRoundKey`, `InvMixColumns` per round.
//!
//! The S-box is a table computed at compile time from its GF(2^8)
//! definition. Table lookups are not constant time; this implementation
//! makes no attempt at side-channel resistance.

use std::fmt;

use thiserror::Error;

/// Block size in bytes.
pub const BLOCK_LEN: usize = 16;
/// Key size in bytes.
pub const KEY_LEN: usize = 16;
/// Number of rounds for a 128-bit key.
pub const ROUNDS: usize = 10;

/// Number of 32-bit words in the expanded key.
const SCHEDULE_WORDS: usize = 4 * (ROUNDS + 1);

/// One AES state: 16 bytes, column-major.
pub type Block = [u8; BLOCK_LEN];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AesError {
    #[error("invalid key length: expected {KEY_LEN} bytes, got {0}")]
    InvalidKeyLength(usize),
}

/// Multiplication in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1.
const fn gf_mul(mut a: u8, mut b: u8) -> u8 {
    let mut product = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            product ^= a;
        }
        let carry = a & 0x80;
        a <<= 1;
        if carry != 0 {
            a ^= 0x1b;
        }
        b >>= 1;
    }
    product
}

const fn build_mul_table() -> [[u8; 256]; 256] {
    let mut t = [[0u8; 256]; 256];
    let mut a = 0;
    while a < 256 {
        let mut b = 0;
        while b < 256 {
            t[a][b] = gf_mul(a as u8, b as u8);
            b += 1;
        }
        a += 1;
    }
    t
}

/// `GF_MUL[a][b]` is `a * b` in GF(2^8).
static GF_MUL: [[u8; 256]; 256] = build_mul_table();

/// Multiplicative inverse via a^254; maps 0 to 0.
const fn gf_inv(a: u8) -> u8 {
    let mut result = 1u8;
    let mut base = a;
    let mut exp = 254u32;
    while exp != 0 {
        if exp & 1 != 0 {
            result = gf_mul(result, base);
        }
        base = gf_mul(base, base);
        exp >>= 1;
    }
    result
}

const fn build_sbox() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let b = gf_inv(i as u8);
        table[i] =
            b ^ b.rotate_left(1) ^ b.rotate_left(2) ^ b.rotate_left(3) ^ b.rotate_left(4) ^ 0x63;
        i += 1;
    }
    table
}

const fn invert_table(forward: &[u8; 256]) -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        table[forward[i] as usize] = i as u8;
        i += 1;
    }
    table
}

/// Forward substitution table.
pub const SBOX: [u8; 256] = build_sbox();
/// Inverse substitution table.
pub const INV_SBOX: [u8; 256] = invert_table(&SBOX);

/// A 128-bit cipher key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key128([u8; KEY_LEN]);

impl Key128 {
    pub const fn new(bytes: [u8; KEY_LEN]) -> Self {
        Key128(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, AesError> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| AesError::InvalidKeyLength(bytes.len()))?;
        Ok(Key128(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl From<[u8; KEY_LEN]> for Key128 {
    fn from(bytes: [u8; KEY_LEN]) -> Self {
        Key128(bytes)
    }
}

impl fmt::Debug for Key128 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Key128(..)")
    }
}

/// The eleven round keys expanded from a [`Key128`].
#[derive(Clone)]
pub struct KeySchedule {
    round_keys: [Block; ROUNDS + 1],
}

impl KeySchedule {
    pub fn new(key: &Key128) -> Self {
        key_expansion(key)
    }

    pub fn rounds(&self) -> usize {
        ROUNDS
    }

    pub fn round_keys(&self) -> &[Block; ROUNDS + 1] {
        &self.round_keys
    }

    /// The 44 schedule words, big-endian packed.
    pub fn words(&self) -> [u32; SCHEDULE_WORDS] {
        let mut words = [0u32; SCHEDULE_WORDS];
        for (i, word) in words.iter_mut().enumerate() {
            let rk = &self.round_keys[i / 4];
            let off = (i % 4) * 4;
            *word = u32::from_be_bytes([rk[off], rk[off + 1], rk[off + 2], rk[off + 3]]);
        }
        words
    }
}

impl fmt::Debug for KeySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeySchedule(..)")
    }
}

/// Expands a 16-byte key into the AES-128 schedule.
pub fn key_expansion(key: &Key128) -> KeySchedule {
    let mut w = [[0u8; 4]; SCHEDULE_WORDS];
    for (i, word) in w.iter_mut().take(4).enumerate() {
        word.copy_from_slice(&key.0[4 * i..4 * i + 4]);
    }
    let mut rcon = 0x01u8;
    for i in 4..SCHEDULE_WORDS {
        let mut temp = w[i - 1];
        if i % 4 == 0 {
            temp.rotate_left(1);
            for b in temp.iter_mut() {
                *b = SBOX[*b as usize];
            }
            temp[0] ^= rcon;
            rcon = gf_mul(rcon, 0x02);
        }
        for j in 0..4 {
            w[i][j] = w[i - 4][j] ^ temp[j];
        }
    }
    let mut round_keys = [[0u8; BLOCK_LEN]; ROUNDS + 1];
    for (r, rk) in round_keys.iter_mut().enumerate() {
        for c in 0..4 {
            rk[4 * c..4 * c + 4].copy_from_slice(&w[4 * r + c]);
        }
    }
    KeySchedule { round_keys }
}

/// Expands a key given as raw bytes, rejecting anything but 16 bytes.
pub fn key_expansion_from_slice(key: &[u8]) -> Result<KeySchedule, AesError> {
    Ok(key_expansion(&Key128::from_slice(key)?))
}

pub fn sub_bytes(mut state: Block) -> Block {
    for b in state.iter_mut() {
        *b = SBOX[*b as usize];
    }
    state
}

pub fn inv_sub_bytes(mut state: Block) -> Block {
    for b in state.iter_mut() {
        *b = INV_SBOX[*b as usize];
    }
    state
}

/// Rotates row `r` left by `r` positions.
pub fn shift_rows(state: Block) -> Block {
    let mut out = [0u8; BLOCK_LEN];
    for c in 0..4 {
        for r in 0..4 {
            out[r + 4 * c] = state[r + 4 * ((c + r) % 4)];
        }
    }
    out
}

pub fn inv_shift_rows(state: Block) -> Block {
    let mut out = [0u8; BLOCK_LEN];
    for c in 0..4 {
        for r in 0..4 {
            out[r + 4 * ((c + r) % 4)] = state[r + 4 * c];
        }
    }
    out
}

fn mix_with(state: Block, coeffs: [u8; 4]) -> Block {
    let rows = coeffs.map(|k| &GF_MUL[k as usize]);
    let mut out = [0u8; BLOCK_LEN];
    for c in 0..4 {
        let col = &state[4 * c..4 * c + 4];
        for r in 0..4 {
            // circulant matrix: row r is coeffs rotated right by r
            out[4 * c + r] =
                (0..4).fold(0u8, |acc, k| acc ^ rows[(k + 4 - r) % 4][col[k] as usize]);
        }
    }
    out
}

pub fn mix_columns(state: Block) -> Block {
    mix_with(state, [0x02, 0x03, 0x01, 0x01])
}

pub fn inv_mix_columns(state: Block) -> Block {
    mix_with(state, [0x0e, 0x0b, 0x0d, 0x09])
}

pub fn add_round_key(mut state: Block, round_key: &Block) -> Block {
    for (s, k) in state.iter_mut().zip(round_key) {
        *s ^= k;
    }
    state
}

pub fn encrypt_block(block: &Block, schedule: &KeySchedule) -> Block {
    let rk = &schedule.round_keys;
    let mut state = add_round_key(*block, &rk[0]);
    for round_key in &rk[1..ROUNDS] {
        state = sub_bytes(state);
        state = shift_rows(state);
        state = mix_columns(state);
        state = add_round_key(state, round_key);
    }
    state = sub_bytes(state);
    state = shift_rows(state);
    add_round_key(state, &rk[ROUNDS])
}

pub fn decrypt_block(block: &Block, schedule: &KeySchedule) -> Block {
    let rk = &schedule.round_keys;
    let mut state = add_round_key(*block, &rk[ROUNDS]);
    for r in (1..ROUNDS).rev() {
        state = inv_shift_rows(state);
        state = inv_sub_bytes(state);
        state = add_round_key(state, &rk[r]);
        state = inv_mix_columns(state);
    }
    state = inv_shift_rows(state);
    state = inv_sub_bytes(state);
    add_round_key(state, &rk[0])
}

/// A keyed cipher instance holding its expanded schedule.
#[derive(Clone, Debug)]
pub struct Aes128 {
    schedule: KeySchedule,
}

impl Aes128 {
    pub fn new(key: &Key128) -> Self {
        Aes128 {
            schedule: key_expansion(key),
        }
    }

    pub fn encrypt(&self, block: &Block) -> Block {
        encrypt_block(block, &self.schedule)
    }

    pub fn decrypt(&self, block: &Block) -> Block {
        decrypt_block(block, &self.schedule)
    }
}
