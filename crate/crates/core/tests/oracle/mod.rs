//! Reference HMAC-SHA256 and ratchet, written from the HMAC construction
//! directly on top of a bare SHA-256. Shares no code with the library.

#![allow(dead_code)]

use sha2::{Digest, Sha256};

const BLOCK: usize = 64;

pub fn hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut k = [0u8; BLOCK];
    if key.len() > BLOCK {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let mut inner = Sha256::new();
    inner.update(k.map(|b| b ^ 0x36));
    inner.update(msg);
    let inner = inner.finalize();
    let mut outer = Sha256::new();
    outer.update(k.map(|b| b ^ 0x5c));
    outer.update(inner);
    outer.finalize().into()
}

/// `[id_rand_0, ..., id_rand_{len-1}]`.
pub fn ratchet_chain(key: &[u8; 32], id_init: &[u8; 32], len: usize) -> Vec<[u8; 32]> {
    let mut out = Vec::with_capacity(len);
    let mut cur = *id_init;
    for _ in 0..len {
        cur = hmac_sha256(key, &cur);
        out.push(cur);
    }
    out
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

/// RFC 4231 test cases 1-4, 6 and 7 for HMAC-SHA-256.
pub fn rfc4231_cases() -> Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    let big_key = vec![0xaa; 131];
    vec![
        (
            vec![0x0b; 20],
            b"Hi There".to_vec(),
            unhex("b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
        ),
        (
            b"Jefe".to_vec(),
            b"what do ya want for nothing?".to_vec(),
            unhex("5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
        ),
        (
            vec![0xaa; 20],
            vec![0xdd; 50],
            unhex("773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
        ),
        (
            (1..=25).collect(),
            vec![0xcd; 50],
            unhex("82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
        ),
        (
            big_key.clone(),
            b"Test Using Larger Than Block-Size Key - Hash Key First".to_vec(),
            unhex("60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54"),
        ),
        (
            big_key,
            b"This is a test using a larger than block-size key and a larger than block-size data. The key needs to be hashed before being used by the HMAC algorithm.".to_vec(),
            unhex("9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2"),
        ),
    ]
}
