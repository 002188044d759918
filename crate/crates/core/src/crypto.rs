//! Symmetric primitives shared by every role.
//!
//! Everything here is built from two primitives: HMAC-SHA256 and AES-128 in
//! counter mode. The identifier ratchet is a plain HMAC chain, and
//! [`seal`]/[`open`] form an encrypt-then-MAC AEAD whose wire layout is
//! `nonce[16] || ciphertext[len] || tag[32]`.

use std::fmt;

use aes::cipher::{KeyIvInit, StreamCipher};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;
type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;

pub const KEY_LEN: usize = 32;
pub const ID_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 32;
/// Bytes a sealed box adds on top of its plaintext.
pub const SEAL_OVERHEAD: usize = NONCE_LEN + TAG_LEN;

const ENC_LABEL: &[u8] = b"PF-enc";
const MAC_LABEL: &[u8] = b"PF-mac";

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failed")]
    AuthFailure,
    #[error("sealed box too short: {0} bytes")]
    Truncated(usize),
    #[error("expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
}

/// A 32-byte symmetric key. Used for the end-to-end key, the manufacturing
/// key and the ephemeral setup key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SecretKey([u8; KEY_LEN]);

impl SecretKey {
    pub const fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; KEY_LEN] = bytes.try_into().map_err(|_| CryptoError::BadLength {
            expected: KEY_LEN,
            actual: bytes.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// A 32-byte finder identifier, either the fixed `id_init` or one step of the
/// randomized chain.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Identifier([u8; ID_LEN]);

impl Identifier {
    pub const fn from_bytes(bytes: [u8; ID_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; ID_LEN] = bytes.try_into().map_err(|_| CryptoError::BadLength {
            expected: ID_LEN,
            actual: bytes.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; ID_LEN];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; ID_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Identifier({}..)", hex::encode(&self.0[..6]))
    }
}

/// HMAC-SHA256 over the concatenation of `parts`.
pub fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    for part in parts {
        mac.update(part);
    }
    mac.finalize().into_bytes().into()
}

/// First randomized identifier: `HMAC(e2e_key, id_init)`.
pub fn ratchet_first(e2e_key: &SecretKey, id_init: &Identifier) -> Identifier {
    Identifier(hmac_sha256(e2e_key.as_bytes(), &[id_init.as_bytes()]))
}

/// `id_rand,n+1 = HMAC(e2e_key, id_rand,n)`.
pub fn ratchet_next(e2e_key: &SecretKey, id_prev: &Identifier) -> Identifier {
    Identifier(hmac_sha256(e2e_key.as_bytes(), &[id_prev.as_bytes()]))
}

/// The randomized identifier valid during `epoch`, computed from scratch.
pub fn ratchet_at(e2e_key: &SecretKey, id_init: &Identifier, epoch: u64) -> Identifier {
    let mut id = ratchet_first(e2e_key, id_init);
    for _ in 0..epoch {
        id = ratchet_next(e2e_key, &id);
    }
    id
}

/// Splits one key into independent encryption and authentication keys.
pub fn derive_subkeys(key: &SecretKey) -> (SecretKey, SecretKey) {
    let enc = hmac_sha256(key.as_bytes(), &[ENC_LABEL]);
    let mac = hmac_sha256(key.as_bytes(), &[MAC_LABEL]);
    (SecretKey(enc), SecretKey(mac))
}

/// Output of [`seal`].
#[derive(Clone, PartialEq, Eq)]
pub struct SealedBox {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SealedBox {
    pub fn wire_len(&self) -> usize {
        SEAL_OVERHEAD + self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < SEAL_OVERHEAD {
            return Err(CryptoError::Truncated(bytes.len()));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().expect("split at NONCE_LEN"),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().expect("split at TAG_LEN"),
        })
    }
}

impl fmt::Debug for SealedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedBox")
            .field("nonce", &hex::encode(self.nonce))
            .field("ciphertext_len", &self.ciphertext.len())
            .finish()
    }
}

fn apply_keystream(enc_key: &SecretKey, nonce: &[u8; NONCE_LEN], data: &mut [u8]) {
    let aes_key: [u8; 16] = enc_key.as_bytes()[..16].try_into().expect("16 bytes");
    let mut cipher = Aes128Ctr::new(&aes_key.into(), nonce.into());
    cipher.apply_keystream(data);
}

fn compute_tag(mac_key: &SecretKey, nonce: &[u8], ciphertext: &[u8]) -> HmacSha256 {
    let mut mac =
        HmacSha256::new_from_slice(mac_key.as_bytes()).expect("HMAC accepts any key length");
    mac.update(nonce);
    mac.update(ciphertext);
    mac
}

/// Encrypts under a caller-chosen nonce. Only [`seal`] should be used for
/// real traffic; this exists for known-answer tests.
pub fn seal_with_nonce(key: &SecretKey, nonce: [u8; NONCE_LEN], plaintext: &[u8]) -> SealedBox {
    let (enc_key, mac_key) = derive_subkeys(key);
    let mut ciphertext = plaintext.to_vec();
    apply_keystream(&enc_key, &nonce, &mut ciphertext);
    let tag = compute_tag(&mac_key, &nonce, &ciphertext)
        .finalize()
        .into_bytes()
        .into();
    SealedBox {
        nonce,
        ciphertext,
        tag,
    }
}

/// AES-128-CTR under a fresh random nonce, then HMAC-SHA256 over
/// `nonce || ciphertext`.
pub fn seal<R: RngCore + CryptoRng>(key: &SecretKey, plaintext: &[u8], rng: &mut R) -> SealedBox {
    debug_assert!(!plaintext.is_empty(), "sealing an empty plaintext");
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    seal_with_nonce(key, nonce, plaintext)
}

/// Verifies the tag in constant time, and only then decrypts.
pub fn open(key: &SecretKey, sealed: &SealedBox) -> Result<Vec<u8>, CryptoError> {
    let (enc_key, mac_key) = derive_subkeys(key);
    compute_tag(&mac_key, &sealed.nonce, &sealed.ciphertext)
        .verify_slice(&sealed.tag)
        .map_err(|_| CryptoError::AuthFailure)?;
    let mut plaintext = sealed.ciphertext.clone();
    apply_keystream(&enc_key, &sealed.nonce, &mut plaintext);
    Ok(plaintext)
}

/// [`open`] applied to the wire encoding of a box.
pub fn open_bytes(key: &SecretKey, bytes: &[u8]) -> Result<Vec<u8>, CryptoError> {
    open(key, &SealedBox::from_bytes(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn unhex<const N: usize>(s: &str) -> [u8; N] {
        hex::decode(s).unwrap().try_into().unwrap()
    }

    #[test]
    fn ratchet_first_golden_all_zero() {
        let id = ratchet_first(&SecretKey([0; 32]), &Identifier([0; 32]));
        assert_eq!(
            id.to_hex(),
            "33ad0a1c607ec03b09e6cd9893680ce210adf300aa1f2660e1b22e10f170f92a"
        );
    }

    #[test]
    fn ratchet_chain_of_five_golden() {
        let k = SecretKey([0; 32]);
        let mut id = ratchet_first(&k, &Identifier([0; 32]));
        for _ in 0..4 {
            id = ratchet_next(&k, &id);
        }
        assert_eq!(
            id.to_hex(),
            "3d925c8d65570b6d4319d30c95f562200860dc770080aac0b7eba373df3a52fe"
        );
        assert_eq!(id, ratchet_at(&k, &Identifier([0; 32]), 4));
    }

    #[test]
    fn ratchet_separates_inputs_and_keys() {
        let k1 = SecretKey([7; 32]);
        let k2 = SecretKey([8; 32]);
        let a = Identifier([1; 32]);
        let b = Identifier([2; 32]);
        assert_ne!(ratchet_first(&k1, &a), ratchet_first(&k1, &b));
        assert_ne!(ratchet_first(&k1, &a), ratchet_first(&k2, &a));
        assert_eq!(ratchet_next(&k1, &a), ratchet_next(&k1, &a));
    }

    #[test]
    fn subkeys_golden_and_distinct() {
        let (enc, mac) = derive_subkeys(&SecretKey([1; 32]));
        assert_eq!(
            enc.as_bytes(),
            &unhex::<32>("d8ce11f04678a392d3ebf3264a532d4714f8f601ee074a7ad53b08bf25a90be5")
        );
        assert_eq!(
            mac.as_bytes(),
            &unhex::<32>("03a58c11a330eacac1cacc51570d05f7e9fea57986f131c7d71296d8658fd12d")
        );
        assert_ne!(enc, mac);
        assert_eq!(derive_subkeys(&SecretKey([1; 32])), (enc, mac));
    }

    #[test]
    fn seal_known_answer() {
        let nonce: [u8; 16] = core::array::from_fn(|i| i as u8);
        let plaintext = unhex::<12>("1f4dea8007fd70d000000001");
        let sealed = seal_with_nonce(&SecretKey([1; 32]), nonce, &plaintext);
        assert_eq!(hex::encode(&sealed.ciphertext), "3e6558feab625902e690e79a");
        assert_eq!(
            hex::encode(sealed.tag),
            "297f88a878e2737c89193a51d74951fcbc4ee379dbed62638d848e0e3274e7e3"
        );
        assert_eq!(sealed.wire_len(), 60);
    }

    #[test]
    fn seal_uses_fresh_nonces() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = SecretKey::random(&mut rng);
        let a = seal(&key, b"same plaintext", &mut rng);
        let b = seal(&key, b"same plaintext", &mut rng);
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_ne!(a.ciphertext, b"same plaintext".to_vec());
    }

    #[test]
    fn open_rejects_each_region_and_wrong_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let key = SecretKey::random(&mut rng);
        let other = SecretKey::random(&mut rng);
        let bytes = seal(&key, b"twelve bytes", &mut rng).to_bytes();
        assert_eq!(open_bytes(&key, &bytes).unwrap(), b"twelve bytes");
        for pos in [0, 15, 16, 27, 28, 59] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert_eq!(open_bytes(&key, &bad), Err(CryptoError::AuthFailure));
        }
        assert_eq!(open_bytes(&other, &bytes), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn truncated_box_is_rejected() {
        assert_eq!(
            SealedBox::from_bytes(&[0u8; 47]),
            Err(CryptoError::Truncated(47))
        );
        let empty = SealedBox::from_bytes(&[0u8; 48]).unwrap();
        assert!(empty.ciphertext.is_empty());
    }
}
