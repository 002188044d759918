//! Owner-phone side of a finder binding.
//!
//! An [`OwnerRecord`] never leaves the phone except through
//! [`OwnerRecord::export_identity`]. Everything the phone sends to the server
//! is derived from it: randomized identifier windows and nothing else.

use data_encoding::BASE32_NOPAD;
use thiserror::Error;

use crate::crypto::{
    open_bytes, ratchet_first, ratchet_next, CryptoError, Identifier, SecretKey, ID_LEN, KEY_LEN,
};
use crate::finder::opt_out_tag;
use crate::geo::GeoLocation;
use crate::wire::{FoundEntry, RadioMessage, WireError};

pub const EXPORT_MAGIC: &[u8; 4] = b"PFID";
pub const EXPORT_VERSION: u8 = 0x01;
/// magic(4) + version(1) + id_init(32) + e2e_key(32) + setup_time(8) +
/// epoch_len(4) + crc32(4).
pub const EXPORT_LEN: usize = 4 + 1 + ID_LEN + KEY_LEN + 8 + 4 + 4;

#[derive(Debug, Error)]
pub enum OwnerError {
    #[error("finder did not answer")]
    Timeout,
    #[error("server does not know this finder")]
    ServerUnknownFinder,
    #[error("authentication failed")]
    AuthFailure,
    #[error("server rejected the request: {0:?}")]
    ServerError(crate::wire::ErrorCode),
    #[error("unexpected reply: {0}")]
    UnexpectedReply(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImportError {
    #[error("identity blob is not valid base32")]
    Encoding,
    #[error("identity blob has {0} bytes")]
    Length(usize),
    #[error("bad magic")]
    Magic,
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("checksum mismatch")]
    Checksum,
}

/// Epochs searched around the owner's current epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchWindow {
    pub back: u64,
    pub forward: u64,
}

impl Default for SearchWindow {
    fn default() -> Self {
        Self {
            back: 4,
            forward: 1,
        }
    }
}

/// A decrypted report that passed authentication and the replay check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedReport {
    pub id_rand: Identifier,
    pub geo: GeoLocation,
    pub counter: u32,
    pub received_at: u64,
    /// Reported by a stranger rather than observed by the owner.
    pub anonymous: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerRecord {
    pub id_init: Identifier,
    pub e2e_key: SecretKey,
    pub setup_time: u64,
    pub epoch_len: u64,
    pub last_counter_seen: u32,
    pub last_known_location: Option<(GeoLocation, u64)>,
    pub opt_out_shadow: bool,
}

impl OwnerRecord {
    pub fn new(id_init: Identifier, e2e_key: SecretKey, setup_time: u64, epoch_len: u64) -> Self {
        Self {
            id_init,
            e2e_key,
            setup_time,
            epoch_len,
            last_counter_seen: 0,
            last_known_location: None,
            opt_out_shadow: false,
        }
    }

    pub fn epoch_at(&self, now: u64) -> u64 {
        now.saturating_sub(self.setup_time) / self.epoch_len.max(1)
    }

    /// Randomized identifiers for epochs `current - back ..= current + forward`,
    /// clipped at epoch zero.
    pub fn current_id_window(&self, now: u64, window: SearchWindow) -> Vec<Identifier> {
        let current = self.epoch_at(now);
        let first = current.saturating_sub(window.back);
        let last = current + window.forward;
        let mut id = ratchet_first(&self.e2e_key, &self.id_init);
        for _ in 0..first {
            id = ratchet_next(&self.e2e_key, &id);
        }
        let mut out = Vec::with_capacity((last - first + 1) as usize);
        out.push(id);
        for _ in first..last {
            id = ratchet_next(&self.e2e_key, &id);
            out.push(id);
        }
        out
    }

    /// Decrypts search results, keeping only authentic reports whose counter
    /// is above the watermark. Accepted reports come back in counter order.
    pub fn accept_reports(&mut self, entries: &[FoundEntry]) -> Vec<VerifiedReport> {
        let mut candidates: Vec<VerifiedReport> = entries
            .iter()
            .filter_map(|e| self.decrypt_entry(e))
            .collect();
        candidates.sort_by_key(|r| (r.counter, r.received_at));
        let mut accepted = Vec::new();
        for report in candidates {
            if report.counter > self.last_counter_seen {
                self.last_counter_seen = report.counter;
                accepted.push(report);
            }
        }
        accepted
    }

    fn decrypt_entry(&self, entry: &FoundEntry) -> Option<VerifiedReport> {
        let plain = open_bytes(&self.e2e_key, &entry.e2e_message).ok()?;
        let plain: [u8; 12] = plain.try_into().ok()?;
        let geo = GeoLocation::from_bytes(plain[..8].try_into().expect("8 bytes")).ok()?;
        let counter = u32::from_be_bytes(plain[8..].try_into().expect("4 bytes"));
        Some(VerifiedReport {
            id_rand: entry.id_rand,
            geo,
            counter,
            received_at: entry.received_at,
            anonymous: true,
        })
    }

    /// The radio command that sets or clears the finder's opt-out flag,
    /// bound to the owner's view of the current epoch.
    pub fn opt_out_command(&self, opt_out: bool, now: u64) -> RadioMessage {
        let epoch = self.epoch_at(now) as u32;
        RadioMessage::SetOptOut {
            opt_out,
            epoch,
            tag: opt_out_tag(&self.e2e_key, opt_out, epoch),
        }
    }

    pub fn export_bytes(&self) -> [u8; EXPORT_LEN] {
        let mut out = [0u8; EXPORT_LEN];
        out[..4].copy_from_slice(EXPORT_MAGIC);
        out[4] = EXPORT_VERSION;
        out[5..37].copy_from_slice(self.id_init.as_bytes());
        out[37..69].copy_from_slice(self.e2e_key.as_bytes());
        out[69..77].copy_from_slice(&self.setup_time.to_be_bytes());
        out[77..81].copy_from_slice(&(self.epoch_len as u32).to_be_bytes());
        let crc = crc32fast::hash(&out[..81]);
        out[81..].copy_from_slice(&crc.to_be_bytes());
        out
    }

    /// Base32 text suitable for a QR code or copy/paste.
    pub fn export_identity(&self) -> String {
        BASE32_NOPAD.encode(&self.export_bytes())
    }

    pub fn import_bytes(bytes: &[u8]) -> Result<Self, ImportError> {
        if bytes.len() != EXPORT_LEN {
            return Err(ImportError::Length(bytes.len()));
        }
        if &bytes[..4] != EXPORT_MAGIC {
            return Err(ImportError::Magic);
        }
        if bytes[4] != EXPORT_VERSION {
            return Err(ImportError::Version(bytes[4]));
        }
        let stored = u32::from_be_bytes(bytes[81..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..81]) != stored {
            return Err(ImportError::Checksum);
        }
        Ok(Self::new(
            Identifier::from_bytes(bytes[5..37].try_into().expect("32 bytes")),
            SecretKey::from_bytes(bytes[37..69].try_into().expect("32 bytes")),
            u64::from_be_bytes(bytes[69..77].try_into().expect("8 bytes")),
            u64::from(u32::from_be_bytes(
                bytes[77..81].try_into().expect("4 bytes"),
            )),
        ))
    }

    pub fn import_identity(blob: &str) -> Result<Self, ImportError> {
        let bytes = BASE32_NOPAD
            .decode(blob.trim().as_bytes())
            .map_err(|_| ImportError::Encoding)?;
        Self::import_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ratchet_at, seal};
    use crate::finder::report_plaintext;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const EPOCH: u64 = 900_000;

    fn record(seed: u64) -> OwnerRecord {
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        OwnerRecord::new(
            Identifier::random(&mut r),
            SecretKey::random(&mut r),
            5_000,
            EPOCH,
        )
    }

    fn entry(rec: &OwnerRecord, counter: u32, rng: &mut ChaCha20Rng) -> FoundEntry {
        let geo = GeoLocation::new(10 * counter as i32, -20).unwrap();
        FoundEntry {
            id_rand: rec.current_id_window(
                0,
                SearchWindow {
                    back: 0,
                    forward: 0,
                },
            )[0],
            e2e_message: seal(&rec.e2e_key, &report_plaintext(&geo, counter), rng).to_bytes(),
            received_at: counter as u64,
        }
    }

    #[test]
    fn window_base_case_is_first_ratchet() {
        let rec = record(1);
        let w = rec.current_id_window(
            5_000,
            SearchWindow {
                back: 0,
                forward: 0,
            },
        );
        assert_eq!(w, vec![ratchet_first(&rec.e2e_key, &rec.id_init)]);
    }

    #[test]
    fn default_window_at_epoch_ten_spans_six_to_eleven() {
        let rec = record(2);
        let now = 5_000 + 10 * EPOCH + 123;
        let w = rec.current_id_window(now, SearchWindow::default());
        let expected: Vec<_> = (6..=11)
            .map(|e| ratchet_at(&rec.e2e_key, &rec.id_init, e))
            .collect();
        assert_eq!(w, expected);
        let mut uniq = w.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 6);
        assert_eq!(
            w,
            rec.current_id_window(now + 1_000, SearchWindow::default())
        );
    }

    #[test]
    fn window_clips_at_epoch_zero() {
        let rec = record(3);
        let w = rec.current_id_window(5_000 + EPOCH, SearchWindow::default());
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn accept_applies_watermark_and_drops_forgeries() {
        let mut r = ChaCha20Rng::seed_from_u64(9);
        let mut rec = record(4);
        let e1 = entry(&rec, 1, &mut r);
        let e2 = entry(&rec, 2, &mut r);
        let forged = FoundEntry {
            e2e_message: {
                let mut b = vec![0u8; 60];
                r.fill_bytes(&mut b);
                b
            },
            ..e1.clone()
        };
        // newest first, the way the server returns them
        let got = rec.accept_reports(&[e2.clone(), forged, e1.clone()]);
        assert_eq!(
            got.iter().map(|v| v.counter).collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert!(got.iter().all(|v| v.anonymous));
        assert!(rec.accept_reports(&[e1, e2]).is_empty());
        assert_eq!(rec.last_counter_seen, 2);
    }

    #[test]
    fn export_layout_and_round_trip() {
        let mut rec = record(5);
        rec.last_counter_seen = 9;
        rec.opt_out_shadow = true;
        let bytes = rec.export_bytes();
        assert_eq!(bytes.len(), 85);
        assert_eq!(&bytes[..5], b"PFID\x01");
        let blob = rec.export_identity();
        assert_eq!(blob.len(), 136);
        let back = OwnerRecord::import_identity(&blob).unwrap();
        assert_eq!(back.id_init, rec.id_init);
        assert_eq!(back.e2e_key, rec.e2e_key);
        assert_eq!(back.setup_time, rec.setup_time);
        assert_eq!(back.epoch_len, rec.epoch_len);
        assert_eq!(back.last_counter_seen, 0);
        assert!(!back.opt_out_shadow);
    }

    #[test]
    fn import_rejects_bad_headers() {
        let rec = record(6);
        let mut b = rec.export_bytes();
        b[0] = b'X';
        assert_eq!(OwnerRecord::import_bytes(&b), Err(ImportError::Magic));
        let mut b = rec.export_bytes();
        b[4] = 2;
        assert_eq!(OwnerRecord::import_bytes(&b), Err(ImportError::Version(2)));
        let mut b = rec.export_bytes();
        b[40] ^= 1;
        assert_eq!(OwnerRecord::import_bytes(&b), Err(ImportError::Checksum));
        assert_eq!(
            OwnerRecord::import_bytes(&b[..84]),
            Err(ImportError::Length(84))
        );
        assert_eq!(
            OwnerRecord::import_identity("not base32!"),
            Err(ImportError::Encoding)
        );
    }

    proptest! {
        #[test]
        fn any_single_character_corruption_is_rejected(pos in 0usize..136, pick in 0usize..31) {
            let rec = record(7);
            let blob = rec.export_identity();
            const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ234567";
            let original = blob.as_bytes()[pos];
            let replacement = *ALPHABET.iter().filter(|&&c| c != original).nth(pick).unwrap();
            let mut corrupted = blob.into_bytes();
            corrupted[pos] = replacement;
            let corrupted = String::from_utf8(corrupted).unwrap();
            prop_assert!(OwnerRecord::import_identity(&corrupted).is_err());
        }
    }
}
