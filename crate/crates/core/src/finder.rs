//! The finder tag: a small state machine driven by radio frames and timers.
//!
//! All times passed in here are the finder's own clock in milliseconds.
//! Every refusal is silent on the radio; the typed [`Refusal`] only exists
//! for callers inside the process.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{
    hmac_sha256, open_bytes, ratchet_first, ratchet_next, seal, Identifier, SecretKey,
};
use crate::geo::GeoLocation;
use crate::transport::{LinkAddress, DEFAULT_EPOCH_MS};
use crate::wire::{RadioMessage, SETUP_FLAG_RESET_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinderConfig {
    /// Owner absence required before answering AreYouLost.
    pub lost_threshold_ms: u64,
    /// Minimum spacing between two IAmLost answers.
    pub report_interval_ms: u64,
    /// How long a button press keeps setup mode armed.
    pub setup_timeout_ms: u64,
    pub epoch_ms: u64,
    pub mac_randomization: bool,
}

impl Default for FinderConfig {
    fn default() -> Self {
        Self {
            lost_threshold_ms: 300_000,
            report_interval_ms: 60_000,
            setup_timeout_ms: 60_000,
            epoch_ms: DEFAULT_EPOCH_MS,
            mac_randomization: false,
        }
    }
}

/// Why a finder stayed silent.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum Refusal {
    #[error("setup mode is not armed")]
    NotInSetupMode,
    #[error("no manufacturing key installed")]
    NotProvisioned,
    #[error("authentication failed")]
    AuthFailure,
    #[error("no end-to-end key configured")]
    NotSetUp,
    #[error("connected to owner")]
    Connected,
    #[error("owner seen too recently")]
    OwnerRecentlySeen,
    #[error("reports disabled by owner")]
    OptedOut,
    #[error("report rate limit")]
    RateLimited,
    #[error("malformed or unexpected frame")]
    BadFrame,
}

/// Tag authorizing an opt-out change: `HMAC(e2e_key, "optout" || flag || epoch)`.
pub fn opt_out_tag(e2e_key: &SecretKey, opt_out: bool, epoch: u32) -> [u8; 32] {
    hmac_sha256(
        e2e_key.as_bytes(),
        &[b"optout", &[u8::from(opt_out)], &epoch.to_be_bytes()],
    )
}

/// `lat_e7 || lon_e7 || counter`, all big-endian.
pub fn report_plaintext(geo: &GeoLocation, counter: u32) -> [u8; 12] {
    let mut out = [0u8; 12];
    out[..8].copy_from_slice(&geo.to_bytes());
    out[8..].copy_from_slice(&counter.to_be_bytes());
    out
}

#[derive(Debug, Clone)]
pub struct FinderState {
    id_init: Identifier,
    mf_key: Option<SecretKey>,
    e2e_key: Option<SecretKey>,
    id_rand: Option<Identifier>,
    epoch_counter: u32,
    epoch_anchor: u64,
    setup_mode: bool,
    /// Setup mode and any encrypted setup session end here.
    setup_deadline: u64,
    session_key: Option<SecretKey>,
    connected: bool,
    last_owner_seen: u64,
    opt_out: bool,
    report_counter: u32,
    last_report_time: Option<u64>,
    public_address: [u8; 6],
    config: FinderConfig,
}

impl FinderState {
    /// Factory provisioning. `mf_key` is absent on devices that only
    /// support the local setup.
    pub fn manufacture(
        id_init: Identifier,
        mf_key: Option<SecretKey>,
        config: FinderConfig,
    ) -> Self {
        let digest = hmac_sha256(b"public-address", &[id_init.as_bytes()]);
        let mut public_address: [u8; 6] = digest[..6].try_into().expect("6 bytes");
        public_address[0] &= !0x03;
        Self {
            id_init,
            mf_key,
            e2e_key: None,
            id_rand: None,
            epoch_counter: 0,
            epoch_anchor: 0,
            setup_mode: false,
            setup_deadline: 0,
            session_key: None,
            connected: false,
            last_owner_seen: 0,
            opt_out: false,
            report_counter: 0,
            last_report_time: None,
            public_address,
            config,
        }
    }

    pub fn id_init(&self) -> Identifier {
        self.id_init
    }

    pub fn e2e_key(&self) -> Option<&SecretKey> {
        self.e2e_key.as_ref()
    }

    pub fn mf_key(&self) -> Option<&SecretKey> {
        self.mf_key.as_ref()
    }

    pub fn id_rand(&self) -> Option<Identifier> {
        self.id_rand
    }

    pub fn epoch_counter(&self) -> u32 {
        self.epoch_counter
    }

    pub fn setup_mode(&self) -> bool {
        self.setup_mode
    }

    pub fn connected(&self) -> bool {
        self.connected
    }

    pub fn opt_out(&self) -> bool {
        self.opt_out
    }

    pub fn report_counter(&self) -> u32 {
        self.report_counter
    }

    pub fn last_owner_seen(&self) -> u64 {
        self.last_owner_seen
    }

    pub fn config(&self) -> &FinderConfig {
        &self.config
    }

    /// The address the finder currently advertises.
    pub fn link_address(&self) -> LinkAddress {
        match (&self.e2e_key, self.config.mac_randomization) {
            (Some(key), true) => LinkAddress::randomized(key, self.epoch_counter),
            _ => LinkAddress::fixed(self.public_address),
        }
    }

    pub fn press_button_hold(&mut self, now: u64) {
        self.setup_mode = true;
        self.session_key = None;
        self.setup_deadline = now + self.config.setup_timeout_ms;
    }

    /// When the setup window closes, if one is open.
    pub fn setup_deadline(&self) -> Option<u64> {
        (self.setup_mode || self.session_key.is_some()).then_some(self.setup_deadline)
    }

    pub fn expire_setup(&mut self, now: u64) {
        if now >= self.setup_deadline {
            self.setup_mode = false;
            self.session_key = None;
        }
    }

    /// Local time at which the next ratchet step is due.
    pub fn next_epoch_due(&self) -> Option<u64> {
        self.e2e_key.as_ref()?;
        Some(self.epoch_anchor + (u64::from(self.epoch_counter) + 1) * self.config.epoch_ms)
    }

    pub fn tick_epoch(&mut self) {
        let (Some(key), Some(id)) = (&self.e2e_key, &self.id_rand) else {
            return;
        };
        self.id_rand = Some(ratchet_next(key, id));
        self.epoch_counter += 1;
    }

    /// Records whether the owner's phone currently holds a connection.
    pub fn set_connected(&mut self, connected: bool, now: u64) {
        if self.connected || connected {
            self.last_owner_seen = now;
        }
        self.connected = connected;
    }

    fn apply_setup(
        &mut self,
        flags: u8,
        e2e_key: SecretKey,
        allow_id_reset: bool,
        now: u64,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Identifier {
        if allow_id_reset && flags & SETUP_FLAG_RESET_ID != 0 {
            self.id_init = Identifier::random(rng);
        }
        self.e2e_key = Some(e2e_key);
        self.epoch_counter = 0;
        self.epoch_anchor = now;
        self.id_rand = Some(ratchet_first(&e2e_key, &self.id_init));
        self.report_counter = 0;
        self.last_report_time = None;
        self.opt_out = false;
        self.setup_mode = false;
        self.last_owner_seen = now;
        self.id_init
    }

    /// Plaintext setup. Only honoured while the button-armed window is open
    /// and no encrypted session has been started.
    pub fn handle_setup_local(
        &mut self,
        flags: u8,
        e2e_key: SecretKey,
        now: u64,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<Identifier, Refusal> {
        self.expire_setup(now);
        if !self.setup_mode {
            return Err(Refusal::NotInSetupMode);
        }
        if self.session_key.is_some() {
            return Err(Refusal::BadFrame);
        }
        Ok(self.apply_setup(flags, e2e_key, true, now, rng))
    }

    /// Unwraps the server-issued setup key with the manufacturing key and
    /// opens an encrypted setup session.
    pub fn handle_setup_begin(&mut self, wrapped: &[u8], now: u64) -> Result<(), Refusal> {
        self.expire_setup(now);
        if !self.setup_mode {
            return Err(Refusal::NotInSetupMode);
        }
        let mf_key = self.mf_key.ok_or(Refusal::NotProvisioned)?;
        let raw = open_bytes(&mf_key, wrapped).map_err(|_| Refusal::AuthFailure)?;
        let setup_key = SecretKey::from_slice(&raw).map_err(|_| Refusal::AuthFailure)?;
        self.session_key = Some(setup_key);
        Ok(())
    }

    /// A frame sealed under the session setup key. Carries either the inner
    /// Setup or a token challenge.
    pub fn handle_sealed(
        &mut self,
        sealed_frame: &[u8],
        now: u64,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<RadioMessage, Refusal> {
        self.expire_setup(now);
        let session_key = self.session_key.ok_or(Refusal::NotInSetupMode)?;
        let inner = open_bytes(&session_key, sealed_frame).map_err(|_| Refusal::AuthFailure)?;
        let reply = match RadioMessage::decode(&inner).map_err(|_| Refusal::BadFrame)? {
            RadioMessage::Setup { flags, e2e_key } => {
                if !self.setup_mode {
                    return Err(Refusal::NotInSetupMode);
                }
                // id_init is registered with the manufacturer; never reset it here.
                let id_init = self.apply_setup(flags, e2e_key, false, now, rng);
                RadioMessage::SetupOk { id_init }
            }
            RadioMessage::TokenChallenge { sealed_nonce } => {
                let mf_key = self.mf_key.ok_or(Refusal::NotProvisioned)?;
                let nonce = open_bytes(&mf_key, &sealed_nonce).map_err(|_| Refusal::AuthFailure)?;
                let nonce: [u8; 32] = nonce.try_into().map_err(|_| Refusal::BadFrame)?;
                RadioMessage::TokenAnswer { nonce }
            }
            _ => return Err(Refusal::BadFrame),
        };
        let sealed = seal(&session_key, &reply.encode(), rng);
        Ok(RadioMessage::Sealed {
            sealed_frame: sealed.to_bytes(),
        })
    }

    /// Answers with a sealed location report iff the finder believes it is
    /// lost, has not opted out, and is outside the rate limit.
    pub fn handle_are_you_lost(
        &mut self,
        geo: GeoLocation,
        now: u64,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<RadioMessage, Refusal> {
        let (Some(key), Some(id_rand)) = (self.e2e_key, self.id_rand) else {
            return Err(Refusal::NotSetUp);
        };
        if self.connected {
            return Err(Refusal::Connected);
        }
        if now.saturating_sub(self.last_owner_seen) < self.config.lost_threshold_ms {
            return Err(Refusal::OwnerRecentlySeen);
        }
        if self.opt_out {
            return Err(Refusal::OptedOut);
        }
        if let Some(last) = self.last_report_time {
            if now.saturating_sub(last) < self.config.report_interval_ms {
                return Err(Refusal::RateLimited);
            }
        }
        self.report_counter += 1;
        self.last_report_time = Some(now);
        let sealed = seal(&key, &report_plaintext(&geo, self.report_counter), rng);
        Ok(RadioMessage::IAmLost {
            id_rand,
            e2e_message: sealed.to_bytes(),
        })
    }

    pub fn set_opt_out(
        &mut self,
        opt_out: bool,
        epoch: u32,
        tag: &[u8; 32],
    ) -> Result<(), Refusal> {
        let key = self.e2e_key.ok_or(Refusal::NotSetUp)?;
        if epoch != self.epoch_counter {
            return Err(Refusal::AuthFailure);
        }
        let expected = opt_out_tag(&key, opt_out, epoch);
        if !constant_time_eq(&expected, tag) {
            return Err(Refusal::AuthFailure);
        }
        self.opt_out = opt_out;
        Ok(())
    }

    /// Typed entry point for one radio frame.
    pub fn respond(
        &mut self,
        frame: &[u8],
        now: u64,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<RadioMessage, Refusal> {
        match RadioMessage::decode(frame).map_err(|_| Refusal::BadFrame)? {
            RadioMessage::IdentityRead => {
                self.expire_setup(now);
                if self.setup_mode {
                    Ok(RadioMessage::Identity {
                        id_init: self.id_init,
                    })
                } else {
                    Err(Refusal::NotInSetupMode)
                }
            }
            RadioMessage::Setup { flags, e2e_key } => {
                let id_init = self.handle_setup_local(flags, e2e_key, now, rng)?;
                Ok(RadioMessage::SetupOk { id_init })
            }
            RadioMessage::SetupEncBegin { wrapped_setup_key } => {
                self.handle_setup_begin(&wrapped_setup_key, now)?;
                Ok(RadioMessage::Ack)
            }
            RadioMessage::Sealed { sealed_frame } => self.handle_sealed(&sealed_frame, now, rng),
            RadioMessage::AreYouLost { geo } => self.handle_are_you_lost(geo, now, rng),
            RadioMessage::SetOptOut {
                opt_out,
                epoch,
                tag,
            } => {
                self.set_opt_out(opt_out, epoch, &tag)?;
                Ok(RadioMessage::Ack)
            }
            _ => Err(Refusal::BadFrame),
        }
    }

    /// Wire-level handler: the encoded reply, or nothing at all.
    pub fn handle_radio(
        &mut self,
        frame: &[u8],
        now: u64,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Option<Vec<u8>> {
        self.respond(frame, now, rng).ok().map(|m| m.encode())
    }
}

fn constant_time_eq(a: &[u8; 32], b: &[u8; 32]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
