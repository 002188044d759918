//! The cloud service. It stores sealed reports keyed by randomized
//! identifiers and never holds anything that opens them.
//!
//! State changes are appended to a JSON-lines event log; [`Server::restart`]
//! and [`Server::open`] rebuild the in-memory index by replaying it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{seal, Identifier, SecretKey};
use crate::transport::DEFAULT_EPOCH_MS;
use crate::wire::{ErrorCode, FoundEntry, NetMessage, Token, E2E_MESSAGE_LEN};

pub const DAY_MS: u64 = 24 * 60 * 60 * 1000;
pub const MAX_SEARCH_IDS: usize = 64;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ServerError {
    #[error("finder is not registered with the manufacturer")]
    UnknownFinder,
    #[error("report has the wrong length")]
    MalformedReport,
    #[error("a valid access token is required")]
    TokenRequired,
    #[error("too many identifiers in one search")]
    TooManyIds,
    #[error("challenge answer did not match")]
    AuthFailure,
    #[error("request not understood")]
    BadRequest,
}

impl From<ServerError> for ErrorCode {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::UnknownFinder => ErrorCode::UnknownFinder,
            ServerError::MalformedReport => ErrorCode::MalformedReport,
            ServerError::TokenRequired => ErrorCode::TokenRequired,
            ServerError::TooManyIds => ErrorCode::TooManyIds,
            ServerError::AuthFailure => ErrorCode::AuthFailure,
            ServerError::BadRequest => ErrorCode::BadRequest,
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Which operations require an access token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TokenPolicy {
    #[default]
    Off,
    Ingest,
    Search,
    Both,
}

impl TokenPolicy {
    pub fn on_ingest(self) -> bool {
        matches!(self, Self::Ingest | Self::Both)
    }

    pub fn on_search(self) -> bool {
        matches!(self, Self::Search | Self::Both)
    }
}

impl FromStr for TokenPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "off" => Self::Off,
            "ingest" => Self::Ingest,
            "search" => Self::Search,
            "both" => Self::Both,
            other => return Err(format!("unknown token policy {other:?}")),
        })
    }
}

impl fmt::Display for TokenPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Ingest => "ingest",
            Self::Search => "search",
            Self::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    pub retention_ms: u64,
    pub lost_ttl_ms: u64,
    pub token_policy: TokenPolicy,
}

impl ServerConfig {
    pub fn with_epoch(epoch_ms: u64) -> Self {
        Self {
            retention_ms: 30 * DAY_MS,
            lost_ttl_ms: 2 * epoch_ms,
            token_policy: TokenPolicy::Off,
        }
    }
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self::with_epoch(DEFAULT_EPOCH_MS)
    }
}

/// One line of a registry file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id_init: String,
    pub mf_key: String,
}

/// `id_init -> mf_key`, written once by manufacturing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManufacturerRegistry {
    entries: BTreeMap<Identifier, SecretKey>,
}

impl ManufacturerRegistry {
    pub fn insert(&mut self, id_init: Identifier, mf_key: SecretKey) {
        self.entries.insert(id_init, mf_key);
    }

    pub fn get(&self, id_init: &Identifier) -> Option<&SecretKey> {
        self.entries.get(id_init)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Identifier, &SecretKey)> {
        self.entries.iter()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|(id, key)| {
                let entry = RegistryEntry {
                    id_init: id.to_hex(),
                    mf_key: hex::encode(key.as_bytes()),
                };
                serde_json::to_string(&entry).expect("registry entry serializes") + "\n"
            })
            .collect()
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self, StoreError> {
        let mut reg = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| StoreError::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let entry: RegistryEntry =
                serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let id = hex::decode(&entry.id_init)
                .ok()
                .and_then(|b| Identifier::from_slice(&b).ok())
                .ok_or_else(|| err("bad id_init".into()))?;
            let key = hex::decode(&entry.mf_key)
                .ok()
                .and_then(|b| SecretKey::from_slice(&b).ok())
                .ok_or_else(|| err("bad mf_key".into()))?;
            reg.insert(id, key);
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_jsonl(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredReport {
    pub id_rand: Identifier,
    pub e2e_message: Vec<u8>,
    pub received_at: u64,
}

/// Ciphertext-only server state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerStore {
    reports: Vec<StoredReport>,
    by_id: BTreeMap<Identifier, Vec<usize>>,
    lost_set: BTreeMap<Identifier, u64>,
    tokens: BTreeSet<Token>,
}

impl ServerStore {
    pub fn report_count(&self) -> usize {
        self.reports.len()
    }

    pub fn reports(&self) -> &[StoredReport] {
        &self.reports
    }

    pub fn tokens(&self) -> &BTreeSet<Token> {
        &self.tokens
    }

    fn apply(&mut self, event: &LogEvent) -> Result<(), String> {
        match event {
            LogEvent::Report {
                id_rand,
                e2e_message,
                received_at,
            } => {
                let id_rand = parse_id(id_rand)?;
                let e2e_message = hex::decode(e2e_message).map_err(|e| e.to_string())?;
                self.by_id
                    .entry(id_rand)
                    .or_default()
                    .push(self.reports.len());
                self.reports.push(StoredReport {
                    id_rand,
                    e2e_message,
                    received_at: *received_at,
                });
            }
            LogEvent::MarkLost {
                id_rand,
                expires_at,
            } => {
                self.lost_set.insert(parse_id(id_rand)?, *expires_at);
            }
            LogEvent::ClearLost { id_rand } => {
                self.lost_set.remove(&parse_id(id_rand)?);
            }
            LogEvent::Token { token } => {
                let bytes = hex::decode(token).map_err(|e| e.to_string())?;
                let token = Token(bytes.try_into().map_err(|_| "bad token".to_string())?);
                self.tokens.insert(token);
            }
        }
        Ok(())
    }
}

fn parse_id(s: &str) -> Result<Identifier, String> {
    let bytes = hex::decode(s).map_err(|e| e.to_string())?;
    Identifier::from_slice(&bytes).map_err(|e| e.to_string())
}

/// One persisted state change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Report {
        id_rand: String,
        e2e_message: String,
        received_at: u64,
    },
    MarkLost {
        id_rand: String,
        expires_at: u64,
    },
    ClearLost {
        id_rand: String,
    },
    Token {
        token: String,
    },
}

/// Append-only event log, always kept in memory and optionally mirrored to
/// a file.
#[derive(Debug, Default)]
pub struct EventLog {
    lines: Vec<String>,
    path: Option<PathBuf>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file and loads its existing lines.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let lines = match fs::read_to_string(path) {
            Ok(text) => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            lines,
            path: Some(path.to_path_buf()),
        })
    }

    fn append(&mut self, event: &LogEvent) -> Result<(), StoreError> {
        let line = serde_json::to_string(event).expect("log event serializes");
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    fn replay(&self) -> Result<ServerStore, StoreError> {
        let origin = self
            .path
            .as_ref()
            .map_or_else(|| "<memory>".to_string(), |p| p.display().to_string());
        let mut store = ServerStore::default();
        for (i, line) in self.lines.iter().enumerate() {
            let err = |msg: String| StoreError::Parse {
                path: origin.clone(),
                line: i + 1,
                msg,
            };
            let event: LogEvent = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            store.apply(&event).map_err(err)?;
        }
        Ok(store)
    }
}

pub struct Server {
    registry: ManufacturerRegistry,
    store: ServerStore,
    config: ServerConfig,
    challenges: BTreeMap<Identifier, [u8; 32]>,
    log: EventLog,
    rng: ChaCha20Rng,
}

impl Server {
    pub fn new(registry: ManufacturerRegistry, config: ServerConfig, seed: u64) -> Self {
        Self {
            registry,
            store: ServerStore::default(),
            config,
            challenges: BTreeMap::new(),
            log: EventLog::in_memory(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// A server backed by a log file; existing events are replayed.
    pub fn open(
        registry: ManufacturerRegistry,
        config: ServerConfig,
        seed: u64,
        log_path: &Path,
    ) -> Result<Self, StoreError> {
        let log = EventLog::open(log_path)?;
        let store = log.replay()?;
        Ok(Self {
            registry,
            store,
            config,
            challenges: BTreeMap::new(),
            log,
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    /// Drops all volatile state and rebuilds the store from the log.
    pub fn restart(&mut self) -> Result<(), StoreError> {
        if let Some(path) = self.log.path.clone() {
            self.log = EventLog::open(&path)?;
        }
        self.store = self.log.replay()?;
        self.challenges.clear();
        Ok(())
    }

    pub fn registry(&self) -> &ManufacturerRegistry {
        &self.registry
    }

    /// Factory-side provisioning. Not reachable from [`Server::handle`].
    pub fn provision(&mut self, id_init: Identifier, mf_key: SecretKey) {
        self.registry.insert(id_init, mf_key);
    }

    pub fn store(&self) -> &ServerStore {
        &self.store
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    fn record(&mut self, event: LogEvent) {
        self.store
            .apply(&event)
            .expect("self-generated event is valid");
        // The in-memory copy is authoritative for the running process; a
        // failed file append only loses durability.
        let _ = self.log.append(&event);
    }

    /// Issues a fresh setup key, in plaintext for the phone and sealed under
    /// the finder's manufacturing key. The key is not retained.
    pub fn register_init(
        &mut self,
        id_init: &Identifier,
    ) -> Result<(SecretKey, Vec<u8>), ServerError> {
        let mf_key = *self
            .registry
            .get(id_init)
            .ok_or(ServerError::UnknownFinder)?;
        let setup_key = SecretKey::random(&mut self.rng);
        let wrapped = seal(&mf_key, setup_key.as_bytes(), &mut self.rng).to_bytes();
        Ok((setup_key, wrapped))
    }

    fn check_token(&self, token: Option<Token>) -> Result<(), ServerError> {
        match token {
            Some(t) if self.store.tokens.contains(&t) => Ok(()),
            _ => Err(ServerError::TokenRequired),
        }
    }

    pub fn ingest(
        &mut self,
        id_rand: Identifier,
        e2e_message: &[u8],
        token: Option<Token>,
        now: u64,
    ) -> Result<(), ServerError> {
        if e2e_message.len() != E2E_MESSAGE_LEN {
            return Err(ServerError::MalformedReport);
        }
        if self.config.token_policy.on_ingest() {
            self.check_token(token)?;
        }
        self.record(LogEvent::Report {
            id_rand: id_rand.to_hex(),
            e2e_message: hex::encode(e2e_message),
            received_at: now,
        });
        Ok(())
    }

    /// Unexpired reports for any of `ids`, newest first.
    pub fn search(
        &self,
        ids: &[Identifier],
        token: Option<Token>,
        now: u64,
    ) -> Result<Vec<FoundEntry>, ServerError> {
        if ids.len() > MAX_SEARCH_IDS {
            return Err(ServerError::TooManyIds);
        }
        if self.config.token_policy.on_search() {
            self.check_token(token)?;
        }
        let wanted: BTreeSet<&Identifier> = ids.iter().collect();
        let mut hits: Vec<usize> = wanted
            .iter()
            .filter_map(|id| self.store.by_id.get(*id))
            .flatten()
            .copied()
            .filter(|&i| self.store.reports[i].received_at + self.config.retention_ms > now)
            .collect();
        hits.sort_unstable_by(|a, b| {
            let (ra, rb) = (&self.store.reports[*a], &self.store.reports[*b]);
            rb.received_at.cmp(&ra.received_at).then(b.cmp(a))
        });
        Ok(hits
            .into_iter()
            .map(|i| {
                let r = &self.store.reports[i];
                FoundEntry {
                    id_rand: r.id_rand,
                    e2e_message: r.e2e_message.clone(),
                    received_at: r.received_at,
                }
            })
            .collect())
    }

    pub fn mark_lost(&mut self, ids: &[Identifier], now: u64) {
        let expires_at = now + self.config.lost_ttl_ms;
        for id in ids {
            self.record(LogEvent::MarkLost {
                id_rand: id.to_hex(),
                expires_at,
            });
        }
    }

    pub fn clear_lost(&mut self, ids: &[Identifier]) {
        for id in ids {
            if self.store.lost_set.contains_key(id) {
                self.record(LogEvent::ClearLost {
                    id_rand: id.to_hex(),
                });
            }
        }
    }

    pub fn get_lost_ids(&self, now: u64) -> Vec<Identifier> {
        self.store
            .lost_set
            .iter()
            .filter(|(_, &expires)| expires > now)
            .map(|(id, _)| *id)
            .collect()
    }

    /// A random nonce sealed under the finder's manufacturing key.
    pub fn issue_challenge(&mut self, id_init: &Identifier) -> Result<Vec<u8>, ServerError> {
        let mf_key = *self
            .registry
            .get(id_init)
            .ok_or(ServerError::UnknownFinder)?;
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        self.challenges.insert(*id_init, nonce);
        Ok(seal(&mf_key, &nonce, &mut self.rng).to_bytes())
    }

    /// Checks a relayed challenge answer. Each challenge allows one attempt.
    pub fn redeem_challenge(
        &mut self,
        id_init: &Identifier,
        nonce: &[u8; 32],
    ) -> Result<Token, ServerError> {
        let expected = self
            .challenges
            .remove(id_init)
            .ok_or(ServerError::AuthFailure)?;
        if expected != *nonce {
            return Err(ServerError::AuthFailure);
        }
        let mut token = [0u8; 32];
        self.rng.fill_bytes(&mut token);
        self.record(LogEvent::Token {
            token: hex::encode(token),
        });
        Ok(Token(token))
    }

    /// Reads the manufacturing key back out of a sealed challenge. Test aid
    /// for checking that challenges really are bound to the registry key.
    #[cfg(test)]
    fn open_challenge(&self, id_init: &Identifier, sealed: &[u8]) -> Option<Vec<u8>> {
        crate::crypto::open_bytes(self.registry.get(id_init)?, sealed).ok()
    }

    /// Processes one request frame and returns the response frame.
    pub fn handle(&mut self, frame: &[u8], now: u64) -> Vec<u8> {
        let reply = match NetMessage::decode(frame) {
            Ok(msg) => self.dispatch(msg, now),
            Err(_) => Err(ServerError::BadRequest),
        };
        match reply {
            Ok(msg) => msg,
            Err(e) => NetMessage::Error { code: e.into() },
        }
        .encode()
    }

    fn dispatch(&mut self, msg: NetMessage, now: u64) -> Result<NetMessage, ServerError> {
        Ok(match msg {
            NetMessage::RegisterInit { id_init } => {
                let (setup_key, wrapped_setup_key) = self.register_init(&id_init)?;
                NetMessage::StartEncryptedSetup {
                    setup_key,
                    wrapped_setup_key,
                }
            }
            NetMessage::FoundResponse {
                id_rand,
                e2e_message,
                token,
            } => {
                self.ingest(id_rand, &e2e_message, token, now)?;
                NetMessage::GenericAck
            }
            NetMessage::Search { token, ids } => NetMessage::Found {
                entries: self.search(&ids, token, now)?,
            },
            NetMessage::MarkLost { ids } => {
                self.mark_lost(&ids, now);
                NetMessage::GenericAck
            }
            NetMessage::ClearLost { ids } => {
                self.clear_lost(&ids);
                NetMessage::GenericAck
            }
            NetMessage::GetLostIds => NetMessage::LostIds {
                ids: self.get_lost_ids(now),
            },
            NetMessage::TokenChallengeRequest { id_init } => NetMessage::TokenChallenge {
                sealed_nonce: self.issue_challenge(&id_init)?,
            },
            NetMessage::TokenResponse { id_init, nonce } => NetMessage::Token {
                token: self.redeem_challenge(&id_init, &nonce)?,
            },
            _ => return Err(ServerError::BadRequest),
        })
    }
}
