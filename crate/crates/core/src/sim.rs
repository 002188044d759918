//! The simulated world: finders, phones and the server on one transport.
//!
//! Phones drive every exchange. A phone operation sends a frame, drains the
//! bus, and then reads whatever reply landed in its inbox. Finders and the
//! server only ever react to delivered frames and timers.
//!
//! Each finder has its own clock, offset from the world clock by a skew
//! that scenarios can change; all finder timers run on that local clock.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{hmac_sha256, open_bytes, seal, Identifier, SecretKey};
use crate::finder::{FinderConfig, FinderState};
use crate::geo::GeoLocation;
use crate::owner::{ImportError, OwnerError, OwnerRecord, SearchWindow, VerifiedReport};
use crate::reporter::LocationReport;
use crate::server::{ManufacturerRegistry, Server, ServerConfig, StoreError, TokenPolicy};
use crate::transport::{
    Address, Channel, Envelope, LinkAddress, Transcript, Transport, TransportError,
    DEFAULT_EPOCH_MS,
};
use crate::wire::{ErrorCode, NetMessage, RadioMessage, Token, SETUP_FLAG_RESET_ID};

pub const SERVER_NAME: &str = "server";

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("unknown actor {0:?}")]
    UnknownActor(String),
    #[error("actor {0:?} already exists")]
    DuplicateActor(String),
    #[error("{phone} holds no record for {finder}")]
    NoRecord { phone: String, finder: String },
    #[error("finder refused the command")]
    Rejected,
    #[error("no response from the server")]
    NoResponse,
    #[error("nothing exported by {0}")]
    NothingExported(String),
    #[error("import failed: {0}")]
    Import(#[from] ImportError),
    #[error(transparent)]
    Owner(#[from] OwnerError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl WorldError {
    /// Short stable name for summaries and exit diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            WorldError::UnknownActor(_) => "UnknownActor",
            WorldError::DuplicateActor(_) => "DuplicateActor",
            WorldError::NoRecord { .. } => "NoRecord",
            WorldError::Rejected => "Rejected",
            WorldError::NoResponse => "NoResponse",
            WorldError::NothingExported(_) => "NothingExported",
            WorldError::Import(_) => "ImportRejected",
            WorldError::Owner(e) => match e {
                OwnerError::Timeout => "Timeout",
                OwnerError::ServerUnknownFinder => "ServerUnknownFinder",
                OwnerError::AuthFailure => "AuthFailure",
                OwnerError::ServerError(_) => "ServerError",
                OwnerError::UnexpectedReply(_) => "UnexpectedReply",
                OwnerError::Wire(_) => "Malformed",
                OwnerError::Crypto(_) => "AuthFailure",
            },
            WorldError::Transport(_) => "Transport",
            WorldError::Store(_) => "Store",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub epoch_ms: u64,
    pub mac_randomization: bool,
    pub token_policy: TokenPolicy,
    pub drop_prob: f64,
    pub search_window: SearchWindow,
    /// Reporters consult the server's lost set and only upload matching reports.
    pub lost_prefilter: bool,
    pub lost_threshold_ms: u64,
    pub report_interval_ms: u64,
    pub setup_timeout_ms: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let f = FinderConfig::default();
        Self {
            seed: 0,
            epoch_ms: DEFAULT_EPOCH_MS,
            mac_randomization: false,
            token_policy: TokenPolicy::Off,
            drop_prob: 0.0,
            search_window: SearchWindow::default(),
            lost_prefilter: false,
            lost_threshold_ms: f.lost_threshold_ms,
            report_interval_ms: f.report_interval_ms,
            setup_timeout_ms: f.setup_timeout_ms,
        }
    }
}

impl WorldConfig {
    pub fn finder_config(&self) -> FinderConfig {
        FinderConfig {
            lost_threshold_ms: self.lost_threshold_ms,
            report_interval_ms: self.report_interval_ms,
            setup_timeout_ms: self.setup_timeout_ms,
            epoch_ms: self.epoch_ms,
            mac_randomization: self.mac_randomization,
        }
    }
}

/// How a finder comes out of the factory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinderKind {
    /// mf-key installed and registered with the server.
    Provisioned,
    /// Copies a registered id_init but carries a different mf-key.
    Counterfeit,
    /// No mf-key; local setup only.
    Unprovisioned,
}

/// A change in a finder's id_rand as observed by the world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochEvent {
    pub finder: String,
    pub sim_time: u64,
    pub epoch: u32,
    pub id_rand: Identifier,
}

/// A change in a finder's link-layer address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressChange {
    pub finder: String,
    pub sim_time: u64,
    pub address: LinkAddress,
}

#[derive(Debug, Default)]
struct Observations {
    id_steps: Vec<EpochEvent>,
    address_changes: Vec<AddressChange>,
}

#[derive(Debug)]
pub struct FinderNode {
    pub state: FinderState,
    /// Finder clock minus world clock.
    pub clock_offset_ms: i64,
    registered: Address,
    last_id_rand: Option<Identifier>,
}

impl FinderNode {
    /// Records id and address changes since the last call and keeps the
    /// transport registration in step with the finder's address.
    fn observe(&mut self, name: &str, now: u64, transport: &mut Transport, log: &mut Observations) {
        let id = self.state.id_rand();
        if id != self.last_id_rand {
            self.last_id_rand = id;
            if let Some(id_rand) = id {
                log.id_steps.push(EpochEvent {
                    finder: name.to_string(),
                    sim_time: now,
                    epoch: self.state.epoch_counter(),
                    id_rand,
                });
            }
        }
        let link = self.state.link_address();
        let addr = link.address();
        if addr != self.registered {
            transport.unregister(&self.registered);
            transport.register(addr.clone());
            self.registered = addr;
            log.address_changes.push(AddressChange {
                finder: name.to_string(),
                sim_time: now,
                address: link,
            });
        }
    }
}

impl FinderNode {
    fn local_time(&self, now: u64) -> u64 {
        now.saturating_add_signed(self.clock_offset_ms)
    }

    fn world_time(&self, local: u64) -> u64 {
        local.saturating_add_signed(-self.clock_offset_ms)
    }
}

#[derive(Debug)]
pub struct Phone {
    pub name: String,
    pub radio: [u8; 6],
    pub position: GeoLocation,
    pub records: BTreeMap<String, OwnerRecord>,
    pub verified: BTreeMap<String, Vec<VerifiedReport>>,
    pub pending: Vec<LocationReport>,
    pub last_submitted: Vec<LocationReport>,
    pub last_patrol: usize,
    pub token: Option<Token>,
    pub exported: BTreeMap<String, String>,
    /// Link addresses seen while bound to own finders.
    own_addresses: BTreeSet<[u8; 6]>,
    radio_inbox: Vec<Envelope>,
    net_inbox: Vec<Envelope>,
}

impl Phone {
    fn node(&self) -> Address {
        Address::Node(self.name.clone())
    }

    fn radio_address(&self) -> Address {
        Address::Radio(self.radio)
    }
}

/// Everything a delivered envelope can touch.
struct Actors {
    finders: BTreeMap<String, FinderNode>,
    phones: BTreeMap<String, Phone>,
    server: Server,
    in_range: BTreeSet<(String, String)>,
    rng: ChaCha20Rng,
}

impl Actors {
    fn dispatch(&mut self, env: &Envelope, now: u64) -> Vec<Envelope> {
        match (&env.channel, &env.dst) {
            (Channel::Radio, Address::Radio(bytes)) => {
                if let Some(phone) = self.phones.values_mut().find(|p| p.radio == *bytes) {
                    phone.radio_inbox.push(env.clone());
                    return Vec::new();
                }
                let Some(sender) = self
                    .phones
                    .values()
                    .find(|p| p.radio_address() == env.src)
                    .map(|p| p.name.clone())
                else {
                    return Vec::new();
                };
                let Some((name, node)) = self
                    .finders
                    .iter_mut()
                    .find(|(_, n)| n.registered == env.dst)
                else {
                    return Vec::new();
                };
                if !self.in_range.contains(&(sender, name.clone())) {
                    return Vec::new();
                }
                let local = node.local_time(now);
                match node.state.handle_radio(&env.payload, local, &mut self.rng) {
                    Some(reply) => vec![Envelope::new(
                        env.dst.clone(),
                        env.src.clone(),
                        Channel::Radio,
                        reply,
                    )],
                    None => Vec::new(),
                }
            }
            (Channel::Network, Address::Node(name)) if name == SERVER_NAME => {
                let reply = self.server.handle(&env.payload, now);
                vec![Envelope::new(
                    env.dst.clone(),
                    env.src.clone(),
                    Channel::Network,
                    reply,
                )]
            }
            (Channel::Network, Address::Node(name)) => {
                if let Some(phone) = self.phones.get_mut(name) {
                    phone.net_inbox.push(env.clone());
                }
                Vec::new()
            }
            _ => Vec::new(),
        }
    }
}

pub struct World {
    config: WorldConfig,
    transport: Transport,
    actors: Actors,
    observed: Observations,
    locations: BTreeSet<GeoLocation>,
    /// Registry entries not yet handed to a declared finder.
    unassigned: Vec<(Identifier, SecretKey)>,
}

fn sub_seed(seed: u64, label: &[u8]) -> u64 {
    let digest = hmac_sha256(&seed.to_be_bytes(), &[label]);
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl World {
    pub fn new(config: WorldConfig) -> Self {
        Self::with_registry(config, ManufacturerRegistry::default())
    }

    /// A world whose server starts with `registry`; provisioned finders
    /// then take their identities from it in id order.
    pub fn with_registry(config: WorldConfig, registry: ManufacturerRegistry) -> Self {
        let mut server_cfg = ServerConfig::with_epoch(config.epoch_ms);
        server_cfg.token_policy = config.token_policy;
        let server = Server::new(
            registry.clone(),
            server_cfg,
            sub_seed(config.seed, b"server"),
        );
        Self::assemble(config, server, registry)
    }

    /// Like [`World::with_registry`] but persists server state to a log file.
    pub fn with_server_log(
        config: WorldConfig,
        registry: ManufacturerRegistry,
        log_path: &std::path::Path,
    ) -> Result<Self, WorldError> {
        let mut server_cfg = ServerConfig::with_epoch(config.epoch_ms);
        server_cfg.token_policy = config.token_policy;
        let server = Server::open(
            registry.clone(),
            server_cfg,
            sub_seed(config.seed, b"server"),
            log_path,
        )?;
        Ok(Self::assemble(config, server, registry))
    }

    fn assemble(config: WorldConfig, server: Server, registry: ManufacturerRegistry) -> Self {
        let mut transport = Transport::new(sub_seed(config.seed, b"transport"));
        transport.set_drop_probability(Channel::Radio, config.drop_prob);
        transport.set_drop_probability(Channel::Network, config.drop_prob);
        transport.register(Address::Node(SERVER_NAME.into()));
        let rng = ChaCha20Rng::seed_from_u64(sub_seed(config.seed, b"actors"));
        let unassigned = registry.iter().map(|(id, key)| (*id, *key)).collect();
        Self {
            config,
            transport,
            actors: Actors {
                finders: BTreeMap::new(),
                phones: BTreeMap::new(),
                server,
                in_range: BTreeSet::new(),
                rng,
            },
            observed: Observations::default(),
            locations: BTreeSet::new(),
            unassigned,
        }
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.transport.now()
    }

    pub fn transcript(&self) -> &Transcript {
        self.transport.transcript()
    }

    pub fn server(&self) -> &Server {
        &self.actors.server
    }

    /// Every id_rand change, including the one at setup.
    pub fn epoch_events(&self) -> &[EpochEvent] {
        &self.observed.id_steps
    }

    /// Every link-address change after manufacture.
    pub fn address_changes(&self) -> &[AddressChange] {
        &self.observed.address_changes
    }

    /// Every position a phone has held; these must never reach the network
    /// in plaintext.
    pub fn locations(&self) -> &BTreeSet<GeoLocation> {
        &self.locations
    }

    pub fn finder(&self, name: &str) -> Result<&FinderNode, WorldError> {
        self.actors
            .finders
            .get(name)
            .ok_or_else(|| WorldError::UnknownActor(name.into()))
    }

    pub fn finders(&self) -> impl Iterator<Item = (&String, &FinderNode)> {
        self.actors.finders.iter()
    }

    pub fn phone(&self, name: &str) -> Result<&Phone, WorldError> {
        self.actors
            .phones
            .get(name)
            .ok_or_else(|| WorldError::UnknownActor(name.into()))
    }

    pub fn phones(&self) -> impl Iterator<Item = (&String, &Phone)> {
        self.actors.phones.iter()
    }

    fn phone_mut(&mut self, name: &str) -> Result<&mut Phone, WorldError> {
        self.actors
            .phones
            .get_mut(name)
            .ok_or_else(|| WorldError::UnknownActor(name.into()))
    }

    fn ensure_unique(&self, name: &str) -> Result<(), WorldError> {
        if name == SERVER_NAME
            || self.actors.finders.contains_key(name)
            || self.actors.phones.contains_key(name)
        {
            return Err(WorldError::DuplicateActor(name.into()));
        }
        Ok(())
    }

    /// Manufactures a finder. This is the factory path, not a network
    /// request: it is the only place the registry grows.
    pub fn add_finder(&mut self, name: &str, kind: FinderKind) -> Result<(), WorldError> {
        self.ensure_unique(name)?;
        let rng = &mut self.actors.rng;
        let (id_init, mf_key) = match kind {
            FinderKind::Unprovisioned => (Identifier::random(rng), None),
            FinderKind::Provisioned | FinderKind::Counterfeit => {
                let (id, key) = if self.unassigned.is_empty() {
                    let id = Identifier::random(rng);
                    let key = SecretKey::random(rng);
                    self.actors.server.provision(id, key);
                    (id, key)
                } else {
                    self.unassigned.remove(0)
                };
                if kind == FinderKind::Counterfeit {
                    (id, Some(SecretKey::random(rng)))
                } else {
                    (id, Some(key))
                }
            }
        };
        let state = FinderState::manufacture(id_init, mf_key, self.config.finder_config());
        let registered = state.link_address().address();
        self.transport.register(registered.clone());
        self.actors.finders.insert(
            name.to_string(),
            FinderNode {
                state,
                clock_offset_ms: 0,
                registered,
                last_id_rand: None,
            },
        );
        Ok(())
    }

    pub fn add_phone(&mut self, name: &str, position: GeoLocation) -> Result<(), WorldError> {
        self.ensure_unique(name)?;
        let digest = hmac_sha256(b"phone-address", &[name.as_bytes()]);
        let mut radio: [u8; 6] = digest[..6].try_into().expect("6 bytes");
        radio[0] = (radio[0] | 0x02) & !0x01;
        let phone = Phone {
            name: name.to_string(),
            radio,
            position,
            records: BTreeMap::new(),
            verified: BTreeMap::new(),
            pending: Vec::new(),
            last_submitted: Vec::new(),
            last_patrol: 0,
            token: None,
            exported: BTreeMap::new(),
            own_addresses: BTreeSet::new(),
            radio_inbox: Vec::new(),
            net_inbox: Vec::new(),
        };
        self.transport.register(phone.node());
        self.transport.register(phone.radio_address());
        self.locations.insert(position);
        self.actors.phones.insert(name.to_string(), phone);
        Ok(())
    }

    pub fn move_phone(&mut self, phone: &str, position: GeoLocation) -> Result<(), WorldError> {
        self.phone_mut(phone)?.position = position;
        self.locations.insert(position);
        Ok(())
    }

    pub fn set_in_range(
        &mut self,
        phone: &str,
        finder: &str,
        in_range: bool,
    ) -> Result<(), WorldError> {
        self.phone(phone)?;
        self.finder(finder)?;
        let key = (phone.to_string(), finder.to_string());
        if in_range {
            self.actors.in_range.insert(key);
        } else {
            self.actors.in_range.remove(&key);
        }
        self.refresh_connectivity();
        Ok(())
    }

    pub fn press_button(&mut self, finder: &str) -> Result<(), WorldError> {
        let now = self.now();
        let node = self
            .actors
            .finders
            .get_mut(finder)
            .ok_or_else(|| WorldError::UnknownActor(finder.into()))?;
        let local = node.local_time(now);
        node.state.press_button_hold(local);
        Ok(())
    }

    /// Shifts a finder's clock relative to the world. Negative values make
    /// it lag, as after a power loss.
    pub fn skew_finder(&mut self, finder: &str, delta_ms: i64) -> Result<(), WorldError> {
        let node = self
            .actors
            .finders
            .get_mut(finder)
            .ok_or_else(|| WorldError::UnknownActor(finder.into()))?;
        node.clock_offset_ms += delta_ms;
        self.advance_time(0);
        Ok(())
    }

    /// A finder is connected iff a phone holding its current key is in range.
    fn refresh_connectivity(&mut self) {
        let now = self.now();
        let Actors {
            finders,
            phones,
            in_range,
            ..
        } = &mut self.actors;
        for (fname, node) in finders.iter_mut() {
            let connected = node.state.e2e_key().is_some_and(|key| {
                phones.values().any(|p| {
                    in_range.contains(&(p.name.clone(), fname.clone()))
                        && p.records.get(fname).is_some_and(|r| &r.e2e_key == key)
                })
            });
            let was = node.state.connected();
            node.state.set_connected(connected, node.local_time(now));
            if was && !connected {
                // Remember where the owner last saw the finder.
                for p in phones.values_mut() {
                    let pos = p.position;
                    if let Some(r) = p.records.get_mut(fname) {
                        if in_range.contains(&(p.name.clone(), fname.clone()))
                            || r.last_known_location.is_none()
                        {
                            r.last_known_location = Some((pos, now));
                        }
                    }
                }
            }
        }
    }

    fn observe(&mut self) {
        let now = self.now();
        for (name, node) in self.actors.finders.iter_mut() {
            node.observe(name, now, &mut self.transport, &mut self.observed);
        }
    }

    fn next_timer(&self, limit: u64) -> Option<u64> {
        let now = self.now();
        self.actors
            .finders
            .values()
            .flat_map(|n| {
                [n.state.next_epoch_due(), n.state.setup_deadline()]
                    .into_iter()
                    .flatten()
                    .map(|local| n.world_time(local).max(now))
            })
            .filter(|&t| t <= limit)
            .min()
    }

    /// Runs the clock forward, firing due timers in time order; timers due
    /// at the same instant fire by finder name, ratchet before setup expiry.
    pub fn advance_time(&mut self, delta_ms: u64) {
        let target = self.now() + delta_ms;
        while let Some(t) = self.next_timer(target) {
            self.transport.advance_to(t);
            self.refresh_connectivity();
            for (name, node) in self.actors.finders.iter_mut() {
                let local = node.local_time(t);
                while node.state.next_epoch_due().is_some_and(|due| due <= local) {
                    node.state.tick_epoch();
                    node.observe(name, t, &mut self.transport, &mut self.observed);
                }
                if node.state.setup_deadline().is_some_and(|d| d <= local) {
                    node.state.expire_setup(local);
                }
            }
        }
        self.transport.advance_to(target);
        self.refresh_connectivity();
    }

    /// Disconnected finders in radio range of `observer`.
    pub fn scan(&self, observer: &str) -> Result<Vec<LinkAddress>, WorldError> {
        self.phone(observer)?;
        Ok(self
            .actors
            .finders
            .iter()
            .filter(|(fname, node)| {
                !node.state.connected()
                    && self
                        .actors
                        .in_range
                        .contains(&(observer.to_string(), (*fname).clone()))
            })
            .map(|(_, node)| node.state.link_address())
            .collect())
    }

    fn deliver_all(&mut self) -> Result<(), WorldError> {
        let now = self.now();
        let actors = &mut self.actors;
        self.transport.deliver(|env| actors.dispatch(env, now))?;
        self.observe();
        Ok(())
    }

    /// One radio request/response between a phone and whatever answers at
    /// `dst`. `None` means silence.
    fn radio_exchange(
        &mut self,
        phone: &str,
        dst: Address,
        msg: &RadioMessage,
    ) -> Result<Option<RadioMessage>, WorldError> {
        let src = {
            let p = self.phone_mut(phone)?;
            p.radio_inbox.clear();
            p.radio_address()
        };
        if !self.transport.is_registered(&dst) {
            return Ok(None);
        }
        self.transport.send(Envelope::new(
            src,
            dst.clone(),
            Channel::Radio,
            msg.encode(),
        ))?;
        self.deliver_all()?;
        let p = self.phone_mut(phone)?;
        let reply = p
            .radio_inbox
            .drain(..)
            .find(|e| e.src == dst)
            .and_then(|e| RadioMessage::decode(&e.payload).ok());
        Ok(reply)
    }

    fn finder_address(&self, finder: &str) -> Result<Address, WorldError> {
        Ok(self.finder(finder)?.state.link_address().address())
    }

    /// One network request/response between a phone and the server.
    fn net_exchange(&mut self, phone: &str, msg: &NetMessage) -> Result<NetMessage, WorldError> {
        let src = {
            let p = self.phone_mut(phone)?;
            p.net_inbox.clear();
            p.node()
        };
        let server = Address::Node(SERVER_NAME.into());
        self.transport.send(Envelope::new(
            src,
            server.clone(),
            Channel::Network,
            msg.encode(),
        ))?;
        self.deliver_all()?;
        let p = self.phone_mut(phone)?;
        let reply = p
            .net_inbox
            .drain(..)
            .find(|e| e.src == server)
            .ok_or(WorldError::NoResponse)?;
        Ok(NetMessage::decode(&reply.payload).map_err(OwnerError::from)?)
    }

    fn bind(&mut self, phone: &str, finder: &str, record: OwnerRecord) -> Result<(), WorldError> {
        let addr = self.finder(finder)?.state.link_address().bytes;
        let p = self.phone_mut(phone)?;
        p.own_addresses.insert(addr);
        p.records.insert(finder.to_string(), record);
        p.verified.entry(finder.to_string()).or_default();
        self.refresh_connectivity();
        Ok(())
    }

    /// Local setup: the phone picks a key and hands it to an armed finder.
    pub fn setup_local(
        &mut self,
        phone: &str,
        finder: &str,
        reset_id: bool,
    ) -> Result<OwnerRecord, WorldError> {
        let e2e_key = SecretKey::random(&mut self.actors.rng);
        let flags = if reset_id { SETUP_FLAG_RESET_ID } else { 0 };
        let dst = self.finder_address(finder)?;
        let reply = self.radio_exchange(phone, dst, &RadioMessage::Setup { flags, e2e_key })?;
        let Some(RadioMessage::SetupOk { id_init }) = reply else {
            return Err(OwnerError::Timeout.into());
        };
        let record = OwnerRecord::new(id_init, e2e_key, self.now(), self.config.epoch_ms);
        self.bind(phone, finder, record.clone())?;
        Ok(record)
    }

    fn sealed_exchange(
        &mut self,
        phone: &str,
        dst: &Address,
        session_key: &SecretKey,
        inner: &RadioMessage,
    ) -> Result<RadioMessage, WorldError> {
        let sealed = seal(session_key, &inner.encode(), &mut self.actors.rng).to_bytes();
        let reply = self.radio_exchange(
            phone,
            dst.clone(),
            &RadioMessage::Sealed {
                sealed_frame: sealed,
            },
        )?;
        let Some(RadioMessage::Sealed { sealed_frame }) = reply else {
            return Err(OwnerError::Timeout.into());
        };
        let plain = open_bytes(session_key, &sealed_frame).map_err(|_| OwnerError::AuthFailure)?;
        Ok(RadioMessage::decode(&plain).map_err(OwnerError::from)?)
    }

    /// Manufacturer-verified setup. With `with_token`, the same session also
    /// answers a token challenge and the phone keeps the issued token.
    pub fn setup_verified(
        &mut self,
        phone: &str,
        finder: &str,
        with_token: bool,
    ) -> Result<OwnerRecord, WorldError> {
        let dst = self.finder_address(finder)?;
        let Some(RadioMessage::Identity { id_init }) =
            self.radio_exchange(phone, dst.clone(), &RadioMessage::IdentityRead)?
        else {
            return Err(OwnerError::Timeout.into());
        };

        let (setup_key, wrapped_setup_key) =
            match self.net_exchange(phone, &NetMessage::RegisterInit { id_init })? {
                NetMessage::StartEncryptedSetup {
                    setup_key,
                    wrapped_setup_key,
                } => (setup_key, wrapped_setup_key),
                NetMessage::Error {
                    code: ErrorCode::UnknownFinder,
                } => return Err(OwnerError::ServerUnknownFinder.into()),
                other => return Err(OwnerError::UnexpectedReply(format!("{other:?}")).into()),
            };

        // The finder answered IdentityRead, so it is armed and in range;
        // silence now means it could not unwrap the setup key.
        match self.radio_exchange(
            phone,
            dst.clone(),
            &RadioMessage::SetupEncBegin { wrapped_setup_key },
        )? {
            Some(RadioMessage::Ack) => {}
            _ => return Err(OwnerError::AuthFailure.into()),
        }

        let e2e_key = SecretKey::random(&mut self.actors.rng);
        let inner = RadioMessage::Setup { flags: 0, e2e_key };
        match self.sealed_exchange(phone, &dst, &setup_key, &inner)? {
            RadioMessage::SetupOk { id_init: confirmed } if confirmed == id_init => {}
            _ => return Err(OwnerError::AuthFailure.into()),
        }
        let record = OwnerRecord::new(id_init, e2e_key, self.now(), self.config.epoch_ms);
        self.bind(phone, finder, record.clone())?;

        if with_token {
            let sealed_nonce =
                match self.net_exchange(phone, &NetMessage::TokenChallengeRequest { id_init })? {
                    NetMessage::TokenChallenge { sealed_nonce } => sealed_nonce,
                    other => return Err(OwnerError::UnexpectedReply(format!("{other:?}")).into()),
                };
            let RadioMessage::TokenAnswer { nonce } = self.sealed_exchange(
                phone,
                &dst,
                &setup_key,
                &RadioMessage::TokenChallenge { sealed_nonce },
            )?
            else {
                return Err(OwnerError::AuthFailure.into());
            };
            match self.net_exchange(phone, &NetMessage::TokenResponse { id_init, nonce })? {
                NetMessage::Token { token } => self.phone_mut(phone)?.token = Some(token),
                _ => return Err(OwnerError::AuthFailure.into()),
            }
        }
        Ok(record)
    }

    /// Addresses the phone recognises as its own finders right now.
    fn own_addresses(&self, phone: &Phone) -> BTreeSet<[u8; 6]> {
        let mut own = phone.own_addresses.clone();
        if self.config.mac_randomization {
            for record in phone.records.values() {
                let current = record.epoch_at(self.now());
                let w = self.config.search_window;
                for e in current.saturating_sub(w.back)..=current + w.forward {
                    own.insert(LinkAddress::randomized(&record.e2e_key, e as u32).bytes);
                }
            }
        }
        own
    }

    /// Asks every disconnected, unknown finder in range whether it is lost.
    /// Resulting reports are queued for [`World::submit`].
    pub fn patrol(&mut self, phone: &str) -> Result<Vec<LocationReport>, WorldError> {
        let hits = self.scan(phone)?;
        let (own, geo) = {
            let p = self.phone(phone)?;
            (self.own_addresses(p), p.position)
        };
        let mut reports = Vec::new();
        for addr in hits {
            if own.contains(&addr.bytes) {
                continue;
            }
            let reply =
                self.radio_exchange(phone, addr.address(), &RadioMessage::AreYouLost { geo })?;
            if let Some(report) = reply.as_ref().and_then(LocationReport::from_reply) {
                reports.push(report);
            }
        }
        if self.config.lost_prefilter && !reports.is_empty() {
            let lost: BTreeSet<Identifier> =
                match self.net_exchange(phone, &NetMessage::GetLostIds)? {
                    NetMessage::LostIds { ids } => ids.into_iter().collect(),
                    other => return Err(OwnerError::UnexpectedReply(format!("{other:?}")).into()),
                };
            reports.retain(|r| lost.contains(&r.id_rand));
        }
        let p = self.phone_mut(phone)?;
        p.last_patrol = reports.len();
        p.pending.extend(reports.iter().cloned());
        Ok(reports)
    }

    fn upload(
        &mut self,
        phone: &str,
        reports: &[LocationReport],
    ) -> Result<Vec<NetMessage>, WorldError> {
        let token = if self.config.token_policy.on_ingest() {
            self.phone(phone)?.token
        } else {
            None
        };
        let mut acks = Vec::new();
        for report in reports {
            acks.push(self.net_exchange(phone, &report.to_found_response(token))?);
        }
        Ok(acks)
    }

    /// Uploads queued reports. Returns the server's replies, which carry no
    /// information about whether an identifier exists.
    pub fn submit(&mut self, phone: &str) -> Result<Vec<NetMessage>, WorldError> {
        let reports = std::mem::take(&mut self.phone_mut(phone)?.pending);
        let acks = self.upload(phone, &reports)?;
        self.phone_mut(phone)?.last_submitted = reports;
        Ok(acks)
    }

    /// Uploads the previous batch again, as a replaying attacker would.
    pub fn resubmit(&mut self, phone: &str) -> Result<Vec<NetMessage>, WorldError> {
        let reports = self.phone(phone)?.last_submitted.clone();
        self.upload(phone, &reports)
    }

    /// Uploads arbitrary reports, bypassing the finder. Used to probe the
    /// server's response uniformity.
    pub fn submit_raw(
        &mut self,
        phone: &str,
        reports: &[LocationReport],
    ) -> Result<Vec<NetMessage>, WorldError> {
        self.upload(phone, reports)
    }

    fn record(&self, phone: &str, finder: &str) -> Result<&OwnerRecord, WorldError> {
        self.phone(phone)?
            .records
            .get(finder)
            .ok_or_else(|| WorldError::NoRecord {
                phone: phone.into(),
                finder: finder.into(),
            })
    }

    pub fn id_window(&self, phone: &str, finder: &str) -> Result<Vec<Identifier>, WorldError> {
        Ok(self
            .record(phone, finder)?
            .current_id_window(self.now(), self.config.search_window))
    }

    /// Searches the owner's id window and keeps the reports that verify.
    pub fn fetch(&mut self, phone: &str, finder: &str) -> Result<Vec<VerifiedReport>, WorldError> {
        let ids = self.id_window(phone, finder)?;
        let token = if self.config.token_policy.on_search() {
            self.phone(phone)?.token
        } else {
            None
        };
        let entries = match self.net_exchange(phone, &NetMessage::Search { token, ids })? {
            NetMessage::Found { entries } => entries,
            NetMessage::Error { code } => return Err(OwnerError::ServerError(code).into()),
            other => return Err(OwnerError::UnexpectedReply(format!("{other:?}")).into()),
        };
        let p = self.phone_mut(phone)?;
        let record = p.records.get_mut(finder).expect("record checked above");
        let accepted = record.accept_reports(&entries);
        p.verified
            .entry(finder.to_string())
            .or_default()
            .extend(accepted.iter().cloned());
        Ok(accepted)
    }

    fn lost_request(&mut self, phone: &str, finder: &str, mark: bool) -> Result<(), WorldError> {
        let ids = self.id_window(phone, finder)?;
        let msg = if mark {
            NetMessage::MarkLost { ids }
        } else {
            NetMessage::ClearLost { ids }
        };
        match self.net_exchange(phone, &msg)? {
            NetMessage::GenericAck => Ok(()),
            other => Err(OwnerError::UnexpectedReply(format!("{other:?}")).into()),
        }
    }

    pub fn mark_lost(&mut self, phone: &str, finder: &str) -> Result<(), WorldError> {
        self.lost_request(phone, finder, true)
    }

    pub fn clear_lost(&mut self, phone: &str, finder: &str) -> Result<(), WorldError> {
        self.lost_request(phone, finder, false)
    }

    pub fn get_lost_ids(&mut self, phone: &str) -> Result<Vec<Identifier>, WorldError> {
        match self.net_exchange(phone, &NetMessage::GetLostIds)? {
            NetMessage::LostIds { ids } => Ok(ids),
            other => Err(OwnerError::UnexpectedReply(format!("{other:?}")).into()),
        }
    }

    pub fn set_opt_out(
        &mut self,
        phone: &str,
        finder: &str,
        opt_out: bool,
    ) -> Result<(), WorldError> {
        let cmd = self
            .record(phone, finder)?
            .opt_out_command(opt_out, self.now());
        let dst = self.finder_address(finder)?;
        match self.radio_exchange(phone, dst, &cmd)? {
            Some(RadioMessage::Ack) => {
                let p = self.phone_mut(phone)?;
                p.records
                    .get_mut(finder)
                    .expect("record checked above")
                    .opt_out_shadow = opt_out;
                Ok(())
            }
            _ => Err(WorldError::Rejected),
        }
    }

    pub fn export_identity(&mut self, phone: &str, finder: &str) -> Result<String, WorldError> {
        let blob = self.record(phone, finder)?.export_identity();
        self.phone_mut(phone)?
            .exported
            .insert(finder.to_string(), blob.clone());
        Ok(blob)
    }

    pub fn import_identity(
        &mut self,
        phone: &str,
        finder: &str,
        blob: &str,
    ) -> Result<OwnerRecord, WorldError> {
        let record = OwnerRecord::import_identity(blob)?;
        self.bind(phone, finder, record.clone())?;
        Ok(record)
    }

    /// Restarts the server process; its state comes back from the log.
    pub fn restart_server(&mut self) -> Result<(), WorldError> {
        self.actors.server.restart()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ratchet_at;

    const MIN: u64 = 60_000;
    const EPOCH: u64 = DEFAULT_EPOCH_MS;

    fn geo(lat: i32, lon: i32) -> GeoLocation {
        GeoLocation::new(lat, lon).unwrap()
    }

    fn world(cfg: WorldConfig) -> World {
        let mut w = World::new(cfg);
        w.add_finder("f1", FinderKind::Provisioned).unwrap();
        w.add_phone("alice", geo(1, 1)).unwrap();
        w.add_phone("bob", geo(525_200_000, 134_050_000)).unwrap();
        w
    }

    fn bound(cfg: WorldConfig) -> World {
        let mut w = world(cfg);
        w.press_button("f1").unwrap();
        w.set_in_range("alice", "f1", true).unwrap();
        w.setup_local("alice", "f1", false).unwrap();
        w
    }

    #[test]
    fn advance_zero_changes_nothing() {
        let mut w = bound(WorldConfig::default());
        let before = (w.now(), w.transcript().len(), w.epoch_events().len());
        w.advance_time(0);
        assert_eq!(
            before,
            (w.now(), w.transcript().len(), w.epoch_events().len())
        );
    }

    #[test]
    fn epochs_step_once_per_interval() {
        let mut w = bound(WorldConfig::default());
        w.advance_time(EPOCH);
        assert_eq!(w.finder("f1").unwrap().state.epoch_counter(), 1);
        w.advance_time(EPOCH * 5 / 2);
        assert_eq!(w.finder("f1").unwrap().state.epoch_counter(), 3);
        let rec = w.phone("alice").unwrap().records["f1"].clone();
        assert_eq!(rec.epoch_at(w.now()), 3);
        assert_eq!(
            w.finder("f1").unwrap().state.id_rand().unwrap(),
            ratchet_at(&rec.e2e_key, &rec.id_init, 3)
        );
    }

    #[test]
    fn scan_hides_connected_finders() {
        let mut w = bound(WorldConfig::default());
        w.set_in_range("bob", "f1", true).unwrap();
        assert!(w.scan("bob").unwrap().is_empty());
        w.set_in_range("alice", "f1", false).unwrap();
        assert_eq!(w.scan("bob").unwrap().len(), 1);
        w.set_in_range("bob", "f1", false).unwrap();
        assert!(w.scan("bob").unwrap().is_empty());
    }

    #[test]
    fn setup_without_button_times_out() {
        let mut w = world(WorldConfig::default());
        w.set_in_range("alice", "f1", true).unwrap();
        let err = w.setup_local("alice", "f1", false).unwrap_err();
        assert!(matches!(err, WorldError::Owner(OwnerError::Timeout)));
        w.press_button("f1").unwrap();
        w.advance_time(61_000);
        assert!(w.setup_local("alice", "f1", false).is_err());
    }

    #[test]
    fn resetup_invalidates_old_record() {
        let mut w = bound(WorldConfig::default());
        let old = w.phone("alice").unwrap().records["f1"].clone();
        w.press_button("f1").unwrap();
        let new = w.setup_local("alice", "f1", false).unwrap();
        assert_ne!(old.e2e_key, new.e2e_key);
        assert_eq!(old.id_init, new.id_init);
    }

    #[test]
    fn lost_and_found_round_trip() {
        let mut w = bound(WorldConfig::default());
        w.set_in_range("alice", "f1", false).unwrap();
        w.advance_time(10 * MIN);
        w.set_in_range("bob", "f1", true).unwrap();
        let reports = w.patrol("bob").unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(
            Some(reports[0].id_rand),
            w.finder("f1").unwrap().state.id_rand()
        );
        let acks = w.submit("bob").unwrap();
        assert_eq!(acks, vec![NetMessage::GenericAck]);
        w.advance_time(30 * MIN);
        let got = w.fetch("alice", "f1").unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].geo, geo(525_200_000, 134_050_000));
        assert!(w.fetch("alice", "f1").unwrap().is_empty());
    }

    #[test]
    fn submit_of_nothing_sends_nothing() {
        let mut w = bound(WorldConfig::default());
        let n = w.transcript().len();
        assert!(w.submit("bob").unwrap().is_empty());
        assert_eq!(w.transcript().len(), n);
    }

    #[test]
    fn verified_setup_and_counterfeit() {
        let mut w = World::new(WorldConfig::default());
        w.add_finder("real", FinderKind::Provisioned).unwrap();
        w.add_finder("fake", FinderKind::Counterfeit).unwrap();
        w.add_finder("local", FinderKind::Unprovisioned).unwrap();
        w.add_phone("alice", geo(0, 0)).unwrap();
        for f in ["real", "fake", "local"] {
            w.press_button(f).unwrap();
            w.set_in_range("alice", f, true).unwrap();
        }
        let rec = w.setup_verified("alice", "real", true).unwrap();
        assert_eq!(rec.id_init, w.finder("real").unwrap().state.id_init());
        assert!(w.phone("alice").unwrap().token.is_some());
        assert!(matches!(
            w.setup_verified("alice", "fake", false),
            Err(WorldError::Owner(OwnerError::AuthFailure))
        ));
        assert!(matches!(
            w.setup_verified("alice", "local", false),
            Err(WorldError::Owner(OwnerError::ServerUnknownFinder))
        ));
        assert!(w.finder("fake").unwrap().state.e2e_key().is_none());
    }

    #[test]
    fn mac_randomization_follows_epochs() {
        let cfg = WorldConfig {
            mac_randomization: true,
            ..WorldConfig::default()
        };
        let mut w = bound(cfg);
        w.advance_time(3 * EPOCH + 1);
        // setup plus three ticks
        let steps: Vec<u64> = w.epoch_events().iter().map(|e| e.sim_time).collect();
        let moves: Vec<u64> = w.address_changes().iter().map(|e| e.sim_time).collect();
        assert_eq!(steps, vec![0, EPOCH, 2 * EPOCH, 3 * EPOCH]);
        assert_eq!(steps, moves);
        assert!(w.address_changes().iter().all(|c| c.address.randomized));
    }

    #[test]
    fn imported_record_connects_finder() {
        let mut w = bound(WorldConfig::default());
        w.add_phone("carol", geo(5, 5)).unwrap();
        let blob = w.export_identity("alice", "f1").unwrap();
        w.import_identity("carol", "f1", &blob).unwrap();
        w.set_in_range("alice", "f1", false).unwrap();
        w.set_in_range("carol", "f1", true).unwrap();
        w.set_in_range("bob", "f1", true).unwrap();
        assert!(w.finder("f1").unwrap().state.connected());
        assert!(w.scan("bob").unwrap().is_empty());
        w.set_in_range("carol", "f1", false).unwrap();
        assert!(w.patrol("bob").unwrap().is_empty());
        w.advance_time(10 * MIN);
        assert_eq!(w.patrol("bob").unwrap().len(), 1);
    }

    #[test]
    fn opt_out_silences_finder() {
        let mut w = bound(WorldConfig::default());
        w.set_opt_out("alice", "f1", true).unwrap();
        w.set_in_range("alice", "f1", false).unwrap();
        w.advance_time(10 * MIN);
        w.set_in_range("bob", "f1", true).unwrap();
        let before = w.transcript().len();
        assert!(w.patrol("bob").unwrap().is_empty());
        // one AreYouLost, no reply
        assert_eq!(w.transcript().len(), before + 1);
    }

    #[test]
    fn skewed_finder_stays_within_window() {
        let mut w = bound(WorldConfig::default());
        w.skew_finder("f1", -(3 * EPOCH as i64)).unwrap();
        w.set_in_range("alice", "f1", false).unwrap();
        w.advance_time(5 * EPOCH);
        let owner_epoch = w.phone("alice").unwrap().records["f1"].epoch_at(w.now());
        assert_eq!(owner_epoch, 5);
        assert_eq!(w.finder("f1").unwrap().state.epoch_counter(), 2);
        w.set_in_range("bob", "f1", true).unwrap();
        w.patrol("bob").unwrap();
        w.submit("bob").unwrap();
        assert_eq!(w.fetch("alice", "f1").unwrap().len(), 1);
    }
}
