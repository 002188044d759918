//! In-process message bus standing in for both the short-range radio and
//! the phone/server network.
//!
//! Every send is stamped with the simulation clock and appended to the
//! [`Transcript`] before any delivery decision is made, so dropped frames
//! stay visible to audits.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hmac_sha256, SecretKey};

/// Default ratchet and address rotation interval: 15 minutes.
pub const DEFAULT_EPOCH_MS: u64 = 900_000;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(Address),
    #[error("transcript line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A 6-byte device address as seen on the radio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkAddress {
    pub bytes: [u8; 6],
    pub randomized: bool,
}

impl LinkAddress {
    pub fn fixed(bytes: [u8; 6]) -> Self {
        Self {
            bytes,
            randomized: false,
        }
    }

    /// Address for `epoch`: the first six bytes of `HMAC(key, "mac" || epoch)`
    /// with the locally-administered bit set and the group bit cleared.
    pub fn randomized(key: &SecretKey, epoch: u32) -> Self {
        let digest = hmac_sha256(key.as_bytes(), &[b"mac", &epoch.to_be_bytes()]);
        let mut bytes: [u8; 6] = digest[..6].try_into().expect("6 bytes");
        bytes[0] = (bytes[0] | 0x02) & !0x01;
        Self {
            bytes,
            randomized: true,
        }
    }

    pub fn address(&self) -> Address {
        Address::Radio(self.bytes)
    }
}

impl fmt::Display for LinkAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_mac(&self.bytes, f)
    }
}

fn fmt_mac(bytes: &[u8; 6], f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let parts: Vec<String> = bytes.iter().map(|b| format!("{b:02x}")).collect();
    f.write_str(&parts.join(":"))
}

/// Where an envelope comes from or goes to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Address {
    Radio([u8; 6]),
    Node(String),
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Address::Radio(bytes) => {
                f.write_str("radio:")?;
                fmt_mac(bytes, f)
            }
            Address::Node(name) => write!(f, "node:{name}"),
        }
    }
}

impl FromStr for Address {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(name) = s.strip_prefix("node:") {
            return Ok(Address::Node(name.to_string()));
        }
        let mac = s
            .strip_prefix("radio:")
            .ok_or_else(|| format!("bad address {s:?}"))?;
        let bytes: Vec<u8> = mac
            .split(':')
            .map(|p| u8::from_str_radix(p, 16))
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad address {s:?}: {e}"))?;
        let bytes: [u8; 6] = bytes.try_into().map_err(|_| format!("bad address {s:?}"))?;
        Ok(Address::Radio(bytes))
    }
}

impl TryFrom<String> for Address {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Address> for String {
    fn from(a: Address) -> Self {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Radio,
    Network,
}

impl Channel {
    fn index(self) -> usize {
        match self {
            Channel::Radio => 0,
            Channel::Network => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub sim_time: u64,
    pub channel: Channel,
    pub src: Address,
    pub dst: Address,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(src: Address, dst: Address, channel: Channel, payload: Vec<u8>) -> Self {
        Self {
            sim_time: 0,
            channel,
            src,
            dst,
            payload,
        }
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// Ordered record of every envelope ever sent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<Envelope>,
}

impl Transcript {
    pub fn entries(&self) -> &[Envelope] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, env: Envelope) {
        debug_assert!(self
            .entries
            .last()
            .is_none_or(|last| last.sim_time <= env.sim_time));
        self.entries.push(env);
    }

    pub fn network(&self) -> impl Iterator<Item = &Envelope> {
        self.entries
            .iter()
            .filter(|e| e.channel == Channel::Network)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for env in &self.entries {
            out.push_str(&serde_json::to_string(env).expect("envelope serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TransportError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let env = serde_json::from_str(line).map_err(|source| TransportError::Parse {
                line: i + 1,
                source,
            })?;
            entries.push(env);
        }
        Ok(Self { entries })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), TransportError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, TransportError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// The bus: a clock, a FIFO of pending envelopes and the transcript.
pub struct Transport {
    now_ms: u64,
    queue: VecDeque<Envelope>,
    transcript: Transcript,
    endpoints: BTreeSet<Address>,
    drop_prob: [f64; 2],
    rng: ChaCha20Rng,
}

impl Transport {
    pub fn new(seed: u64) -> Self {
        Self {
            now_ms: 0,
            queue: VecDeque::new(),
            transcript: Transcript::default(),
            endpoints: BTreeSet::new(),
            drop_prob: [0.0; 2],
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    /// Moves the clock forward. Never moves it back.
    pub fn advance_to(&mut self, t: u64) {
        self.now_ms = self.now_ms.max(t);
    }

    pub fn set_drop_probability(&mut self, channel: Channel, p: f64) {
        self.drop_prob[channel.index()] = p.clamp(0.0, 1.0);
    }

    pub fn register(&mut self, addr: Address) {
        self.endpoints.insert(addr);
    }

    pub fn unregister(&mut self, addr: &Address) {
        self.endpoints.remove(addr);
    }

    pub fn is_registered(&self, addr: &Address) -> bool {
        self.endpoints.contains(addr)
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Records `env` in the transcript and queues it for delivery.
    pub fn send(&mut self, mut env: Envelope) -> Result<(), TransportError> {
        for a in [&env.src, &env.dst] {
            if !self.endpoints.contains(a) {
                return Err(TransportError::UnknownEndpoint(a.clone()));
            }
        }
        env.sim_time = self.now_ms;
        self.transcript.push(env.clone());
        self.queue.push_back(env);
        Ok(())
    }

    /// Drains the queue in send order. `handler` sees each surviving
    /// envelope and returns replies, which are sent and delivered in turn.
    pub fn deliver<F>(&mut self, mut handler: F) -> Result<usize, TransportError>
    where
        F: FnMut(&Envelope) -> Vec<Envelope>,
    {
        let mut delivered = 0;
        while let Some(env) = self.queue.pop_front() {
            let p = self.drop_prob[env.channel.index()];
            if p > 0.0 && self.rng.gen_bool(p) {
                continue;
            }
            delivered += 1;
            for reply in handler(&env) {
                self.send(reply)?;
            }
        }
        Ok(delivered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(n: &str) -> Address {
        Address::Node(n.into())
    }

    fn bus() -> Transport {
        let mut t = Transport::new(7);
        t.register(node("a"));
        t.register(node("b"));
        t
    }

    #[test]
    fn lossless_delivery_is_fifo_and_exact() {
        let mut t = bus();
        t.send(Envelope::new(
            node("a"),
            node("b"),
            Channel::Network,
            vec![1],
        ))
        .unwrap();
        t.send(Envelope::new(
            node("a"),
            node("b"),
            Channel::Network,
            vec![2, 3],
        ))
        .unwrap();
        let mut seen = Vec::new();
        let n = t
            .deliver(|e| {
                seen.push(e.payload.clone());
                Vec::new()
            })
            .unwrap();
        assert_eq!(n, 2);
        assert_eq!(seen, vec![vec![1], vec![2, 3]]);
        assert_eq!(t.transcript().len(), 2);
    }

    #[test]
    fn full_drop_still_records_the_send() {
        let mut t = bus();
        t.set_drop_probability(Channel::Radio, 1.0);
        t.send(Envelope::new(node("a"), node("b"), Channel::Radio, vec![9]))
            .unwrap();
        let mut calls = 0;
        t.deliver(|_| {
            calls += 1;
            Vec::new()
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(t.transcript().len(), 1);
    }

    #[test]
    fn unknown_endpoint_is_an_error() {
        let mut t = bus();
        let err = t
            .send(Envelope::new(
                node("a"),
                node("zz"),
                Channel::Network,
                vec![],
            ))
            .unwrap_err();
        assert!(matches!(err, TransportError::UnknownEndpoint(_)));
        assert!(t.transcript().is_empty());
    }

    #[test]
    fn replies_are_stamped_and_recorded() {
        let mut t = bus();
        t.advance_to(1234);
        t.send(Envelope::new(
            node("a"),
            node("b"),
            Channel::Network,
            vec![1],
        ))
        .unwrap();
        t.deliver(|e| {
            if e.dst == node("b") {
                vec![Envelope::new(
                    node("b"),
                    node("a"),
                    Channel::Network,
                    vec![2],
                )]
            } else {
                vec![]
            }
        })
        .unwrap();
        let times: Vec<u64> = t
            .transcript()
            .entries()
            .iter()
            .map(|e| e.sim_time)
            .collect();
        assert_eq!(times, vec![1234, 1234]);
        t.advance_to(5);
        assert_eq!(t.now(), 1234);
    }

    #[test]
    fn transcript_jsonl_round_trips() {
        let mut t = bus();
        t.register(Address::Radio([0xc2, 1, 2, 3, 4, 5]));
        t.send(Envelope::new(
            node("a"),
            Address::Radio([0xc2, 1, 2, 3, 4, 5]),
            Channel::Radio,
            vec![0xde, 0xad],
        ))
        .unwrap();
        let text = t.transcript().to_jsonl();
        assert!(text.contains("\"payload\":\"dead\""));
        assert!(text.contains("radio:c2:01:02:03:04:05"));
        assert_eq!(&Transcript::from_jsonl(&text).unwrap(), t.transcript());
    }

    #[test]
    fn randomized_address_golden() {
        let key = SecretKey::from_bytes([1; 32]);
        assert_eq!(
            LinkAddress::randomized(&key, 0).to_string(),
            "2a:78:3c:76:93:93"
        );
        assert_eq!(
            LinkAddress::randomized(&key, 1).to_string(),
            "c2:b7:71:09:89:6e"
        );
    }
}
