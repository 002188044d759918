//! Privacy audit over a recorded transcript.
//!
//! Only network-channel payloads are inspected: that is what the server
//! operator (or anyone on the path to it) gets to see.

use std::fmt;

use crate::crypto::Identifier;
use crate::geo::GeoLocation;
use crate::reporter::is_anonymous_found_response;
use crate::transport::{Channel, Envelope, Transcript};
use crate::wire::{net_code, NetMessage};

/// What the auditor knows about the run.
#[derive(Debug, Clone, Default)]
pub struct AuditInput {
    /// Positions that must only ever travel encrypted.
    pub locations: Vec<GeoLocation>,
    /// Whether reporters may attach an ingest token.
    pub allow_token: bool,
    /// Long-term keys that must never reach the network, with a label.
    pub secrets: Vec<(String, Vec<u8>)>,
    /// Fixed finder identifiers; these may appear only in verified-setup
    /// and token frames.
    pub identities: Vec<Identifier>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditCheck {
    pub name: &'static str,
    pub violations: Vec<String>,
}

impl AuditCheck {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(AuditCheck::passed)
    }

    pub fn violations(&self) -> impl Iterator<Item = &String> {
        self.checks.iter().flat_map(|c| c.violations.iter())
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            writeln!(f, "audit {} {}", c.name, verdict)?;
            for v in &c.violations {
                writeln!(f, "  {v}")?;
            }
        }
        write!(
            f,
            "audit verdict {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn describe(index: usize, env: &Envelope) -> String {
    format!("#{index} t={} {} -> {}", env.sim_time, env.src, env.dst)
}

/// Frames allowed to name a finder's fixed identifier.
fn may_carry_identity(payload: &[u8]) -> bool {
    match NetMessage::split_frame(payload) {
        Ok((code, _)) => matches!(
            code,
            net_code::REGISTER_INIT | net_code::TOKEN_CHALLENGE | net_code::TOKEN_RESPONSE
        ),
        Err(_) => false,
    }
}

pub fn audit(transcript: &Transcript, input: &AuditInput) -> AuditReport {
    let network: Vec<(usize, &Envelope)> = transcript
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.channel == Channel::Network)
        .collect();

    let mut location = Vec::new();
    for (i, env) in &network {
        for geo in &input.locations {
            if contains(&env.payload, &geo.to_bytes()) {
                location.push(format!(
                    "{} carries plaintext location {geo}",
                    describe(*i, env)
                ));
            }
        }
    }

    let mut anonymity = Vec::new();
    for (i, env) in &network {
        let is_report = matches!(
            NetMessage::split_frame(&env.payload),
            Ok((net_code::FOUND_RESPONSE, _))
        );
        if is_report && !is_anonymous_found_response(&env.payload, input.allow_token) {
            anonymity.push(format!(
                "{} report frame does not match the anonymous schema ({} bytes)",
                describe(*i, env),
                env.payload.len()
            ));
        }
    }

    let mut checks = vec![
        AuditCheck {
            name: "location-ciphertext-only",
            violations: location,
        },
        AuditCheck {
            name: "reporter-anonymity",
            violations: anonymity,
        },
    ];

    if !input.secrets.is_empty() {
        let mut custody = Vec::new();
        for (i, env) in &network {
            for (label, secret) in &input.secrets {
                if contains(&env.payload, secret) {
                    custody.push(format!("{} carries {label}", describe(*i, env)));
                }
            }
        }
        checks.push(AuditCheck {
            name: "secret-custody",
            violations: custody,
        });
    }

    if !input.identities.is_empty() {
        let mut exposure = Vec::new();
        for (i, env) in &network {
            if may_carry_identity(&env.payload) {
                continue;
            }
            for id in &input.identities {
                if contains(&env.payload, id.as_bytes()) {
                    exposure.push(format!(
                        "{} carries id_init {}",
                        describe(*i, env),
                        id.to_hex()
                    ));
                }
            }
        }
        checks.push(AuditCheck {
            name: "identity-exposure",
            violations: exposure,
        });
    }

    AuditReport { checks }
}
