//! Byte-exact encodings of every radio and network message.
//!
//! Radio frames are a one-byte code followed by a fixed-layout payload.
//! Network frames are `code:1 || length:4 (BE) || payload`.

use thiserror::Error;

use crate::crypto::{Identifier, SecretKey, ID_LEN, KEY_LEN, SEAL_OVERHEAD};
use crate::geo::{GeoLocation, GEO_WIRE_LEN};

/// Sealed 12-byte `lat || lon || counter` plaintext.
pub const E2E_MESSAGE_LEN: usize = SEAL_OVERHEAD + 12;
/// A 32-byte key sealed under another key.
pub const WRAPPED_KEY_LEN: usize = SEAL_OVERHEAD + KEY_LEN;
pub const TOKEN_LEN: usize = 32;
pub const REPORT_LEN: usize = ID_LEN + E2E_MESSAGE_LEN;
pub const FOUND_ENTRY_LEN: usize = REPORT_LEN + 8;
pub const NET_HEADER_LEN: usize = 5;

pub mod radio_code {
    pub const SETUP: u8 = 0x01;
    pub const SETUP_OK: u8 = 0x02;
    pub const SETUP_ENC_BEGIN: u8 = 0x03;
    pub const ARE_YOU_LOST: u8 = 0x04;
    pub const I_AM_LOST: u8 = 0x05;
    pub const SET_OPT_OUT: u8 = 0x06;
    pub const ACK: u8 = 0x07;
    pub const IDENTITY_READ: u8 = 0x08;
    pub const IDENTITY: u8 = 0x09;
    pub const TOKEN_CHALLENGE: u8 = 0x0A;
    pub const TOKEN_ANSWER: u8 = 0x0B;
    pub const SEALED: u8 = 0x0C;
}

pub mod net_code {
    pub const REGISTER_INIT: u8 = 0x10;
    pub const START_ENCRYPTED_SETUP: u8 = 0x11;
    pub const FOUND_RESPONSE: u8 = 0x12;
    pub const GENERIC_ACK: u8 = 0x13;
    pub const SEARCH: u8 = 0x14;
    pub const FOUND: u8 = 0x15;
    pub const MARK_LOST: u8 = 0x16;
    pub const CLEAR_LOST: u8 = 0x17;
    pub const GET_LOST_IDS: u8 = 0x18;
    pub const LOST_IDS: u8 = 0x19;
    pub const TOKEN_CHALLENGE: u8 = 0x1A;
    pub const TOKEN_RESPONSE: u8 = 0x1B;
    pub const TOKEN: u8 = 0x1C;
    pub const ERROR: u8 = 0x1D;
}

/// Setup flag bit asking a local-setup finder to draw a new `id_init`.
pub const SETUP_FLAG_RESET_ID: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("empty frame")]
    Empty,
    #[error("unknown message code {0:#04x}")]
    UnknownCode(u8),
    #[error("message {code:#04x} has invalid payload length {len}")]
    BadLength { code: u8, len: usize },
    #[error("frame header declares {declared} payload bytes, found {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
}

/// Account-less access token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub [u8; TOKEN_LEN]);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RadioMessage {
    Setup {
        flags: u8,
        e2e_key: SecretKey,
    },
    SetupOk {
        id_init: Identifier,
    },
    SetupEncBegin {
        wrapped_setup_key: Vec<u8>,
    },
    AreYouLost {
        geo: GeoLocation,
    },
    IAmLost {
        id_rand: Identifier,
        e2e_message: Vec<u8>,
    },
    SetOptOut {
        opt_out: bool,
        epoch: u32,
        tag: [u8; 32],
    },
    Ack,
    IdentityRead,
    Identity {
        id_init: Identifier,
    },
    TokenChallenge {
        sealed_nonce: Vec<u8>,
    },
    TokenAnswer {
        nonce: [u8; 32],
    },
    /// An inner radio frame sealed under the session setup key.
    Sealed {
        sealed_frame: Vec<u8>,
    },
}

fn fixed<const N: usize>(b: &[u8]) -> [u8; N] {
    b.try_into().expect("length checked by caller")
}

fn expect_len(code: u8, payload: &[u8], len: usize) -> Result<(), WireError> {
    if payload.len() == len {
        Ok(())
    } else {
        Err(WireError::BadLength {
            code,
            len: payload.len(),
        })
    }
}

impl RadioMessage {
    pub fn code(&self) -> u8 {
        use radio_code::*;
        match self {
            Self::Setup { .. } => SETUP,
            Self::SetupOk { .. } => SETUP_OK,
            Self::SetupEncBegin { .. } => SETUP_ENC_BEGIN,
            Self::AreYouLost { .. } => ARE_YOU_LOST,
            Self::IAmLost { .. } => I_AM_LOST,
            Self::SetOptOut { .. } => SET_OPT_OUT,
            Self::Ack => ACK,
            Self::IdentityRead => IDENTITY_READ,
            Self::Identity { .. } => IDENTITY,
            Self::TokenChallenge { .. } => TOKEN_CHALLENGE,
            Self::TokenAnswer { .. } => TOKEN_ANSWER,
            Self::Sealed { .. } => SEALED,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.code()];
        match self {
            Self::Setup { flags, e2e_key } => {
                out.push(*flags);
                out.extend_from_slice(e2e_key.as_bytes());
            }
            Self::SetupOk { id_init } | Self::Identity { id_init } => {
                out.extend_from_slice(id_init.as_bytes())
            }
            Self::SetupEncBegin { wrapped_setup_key } => out.extend_from_slice(wrapped_setup_key),
            Self::AreYouLost { geo } => out.extend_from_slice(&geo.to_bytes()),
            Self::IAmLost {
                id_rand,
                e2e_message,
            } => {
                out.extend_from_slice(id_rand.as_bytes());
                out.extend_from_slice(e2e_message);
            }
            Self::SetOptOut {
                opt_out,
                epoch,
                tag,
            } => {
                out.push(u8::from(*opt_out));
                out.extend_from_slice(&epoch.to_be_bytes());
                out.extend_from_slice(tag);
            }
            Self::Ack | Self::IdentityRead => {}
            Self::TokenChallenge { sealed_nonce } => out.extend_from_slice(sealed_nonce),
            Self::TokenAnswer { nonce } => out.extend_from_slice(nonce),
            Self::Sealed { sealed_frame } => out.extend_from_slice(sealed_frame),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        use radio_code::*;
        let (&code, p) = bytes.split_first().ok_or(WireError::Empty)?;
        let msg = match code {
            SETUP => {
                expect_len(code, p, 1 + KEY_LEN)?;
                Self::Setup {
                    flags: p[0],
                    e2e_key: SecretKey::from_bytes(fixed(&p[1..])),
                }
            }
            SETUP_OK | IDENTITY => {
                expect_len(code, p, ID_LEN)?;
                let id_init = Identifier::from_bytes(fixed(p));
                if code == SETUP_OK {
                    Self::SetupOk { id_init }
                } else {
                    Self::Identity { id_init }
                }
            }
            SETUP_ENC_BEGIN => {
                expect_len(code, p, WRAPPED_KEY_LEN)?;
                Self::SetupEncBegin {
                    wrapped_setup_key: p.to_vec(),
                }
            }
            ARE_YOU_LOST => {
                expect_len(code, p, GEO_WIRE_LEN)?;
                Self::AreYouLost {
                    geo: GeoLocation::from_bytes(&fixed(p))
                        .map_err(|_| WireError::InvalidField("geo-location"))?,
                }
            }
            I_AM_LOST => {
                expect_len(code, p, REPORT_LEN)?;
                Self::IAmLost {
                    id_rand: Identifier::from_bytes(fixed(&p[..ID_LEN])),
                    e2e_message: p[ID_LEN..].to_vec(),
                }
            }
            SET_OPT_OUT => {
                expect_len(code, p, 1 + 4 + 32)?;
                let opt_out = match p[0] {
                    0 => false,
                    1 => true,
                    _ => return Err(WireError::InvalidField("opt-out flag")),
                };
                Self::SetOptOut {
                    opt_out,
                    epoch: u32::from_be_bytes(fixed(&p[1..5])),
                    tag: fixed(&p[5..]),
                }
            }
            ACK => {
                expect_len(code, p, 0)?;
                Self::Ack
            }
            IDENTITY_READ => {
                expect_len(code, p, 0)?;
                Self::IdentityRead
            }
            TOKEN_CHALLENGE => {
                expect_len(code, p, WRAPPED_KEY_LEN)?;
                Self::TokenChallenge {
                    sealed_nonce: p.to_vec(),
                }
            }
            TOKEN_ANSWER => {
                expect_len(code, p, 32)?;
                Self::TokenAnswer { nonce: fixed(p) }
            }
            SEALED => {
                if p.len() <= SEAL_OVERHEAD {
                    return Err(WireError::BadLength { code, len: p.len() });
                }
                Self::Sealed {
                    sealed_frame: p.to_vec(),
                }
            }
            other => return Err(WireError::UnknownCode(other)),
        };
        Ok(msg)
    }
}

/// One stored report as returned by a search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoundEntry {
    pub id_rand: Identifier,
    pub e2e_message: Vec<u8>,
    pub received_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    MalformedReport = 1,
    TokenRequired = 2,
    TooManyIds = 3,
    UnknownFinder = 4,
    AuthFailure = 5,
    BadRequest = 6,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => Self::MalformedReport,
            2 => Self::TokenRequired,
            3 => Self::TooManyIds,
            4 => Self::UnknownFinder,
            5 => Self::AuthFailure,
            6 => Self::BadRequest,
            _ => return Err(WireError::InvalidField("error code")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetMessage {
    RegisterInit {
        id_init: Identifier,
    },
    StartEncryptedSetup {
        setup_key: SecretKey,
        wrapped_setup_key: Vec<u8>,
    },
    /// An anonymous report upload. The e2e message length is not validated
    /// here so the server can answer with a dedicated error.
    FoundResponse {
        id_rand: Identifier,
        e2e_message: Vec<u8>,
        token: Option<Token>,
    },
    GenericAck,
    Search {
        token: Option<Token>,
        ids: Vec<Identifier>,
    },
    Found {
        entries: Vec<FoundEntry>,
    },
    MarkLost {
        ids: Vec<Identifier>,
    },
    ClearLost {
        ids: Vec<Identifier>,
    },
    GetLostIds,
    LostIds {
        ids: Vec<Identifier>,
    },
    /// Phone to server: request a challenge for a registered finder.
    TokenChallengeRequest {
        id_init: Identifier,
    },
    /// Server to phone: a nonce sealed under the finder's manufacturing key.
    TokenChallenge {
        sealed_nonce: Vec<u8>,
    },
    TokenResponse {
        id_init: Identifier,
        nonce: [u8; 32],
    },
    Token {
        token: Token,
    },
    Error {
        code: ErrorCode,
    },
}

fn put_ids(out: &mut Vec<u8>, ids: &[Identifier]) {
    for id in ids {
        out.extend_from_slice(id.as_bytes());
    }
}

fn take_ids(code: u8, p: &[u8]) -> Result<Vec<Identifier>, WireError> {
    if !p.len().is_multiple_of(ID_LEN) {
        return Err(WireError::BadLength { code, len: p.len() });
    }
    Ok(p.chunks_exact(ID_LEN)
        .map(|c| Identifier::from_bytes(fixed(c)))
        .collect())
}

impl NetMessage {
    pub fn code(&self) -> u8 {
        use net_code::*;
        match self {
            Self::RegisterInit { .. } => REGISTER_INIT,
            Self::StartEncryptedSetup { .. } => START_ENCRYPTED_SETUP,
            Self::FoundResponse { .. } => FOUND_RESPONSE,
            Self::GenericAck => GENERIC_ACK,
            Self::Search { .. } => SEARCH,
            Self::Found { .. } => FOUND,
            Self::MarkLost { .. } => MARK_LOST,
            Self::ClearLost { .. } => CLEAR_LOST,
            Self::GetLostIds => GET_LOST_IDS,
            Self::LostIds { .. } => LOST_IDS,
            Self::TokenChallengeRequest { .. } | Self::TokenChallenge { .. } => TOKEN_CHALLENGE,
            Self::TokenResponse { .. } => TOKEN_RESPONSE,
            Self::Token { .. } => TOKEN,
            Self::Error { .. } => ERROR,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Self::RegisterInit { id_init } | Self::TokenChallengeRequest { id_init } => {
                out.extend_from_slice(id_init.as_bytes())
            }
            Self::StartEncryptedSetup {
                setup_key,
                wrapped_setup_key,
            } => {
                out.extend_from_slice(setup_key.as_bytes());
                out.extend_from_slice(wrapped_setup_key);
            }
            Self::FoundResponse {
                id_rand,
                e2e_message,
                token,
            } => {
                out.extend_from_slice(id_rand.as_bytes());
                out.extend_from_slice(e2e_message);
                if let Some(token) = token {
                    out.extend_from_slice(&token.0);
                }
            }
            Self::GenericAck | Self::GetLostIds => {}
            Self::Search { token, ids } => {
                match token {
                    Some(t) => {
                        out.push(1);
                        out.extend_from_slice(&t.0);
                    }
                    None => out.push(0),
                }
                put_ids(&mut out, ids);
            }
            Self::Found { entries } => {
                for e in entries {
                    out.extend_from_slice(e.id_rand.as_bytes());
                    out.extend_from_slice(&e.e2e_message);
                    out.extend_from_slice(&e.received_at.to_be_bytes());
                }
            }
            Self::MarkLost { ids } | Self::ClearLost { ids } | Self::LostIds { ids } => {
                put_ids(&mut out, ids)
            }
            Self::TokenChallenge { sealed_nonce } => out.extend_from_slice(sealed_nonce),
            Self::TokenResponse { id_init, nonce } => {
                out.extend_from_slice(id_init.as_bytes());
                out.extend_from_slice(nonce);
            }
            Self::Token { token } => out.extend_from_slice(&token.0),
            Self::Error { code } => out.push(*code as u8),
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(NET_HEADER_LEN + payload.len());
        out.push(self.code());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Splits a network frame into its code and payload.
    pub fn split_frame(bytes: &[u8]) -> Result<(u8, &[u8]), WireError> {
        if bytes.is_empty() {
            return Err(WireError::Empty);
        }
        if bytes.len() < NET_HEADER_LEN {
            return Err(WireError::BadLength {
                code: bytes[0],
                len: bytes.len(),
            });
        }
        let declared = u32::from_be_bytes(fixed(&bytes[1..5])) as usize;
        let payload = &bytes[NET_HEADER_LEN..];
        if declared != payload.len() {
            return Err(WireError::LengthMismatch {
                declared,
                actual: payload.len(),
            });
        }
        Ok((bytes[0], payload))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        use net_code::*;
        let (code, p) = Self::split_frame(bytes)?;
        let msg = match code {
            REGISTER_INIT => {
                expect_len(code, p, ID_LEN)?;
                Self::RegisterInit {
                    id_init: Identifier::from_bytes(fixed(p)),
                }
            }
            START_ENCRYPTED_SETUP => {
                expect_len(code, p, KEY_LEN + WRAPPED_KEY_LEN)?;
                Self::StartEncryptedSetup {
                    setup_key: SecretKey::from_bytes(fixed(&p[..KEY_LEN])),
                    wrapped_setup_key: p[KEY_LEN..].to_vec(),
                }
            }
            FOUND_RESPONSE => {
                if p.len() < ID_LEN {
                    return Err(WireError::BadLength { code, len: p.len() });
                }
                let id_rand = Identifier::from_bytes(fixed(&p[..ID_LEN]));
                let (body, token) = if p.len() == REPORT_LEN + TOKEN_LEN {
                    (&p[ID_LEN..REPORT_LEN], Some(Token(fixed(&p[REPORT_LEN..]))))
                } else {
                    (&p[ID_LEN..], None)
                };
                Self::FoundResponse {
                    id_rand,
                    e2e_message: body.to_vec(),
                    token,
                }
            }
            GENERIC_ACK => {
                expect_len(code, p, 0)?;
                Self::GenericAck
            }
            SEARCH => {
                let (&flag, rest) = p
                    .split_first()
                    .ok_or(WireError::BadLength { code, len: 0 })?;
                let (token, ids) = match flag {
                    0 => (None, rest),
                    1 if rest.len() >= TOKEN_LEN => {
                        (Some(Token(fixed(&rest[..TOKEN_LEN]))), &rest[TOKEN_LEN..])
                    }
                    _ => return Err(WireError::InvalidField("search token flag")),
                };
                Self::Search {
                    token,
                    ids: take_ids(code, ids)?,
                }
            }
            FOUND => {
                if p.len() % FOUND_ENTRY_LEN != 0 {
                    return Err(WireError::BadLength { code, len: p.len() });
                }
                let entries = p
                    .chunks_exact(FOUND_ENTRY_LEN)
                    .map(|c| FoundEntry {
                        id_rand: Identifier::from_bytes(fixed(&c[..ID_LEN])),
                        e2e_message: c[ID_LEN..REPORT_LEN].to_vec(),
                        received_at: u64::from_be_bytes(fixed(&c[REPORT_LEN..])),
                    })
                    .collect();
                Self::Found { entries }
            }
            MARK_LOST => Self::MarkLost {
                ids: take_ids(code, p)?,
            },
            CLEAR_LOST => Self::ClearLost {
                ids: take_ids(code, p)?,
            },
            GET_LOST_IDS => {
                expect_len(code, p, 0)?;
                Self::GetLostIds
            }
            LOST_IDS => Self::LostIds {
                ids: take_ids(code, p)?,
            },
            TOKEN_CHALLENGE => match p.len() {
                ID_LEN => Self::TokenChallengeRequest {
                    id_init: Identifier::from_bytes(fixed(p)),
                },
                WRAPPED_KEY_LEN => Self::TokenChallenge {
                    sealed_nonce: p.to_vec(),
                },
                len => return Err(WireError::BadLength { code, len }),
            },
            TOKEN_RESPONSE => {
                expect_len(code, p, ID_LEN + 32)?;
                Self::TokenResponse {
                    id_init: Identifier::from_bytes(fixed(&p[..ID_LEN])),
                    nonce: fixed(&p[ID_LEN..]),
                }
            }
            TOKEN => {
                expect_len(code, p, TOKEN_LEN)?;
                Self::Token {
                    token: Token(fixed(p)),
                }
            }
            ERROR => {
                expect_len(code, p, 1)?;
                Self::Error {
                    code: ErrorCode::from_u8(p[0])?,
                }
            }
            other => return Err(WireError::UnknownCode(other)),
        };
        Ok(msg)
    }
}
