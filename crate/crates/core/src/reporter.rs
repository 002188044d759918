//! Bystander-phone helpers. The reporter only ever relays finder output; it
//! holds no key able to open what it forwards.

use crate::crypto::Identifier;
use crate::wire::{
    net_code, NetMessage, RadioMessage, Token, E2E_MESSAGE_LEN, REPORT_LEN, TOKEN_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationReport {
    pub id_rand: Identifier,
    /// Opaque sealed box, exactly [`E2E_MESSAGE_LEN`] bytes.
    pub e2e_message: Vec<u8>,
}

impl LocationReport {
    /// Extracts a report from a finder's IAmLost reply.
    pub fn from_reply(reply: &RadioMessage) -> Option<Self> {
        match reply {
            RadioMessage::IAmLost {
                id_rand,
                e2e_message,
            } if e2e_message.len() == E2E_MESSAGE_LEN => Some(Self {
                id_rand: *id_rand,
                e2e_message: e2e_message.clone(),
            }),
            _ => None,
        }
    }

    /// The upload frame. Nothing about the reporter goes in it; a token is
    /// attached only when the server's policy demands one.
    pub fn to_found_response(&self, token: Option<Token>) -> NetMessage {
        NetMessage::FoundResponse {
            id_rand: self.id_rand,
            e2e_message: self.e2e_message.clone(),
            token,
        }
    }
}

/// Whether a network frame is a report upload carrying exactly
/// `{id_rand, e2e_message}` (plus a token when `allow_token`).
pub fn is_anonymous_found_response(frame: &[u8], allow_token: bool) -> bool {
    let Ok((code, payload)) = NetMessage::split_frame(frame) else {
        return false;
    };
    code == net_code::FOUND_RESPONSE
        && (payload.len() == REPORT_LEN || (allow_token && payload.len() == REPORT_LEN + TOKEN_LEN))
}
