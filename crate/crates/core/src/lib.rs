//! Privacy-preserving crowd-sourced finder protocol.
//!
//! Lost-item location reports are sealed by the finder tag under a key it
//! shares only with its owner's phone. The server stores ciphertext keyed by
//! rotating pseudonyms, and reporters upload without identifying themselves.
//! All four roles run over a deterministic simulated radio and network bus
//! ([`sim::World`]), driven by line-oriented scenario scripts
//! ([`scenario`]).

pub mod audit;
pub mod crypto;
pub mod finder;
pub mod geo;
pub mod manufacture;
pub mod owner;
pub mod reporter;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod transport;
pub mod wire;
