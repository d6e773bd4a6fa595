//! Protocol building blocks for the Unified Singular Protocol Flow for OAuth.
//!
//! Everything here is pure computation over caller-supplied inputs: the
//! current time and randomness are always passed in, never read from the
//! environment. That keeps the crate `no_std` (it only needs `alloc`) and lets
//! the stateful services in the companion `uspfo` crate decide how clocks,
//! entropy, and storage work.
//!
//! * [`b64`]: unpadded Base64URL.
//! * [`jwk`] and [`jws`]: keys, thumbprints, and compact JWS for RS256/ES256.
//! * [`pkce`]: S256 code challenges.
//! * [`session_key`]: the session-key derivation used by the assertion
//!   server handshake.
//! * [`claims`]: wire claim sets shared by all parties.
//! * [`dpop`]: stateless DPoP proof validation.
//! * [`metrics`]: the protocol overhead score.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod b64;
pub mod claims;
pub mod dpop;
pub mod jwk;
pub mod jws;
pub mod metrics;
pub mod pkce;
pub mod session_key;

pub use crate::jwk::{Algorithm, Jwk, JwkSet, PublicKey, PublicKeyThumbprint, SigningKeyPair};
pub use crate::jws::{JoseError, JoseHeader, SignedEnvelope};
pub use crate::metrics::{compute_po, FlowMetrics};
pub use crate::pkce::PkcePair;
pub use crate::session_key::SessionKey;

/// JSON object type used for claim sets.
pub type JsonObject = serde_json::Map<alloc::string::String, serde_json::Value>;
