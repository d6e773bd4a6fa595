//! Session-key derivation for the client authentication handshake.
//!
//! The client proves it runs unmodified code by combining the server's random
//! challenge with the SHA-256 digest of its own source. The derivation is
//! `Base64URL(HMAC-SHA-256(key = source_digest, message = rand_num))`; it is
//! kept behind [`derive_session_key`] so deployments can swap in their own
//! construction.

use alloc::string::String;
use core::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::b64::b64url_encode;

/// Size of the server challenge in bytes.
pub const CHALLENGE_BYTES: usize = 32;

pub type SourceDigest = [u8; 32];

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionKey(String);

impl SessionKey {
    pub fn new(value: impl Into<String>) -> Self {
        SessionKey(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn ct_eq(&self, other: &SessionKey) -> bool {
        self.0.as_bytes().ct_eq(other.0.as_bytes()).into()
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

pub fn source_digest(source: &[u8]) -> SourceDigest {
    Sha256::digest(source).into()
}

pub fn derive_session_key(rand_num: &[u8], source_digest: &SourceDigest) -> SessionKey {
    let mut mac = Hmac::<Sha256>::new_from_slice(source_digest).expect("HMAC accepts any key length");
    mac.update(rand_num);
    SessionKey(b64url_encode(mac.finalize().into_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore};

    // Textbook HMAC (RFC 2104) over SHA-256, independent of the hmac crate.
    fn oracle_hmac(key: &[u8], message: &[u8]) -> [u8; 32] {
        let mut block = [0u8; 64];
        if key.len() > 64 {
            block[..32].copy_from_slice(&Sha256::digest(key));
        } else {
            block[..key.len()].copy_from_slice(key);
        }
        let mut inner = Sha256::new();
        inner.update(block.map(|b| b ^ 0x36));
        inner.update(message);
        let inner = inner.finalize();
        let mut outer = Sha256::new();
        outer.update(block.map(|b| b ^ 0x5c));
        outer.update(inner);
        outer.finalize().into()
    }

    #[test]
    fn reference_vector() {
        let rand: [u8; 32] = core::array::from_fn(|i| i as u8);
        let digest = source_digest(b"uspfo reference client");
        assert_eq!(
            hex_lower(&digest),
            "ec6f15d079d86a5a7a0a7433a7b5f444afb83f759c734aae7738905fc519f115"
        );
        let key = derive_session_key(&rand, &digest);
        assert_eq!(key.as_str(), "kgUPOlYAvy3LipVDOdIlmJI2-VKjcEdreMNzZLCRHhQ");
        assert_eq!(key.as_str(), b64url_encode(oracle_hmac(&digest, &rand)));
    }

    #[test]
    fn deterministic() {
        let mut rng = rand::thread_rng();
        let rand: [u8; 32] = rng.gen();
        let digest: [u8; 32] = rng.gen();
        assert!(derive_session_key(&rand, &digest).ct_eq(&derive_session_key(&rand, &digest)));
    }

    #[test]
    fn avalanche_over_single_bit_flips() {
        let mut rng = rand::thread_rng();
        for _ in 0..100 {
            let mut rand = [0u8; 32];
            let mut digest = [0u8; 32];
            rng.fill_bytes(&mut rand);
            rng.fill_bytes(&mut digest);
            let base = derive_session_key(&rand, &digest);
            assert_eq!(base.as_str(), b64url_encode(oracle_hmac(&digest, &rand)));
            let bit = rng.gen_range(0..256);
            let mut flipped = digest;
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(base, derive_session_key(&rand, &flipped));
            let mut flipped_rand = rand;
            flipped_rand[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(base, derive_session_key(&flipped_rand, &digest));
        }
    }

    fn hex_lower(bytes: &[u8]) -> String {
        use core::fmt::Write;
        let mut out = String::new();
        for b in bytes {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}
