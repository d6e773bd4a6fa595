//! Proof Key for Code Exchange, S256 method only (RFC 7636).

use alloc::string::String;

use rand_core::CryptoRngCore;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::b64::{b64url_encode, is_b64url};

pub const S256: &str = "S256";
pub const MIN_VERIFIER_LEN: usize = 43;
pub const MAX_VERIFIER_LEN: usize = 128;
/// Length of an encoded SHA-256 digest.
pub const CHALLENGE_LEN: usize = 43;

const VERIFIER_ENTROPY_BYTES: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PkceError {
    #[error("code_verifier length {0} outside [43, 128]")]
    VerifierLength(usize),
    #[error("code_verifier contains characters outside [A-Za-z0-9-._~]")]
    VerifierCharset,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkcePair {
    code_verifier: String,
    code_challenge: String,
}

impl PkcePair {
    /// 64 random bytes, Base64URL encoded: an 86-character verifier.
    pub fn generate(rng: &mut impl CryptoRngCore) -> Self {
        let mut entropy = [0u8; VERIFIER_ENTROPY_BYTES];
        rng.fill_bytes(&mut entropy);
        let verifier = b64url_encode(entropy);
        Self::from_verifier(&verifier).expect("encoded entropy is a valid verifier")
    }

    pub fn from_verifier(verifier: &str) -> Result<Self, PkceError> {
        validate_verifier(verifier)?;
        Ok(PkcePair {
            code_verifier: verifier.into(),
            code_challenge: s256_challenge(verifier),
        })
    }

    pub fn code_verifier(&self) -> &str {
        &self.code_verifier
    }

    pub fn code_challenge(&self) -> &str {
        &self.code_challenge
    }
}

pub fn validate_verifier(verifier: &str) -> Result<(), PkceError> {
    if !(MIN_VERIFIER_LEN..=MAX_VERIFIER_LEN).contains(&verifier.len()) {
        return Err(PkceError::VerifierLength(verifier.len()));
    }
    let unreserved = |b: u8| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~');
    if !verifier.bytes().all(unreserved) {
        return Err(PkceError::VerifierCharset);
    }
    Ok(())
}

/// `BASE64URL(SHA256(ASCII(code_verifier)))`
pub fn s256_challenge(verifier: &str) -> String {
    b64url_encode(Sha256::digest(verifier.as_bytes()))
}

pub fn is_valid_challenge(challenge: &str) -> bool {
    challenge.len() == CHALLENGE_LEN && is_b64url(challenge)
}

/// Constant-time comparison of the recomputed challenge against the stored
/// one.
pub fn verify_s256(verifier: &str, stored_challenge: &str) -> bool {
    if validate_verifier(verifier).is_err() {
        return false;
    }
    s256_challenge(verifier)
        .as_bytes()
        .ct_eq(stored_challenge.as_bytes())
        .into()
}
