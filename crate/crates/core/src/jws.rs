//! Compact JWS serialization (RFC 7515) for RS256 and ES256.
//!
//! The payload is serialized exactly once, at signing time, and the encoded
//! bytes are what gets signed. Verification works on the received segments
//! and never re-serializes claims.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::b64::{b64url_decode, b64url_encode, is_b64url};
use crate::jwk::{Algorithm, Jwk, PublicKey, SigningKeyPair};
use crate::JsonObject;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum JoseError {
    #[error("unsupported algorithm `{0}`")]
    AlgorithmUnsupported(String),
    #[error("header alg `{header}` does not match {key} key")]
    AlgorithmMismatch { header: String, key: Algorithm },
    #[error("signature verification failed")]
    BadSignature,
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(&'static str),
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
}

impl JoseError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            JoseError::AlgorithmUnsupported(_) => "AlgorithmUnsupported",
            JoseError::AlgorithmMismatch { .. } => "AlgorithmMismatch",
            JoseError::BadSignature => "BadSignature",
            JoseError::MalformedEnvelope(_) => "MalformedEnvelope",
            JoseError::InvalidKey(_) => "InvalidKey",
        }
    }
}

/// Protected header. Members serialize in declaration order, so
/// `{"alg":"RS256","typ":"JWT"}` comes out byte-for-byte.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoseHeader {
    pub alg: String,
    pub typ: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jwk: Option<Jwk>,
}

impl JoseHeader {
    pub fn new(alg: Algorithm, typ: impl Into<String>) -> Self {
        JoseHeader {
            alg: alg.as_str().to_string(),
            typ: typ.into(),
            kid: None,
            jwk: None,
        }
    }

    pub fn with_kid(mut self, kid: impl Into<String>) -> Self {
        self.kid = Some(kid.into());
        self
    }

    pub fn with_jwk(mut self, jwk: Jwk) -> Self {
        self.jwk = Some(jwk);
        self
    }
}

/// A syntactically valid compact JWS: `header.payload.signature`.
#[derive(Clone, PartialEq, Eq)]
pub struct SignedEnvelope {
    header_segment: String,
    payload_segment: String,
    signature_segment: String,
    header: JoseHeader,
}

impl SignedEnvelope {
    pub fn parse(compact: &str) -> Result<Self, JoseError> {
        let mut parts = compact.split('.');
        let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(JoseError::MalformedEnvelope("expected exactly three segments"));
        };
        if h.is_empty() || s.is_empty() {
            return Err(JoseError::MalformedEnvelope("empty segment"));
        }
        if !(is_b64url(h) && is_b64url(p) && is_b64url(s)) {
            return Err(JoseError::MalformedEnvelope("segment is not unpadded base64url"));
        }
        let header_bytes =
            b64url_decode(h).map_err(|_| JoseError::MalformedEnvelope("header is not base64url"))?;
        let header: JoseHeader = serde_json::from_slice(&header_bytes)
            .map_err(|_| JoseError::MalformedEnvelope("header is not a JSON object with alg and typ"))?;
        Ok(SignedEnvelope {
            header_segment: h.to_string(),
            payload_segment: p.to_string(),
            signature_segment: s.to_string(),
            header,
        })
    }

    pub fn header(&self) -> &JoseHeader {
        &self.header
    }

    pub fn header_segment(&self) -> &str {
        &self.header_segment
    }

    pub fn payload_segment(&self) -> &str {
        &self.payload_segment
    }

    pub fn signature_segment(&self) -> &str {
        &self.signature_segment
    }

    pub fn to_compact(&self) -> String {
        let mut out = String::with_capacity(
            self.header_segment.len() + self.payload_segment.len() + self.signature_segment.len() + 2,
        );
        out.push_str(&self.header_segment);
        out.push('.');
        out.push_str(&self.payload_segment);
        out.push('.');
        out.push_str(&self.signature_segment);
        out
    }

    fn signing_input(&self) -> String {
        let mut out = String::with_capacity(self.header_segment.len() + self.payload_segment.len() + 1);
        out.push_str(&self.header_segment);
        out.push('.');
        out.push_str(&self.payload_segment);
        out
    }

    /// Decodes the payload without checking the signature. Only for
    /// inspection and for picking a verification key.
    pub fn unverified_claims(&self) -> Result<JsonObject, JoseError> {
        decode_claims(&self.payload_segment)
    }
}

impl fmt::Debug for SignedEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SignedEnvelope").field(&self.to_compact()).finish()
    }
}

impl fmt::Display for SignedEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.header_segment)?;
        f.write_str(".")?;
        f.write_str(&self.payload_segment)?;
        f.write_str(".")?;
        f.write_str(&self.signature_segment)
    }
}

impl FromStr for SignedEnvelope {
    type Err = JoseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SignedEnvelope::parse(s)
    }
}

impl Serialize for SignedEnvelope {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_compact())
    }
}

impl<'de> Deserialize<'de> for SignedEnvelope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        SignedEnvelope::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Signs `claims` with header `{"alg": <key alg>, "typ": header_typ}`.
pub fn jws_sign(claims: &JsonObject, key: &SigningKeyPair, header_typ: &str) -> Result<SignedEnvelope, JoseError> {
    jws_sign_with_header(claims, key, JoseHeader::new(key.algorithm(), header_typ))
}

pub fn jws_sign_with_header(
    claims: &JsonObject,
    key: &SigningKeyPair,
    header: JoseHeader,
) -> Result<SignedEnvelope, JoseError> {
    let alg = Algorithm::from_name(&header.alg)?;
    if alg != key.algorithm() {
        return Err(JoseError::AlgorithmMismatch {
            header: header.alg,
            key: key.algorithm(),
        });
    }
    let header_json =
        serde_json::to_vec(&header).map_err(|_| JoseError::MalformedEnvelope("header does not serialize"))?;
    let payload_json =
        serde_json::to_vec(claims).map_err(|_| JoseError::MalformedEnvelope("claims do not serialize"))?;
    let header_segment = b64url_encode(header_json);
    let payload_segment = b64url_encode(payload_json);
    let mut signing_input = String::with_capacity(header_segment.len() + payload_segment.len() + 1);
    signing_input.push_str(&header_segment);
    signing_input.push('.');
    signing_input.push_str(&payload_segment);
    let signature = key.sign(signing_input.as_bytes());
    Ok(SignedEnvelope {
        header_segment,
        payload_segment,
        signature_segment: b64url_encode(signature),
        header,
    })
}

/// Checks the signature under `public_key` and returns the decoded claims.
pub fn jws_verify(envelope: &SignedEnvelope, public_key: &PublicKey) -> Result<JsonObject, JoseError> {
    let alg = Algorithm::from_name(&envelope.header.alg)?;
    if alg != public_key.algorithm() {
        return Err(JoseError::AlgorithmMismatch {
            header: envelope.header.alg.clone(),
            key: public_key.algorithm(),
        });
    }
    let signature: Vec<u8> = b64url_decode(&envelope.signature_segment)
        .map_err(|_| JoseError::MalformedEnvelope("signature is not base64url"))?;
    public_key.verify(alg, envelope.signing_input().as_bytes(), &signature)?;
    decode_claims(&envelope.payload_segment)
}

fn decode_claims(segment: &str) -> Result<JsonObject, JoseError> {
    let bytes = b64url_decode(segment).map_err(|_| JoseError::MalformedEnvelope("payload is not base64url"))?;
    serde_json::from_slice(&bytes).map_err(|_| JoseError::MalformedEnvelope("payload is not a JSON object"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::OsRng;
    use serde_json::{json, Value};
    use std::sync::OnceLock;

    fn rsa_key() -> &'static SigningKeyPair {
        static KEY: OnceLock<SigningKeyPair> = OnceLock::new();
        KEY.get_or_init(|| SigningKeyPair::generate(Algorithm::RS256, "rsa", &mut OsRng).unwrap())
    }

    fn ec_key() -> &'static SigningKeyPair {
        static KEY: OnceLock<SigningKeyPair> = OnceLock::new();
        KEY.get_or_init(|| SigningKeyPair::generate(Algorithm::ES256, "ec", &mut OsRng).unwrap())
    }

    fn obj(v: Value) -> JsonObject {
        match v {
            Value::Object(m) => m,
            _ => panic!("not an object"),
        }
    }

    fn sample_claims() -> JsonObject {
        obj(json!({
            "alg": "RS256",
            "typ": "JWT",
            "aud": "https://server.example.org/token",
            "client_id": "UFO_s6Bk8dRkqt3",
            "jti": "5e5ede50-dc60-40b0-bc94-cb2115ad6820"
        }))
    }

    #[test]
    fn header_matches_sample_prefix() {
        let env = jws_sign(&sample_claims(), rsa_key(), "JWT").unwrap();
        assert_eq!(env.header_segment(), "eyJhbGciOiJSUzI1NiIsInR5cCI6IkpXVCJ9");
        assert!(env.to_compact().starts_with("eyJhbGciOiJSUzI1NiIsInR5cCI6IkpXVCJ9."));
    }

    #[test]
    fn empty_claims() {
        let env = jws_sign(&JsonObject::new(), ec_key(), "JWT").unwrap();
        assert_eq!(env.payload_segment(), "e30");
        assert_eq!(jws_verify(&env, ec_key().public_key()).unwrap(), JsonObject::new());
    }

    #[test]
    fn round_trip_both_algorithms() {
        for key in [rsa_key(), ec_key()] {
            let env = jws_sign(&sample_claims(), key, "JWT").unwrap();
            let parsed = SignedEnvelope::parse(&env.to_compact()).unwrap();
            assert_eq!(parsed, env);
            assert_eq!(jws_verify(&parsed, key.public_key()).unwrap(), sample_claims());
        }
    }

    #[test]
    fn one_dot_is_malformed() {
        assert!(matches!(
            SignedEnvelope::parse("eyJhbGciOiJSUzI1NiIsInR5cCI6IkpXVCJ9.e30"),
            Err(JoseError::MalformedEnvelope(_))
        ));
        assert!(SignedEnvelope::parse("a.b.c.d").is_err());
        assert!(SignedEnvelope::parse("").is_err());
    }

    #[test]
    fn padding_is_malformed() {
        let env = jws_sign(&sample_claims(), ec_key(), "JWT").unwrap();
        let padded = alloc::format!("{}=", env.to_compact());
        assert!(matches!(
            SignedEnvelope::parse(&padded),
            Err(JoseError::MalformedEnvelope(_))
        ));
    }

    #[test]
    fn header_without_typ_is_malformed() {
        let header = b64url_encode(br#"{"alg":"RS256"}"#);
        let text = alloc::format!("{header}.e30.AAAA");
        assert!(matches!(
            SignedEnvelope::parse(&text),
            Err(JoseError::MalformedEnvelope(_))
        ));
    }

    #[test]
    fn none_algorithm_rejected() {
        let header = b64url_encode(br#"{"alg":"none","typ":"JWT"}"#);
        let env = SignedEnvelope::parse(&alloc::format!("{header}.e30.AAAA")).unwrap();
        assert_eq!(
            jws_verify(&env, ec_key().public_key()),
            Err(JoseError::AlgorithmUnsupported("none".into()))
        );
    }

    #[test]
    fn algorithm_mismatch() {
        let env = jws_sign(&sample_claims(), ec_key(), "JWT").unwrap();
        assert!(matches!(
            jws_verify(&env, rsa_key().public_key()),
            Err(JoseError::AlgorithmMismatch { .. })
        ));
        assert!(matches!(
            jws_sign_with_header(&sample_claims(), ec_key(), JoseHeader::new(Algorithm::RS256, "JWT")),
            Err(JoseError::AlgorithmMismatch { .. })
        ));
    }

    #[test]
    fn wrong_key_is_bad_signature() {
        let other = SigningKeyPair::generate(Algorithm::ES256, "x", &mut OsRng).unwrap();
        let env = jws_sign(&sample_claims(), ec_key(), "JWT").unwrap();
        assert_eq!(jws_verify(&env, other.public_key()), Err(JoseError::BadSignature));
    }

    #[test]
    fn payload_alphabet_swaps_are_bad_signature() {
        // Exhaustive over positions; every alternative alphabet character.
        let env = jws_sign(&sample_claims(), ec_key(), "JWT").unwrap();
        let compact = env.to_compact();
        let start = env.header_segment().len() + 1;
        let end = start + env.payload_segment().len();
        let alphabet = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";
        for pos in start..end {
            for &c in alphabet {
                if compact.as_bytes()[pos] == c {
                    continue;
                }
                let mut bytes = compact.clone().into_bytes();
                bytes[pos] = c;
                let text = String::from_utf8(bytes).unwrap();
                let parsed = SignedEnvelope::parse(&text).unwrap();
                assert_eq!(
                    jws_verify(&parsed, ec_key().public_key()),
                    Err(JoseError::BadSignature),
                    "position {pos} char {}",
                    c as char
                );
            }
        }
    }

    #[test]
    fn embedded_header_members() {
        let header = JoseHeader::new(Algorithm::ES256, "dpop+jwt").with_jwk(ec_key().public_jwk());
        let env = jws_sign_with_header(&sample_claims(), ec_key(), header).unwrap();
        let decoded: Value = serde_json::from_slice(&b64url_decode(env.header_segment()).unwrap()).unwrap();
        assert_eq!(decoded["typ"], "dpop+jwt");
        assert_eq!(decoded["alg"], "ES256");
        assert_eq!(decoded["jwk"]["kty"], "EC");
        assert!(decoded["jwk"].get("d").is_none());
    }

    fn claim_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<i64>().prop_map(Value::from),
            any::<bool>().prop_map(Value::from),
            "[ -~]{0,24}".prop_map(Value::from),
            Just(Value::Null),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn sign_verify_soundness(
            claims in proptest::collection::btree_map("[a-z_]{1,12}", claim_value(), 0..8),
            use_rsa in any::<bool>(),
        ) {
            let claims: JsonObject = claims.into_iter().collect();
            let key = if use_rsa { rsa_key() } else { ec_key() };
            let env = jws_sign(&claims, key, "JWT").unwrap();
            let reparsed = SignedEnvelope::parse(&env.to_compact()).unwrap();
            prop_assert_eq!(jws_verify(&reparsed, key.public_key()).unwrap(), claims);
        }
    }
}
