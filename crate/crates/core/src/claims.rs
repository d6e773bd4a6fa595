//! Claim sets exchanged between the client, the assertion server, the
//! authorization server and the resource server.

use alloc::string::{String, ToString};

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use crate::jwk::{Algorithm, PublicKeyThumbprint};
use crate::JsonObject;

/// `client_assertion_type` for JWT client assertions (RFC 7523).
pub const JWT_BEARER_ASSERTION_TYPE: &str = "urn:ietf:params:oauth:client-assertion-type:jwt-bearer";
pub const JWT_TYPE: &str = "JWT";
pub const DPOP_JWT_TYPE: &str = "dpop+jwt";
pub const ACCESS_TOKEN_TYPE: &str = "at+jwt";
/// `client_id` prefix reserved for unified clients.
pub const UNIFIED_CLIENT_PREFIX: &str = "UFO_";

/// Fresh random (version 4) UUID in hyphenated lowercase form.
pub fn random_jti(rng: &mut impl CryptoRngCore) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes)
        .into_uuid()
        .hyphenated()
        .to_string()
}

/// True for a hyphenated RFC 4122 UUID whose version nibble is 4.
pub fn is_uuid_v4(value: &str) -> bool {
    value.len() == 36
        && uuid::Uuid::try_parse(value)
            .map(|u| u.get_version_num() == 4 && u.get_variant() == uuid::Variant::RFC4122)
            .unwrap_or(false)
}

/// Body of a client assertion request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientAssertionClaims {
    pub alg: String,
    pub typ: String,
    pub aud: String,
    pub client_id: String,
    pub jti: String,
}

impl ClientAssertionClaims {
    pub fn new(client_id: &str, token_endpoint: &str, jti: String) -> Self {
        ClientAssertionClaims {
            alg: Algorithm::RS256.as_str().to_string(),
            typ: JWT_TYPE.to_string(),
            aud: token_endpoint.to_string(),
            client_id: client_id.to_string(),
            jti,
        }
    }

    pub fn to_object(&self) -> JsonObject {
        to_object(self)
    }
}

/// Body of a DPoP signing request: the proof claims plus the client
/// identity. `typ`, `alg` and `client_id` are not copied into the signed
/// payload; `typ`/`alg` go to the header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DPoPProofClaims {
    pub typ: String,
    pub alg: String,
    pub jti: String,
    pub htm: String,
    pub htu: String,
    pub client_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iat: Option<i64>,
}

impl DPoPProofClaims {
    pub fn new(client_id: &str, htm: &str, htu: &str, jti: String) -> Self {
        DPoPProofClaims {
            typ: DPOP_JWT_TYPE.to_string(),
            alg: Algorithm::ES256.as_str().to_string(),
            jti,
            htm: htm.to_string(),
            htu: htu.to_string(),
            client_id: client_id.to_string(),
            iat: None,
        }
    }
}

/// Signed payload of a DPoP proof.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpopPayload {
    pub jti: String,
    pub htm: String,
    pub htu: String,
    pub iat: i64,
}

impl DpopPayload {
    pub fn to_object(&self) -> JsonObject {
        to_object(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    pub jkt: PublicKeyThumbprint,
}

/// Self-contained access token payload. `cnf.jkt` binds the token to the
/// DPoP key that obtained it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessTokenClaims {
    pub iss: String,
    pub sub: String,
    pub client_id: String,
    pub scope: String,
    pub iat: i64,
    pub exp: i64,
    pub jti: String,
    pub cnf: Confirmation,
}

impl AccessTokenClaims {
    pub fn to_object(&self) -> JsonObject {
        to_object(self)
    }

    pub fn has_scope(&self, required: &str) -> bool {
        self.scope.split(' ').any(|s| !s.is_empty() && s == required)
    }
}

/// Short-lived token the assertion server hands out after a successful
/// session-key comparison.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthTokenClaims {
    pub iss: String,
    pub sub: String,
    pub aud: String,
    pub sid: String,
    pub iat: i64,
    pub exp: i64,
    pub jti: String,
}

impl AuthTokenClaims {
    pub fn to_object(&self) -> JsonObject {
        to_object(self)
    }
}

fn to_object<T: Serialize>(value: &T) -> JsonObject {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::Object(map)) => map,
        _ => unreachable!("claim structs serialize to objects"),
    }
}

/// Decodes a typed claim set from a verified JSON object.
pub fn from_object<T: for<'de> Deserialize<'de>>(claims: &JsonObject) -> Option<T> {
    serde_json::from_value(serde_json::Value::Object(claims.clone())).ok()
}
