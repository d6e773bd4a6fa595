//! Key material: algorithms, JSON Web Keys, signing key pairs and RFC 7638
//! thumbprints.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use p256::ecdsa::{SigningKey as EcSigningKey, VerifyingKey as EcVerifyingKey};
use p256::EncodedPoint;
use rand_core::CryptoRngCore;
use rsa::pkcs1v15;
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::traits::{PrivateKeyParts, PublicKeyParts};
use rsa::{BigUint, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::b64::{b64url_decode, b64url_encode};
use crate::jws::JoseError;

const RSA_MODULUS_BITS: usize = 2048;

/// Signature algorithms accepted anywhere in the flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    RS256,
    ES256,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::RS256 => "RS256",
            Algorithm::ES256 => "ES256",
        }
    }

    /// Resolves a JOSE `alg` value. `none` and everything outside RS256/ES256
    /// is rejected.
    pub fn from_name(name: &str) -> Result<Self, JoseError> {
        match name {
            "RS256" => Ok(Algorithm::RS256),
            "ES256" => Ok(Algorithm::ES256),
            other => Err(JoseError::AlgorithmUnsupported(other.to_string())),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A JSON Web Key (RFC 7517) restricted to the RSA and P-256 members this
/// crate understands. Private members are present only in key files.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jwk {
    pub kty: String,
    #[serde(rename = "use", default, skip_serializing_if = "Option::is_none")]
    pub key_use: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dq: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qi: Option<String>,
}

impl Jwk {
    pub fn is_private(&self) -> bool {
        self.d.is_some()
            || self.p.is_some()
            || self.q.is_some()
            || self.dp.is_some()
            || self.dq.is_some()
            || self.qi.is_some()
    }

    /// Copy with every private member removed.
    pub fn to_public(&self) -> Jwk {
        Jwk {
            d: None,
            p: None,
            q: None,
            dp: None,
            dq: None,
            qi: None,
            ..self.clone()
        }
    }

    pub fn to_public_key(&self) -> Result<PublicKey, JoseError> {
        match self.kty.as_str() {
            "RSA" => {
                let n = decode_uint(self.n.as_deref(), "missing or invalid n")?;
                let e = decode_uint(self.e.as_deref(), "missing or invalid e")?;
                RsaPublicKey::new(n, e)
                    .map(PublicKey::Rsa)
                    .map_err(|_| JoseError::InvalidKey("RSA public key rejected"))
            }
            "EC" => {
                if self.crv.as_deref() != Some("P-256") {
                    return Err(JoseError::InvalidKey("only the P-256 curve is supported"));
                }
                let x = decode_fixed::<32>(self.x.as_deref(), "missing or invalid x")?;
                let y = decode_fixed::<32>(self.y.as_deref(), "missing or invalid y")?;
                let point = EncodedPoint::from_affine_coordinates(&x.into(), &y.into(), false);
                EcVerifyingKey::from_encoded_point(&point)
                    .map(PublicKey::Ec)
                    .map_err(|_| JoseError::InvalidKey("point is not on P-256"))
            }
            _ => Err(JoseError::InvalidKey("unsupported kty")),
        }
    }

    pub fn thumbprint(&self) -> Result<PublicKeyThumbprint, JoseError> {
        Ok(self.to_public_key()?.thumbprint())
    }
}

/// A JWK Set (`{"keys": [...]}`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JwkSet {
    pub keys: Vec<Jwk>,
}

impl JwkSet {
    pub fn new(keys: Vec<Jwk>) -> Self {
        JwkSet { keys }
    }

    pub fn find(&self, kid: &str) -> Option<&Jwk> {
        self.keys.iter().find(|k| k.kid.as_deref() == Some(kid))
    }

    pub fn to_public(&self) -> JwkSet {
        JwkSet {
            keys: self.keys.iter().map(Jwk::to_public).collect(),
        }
    }

    pub fn has_private(&self) -> bool {
        self.keys.iter().any(Jwk::is_private)
    }

    /// Parsed public keys for one algorithm. Members that fail to parse are
    /// skipped.
    pub fn public_keys(&self, alg: Algorithm) -> Vec<PublicKey> {
        self.keys
            .iter()
            .filter_map(|k| k.to_public_key().ok())
            .filter(|k| k.algorithm() == alg)
            .collect()
    }
}

/// Verification half of a key pair.
#[derive(Clone, PartialEq, Eq)]
pub enum PublicKey {
    Rsa(RsaPublicKey),
    Ec(EcVerifyingKey),
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("PublicKey")
            .field(&self.algorithm())
            .field(&self.thumbprint().as_str())
            .finish()
    }
}

impl PublicKey {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            PublicKey::Rsa(_) => Algorithm::RS256,
            PublicKey::Ec(_) => Algorithm::ES256,
        }
    }

    /// Public JWK carrying only the required members plus `alg`.
    pub fn to_jwk(&self) -> Jwk {
        let mut jwk = Jwk {
            alg: Some(self.algorithm().as_str().to_string()),
            ..Jwk::default()
        };
        for (name, value) in self.required_members() {
            match name {
                "kty" => jwk.kty = value,
                "crv" => jwk.crv = Some(value),
                "x" => jwk.x = Some(value),
                "y" => jwk.y = Some(value),
                "n" => jwk.n = Some(value),
                "e" => jwk.e = Some(value),
                _ => unreachable!(),
            }
        }
        jwk
    }

    fn required_members(&self) -> BTreeMap<&'static str, String> {
        let mut members = BTreeMap::new();
        match self {
            PublicKey::Rsa(key) => {
                members.insert("kty", "RSA".to_string());
                members.insert("n", b64url_encode(key.n().to_bytes_be()));
                members.insert("e", b64url_encode(key.e().to_bytes_be()));
            }
            PublicKey::Ec(key) => {
                let point = key.to_encoded_point(false);
                members.insert("kty", "EC".to_string());
                members.insert("crv", "P-256".to_string());
                // Uncompressed points always carry both coordinates.
                members.insert("x", b64url_encode(point.x().expect("uncompressed point")));
                members.insert("y", b64url_encode(point.y().expect("uncompressed point")));
            }
        }
        members
    }

    /// RFC 7638 thumbprint: SHA-256 over the required members serialized as
    /// JSON with lexicographically ordered keys and no whitespace.
    pub fn thumbprint(&self) -> PublicKeyThumbprint {
        let canonical =
            serde_json::to_vec(&self.required_members()).expect("string map always serializes");
        PublicKeyThumbprint(b64url_encode(Sha256::digest(&canonical)))
    }

    pub fn verify(&self, alg: Algorithm, message: &[u8], signature: &[u8]) -> Result<(), JoseError> {
        if alg != self.algorithm() {
            return Err(JoseError::AlgorithmMismatch {
                header: alg.as_str().to_string(),
                key: self.algorithm(),
            });
        }
        let ok = match self {
            PublicKey::Rsa(key) => {
                let verifier = pkcs1v15::VerifyingKey::<Sha256>::new(key.clone());
                pkcs1v15::Signature::try_from(signature)
                    .map(|sig| verifier.verify(message, &sig).is_ok())
                    .unwrap_or(false)
            }
            PublicKey::Ec(key) => p256::ecdsa::Signature::from_slice(signature)
                .map(|sig| key.verify(message, &sig).is_ok())
                .unwrap_or(false),
        };
        if ok {
            Ok(())
        } else {
            Err(JoseError::BadSignature)
        }
    }
}

/// Shorthand for [`PublicKey::thumbprint`].
pub fn compute_thumbprint(key: &PublicKey) -> PublicKeyThumbprint {
    key.thumbprint()
}

/// Base64URL SHA-256 JWK thumbprint, the `jkt` confirmation value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublicKeyThumbprint(String);

impl PublicKeyThumbprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Wraps a thumbprint received on the wire. Only the shape is checked.
    pub fn from_encoded(value: &str) -> Option<Self> {
        (value.len() == 43 && crate::b64::is_b64url(value)).then(|| Self(value.to_string()))
    }
}

impl fmt::Display for PublicKeyThumbprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone)]
enum SecretKey {
    Rsa(Box<RsaPrivateKey>),
    Ec(EcSigningKey),
}

/// A private key together with its public half and key id.
#[derive(Clone)]
pub struct SigningKeyPair {
    algorithm: Algorithm,
    key_id: String,
    secret: SecretKey,
    public: PublicKey,
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("algorithm", &self.algorithm)
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl SigningKeyPair {
    pub fn generate(
        algorithm: Algorithm,
        key_id: impl Into<String>,
        rng: &mut impl CryptoRngCore,
    ) -> Result<Self, JoseError> {
        let secret = match algorithm {
            Algorithm::RS256 => SecretKey::Rsa(Box::new(
                RsaPrivateKey::new(rng, RSA_MODULUS_BITS)
                    .map_err(|_| JoseError::InvalidKey("RSA key generation failed"))?,
            )),
            Algorithm::ES256 => SecretKey::Ec(EcSigningKey::random(rng)),
        };
        Ok(Self::from_secret(secret, key_id.into()))
    }

    fn from_secret(secret: SecretKey, key_id: String) -> Self {
        let (algorithm, public) = match &secret {
            SecretKey::Rsa(key) => (Algorithm::RS256, PublicKey::Rsa(key.to_public_key())),
            SecretKey::Ec(key) => (Algorithm::ES256, PublicKey::Ec(*key.verifying_key())),
        };
        SigningKeyPair {
            algorithm,
            key_id,
            secret,
            public,
        }
    }

    /// Loads a private JWK. The key id defaults to the thumbprint when the JWK
    /// has no `kid`.
    pub fn from_jwk(jwk: &Jwk) -> Result<Self, JoseError> {
        let secret = match jwk.kty.as_str() {
            "RSA" => {
                let n = decode_uint(jwk.n.as_deref(), "missing or invalid n")?;
                let e = decode_uint(jwk.e.as_deref(), "missing or invalid e")?;
                let d = decode_uint(jwk.d.as_deref(), "missing private exponent d")?;
                let mut primes = Vec::new();
                if let (Some(p), Some(q)) = (jwk.p.as_deref(), jwk.q.as_deref()) {
                    primes.push(decode_uint(Some(p), "invalid p")?);
                    primes.push(decode_uint(Some(q), "invalid q")?);
                }
                let mut key = RsaPrivateKey::from_components(n, e, d, primes)
                    .map_err(|_| JoseError::InvalidKey("inconsistent RSA components"))?;
                key.validate()
                    .map_err(|_| JoseError::InvalidKey("RSA key failed validation"))?;
                key.precompute()
                    .map_err(|_| JoseError::InvalidKey("RSA precomputation failed"))?;
                SecretKey::Rsa(Box::new(key))
            }
            "EC" => {
                if jwk.crv.as_deref() != Some("P-256") {
                    return Err(JoseError::InvalidKey("only the P-256 curve is supported"));
                }
                let d = decode_fixed::<32>(jwk.d.as_deref(), "missing or invalid d")?;
                let key = EcSigningKey::from_bytes(&d.into())
                    .map_err(|_| JoseError::InvalidKey("invalid P-256 scalar"))?;
                SecretKey::Ec(key)
            }
            _ => return Err(JoseError::InvalidKey("unsupported kty")),
        };
        let mut pair = Self::from_secret(secret, String::new());
        if let Some(alg) = jwk.alg.as_deref() {
            if Algorithm::from_name(alg)? != pair.algorithm {
                return Err(JoseError::InvalidKey("alg does not match key type"));
            }
        }
        if let Ok(public_part) = jwk.to_public_key() {
            if public_part != pair.public {
                return Err(JoseError::InvalidKey("public members do not match private key"));
            }
        }
        pair.key_id = match &jwk.kid {
            Some(kid) => kid.clone(),
            None => pair.public.thumbprint().as_str().to_string(),
        };
        Ok(pair)
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn thumbprint(&self) -> PublicKeyThumbprint {
        self.public.thumbprint()
    }

    /// Public JWK with `kid`, `use` and `alg` set.
    pub fn public_jwk(&self) -> Jwk {
        let mut jwk = self.public.to_jwk();
        jwk.kid = Some(self.key_id.clone());
        jwk.key_use = Some("sig".to_string());
        jwk
    }

    /// Full private JWK, suitable for a key file.
    pub fn private_jwk(&self) -> Jwk {
        let mut jwk = self.public_jwk();
        match &self.secret {
            SecretKey::Rsa(key) => {
                jwk.d = Some(b64url_encode(key.d().to_bytes_be()));
                if let [p, q] = key.primes() {
                    jwk.p = Some(b64url_encode(p.to_bytes_be()));
                    jwk.q = Some(b64url_encode(q.to_bytes_be()));
                }
                jwk.dp = key.dp().map(|v| b64url_encode(v.to_bytes_be()));
                jwk.dq = key.dq().map(|v| b64url_encode(v.to_bytes_be()));
                jwk.qi = key.crt_coefficient().map(|v| b64url_encode(v.to_bytes_be()));
            }
            SecretKey::Ec(key) => {
                jwk.d = Some(b64url_encode(key.to_bytes()));
            }
        }
        jwk
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        match &self.secret {
            SecretKey::Rsa(key) => {
                let signer = pkcs1v15::SigningKey::<Sha256>::new((**key).clone());
                signer.sign(message).to_vec()
            }
            SecretKey::Ec(key) => {
                let sig: p256::ecdsa::Signature = key.sign(message);
                sig.to_bytes().to_vec()
            }
        }
    }

    /// RSA private key, for callers that need to wrap it in other formats
    /// (certificates).
    pub fn rsa_private_key(&self) -> Option<&RsaPrivateKey> {
        match &self.secret {
            SecretKey::Rsa(key) => Some(key),
            SecretKey::Ec(_) => None,
        }
    }
}

fn decode_uint(value: Option<&str>, what: &'static str) -> Result<BigUint, JoseError> {
    let bytes = value
        .and_then(|v| b64url_decode(v).ok())
        .filter(|b| !b.is_empty())
        .ok_or(JoseError::InvalidKey(what))?;
    Ok(BigUint::from_bytes_be(&bytes))
}

fn decode_fixed<const N: usize>(value: Option<&str>, what: &'static str) -> Result<[u8; N], JoseError> {
    value
        .and_then(|v| b64url_decode(v).ok())
        .and_then(|b| <[u8; N]>::try_from(b.as_slice()).ok())
        .ok_or(JoseError::InvalidKey(what))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    const RFC7638_N: &str = "0vx7agoebGcQSuuPiLJXZptN9nndrQmbXEps2aiAFbWhM78LhWx4cbbfAAtVT86zwu1RK7aPFFxuhDR1L6tSoc_BJECPebWKRXjBZCiFV4n3oknjhMstn64tZ_2W-5JsGY4Hc5n9yBXArwl93lqt7_RN5w6Cf0h4QyQ5v-65YGjQR0_FDW2QvzqY368QQMicAtaSqzs8KJZgnYb9c7d0zgdAZHzu6qMQvRL5hajrn1n91CbOpbISD08qNLyrdkt-bFTWhAI4vMQFh6WeZu0fM4lFd2NcRwr3XPksINHaQ-G_xBniIqbw0Ls1jF44-csFCur-kEgU8awapJzKnqDKgw";

    // Second, string-formatting implementation of the canonical JSON rule.
    fn oracle_thumbprint(jwk: &Jwk) -> String {
        let json = match jwk.kty.as_str() {
            "RSA" => alloc::format!(
                r#"{{"e":"{}","kty":"RSA","n":"{}"}}"#,
                jwk.e.as_ref().unwrap(),
                jwk.n.as_ref().unwrap()
            ),
            "EC" => alloc::format!(
                r#"{{"crv":"P-256","kty":"EC","x":"{}","y":"{}"}}"#,
                jwk.x.as_ref().unwrap(),
                jwk.y.as_ref().unwrap()
            ),
            _ => unreachable!(),
        };
        b64url_encode(Sha256::digest(json.as_bytes()))
    }

    #[test]
    fn rfc7638_vector() {
        let jwk = Jwk {
            kty: "RSA".into(),
            n: Some(RFC7638_N.into()),
            e: Some("AQAB".into()),
            alg: Some("RS256".into()),
            kid: Some("2011-04-29".into()),
            ..Jwk::default()
        };
        assert_eq!(
            jwk.thumbprint().unwrap().as_str(),
            "NzbLsXh8uDCcd-6MNwXF4W_7noWXFZAfHkxZsRGC9Xs"
        );
    }

    #[test]
    fn sample_dpop_key_thumbprint() {
        let jwk: Jwk = serde_json::from_str(
            r#"{"kty":"EC","use":"sig","crv":"P-256","x":"enVQuQZ7f7Y8HQJukjjeBhRGif4W06NXCvND5iUjk8k","y":"p1yeRwl7tybPpej1l5d5hRuH6Wnv7MQ06PnhhP5kGk8","alg":"ES256"}"#,
        )
        .unwrap();
        let tp = jwk.thumbprint().unwrap();
        assert_eq!(tp.as_str(), "PvmRWtDQzAw63-mSwQbymKs3GB8MP0FTUh-UL7L0Gwg");
        assert_eq!(tp.as_str(), oracle_thumbprint(&jwk));
    }

    #[test]
    fn thumbprint_deterministic_and_distinct() {
        let a = SigningKeyPair::generate(Algorithm::ES256, "a", &mut OsRng).unwrap();
        let b = SigningKeyPair::generate(Algorithm::ES256, "b", &mut OsRng).unwrap();
        assert_eq!(a.thumbprint(), a.thumbprint());
        assert_eq!(a.thumbprint(), a.public_jwk().thumbprint().unwrap());
        assert_ne!(a.thumbprint(), b.thumbprint());
        assert_eq!(a.thumbprint().as_str(), oracle_thumbprint(&a.public_jwk()));
    }

    #[test]
    fn rsa_thumbprint_matches_oracle() {
        let key = SigningKeyPair::generate(Algorithm::RS256, "r", &mut OsRng).unwrap();
        assert_eq!(key.thumbprint().as_str(), oracle_thumbprint(&key.public_jwk()));
        assert_eq!(key.public_jwk().e.as_deref(), Some("AQAB"));
    }

    #[test]
    fn private_jwk_round_trip() {
        for alg in [Algorithm::RS256, Algorithm::ES256] {
            let key = SigningKeyPair::generate(alg, "k1", &mut OsRng).unwrap();
            let jwk = key.private_jwk();
            assert!(jwk.is_private());
            assert!(!jwk.to_public().is_private());
            let loaded = SigningKeyPair::from_jwk(&jwk).unwrap();
            assert_eq!(loaded.key_id(), "k1");
            assert_eq!(loaded.public_key(), key.public_key());
            let sig = loaded.sign(b"msg");
            key.public_key().verify(alg, b"msg", &sig).unwrap();
        }
    }

    #[test]
    fn from_jwk_rejects_mismatched_public_members() {
        let a = SigningKeyPair::generate(Algorithm::ES256, "a", &mut OsRng).unwrap();
        let b = SigningKeyPair::generate(Algorithm::ES256, "b", &mut OsRng).unwrap();
        let mut jwk = a.private_jwk();
        jwk.x = b.public_jwk().x;
        jwk.y = b.public_jwk().y;
        assert!(SigningKeyPair::from_jwk(&jwk).is_err());
    }

    #[test]
    fn algorithm_names() {
        assert_eq!(Algorithm::from_name("RS256").unwrap(), Algorithm::RS256);
        assert!(matches!(
            Algorithm::from_name("none"),
            Err(JoseError::AlgorithmUnsupported(_))
        ));
        assert!(Algorithm::from_name("HS256").is_err());
    }

    #[test]
    fn ec_jwk_requires_p256() {
        let key = SigningKeyPair::generate(Algorithm::ES256, "a", &mut OsRng).unwrap();
        let mut jwk = key.public_jwk();
        jwk.crv = Some("P-384".into());
        assert!(jwk.to_public_key().is_err());
    }
}
