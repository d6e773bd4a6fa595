//! Key files and client certificates.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rsa::pkcs1v15::{Signature, SigningKey};
use rsa::pkcs8::{DecodePublicKey, EncodePublicKey};
use rsa::RsaPublicKey;
use sha2::Sha256;
use thiserror::Error;
use uspfo_core::{JwkSet, PublicKey, SigningKeyPair};
use x509_cert::builder::{Builder, CertificateBuilder, Profile};
use x509_cert::der::{DecodePem, Encode, EncodePem};
use x509_cert::der::pem::LineEnding;
use x509_cert::name::Name;
use x509_cert::serial_number::SerialNumber;
use x509_cert::spki::SubjectPublicKeyInfoOwned;
use x509_cert::time::Validity;
use x509_cert::Certificate;

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("cannot read key file {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("key file is not a JWK Set: {0}")]
    Format(String),
    #[error("key `{kid}` is unusable: {reason}")]
    InvalidKey { kid: String, reason: String },
    #[error("key `{0}` not found")]
    Missing(String),
    #[error("certificate error: {0}")]
    Certificate(String),
}

/// Private signing keys indexed by key id.
#[derive(Clone, Debug, Default)]
pub struct KeyRing {
    keys: BTreeMap<String, SigningKeyPair>,
}

impl KeyRing {
    pub fn from_jwks(set: &JwkSet) -> Result<Self, KeyError> {
        let mut keys = BTreeMap::new();
        for jwk in &set.keys {
            let kid = jwk.kid.clone().unwrap_or_default();
            let pair = SigningKeyPair::from_jwk(jwk).map_err(|e| KeyError::InvalidKey {
                kid: kid.clone(),
                reason: e.to_string(),
            })?;
            keys.insert(pair.key_id().to_string(), pair);
        }
        Ok(KeyRing { keys })
    }

    pub fn load(path: &Path) -> Result<Self, KeyError> {
        let text = std::fs::read_to_string(path).map_err(|e| KeyError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let set: JwkSet = serde_json::from_str(&text).map_err(|e| KeyError::Format(e.to_string()))?;
        Self::from_jwks(&set)
    }

    pub fn insert(&mut self, key: SigningKeyPair) {
        self.keys.insert(key.key_id().to_string(), key);
    }

    pub fn get(&self, kid: &str) -> Result<&SigningKeyPair, KeyError> {
        self.keys.get(kid).ok_or_else(|| KeyError::Missing(kid.to_string()))
    }

    pub fn private_jwks(&self) -> JwkSet {
        JwkSet::new(self.keys.values().map(SigningKeyPair::private_jwk).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &SigningKeyPair> {
        self.keys.values()
    }
}

fn cert_err(e: impl std::fmt::Display) -> KeyError {
    KeyError::Certificate(e.to_string())
}

/// Builds a self-signed certificate for an RS256 key with subject `CN=<cn>`.
pub fn self_signed_certificate(key: &SigningKeyPair, common_name: &str) -> Result<String, KeyError> {
    let private = key
        .rsa_private_key()
        .ok_or_else(|| cert_err("certificates are issued for RSA keys only"))?;
    let signer = SigningKey::<Sha256>::new(private.clone());
    let spki_der = private
        .to_public_key()
        .to_public_key_der()
        .map_err(cert_err)?;
    let spki = SubjectPublicKeyInfoOwned::try_from(spki_der.as_bytes()).map_err(cert_err)?;
    let subject = Name::from_str(&format!("CN={common_name}")).map_err(cert_err)?;
    let validity = Validity::from_now(Duration::from_secs(365 * 24 * 3600)).map_err(cert_err)?;
    let builder = CertificateBuilder::new(
        Profile::Root,
        SerialNumber::from(1u32),
        validity,
        subject,
        spki,
        &signer,
    )
    .map_err(cert_err)?;
    let cert = builder.build::<Signature>().map_err(cert_err)?;
    cert.to_pem(LineEnding::LF).map_err(cert_err)
}

/// Extracts the RSA subject public key from a PEM certificate.
pub fn certificate_public_key(pem: &str) -> Result<PublicKey, KeyError> {
    let cert = Certificate::from_pem(pem.as_bytes()).map_err(cert_err)?;
    let der = cert
        .tbs_certificate
        .subject_public_key_info
        .to_der()
        .map_err(cert_err)?;
    let key = RsaPublicKey::from_public_key_der(&der).map_err(cert_err)?;
    Ok(PublicKey::Rsa(key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;
    use uspfo_core::Algorithm;

    #[test]
    fn certificate_carries_the_key() {
        let key = SigningKeyPair::generate(Algorithm::RS256, "k", &mut OsRng).unwrap();
        let pem = self_signed_certificate(&key, "UFO_test").unwrap();
        assert!(pem.starts_with("-----BEGIN CERTIFICATE-----"));
        assert_eq!(&certificate_public_key(&pem).unwrap(), key.public_key());
    }

    #[test]
    fn ec_keys_get_no_certificate() {
        let key = SigningKeyPair::generate(Algorithm::ES256, "k", &mut OsRng).unwrap();
        assert!(self_signed_certificate(&key, "x").is_err());
    }

    #[test]
    fn key_ring_round_trips_through_jwks() {
        let mut ring = KeyRing::default();
        ring.insert(SigningKeyPair::generate(Algorithm::ES256, "ec", &mut OsRng).unwrap());
        let copy = KeyRing::from_jwks(&ring.private_jwks()).unwrap();
        assert_eq!(
            copy.get("ec").unwrap().thumbprint(),
            ring.get("ec").unwrap().thumbprint()
        );
        assert!(matches!(copy.get("nope"), Err(KeyError::Missing(_))));
    }
}
