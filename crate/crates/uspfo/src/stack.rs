//! Wires the three services onto one in-process network from a fixtures
//! directory.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Weak};

use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uspfo_core::session_key::{source_digest, SourceDigest};
use uspfo_core::{Algorithm, JwkSet, SigningKeyPair};

use crate::assertion::{AssertionConfig, AssertionServer, ClientProvision};
use crate::audit::AuditLog;
use crate::authz::{AuthorizationServer, AuthzConfig};
use crate::client::{ClientConfig, ConfigError, Endpoints, ReferenceClient};
use crate::clock::{Clock, SystemClock};
use crate::http::{HttpRequest, HttpResponse, InProcessNetwork, Transport, TransportError};
use crate::keys::{KeyError, KeyRing};
use crate::ratelimit::RateLimit;
use crate::registry::{ClientRecord, ClientRegistry, ClientType, RedirectPolicy, Registration, RegistryError};
use crate::resource::{load_resources, ResourceConfig, ResourceError, ResourceServer};

pub const ASSERTION_ORIGIN: &str = "https://assertion.example.org";
pub const AUTHZ_ORIGIN: &str = "https://server.example.org";
pub const RESOURCE_ORIGIN: &str = "https://resource.example.org";
pub const CERT_ENDPOINT: &str = "https://assertion.example.org/cert";
pub const TOKEN_ENDPOINT: &str = "https://server.example.org/token";

const AUTHZ_SIGNING_KID: &str = "server.example.org#es256";
const ASSERTION_TOKEN_KID: &str = "assertion.example.org#es256";

#[derive(Debug, Error)]
pub enum StackError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("fixture {file} is invalid: {reason}")]
    Fixture { file: String, reason: String },
    #[error(transparent)]
    Keys(#[from] KeyError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("bad TTL override `{0}`: expected KEY=SECONDS with a positive value and a known key")]
    BadOverride(String),
}

impl StackError {
    pub fn code(&self) -> &'static str {
        match self {
            StackError::Io { .. } => "IoError",
            StackError::Fixture { .. } => "FixtureInvalid",
            StackError::Keys(_) => "KeyError",
            StackError::Registry(e) => crate::http::WireError::code(e),
            StackError::Resource(e) => crate::http::WireError::code(e),
            StackError::Config(_) => "ConfigInvalid",
            StackError::Transport(_) => "TransportError",
            StackError::BadOverride(_) => "UsageError",
        }
    }
}

/// Every lifetime and window in the stack, in seconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ttls {
    pub challenge: i64,
    pub auth_token: i64,
    pub assertion: i64,
    pub code: i64,
    pub consent: i64,
    pub dpop_skew: i64,
    pub jti_window: i64,
    pub access_token: i64,
    pub refresh_token: i64,
    pub cert_cache: i64,
}

impl Default for Ttls {
    fn default() -> Self {
        let a = AssertionConfig::default();
        let z = AuthzConfig::default();
        Ttls {
            challenge: a.challenge_ttl,
            auth_token: a.auth_token_ttl,
            assertion: a.assertion_ttl,
            code: z.code_ttl,
            consent: z.consent_ttl,
            dpop_skew: z.dpop_skew,
            jti_window: z.jti_window,
            access_token: z.access_token_ttl,
            refresh_token: z.refresh_token_ttl,
            cert_cache: z.cert_cache_ttl,
        }
    }
}

impl Ttls {
    /// Applies one `KEY=SECONDS` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), StackError> {
        let bad = || StackError::BadOverride(spec.to_string());
        let (key, value) = spec.split_once('=').ok_or_else(bad)?;
        let secs: i64 = value.trim().parse().map_err(|_| bad())?;
        if secs <= 0 {
            return Err(bad());
        }
        let slot = match key.trim() {
            "challenge" => &mut self.challenge,
            "auth_token" => &mut self.auth_token,
            "assertion" => &mut self.assertion,
            "code" => &mut self.code,
            "consent" => &mut self.consent,
            "dpop_skew" => &mut self.dpop_skew,
            "jti_window" => &mut self.jti_window,
            "access_token" => &mut self.access_token,
            "refresh_token" => &mut self.refresh_token,
            "cert_cache" => &mut self.cert_cache,
            _ => return Err(bad()),
        };
        *slot = secs;
        Ok(())
    }
}

#[derive(Clone)]
pub struct StackOptions {
    pub ttls: Ttls,
    pub rate_limit: RateLimit,
    pub clock: Arc<dyn Clock>,
    pub redirect_policy: RedirectPolicy,
    /// Directory for JSON-lines audit logs, one file per service.
    pub audit_dir: Option<PathBuf>,
    /// Keep the `backup_jwks` entries from the registry fixture.
    pub keep_backup_jwks: bool,
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions {
            ttls: Ttls::default(),
            rate_limit: RateLimit::default(),
            clock: Arc::new(SystemClock),
            redirect_policy: RedirectPolicy::default(),
            audit_dir: None,
            keep_backup_jwks: true,
        }
    }
}

impl StackOptions {
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }
}

/// One provisioned client in `provisioning.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisioningEntry {
    pub client_id: String,
    pub assertion_kid: String,
    pub dpop_kid: String,
    /// Hex SHA-256 of the deployed client source.
    pub source_sha256: String,
}

/// Paths inside a fixtures directory.
#[derive(Clone, Debug)]
pub struct Fixtures {
    pub dir: PathBuf,
}

impl Fixtures {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Fixtures { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn keys(&self) -> PathBuf {
        self.path("keys.jwks.json")
    }

    pub fn registry(&self) -> PathBuf {
        self.path("registry.json")
    }

    pub fn provisioning(&self) -> PathBuf {
        self.path("provisioning.json")
    }

    pub fn resources(&self) -> PathBuf {
        self.path("resources.json")
    }

    pub fn default_config(&self) -> PathBuf {
        self.path("default.json")
    }

    fn read(&self, path: &Path) -> Result<String, StackError> {
        std::fs::read_to_string(path).map_err(|e| StackError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Forwards to the network without keeping it alive, so services attached
/// to a network can call back into it.
struct WeakTransport(Weak<InProcessNetwork>);

impl Transport for WeakTransport {
    fn send(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        match self.0.upgrade() {
            Some(net) => net.send(request),
            None => Err(TransportError::Unreachable(request.url)),
        }
    }
}

fn parse_digest(hex_text: &str) -> Option<SourceDigest> {
    hex::decode(hex_text).ok()?.try_into().ok()
}

pub struct ServiceStack {
    pub network: Arc<InProcessNetwork>,
    pub clock: Arc<dyn Clock>,
    pub registry: Arc<ClientRegistry>,
    pub assertion: Arc<AssertionServer>,
    pub authz: Arc<AuthorizationServer>,
    pub resource: Arc<ResourceServer>,
    fixtures: Fixtures,
}

impl ServiceStack {
    pub fn from_fixtures(dir: &Path, options: StackOptions) -> Result<Self, StackError> {
        let fixtures = Fixtures::new(dir);
        let clock = options.clock.clone();
        let ttls = &options.ttls;
        let keys = KeyRing::load(&fixtures.keys())?;

        let mut records: Vec<ClientRecord> = serde_json::from_str(&fixtures.read(&fixtures.registry())?)
            .map_err(|e| StackError::Fixture {
                file: "registry.json".into(),
                reason: e.to_string(),
            })?;
        if !options.keep_backup_jwks {
            for r in &mut records {
                r.backup_jwks = None;
            }
        }
        let registry = Arc::new(ClientRegistry::in_memory(options.redirect_policy, clock.clone()));
        for record in records {
            registry.insert_record(record)?;
        }

        let audit = |name: &str| -> Result<AuditLog, StackError> {
            let log = AuditLog::new(clock.clone());
            match &options.audit_dir {
                Some(dir) => log.with_file(&dir.join(format!("{name}.audit.jsonl"))).map_err(|e| StackError::Io {
                    path: dir.display().to_string(),
                    reason: e.to_string(),
                }),
                None => Ok(log),
            }
        };

        let assertion_config = AssertionConfig {
            issuer: ASSERTION_ORIGIN.to_string(),
            challenge_ttl: ttls.challenge,
            auth_token_ttl: ttls.auth_token,
            assertion_ttl: ttls.assertion,
            rate_limit: options.rate_limit,
        };
        let assertion = Arc::new(AssertionServer::with_audit(
            assertion_config,
            clock.clone(),
            audit("assertion")?,
            keys.get(ASSERTION_TOKEN_KID)?.clone(),
        ));
        let entries: Vec<ProvisioningEntry> = serde_json::from_str(&fixtures.read(&fixtures.provisioning())?)
            .map_err(|e| StackError::Fixture {
                file: "provisioning.json".into(),
                reason: e.to_string(),
            })?;
        for entry in entries {
            let digest = parse_digest(&entry.source_sha256).ok_or_else(|| StackError::Fixture {
                file: "provisioning.json".into(),
                reason: format!("source_sha256 of {} is not 32 hex bytes", entry.client_id),
            })?;
            assertion.provision(ClientProvision::new(
                &entry.client_id,
                keys.get(&entry.assertion_kid)?.clone(),
                keys.get(&entry.dpop_kid)?.clone(),
                digest,
            )?);
        }

        let network = Arc::new(InProcessNetwork::new());
        let authz_config = AuthzConfig {
            issuer: AUTHZ_ORIGIN.to_string(),
            token_endpoint: TOKEN_ENDPOINT.to_string(),
            code_ttl: ttls.code,
            consent_ttl: ttls.consent,
            dpop_skew: ttls.dpop_skew,
            jti_window: ttls.jti_window,
            access_token_ttl: ttls.access_token,
            refresh_token_ttl: ttls.refresh_token,
            cert_cache_ttl: ttls.cert_cache,
        };
        let authz = Arc::new(
            AuthorizationServer::new(
                authz_config,
                clock.clone(),
                registry.clone(),
                Arc::new(WeakTransport(Arc::downgrade(&network))),
                keys.get(AUTHZ_SIGNING_KID)?.clone(),
            )
            .with_audit(audit("authorization")?),
        );
        network.attach(ASSERTION_ORIGIN, assertion.clone())?;
        network.attach(AUTHZ_ORIGIN, authz.clone())?;

        let resources = load_resources(&fixtures.read(&fixtures.resources())?)?;
        let resource_config = ResourceConfig {
            origin: RESOURCE_ORIGIN.to_string(),
            dpop_skew: ttls.dpop_skew,
            jti_window: ttls.jti_window,
        };
        let resource = Arc::new(
            ResourceServer::bootstrap(
                resource_config,
                clock.clone(),
                network.as_ref(),
                &format!("{AUTHZ_ORIGIN}/jwks"),
                resources,
            )?
            .with_audit(audit("resource")?),
        );
        network.attach(RESOURCE_ORIGIN, resource.clone())?;

        Ok(ServiceStack {
            network,
            clock,
            registry,
            assertion,
            authz,
            resource,
            fixtures,
        })
    }

    pub fn fixtures(&self) -> &Fixtures {
        &self.fixtures
    }

    pub fn transport(&self) -> Arc<dyn Transport> {
        self.network.clone()
    }

    pub fn default_client_config(&self) -> Result<ClientConfig, StackError> {
        Ok(ClientConfig::load(&self.fixtures.default_config())?)
    }

    pub fn client(&self) -> Result<ReferenceClient, StackError> {
        self.client_for(self.default_client_config()?)
    }

    pub fn client_for(&self, config: ClientConfig) -> Result<ReferenceClient, StackError> {
        Ok(ReferenceClient::from_config(config, self.transport(), self.clock.clone())?)
    }

    pub fn client_with_source(&self, config: ClientConfig, source: Vec<u8>) -> ReferenceClient {
        ReferenceClient::new(config, source, self.transport(), self.clock.clone())
    }

    /// Takes the assertion server's certificate endpoint off the network.
    pub fn set_cert_endpoint_online(&self, online: bool) {
        self.network
            .set_route_online(CERT_ENDPOINT, online)
            .expect("constant URL parses");
    }

    /// Registers a new unified client with fresh keys and provisions it at
    /// the assertion server. Returns its config and the source it must
    /// present.
    pub fn provision_client(&self, source: &[u8], with_backup: bool) -> Result<(ClientConfig, Vec<u8>), StackError> {
        let rsa = SigningKeyPair::generate(Algorithm::RS256, "rs256", &mut OsRng)
            .map_err(|e| KeyError::InvalidKey { kid: "rs256".into(), reason: e.to_string() })?;
        let ec = SigningKeyPair::generate(Algorithm::ES256, "es256", &mut OsRng)
            .map_err(|e| KeyError::InvalidKey { kid: "es256".into(), reason: e.to_string() })?;
        let backup = with_backup.then(|| JwkSet::new(vec![rsa.public_jwk(), ec.public_jwk()]));
        let record = self.registry.register_client(Registration {
            client_type: ClientType::Unified,
            redirect_uri: "https://client.example.org/cb".into(),
            assertion_verification_uri: Some(CERT_ENDPOINT.into()),
            backup_jwks: backup,
        })?;
        self.assertion
            .provision(ClientProvision::new(&record.client_id, rsa, ec, source_digest(source))?);
        let mut config = self.default_client_config()?;
        config.client_id = record.client_id;
        Ok((config, source.to_vec()))
    }
}

/// Endpoints of an in-process stack, as a client sees them.
pub fn default_endpoints() -> Endpoints {
    Endpoints {
        assertion: ASSERTION_ORIGIN.into(),
        authorize: format!("{AUTHZ_ORIGIN}/as/ufo"),
        token: TOKEN_ENDPOINT.into(),
        resource: format!("{RESOURCE_ORIGIN}/resource/profile"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ttl_overrides() {
        let mut ttls = Ttls::default();
        ttls.apply_override("auth_token=1").unwrap();
        assert_eq!(ttls.auth_token, 1);
        assert!(ttls.apply_override("auth_token=0").is_err());
        assert!(ttls.apply_override("nope=3").is_err());
        assert!(ttls.apply_override("code").is_err());
        assert_eq!(Ttls::default().access_token, 2677);
    }

    #[test]
    fn digest_parsing() {
        assert!(parse_digest(&"ab".repeat(32)).is_some());
        assert!(parse_digest("abc").is_none());
        assert!(parse_digest(&"zz".repeat(32)).is_none());
    }
}
