//! Client registration store.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::{Host, Url};
use uspfo_core::b64::b64url_encode;
use uspfo_core::claims::UNIFIED_CLIENT_PREFIX;
use uspfo_core::JwkSet;

use crate::clock::Clock;
use crate::http::WireError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientType {
    Confidential,
    Public,
    Unified,
}

impl std::str::FromStr for ClientType {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "confidential" => Ok(ClientType::Confidential),
            "public" => Ok(ClientType::Public),
            "unified" => Ok(ClientType::Unified),
            other => Err(RegistryError::InvalidRecord(format!("unknown client type `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientRecord {
    pub client_id: String,
    pub client_type: ClientType,
    pub redirect_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assertion_verification_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup_jwks: Option<JwkSet>,
    pub registered_at: i64,
}

/// Input to [`ClientRegistry::register_client`].
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub client_type: ClientType,
    pub redirect_uri: String,
    pub assertion_verification_uri: Option<String>,
    pub backup_jwks: Option<JwkSet>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unified clients must register an assertion_verification_uri")]
    MissingAssertionUri,
    #[error("invalid {field}: {reason}")]
    InvalidUri { field: &'static str, reason: String },
    #[error("no client registered as `{0}`")]
    UnknownClient(String),
    #[error("client `{0}` is already registered")]
    DuplicateClient(String),
    #[error("invalid client record: {0}")]
    InvalidRecord(String),
    #[error("registry storage failed: {0}")]
    Storage(String),
}

impl WireError for RegistryError {
    fn code(&self) -> &'static str {
        match self {
            RegistryError::MissingAssertionUri => "MissingAssertionUri",
            RegistryError::InvalidUri { .. } => "InvalidUri",
            RegistryError::UnknownClient(_) => "UnknownClient",
            RegistryError::DuplicateClient(_) => "DuplicateClient",
            RegistryError::InvalidRecord(_) => "InvalidRecord",
            RegistryError::Storage(_) => "StorageError",
        }
    }

    fn status(&self) -> u16 {
        match self {
            RegistryError::UnknownClient(_) => 404,
            RegistryError::Storage(_) => 500,
            _ => 400,
        }
    }
}

/// Which redirect URIs are acceptable at registration time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RedirectPolicy {
    /// Permit `http://` for loopback hosts (127.0.0.0/8, ::1, localhost).
    pub allow_loopback_http: bool,
}

impl RedirectPolicy {
    pub fn test_profile() -> Self {
        RedirectPolicy {
            allow_loopback_http: true,
        }
    }
}

fn is_loopback(host: Option<Host<&str>>) -> bool {
    match host {
        Some(Host::Domain(d)) => d.eq_ignore_ascii_case("localhost"),
        Some(Host::Ipv4(ip)) => ip.is_loopback(),
        Some(Host::Ipv6(ip)) => ip.is_loopback(),
        None => false,
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> RegistryError {
    RegistryError::InvalidUri {
        field,
        reason: reason.into(),
    }
}

fn check_absolute(field: &'static str, value: &str) -> Result<Url, RegistryError> {
    let url = Url::parse(value).map_err(|e| invalid(field, e.to_string()))?;
    if url.cannot_be_a_base() || url.host().is_none() {
        return Err(invalid(field, "must be an absolute URI with a host"));
    }
    Ok(url)
}

pub fn check_redirect_uri(value: &str, policy: RedirectPolicy) -> Result<(), RegistryError> {
    let url = check_absolute("redirect_uri", value)?;
    if url.fragment().is_some() {
        return Err(invalid("redirect_uri", "must not contain a fragment"));
    }
    match url.scheme() {
        "https" => Ok(()),
        "http" if policy.allow_loopback_http && is_loopback(url.host()) => Ok(()),
        other => Err(invalid("redirect_uri", format!("scheme `{other}` is not allowed"))),
    }
}

fn check_record(record: &ClientRecord, policy: RedirectPolicy) -> Result<(), RegistryError> {
    check_redirect_uri(&record.redirect_uri, policy)?;
    if record.client_type == ClientType::Unified {
        if !record.client_id.starts_with(UNIFIED_CLIENT_PREFIX) {
            return Err(RegistryError::InvalidRecord(format!(
                "unified client id `{}` lacks the {UNIFIED_CLIENT_PREFIX} prefix",
                record.client_id
            )));
        }
        let uri = record
            .assertion_verification_uri
            .as_deref()
            .ok_or(RegistryError::MissingAssertionUri)?;
        check_absolute("assertion_verification_uri", uri)?;
    } else if let Some(uri) = &record.assertion_verification_uri {
        check_absolute("assertion_verification_uri", uri)?;
    }
    if record.client_id.is_empty() {
        return Err(RegistryError::InvalidRecord("empty client_id".into()));
    }
    if record.backup_jwks.as_ref().is_some_and(JwkSet::has_private) {
        return Err(RegistryError::InvalidRecord("backup_jwks must hold public keys only".into()));
    }
    Ok(())
}

fn generate_client_id(client_type: ClientType) -> String {
    let mut bytes = [0u8; 16];
    OsRng.fill_bytes(&mut bytes);
    let token = b64url_encode(bytes);
    match client_type {
        ClientType::Unified => format!("{UNIFIED_CLIENT_PREFIX}{token}"),
        _ => token,
    }
}

type Snapshot = Arc<BTreeMap<String, ClientRecord>>;

/// Registration store. Mutations are serialized and, when file-backed, each
/// one rewrites the registry file atomically; readers work on an immutable
/// snapshot.
pub struct ClientRegistry {
    clock: Arc<dyn Clock>,
    policy: RedirectPolicy,
    path: Option<PathBuf>,
    snapshot: RwLock<Snapshot>,
    writer: Mutex<()>,
}

impl ClientRegistry {
    pub fn in_memory(policy: RedirectPolicy, clock: Arc<dyn Clock>) -> Self {
        ClientRegistry {
            clock,
            policy,
            path: None,
            snapshot: RwLock::new(Arc::new(BTreeMap::new())),
            writer: Mutex::new(()),
        }
    }

    /// Opens a file-backed registry, loading `path` if it exists.
    pub fn open(path: &Path, policy: RedirectPolicy, clock: Arc<dyn Clock>) -> Result<Self, RegistryError> {
        let mut registry = Self::in_memory(policy, clock);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| RegistryError::Storage(e.to_string()))?;
            let records = parse_records(&text)?;
            registry.load(records)?;
        }
        registry.path = Some(path.to_path_buf());
        Ok(registry)
    }

    /// Builds an in-memory registry from a registry document.
    pub fn from_json(text: &str, policy: RedirectPolicy, clock: Arc<dyn Clock>) -> Result<Self, RegistryError> {
        let mut registry = Self::in_memory(policy, clock);
        registry.load(parse_records(text)?)?;
        Ok(registry)
    }

    fn load(&mut self, records: Vec<ClientRecord>) -> Result<(), RegistryError> {
        let mut map = BTreeMap::new();
        for record in records {
            check_record(&record, self.policy)?;
            if map.contains_key(&record.client_id) {
                return Err(RegistryError::DuplicateClient(record.client_id));
            }
            map.insert(record.client_id.clone(), record);
        }
        *self.snapshot.get_mut().expect("registry lock") = Arc::new(map);
        Ok(())
    }

    fn snapshot(&self) -> Snapshot {
        self.snapshot.read().expect("registry lock").clone()
    }

    pub fn register_client(&self, registration: Registration) -> Result<ClientRecord, RegistryError> {
        let _guard = self.writer.lock().expect("registry writer");
        let current = self.snapshot();
        let client_id = loop {
            let candidate = generate_client_id(registration.client_type);
            if !current.contains_key(&candidate) {
                break candidate;
            }
        };
        let record = ClientRecord {
            client_id,
            client_type: registration.client_type,
            redirect_uri: registration.redirect_uri,
            assertion_verification_uri: registration.assertion_verification_uri,
            backup_jwks: registration.backup_jwks,
            registered_at: self.clock.now(),
        };
        check_record(&record, self.policy)?;
        self.commit(current, record.clone())?;
        Ok(record)
    }

    /// Inserts a record with a caller-chosen id (fixtures, migrations).
    pub fn insert_record(&self, record: ClientRecord) -> Result<(), RegistryError> {
        check_record(&record, self.policy)?;
        let _guard = self.writer.lock().expect("registry writer");
        let current = self.snapshot();
        if current.contains_key(&record.client_id) {
            return Err(RegistryError::DuplicateClient(record.client_id));
        }
        self.commit(current, record)
    }

    fn commit(&self, current: Snapshot, record: ClientRecord) -> Result<(), RegistryError> {
        let mut next = (*current).clone();
        next.insert(record.client_id.clone(), record);
        if let Some(path) = &self.path {
            write_atomically(path, &next)?;
        }
        *self.snapshot.write().expect("registry lock") = Arc::new(next);
        Ok(())
    }

    pub fn lookup_client(&self, client_id: &str) -> Result<ClientRecord, RegistryError> {
        self.snapshot()
            .get(client_id)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownClient(client_id.to_string()))
    }

    /// Exact string comparison against the registered redirect URI.
    pub fn validate_redirect(&self, client_id: &str, presented: &str) -> Result<bool, RegistryError> {
        Ok(self.lookup_client(client_id)?.redirect_uri == presented)
    }

    pub fn records(&self) -> Vec<ClientRecord> {
        self.snapshot().values().cloned().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records()).expect("records serialize")
    }
}

fn parse_records(text: &str) -> Result<Vec<ClientRecord>, RegistryError> {
    serde_json::from_str(text).map_err(|e| RegistryError::InvalidRecord(e.to_string()))
}

fn write_atomically(path: &Path, records: &BTreeMap<String, ClientRecord>) -> Result<(), RegistryError> {
    let storage = |e: std::io::Error| RegistryError::Storage(e.to_string());
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(storage)?;
    let list: Vec<&ClientRecord> = records.values().collect();
    serde_json::to_writer_pretty(&mut tmp, &list).map_err(|e| storage(e.into()))?;
    tmp.write_all(b"\n").map_err(storage)?;
    tmp.as_file().sync_all().map_err(storage)?;
    tmp.persist(path).map_err(|e| storage(e.error))?;
    Ok(())
}
