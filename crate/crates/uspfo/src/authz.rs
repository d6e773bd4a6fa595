//! Authorization server: pushed authorization with client assertions,
//! programmatic consent, and DPoP-bound token issuance.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;
use uspfo_core::b64::b64url_encode;
use uspfo_core::claims::{
    from_object, is_uuid_v4, random_jti, AccessTokenClaims, Confirmation, ACCESS_TOKEN_TYPE,
    JWT_BEARER_ASSERTION_TYPE,
};
use uspfo_core::dpop::{verify_proof, DpopError};
use uspfo_core::jws::{jws_sign_with_header, jws_verify};
use uspfo_core::pkce::{is_valid_challenge, verify_s256, S256};
use uspfo_core::{Algorithm, JoseHeader, JwkSet, PublicKeyThumbprint, SignedEnvelope, SigningKeyPair};

use crate::assertion::CertificateDocument;
use crate::audit::AuditLog;
use crate::clock::Clock;
use crate::http::{HttpRequest, HttpResponse, Service, Transport, WireError};
use crate::keys::certificate_public_key;
use crate::metering::{metered, record_backchannel, record_verification};
use crate::registry::{ClientRegistry, ClientType, RegistryError};
use crate::replay::JtiReplayCache;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthzConfig {
    pub issuer: String,
    pub token_endpoint: String,
    pub code_ttl: i64,
    pub consent_ttl: i64,
    pub dpop_skew: i64,
    pub jti_window: i64,
    pub access_token_ttl: i64,
    pub refresh_token_ttl: i64,
    pub cert_cache_ttl: i64,
}

impl Default for AuthzConfig {
    fn default() -> Self {
        AuthzConfig {
            issuer: "https://server.example.org".to_string(),
            token_endpoint: "https://server.example.org/token".to_string(),
            code_ttl: 60,
            consent_ttl: 300,
            dpop_skew: 60,
            jti_window: 300,
            access_token_ttl: 2677,
            refresh_token_ttl: 86_400,
            cert_cache_ttl: 300,
        }
    }
}

/// Why a DPoP proof was refused.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DpopRejection {
    #[error("no DPoP proof supplied")]
    Missing,
    #[error("malformed proof: {0}")]
    Malformed(&'static str),
    #[error("proof typ is not dpop+jwt")]
    WrongType,
    #[error("proof signature does not verify")]
    BadSignature,
    #[error("proof key is not registered for this client")]
    KeyNotBoundToClient,
    #[error("htm/htu do not match this request")]
    HtmHtuMismatch,
    #[error("proof iat outside the accepted window")]
    StaleProof,
    #[error("proof jti already seen")]
    DpopReplayed,
}

impl DpopRejection {
    pub fn code(&self) -> &'static str {
        match self {
            DpopRejection::Missing => "Missing",
            DpopRejection::Malformed(_) => "Malformed",
            DpopRejection::WrongType => "WrongType",
            DpopRejection::BadSignature => "BadSignature",
            DpopRejection::KeyNotBoundToClient => "KeyNotBoundToClient",
            DpopRejection::HtmHtuMismatch => "HtmHtuMismatch",
            DpopRejection::StaleProof => "StaleProof",
            DpopRejection::DpopReplayed => "DpopReplayed",
        }
    }
}

impl From<DpopError> for DpopRejection {
    fn from(e: DpopError) -> Self {
        match e {
            DpopError::Malformed(m) => DpopRejection::Malformed(m),
            DpopError::WrongType => DpopRejection::WrongType,
            DpopError::BadSignature => DpopRejection::BadSignature,
            DpopError::HtmHtuMismatch => DpopRejection::HtmHtuMismatch,
            DpopError::StaleProof => DpopRejection::StaleProof,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AuthzError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response_type must be `code`")]
    UnsupportedResponseType,
    #[error("code_challenge_method must be S256")]
    UnsupportedChallengeMethod,
    #[error("unsupported grant_type")]
    UnsupportedGrantType,
    #[error("unknown client `{0}`")]
    UnknownClient(String),
    #[error("client type may not use this flow")]
    UnauthorizedClient,
    #[error("client assertion rejected: {0}")]
    AssertionInvalid(&'static str),
    #[error("client assertion expired")]
    AssertionExpired,
    #[error("client assertion audience is not this token endpoint")]
    AudienceMismatch,
    #[error("client assertion jti already used")]
    JtiReplayed,
    #[error("redirect_uri does not match the registered value")]
    RedirectMismatch,
    #[error("client verification keys unavailable")]
    CertificateUnavailable,
    #[error("unknown consent handle")]
    UnknownHandle,
    #[error("consent handle expired")]
    ConsentExpired,
    #[error("unknown authorization code")]
    InvalidCode,
    #[error("authorization code already used")]
    CodeConsumed,
    #[error("authorization code expired")]
    CodeExpired,
    #[error("code_verifier does not match the code challenge")]
    PkceMismatch,
    #[error("client_id does not match the authorization code")]
    ClientMismatch,
    #[error("DPoP proof rejected: {0}")]
    Dpop(DpopRejection),
    #[error("unknown, expired or rotated refresh token")]
    InvalidRefreshToken,
    #[error("proof key differs from the key bound to the refresh token")]
    JktMismatch,
}

impl From<DpopRejection> for AuthzError {
    fn from(r: DpopRejection) -> Self {
        AuthzError::Dpop(r)
    }
}

impl WireError for AuthzError {
    fn code(&self) -> &'static str {
        match self {
            AuthzError::InvalidRequest(_) => "InvalidRequest",
            AuthzError::UnsupportedResponseType => "UnsupportedResponseType",
            AuthzError::UnsupportedChallengeMethod => "UnsupportedChallengeMethod",
            AuthzError::UnsupportedGrantType => "UnsupportedGrantType",
            AuthzError::UnknownClient(_) => "UnknownClient",
            AuthzError::UnauthorizedClient => "UnauthorizedClient",
            AuthzError::AssertionInvalid(_) => "AssertionInvalid",
            AuthzError::AssertionExpired => "AssertionExpired",
            AuthzError::AudienceMismatch => "AudienceMismatch",
            AuthzError::JtiReplayed => "JtiReplayed",
            AuthzError::RedirectMismatch => "RedirectMismatch",
            AuthzError::CertificateUnavailable => "CertificateUnavailable",
            AuthzError::UnknownHandle => "UnknownHandle",
            AuthzError::ConsentExpired => "ConsentExpired",
            AuthzError::InvalidCode => "InvalidCode",
            AuthzError::CodeConsumed => "CodeConsumed",
            AuthzError::CodeExpired => "CodeExpired",
            AuthzError::PkceMismatch => "PkceMismatch",
            AuthzError::ClientMismatch => "ClientMismatch",
            AuthzError::Dpop(DpopRejection::HtmHtuMismatch) => "HtmHtuMismatch",
            AuthzError::Dpop(DpopRejection::DpopReplayed) => "DpopReplayed",
            AuthzError::Dpop(_) => "DpopInvalid",
            AuthzError::InvalidRefreshToken => "InvalidRefreshToken",
            AuthzError::JktMismatch => "JktMismatch",
        }
    }

    fn status(&self) -> u16 {
        match self {
            AuthzError::UnknownClient(_) => 401,
            AuthzError::UnknownHandle => 404,
            AuthzError::CertificateUnavailable => 502,
            _ => 400,
        }
    }
}

/// Pushed authorization request, field for field as sent on the wire.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorizationRequest {
    pub response_type: String,
    pub state: String,
    pub client_id: String,
    pub redirect_uri: String,
    pub code_challenge: String,
    pub code_challenge_method: String,
    pub scope: String,
    pub client_assertion_type: String,
    pub client_assertion: String,
}

impl AuthorizationRequest {
    pub fn from_form(form: &HashMap<String, String>) -> Result<Self, AuthzError> {
        let field = |name: &str| {
            form.get(name)
                .cloned()
                .ok_or_else(|| AuthzError::InvalidRequest(format!("missing `{name}`")))
        };
        Ok(AuthorizationRequest {
            response_type: field("response_type")?,
            state: field("state")?,
            client_id: field("client_id")?,
            redirect_uri: field("redirect_uri")?,
            code_challenge: field("code_challenge")?,
            code_challenge_method: field("code_challenge_method")?,
            scope: field("scope")?,
            client_assertion_type: field("client_assertion_type")?,
            client_assertion: field("client_assertion")?,
        })
    }

    pub fn form_fields(&self) -> Vec<(&'static str, &str)> {
        vec![
            ("response_type", &self.response_type),
            ("state", &self.state),
            ("client_id", &self.client_id),
            ("redirect_uri", &self.redirect_uri),
            ("code_challenge", &self.code_challenge),
            ("code_challenge_method", &self.code_challenge_method),
            ("scope", &self.scope),
            ("client_assertion_type", &self.client_assertion_type),
            ("client_assertion", &self.client_assertion),
        ]
    }
}

/// Result of a successful pushed authorization: the consent handle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushedAuthorization {
    pub handle: String,
    pub expires_in: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsentDecision {
    Approve,
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentBody {
    pub decision: ConsentDecision,
}

/// Where the user agent would be sent after consent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedirectDirective {
    pub location: String,
}

#[derive(Clone, Debug)]
struct PendingConsent {
    client_id: String,
    redirect_uri: String,
    scope: String,
    code_challenge: String,
    state: String,
    created_at: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthorizationCodeRecord {
    pub code: String,
    pub client_id: String,
    pub redirect_uri: String,
    pub scope: String,
    pub code_challenge: String,
    pub state: String,
    pub issued_at: i64,
    pub consumed: bool,
}

/// Token endpoint parameters. Any field not listed here is ignored, except
/// `client_secret`, which is refused outright.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    pub grant_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redirect_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_verifier: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_token: Option<String>,
}

impl TokenRequest {
    pub fn authorization_code(code: &str, client_id: &str, redirect_uri: &str, code_verifier: &str) -> Self {
        TokenRequest {
            grant_type: "authorization_code".into(),
            code: Some(code.into()),
            client_id: Some(client_id.into()),
            redirect_uri: Some(redirect_uri.into()),
            code_verifier: Some(code_verifier.into()),
            refresh_token: None,
        }
    }

    pub fn refresh(refresh_token: &str) -> Self {
        TokenRequest {
            grant_type: "refresh_token".into(),
            refresh_token: Some(refresh_token.into()),
            ..TokenRequest::default()
        }
    }

    pub fn from_form(form: &HashMap<String, String>) -> Result<Self, AuthzError> {
        if form.contains_key("client_secret") {
            return Err(AuthzError::InvalidRequest("client_secret is not accepted".into()));
        }
        Ok(TokenRequest {
            grant_type: form
                .get("grant_type")
                .cloned()
                .ok_or_else(|| AuthzError::InvalidRequest("missing `grant_type`".into()))?,
            code: form.get("code").cloned(),
            client_id: form.get("client_id").cloned(),
            redirect_uri: form.get("redirect_uri").cloned(),
            code_verifier: form.get("code_verifier").cloned(),
            refresh_token: form.get("refresh_token").cloned(),
        })
    }

    pub fn form_fields(&self) -> Vec<(&'static str, &str)> {
        let mut out = vec![("grant_type", self.grant_type.as_str())];
        for (name, value) in [
            ("code", &self.code),
            ("client_id", &self.client_id),
            ("redirect_uri", &self.redirect_uri),
            ("code_verifier", &self.code_verifier),
            ("refresh_token", &self.refresh_token),
        ] {
            if let Some(v) = value {
                out.push((name, v.as_str()));
            }
        }
        out
    }
}

/// Token endpoint success body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenResponse {
    pub access_token: String,
    pub token_type: String,
    pub expires_in: i64,
    pub refresh_token: String,
}

/// An issued access token and the key it is bound to.
#[derive(Clone, Debug)]
pub struct BoundAccessToken {
    pub token_value: SignedEnvelope,
    pub token_type: String,
    pub jkt: PublicKeyThumbprint,
    pub scope: String,
    pub expires_in: i64,
    pub issued_at: i64,
}

#[derive(Clone, Debug)]
struct RefreshRecord {
    client_id: String,
    scope: String,
    jkt: PublicKeyThumbprint,
    expires_at: i64,
}

struct CachedKeys {
    keys: JwkSet,
    fetched_at: i64,
}

fn random_token(len: usize) -> String {
    let mut bytes = vec![0u8; len];
    OsRng.fill_bytes(&mut bytes);
    b64url_encode(bytes)
}

pub struct AuthorizationServer {
    config: AuthzConfig,
    clock: Arc<dyn Clock>,
    registry: Arc<ClientRegistry>,
    backchannel: Arc<dyn Transport>,
    signing_key: SigningKeyPair,
    pending: Mutex<HashMap<String, PendingConsent>>,
    codes: Mutex<HashMap<String, AuthorizationCodeRecord>>,
    refresh_tokens: Mutex<HashMap<String, RefreshRecord>>,
    assertion_jtis: JtiReplayCache,
    proof_jtis: JtiReplayCache,
    cert_cache: RwLock<HashMap<String, CachedKeys>>,
    cert_refresh: Mutex<()>,
    audit: AuditLog,
}

impl AuthorizationServer {
    /// `backchannel` carries certificate fetches to assertion servers.
    pub fn new(
        config: AuthzConfig,
        clock: Arc<dyn Clock>,
        registry: Arc<ClientRegistry>,
        backchannel: Arc<dyn Transport>,
        signing_key: SigningKeyPair,
    ) -> Self {
        AuthorizationServer {
            assertion_jtis: JtiReplayCache::new(config.jti_window),
            proof_jtis: JtiReplayCache::new(config.jti_window),
            audit: AuditLog::new(clock.clone()),
            config,
            clock,
            registry,
            backchannel,
            signing_key,
            pending: Mutex::new(HashMap::new()),
            codes: Mutex::new(HashMap::new()),
            refresh_tokens: Mutex::new(HashMap::new()),
            cert_cache: RwLock::new(HashMap::new()),
            cert_refresh: Mutex::new(()),
        }
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = audit;
        self
    }

    pub fn config(&self) -> &AuthzConfig {
        &self.config
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn signing_jwks(&self) -> JwkSet {
        JwkSet::new(vec![self.signing_key.public_jwk()])
    }

    pub fn code_record(&self, code: &str) -> Option<AuthorizationCodeRecord> {
        self.codes.lock().expect("codes lock").get(code).cloned()
    }

    pub fn pushed_authorize(&self, request: &AuthorizationRequest) -> Result<PushedAuthorization, AuthzError> {
        let result = self.check_authorization_request(request);
        match &result {
            Ok((jti, _)) => self
                .audit
                .append(Some(&request.client_id), "assertion_verified", "ok", Some(jti)),
            Err(e) => self
                .audit
                .append(Some(&request.client_id), "pushed_authorize", e.code(), None),
        }
        let (jti, now) = result?;
        let handle = random_token(16);
        self.pending.lock().expect("pending lock").insert(
            handle.clone(),
            PendingConsent {
                client_id: request.client_id.clone(),
                redirect_uri: request.redirect_uri.clone(),
                scope: request.scope.clone(),
                code_challenge: request.code_challenge.clone(),
                state: request.state.clone(),
                created_at: now,
            },
        );
        self.audit
            .append(Some(&request.client_id), "consent_pending", "ok", Some(&jti));
        Ok(PushedAuthorization {
            handle,
            expires_in: self.config.consent_ttl,
        })
    }

    /// Every check a pushed request must pass before a consent record may
    /// exist. Returns the assertion jti.
    fn check_authorization_request(&self, request: &AuthorizationRequest) -> Result<(String, i64), AuthzError> {
        if request.response_type != "code" {
            return Err(AuthzError::UnsupportedResponseType);
        }
        if request.code_challenge_method != S256 {
            return Err(AuthzError::UnsupportedChallengeMethod);
        }
        if !is_valid_challenge(&request.code_challenge) {
            return Err(AuthzError::InvalidRequest("code_challenge is not 43 Base64URL characters".into()));
        }
        if request.client_assertion_type != JWT_BEARER_ASSERTION_TYPE {
            return Err(AuthzError::InvalidRequest("unsupported client_assertion_type".into()));
        }
        if request.state.is_empty() {
            return Err(AuthzError::InvalidRequest("empty state".into()));
        }
        let record = self.registry.lookup_client(&request.client_id).map_err(|e| match e {
            RegistryError::UnknownClient(id) => AuthzError::UnknownClient(id),
            other => AuthzError::InvalidRequest(other.to_string()),
        })?;
        if record.client_type != ClientType::Unified {
            return Err(AuthzError::UnauthorizedClient);
        }
        if record.redirect_uri != request.redirect_uri {
            return Err(AuthzError::RedirectMismatch);
        }
        let assertion = SignedEnvelope::parse(&request.client_assertion)
            .map_err(|_| AuthzError::AssertionInvalid("malformed envelope"))?;
        if assertion.header().alg != Algorithm::RS256.as_str() {
            return Err(AuthzError::AssertionInvalid("assertions must be RS256"));
        }
        let keys = self.fetch_client_certificate(&request.client_id)?;
        let mut candidates: Vec<_> = keys.keys.iter().filter(|k| k.kty == "RSA").collect();
        if let Some(kid) = &assertion.header().kid {
            candidates.sort_by_key(|k| k.kid.as_ref() != Some(kid));
        }
        let mut claims = None;
        for jwk in candidates {
            let Ok(key) = jwk.to_public_key() else { continue };
            record_verification();
            if let Ok(c) = jws_verify(&assertion, &key) {
                claims = Some(c);
                break;
            }
        }
        let claims = claims.ok_or(AuthzError::AssertionInvalid("signature does not verify under the client's keys"))?;
        let text = |name: &str| claims.get(name).and_then(|v| v.as_str());
        if text("iss") != Some(request.client_id.as_str()) || text("sub") != Some(request.client_id.as_str()) {
            return Err(AuthzError::AssertionInvalid("iss and sub must equal client_id"));
        }
        if text("client_id").is_some_and(|c| c != request.client_id) {
            return Err(AuthzError::AssertionInvalid("client_id claim differs"));
        }
        if text("aud") != Some(self.config.token_endpoint.as_str()) {
            return Err(AuthzError::AudienceMismatch);
        }
        let now = self.clock.now();
        let exp = claims
            .get("exp")
            .and_then(|v| v.as_i64())
            .ok_or(AuthzError::AssertionInvalid("missing exp"))?;
        if exp <= now {
            return Err(AuthzError::AssertionExpired);
        }
        if claims
            .get("iat")
            .and_then(|v| v.as_i64())
            .is_some_and(|iat| iat > now + self.config.dpop_skew)
        {
            return Err(AuthzError::AssertionInvalid("iat in the future"));
        }
        let jti = text("jti")
            .filter(|j| is_uuid_v4(j))
            .ok_or(AuthzError::AssertionInvalid("jti is not a v4 UUID"))?
            .to_string();
        if !self.assertion_jtis.insert_if_absent(&jti, now, exp) {
            return Err(AuthzError::JtiReplayed);
        }
        Ok((jti, now))
    }

    /// Verification keys for `client_id`: cached, else fetched live from its
    /// assertion verification URI, else its registered backup set.
    pub fn fetch_client_certificate(&self, client_id: &str) -> Result<JwkSet, AuthzError> {
        let record = self
            .registry
            .lookup_client(client_id)
            .map_err(|_| AuthzError::UnknownClient(client_id.to_string()))?;
        if let Some(keys) = self.cached_keys(client_id) {
            return Ok(keys);
        }
        let _refresh = self.cert_refresh.lock().expect("cert refresh lock");
        if let Some(keys) = self.cached_keys(client_id) {
            return Ok(keys);
        }
        let live = record
            .assertion_verification_uri
            .as_deref()
            .ok_or(AuthzError::CertificateUnavailable)
            .and_then(|uri| self.fetch_live(uri, client_id));
        match live {
            Ok(keys) => {
                self.cert_cache.write().expect("cert cache lock").insert(
                    client_id.to_string(),
                    CachedKeys {
                        keys: keys.clone(),
                        fetched_at: self.clock.now(),
                    },
                );
                self.audit
                    .append(Some(client_id), "fetch_client_certificate", "ok", Some("live"));
                Ok(keys)
            }
            Err(_) => match record.backup_jwks {
                Some(backup) if !backup.keys.is_empty() => {
                    self.audit
                        .append(Some(client_id), "fetch_client_certificate", "ok", Some("backup"));
                    Ok(backup.to_public())
                }
                _ => {
                    self.audit
                        .append(Some(client_id), "fetch_client_certificate", "CertificateUnavailable", None);
                    Err(AuthzError::CertificateUnavailable)
                }
            },
        }
    }

    fn cached_keys(&self, client_id: &str) -> Option<JwkSet> {
        let now = self.clock.now();
        self.cert_cache
            .read()
            .expect("cert cache lock")
            .get(client_id)
            .filter(|c| now < c.fetched_at + self.config.cert_cache_ttl)
            .map(|c| c.keys.clone())
    }

    fn fetch_live(&self, uri: &str, client_id: &str) -> Result<JwkSet, AuthzError> {
        record_backchannel();
        let response = self
            .backchannel
            .send(HttpRequest::post_form(uri, [("client_id", client_id)]))
            .map_err(|_| AuthzError::CertificateUnavailable)?;
        if response.status != 200 {
            return Err(AuthzError::CertificateUnavailable);
        }
        let doc: CertificateDocument = response.json_body().map_err(|_| AuthzError::CertificateUnavailable)?;
        let cert_key = certificate_public_key(&doc.x509_pem).map_err(|_| AuthzError::CertificateUnavailable)?;
        let jwks = doc.jwks.to_public();
        if !jwks.public_keys(Algorithm::RS256).contains(&cert_key) {
            return Err(AuthzError::CertificateUnavailable);
        }
        Ok(jwks)
    }

    pub fn grant_consent(&self, handle: &str, decision: ConsentDecision) -> Result<RedirectDirective, AuthzError> {
        let result = self.consent(handle, decision);
        let (client, outcome) = match &result {
            Ok((client, _)) => (Some(client.as_str()), "ok"),
            Err(e) => (None, e.code()),
        };
        self.audit.append(client, "grant_consent", outcome, None);
        result.map(|(_, directive)| directive)
    }

    fn consent(&self, handle: &str, decision: ConsentDecision) -> Result<(String, RedirectDirective), AuthzError> {
        let pending = self
            .pending
            .lock()
            .expect("pending lock")
            .remove(handle)
            .ok_or(AuthzError::UnknownHandle)?;
        let now = self.clock.now();
        if now >= pending.created_at + self.config.consent_ttl {
            return Err(AuthzError::ConsentExpired);
        }
        let mut location = Url::parse(&pending.redirect_uri)
            .map_err(|_| AuthzError::InvalidRequest("registered redirect_uri does not parse".into()))?;
        match decision {
            ConsentDecision::Approve => {
                let code = random_token(16);
                location
                    .query_pairs_mut()
                    .append_pair("code", &code)
                    .append_pair("state", &pending.state);
                let mut codes = self.codes.lock().expect("codes lock");
                let horizon = now - self.config.code_ttl - self.config.jti_window;
                codes.retain(|_, c| c.issued_at > horizon);
                codes.insert(
                    code.clone(),
                    AuthorizationCodeRecord {
                        code,
                        client_id: pending.client_id.clone(),
                        redirect_uri: pending.redirect_uri,
                        scope: pending.scope,
                        code_challenge: pending.code_challenge,
                        state: pending.state,
                        issued_at: now,
                        consumed: false,
                    },
                );
            }
            ConsentDecision::Deny => {
                location
                    .query_pairs_mut()
                    .append_pair("error", "access_denied")
                    .append_pair("state", &pending.state);
            }
        }
        Ok((
            pending.client_id,
            RedirectDirective {
                location: location.to_string(),
            },
        ))
    }

    /// Checks a proof for `htm`/`htu` and requires its key to be one of the
    /// client's registered ES256 keys. Returns the key thumbprint.
    pub fn validate_dpop_proof(
        &self,
        proof: &str,
        htm: &str,
        htu: &str,
        client_keys: &JwkSet,
    ) -> Result<PublicKeyThumbprint, DpopRejection> {
        let envelope = SignedEnvelope::parse(proof).map_err(|_| DpopRejection::Malformed("not a compact JWS"))?;
        record_verification();
        let verified = verify_proof(&envelope, htm, htu, self.clock.now(), self.config.dpop_skew)?;
        let bound = client_keys
            .public_keys(Algorithm::ES256)
            .iter()
            .any(|k| k.thumbprint() == verified.jkt);
        if !bound {
            return Err(DpopRejection::KeyNotBoundToClient);
        }
        self.consume_proof_jti(&verified.claims.jti, verified.claims.iat)?;
        Ok(verified.jkt)
    }

    fn consume_proof_jti(&self, jti: &str, iat: i64) -> Result<(), DpopRejection> {
        let now = self.clock.now();
        if self
            .proof_jtis
            .insert_if_absent(jti, now, iat + self.config.dpop_skew)
        {
            Ok(())
        } else {
            Err(DpopRejection::DpopReplayed)
        }
    }

    /// Token endpoint dispatch on `grant_type`.
    pub fn token(&self, request: &TokenRequest, dpop: Option<&str>) -> Result<TokenResponse, AuthzError> {
        match request.grant_type.as_str() {
            "authorization_code" => self.token_exchange(request, dpop),
            "refresh_token" => {
                let token = request
                    .refresh_token
                    .as_deref()
                    .ok_or_else(|| AuthzError::InvalidRequest("missing `refresh_token`".into()))?;
                self.refresh_exchange(token, dpop)
            }
            _ => {
                self.audit.append(None, "token", "UnsupportedGrantType", None);
                Err(AuthzError::UnsupportedGrantType)
            }
        }
    }

    pub fn token_exchange(&self, request: &TokenRequest, dpop: Option<&str>) -> Result<TokenResponse, AuthzError> {
        let result = self.exchange_code(request, dpop);
        let outcome = match &result {
            Ok(_) => "ok",
            Err(e) => e.code(),
        };
        self.audit
            .append(request.client_id.as_deref(), "token_exchange", outcome, None);
        result.map(|(response, _)| response)
    }

    fn exchange_code(
        &self,
        request: &TokenRequest,
        dpop: Option<&str>,
    ) -> Result<(TokenResponse, BoundAccessToken), AuthzError> {
        let required = |value: &Option<String>, name: &str| {
            value
                .clone()
                .ok_or_else(|| AuthzError::InvalidRequest(format!("missing `{name}`")))
        };
        let code = required(&request.code, "code")?;
        let client_id = required(&request.client_id, "client_id")?;
        let redirect_uri = required(&request.redirect_uri, "redirect_uri")?;
        let verifier = required(&request.code_verifier, "code_verifier")?;
        let now = self.clock.now();
        let record = {
            let codes = self.codes.lock().expect("codes lock");
            let record = codes.get(&code).ok_or(AuthzError::InvalidCode)?;
            if record.consumed {
                return Err(AuthzError::CodeConsumed);
            }
            record.clone()
        };
        if now >= record.issued_at + self.config.code_ttl {
            return Err(AuthzError::CodeExpired);
        }
        if record.client_id != client_id {
            return Err(AuthzError::ClientMismatch);
        }
        if record.redirect_uri != redirect_uri {
            return Err(AuthzError::RedirectMismatch);
        }
        if !verify_s256(&verifier, &record.code_challenge) {
            return Err(AuthzError::PkceMismatch);
        }
        let proof = dpop.ok_or(DpopRejection::Missing)?;
        let keys = self.fetch_client_certificate(&client_id)?;
        let jkt = self.validate_dpop_proof(proof, "POST", &self.config.token_endpoint, &keys)?;
        {
            let mut codes = self.codes.lock().expect("codes lock");
            let stored = codes.get_mut(&code).ok_or(AuthzError::InvalidCode)?;
            if stored.consumed {
                return Err(AuthzError::CodeConsumed);
            }
            stored.consumed = true;
        }
        Ok(self.issue_tokens(&record.client_id, &record.scope, jkt))
    }

    pub fn refresh_exchange(&self, refresh_token: &str, dpop: Option<&str>) -> Result<TokenResponse, AuthzError> {
        let result = self.rotate_refresh(refresh_token, dpop);
        let (client, outcome) = match &result {
            Ok((client, _)) => (Some(client.as_str()), "ok"),
            Err(e) => (None, e.code()),
        };
        self.audit.append(client, "refresh_exchange", outcome, None);
        result.map(|(_, response)| response)
    }

    fn rotate_refresh(&self, refresh_token: &str, dpop: Option<&str>) -> Result<(String, TokenResponse), AuthzError> {
        let now = self.clock.now();
        let record = self
            .refresh_tokens
            .lock()
            .expect("refresh lock")
            .get(refresh_token)
            .filter(|r| now < r.expires_at)
            .cloned()
            .ok_or(AuthzError::InvalidRefreshToken)?;
        let proof = dpop.ok_or(DpopRejection::Missing)?;
        let envelope = SignedEnvelope::parse(proof).map_err(|_| DpopRejection::Malformed("not a compact JWS"))?;
        record_verification();
        let verified = verify_proof(&envelope, "POST", &self.config.token_endpoint, now, self.config.dpop_skew)
            .map_err(DpopRejection::from)?;
        if verified.jkt != record.jkt {
            return Err(AuthzError::JktMismatch);
        }
        self.consume_proof_jti(&verified.claims.jti, verified.claims.iat)?;
        self.refresh_tokens
            .lock()
            .expect("refresh lock")
            .remove(refresh_token)
            .ok_or(AuthzError::InvalidRefreshToken)?;
        let (response, _) = self.issue_tokens(&record.client_id, &record.scope, record.jkt);
        Ok((record.client_id, response))
    }

    fn issue_tokens(&self, client_id: &str, scope: &str, jkt: PublicKeyThumbprint) -> (TokenResponse, BoundAccessToken) {
        let now = self.clock.now();
        let claims = AccessTokenClaims {
            iss: self.config.issuer.clone(),
            sub: client_id.to_string(),
            client_id: client_id.to_string(),
            scope: scope.to_string(),
            iat: now,
            exp: now + self.config.access_token_ttl,
            jti: random_jti(&mut OsRng),
            cnf: Confirmation { jkt: jkt.clone() },
        };
        let header = JoseHeader::new(Algorithm::ES256, ACCESS_TOKEN_TYPE).with_kid(self.signing_key.key_id());
        let token_value = jws_sign_with_header(&claims.to_object(), &self.signing_key, header)
            .expect("signing key algorithm is supported");
        let refresh_token = random_token(32);
        self.refresh_tokens.lock().expect("refresh lock").insert(
            refresh_token.clone(),
            RefreshRecord {
                client_id: client_id.to_string(),
                scope: scope.to_string(),
                jkt: jkt.clone(),
                expires_at: now + self.config.refresh_token_ttl,
            },
        );
        let response = TokenResponse {
            access_token: token_value.to_compact(),
            token_type: "DPoP".to_string(),
            expires_in: self.config.access_token_ttl,
            refresh_token,
        };
        let bound = BoundAccessToken {
            token_value,
            token_type: "DPoP".to_string(),
            jkt,
            scope: scope.to_string(),
            expires_in: self.config.access_token_ttl,
            issued_at: now,
        };
        (response, bound)
    }

    fn route(&self, req: &HttpRequest) -> HttpResponse {
        let path = req.path();
        match (req.method.as_str(), path.as_str()) {
            ("POST", "/as/ufo") => {
                let result = req
                    .form()
                    .map_err(AuthzError::InvalidRequest)
                    .and_then(|form| {
                        if form.contains_key("client_secret") || req.header("authorization").is_some() {
                            return Err(AuthzError::InvalidRequest(
                                "secret-based client authentication is not accepted".into(),
                            ));
                        }
                        AuthorizationRequest::from_form(&form)
                    });
                match result {
                    Ok(request) => match self.pushed_authorize(&request) {
                        Ok(pushed) => HttpResponse::json(201, &pushed).with_header("cache-control", "no-store"),
                        Err(e) => e.to_response(),
                    },
                    Err(e) => {
                        self.audit.append(None, "pushed_authorize", e.code(), None);
                        e.to_response()
                    }
                }
            }
            ("POST", p) if p.starts_with("/consent/") => {
                let handle = &p["/consent/".len()..];
                let decision = match req.json::<ConsentBody>() {
                    Ok(body) => body.decision,
                    Err(e) => {
                        self.audit.append(None, "grant_consent", "InvalidRequest", None);
                        return AuthzError::InvalidRequest(e).to_response();
                    }
                };
                match self.grant_consent(handle, decision) {
                    Ok(directive) => HttpResponse::json(302, &directive).with_header("location", directive.location.clone()),
                    Err(e) => e.to_response(),
                }
            }
            ("POST", "/token") => {
                let result = if req.header("authorization").is_some() {
                    Err(AuthzError::InvalidRequest(
                        "client authentication headers are not accepted".into(),
                    ))
                } else {
                    req.form()
                        .map_err(AuthzError::InvalidRequest)
                        .and_then(|form| TokenRequest::from_form(&form))
                };
                let response = match result {
                    Ok(request) => match self.token(&request, req.header("dpop")) {
                        Ok(tokens) => HttpResponse::json(200, &tokens),
                        Err(e) => e.to_response(),
                    },
                    Err(e) => {
                        self.audit.append(None, "token", e.code(), None);
                        e.to_response()
                    }
                };
                response.with_header("cache-control", "no-store")
            }
            ("GET", "/jwks") => HttpResponse::json(200, &self.signing_jwks()),
            _ => HttpResponse::error(404, "NotFound", format!("no route for {} {path}", req.method)),
        }
    }
}

impl Service for AuthorizationServer {
    fn handle(&self, request: &HttpRequest) -> HttpResponse {
        metered(|| self.route(request))
    }
}

/// Decodes an access token's claims after verifying it under `key`.
pub fn decode_access_token(token: &SignedEnvelope, key: &uspfo_core::PublicKey) -> Option<AccessTokenClaims> {
    from_object(&jws_verify(token, key).ok()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{FlowRecorder, ReferenceClient};
    use crate::clock::ManualClock;
    use crate::report::Step;
    use crate::stack::{ServiceStack, StackOptions};
    use std::path::Path;
    use uspfo_core::PkcePair;

    const STATE: &str = "af0fijsdlkj";
    const VERIFIER: &str = "X3ERFdPnKTKk7aUO3_X87SvykRINAXXwKSOlymaqAnFTb4hjVE4KVzXgeyNbk06SqIC5G4_2zrcoqZ1cF4nz0-beYe04iPdDQ79EmdcOo3Zajo08oQaXi2R5V8Z3Bk5D";
    const CHALLENGE: &str = "GjuFoFczD6KdsLNRpqtbv0dOlGGLUNEX6WTRSAnIZFc";

    fn stack_with(options: StackOptions) -> (ServiceStack, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::starting_now());
        let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
        let stack = ServiceStack::from_fixtures(&fixtures, options.with_clock(clock.clone())).unwrap();
        (stack, clock)
    }

    fn stack() -> (ServiceStack, Arc<ManualClock>) {
        stack_with(StackOptions::default())
    }

    fn request(client: &mut ReferenceClient) -> AuthorizationRequest {
        let assertion = client.request_assertion(&mut FlowRecorder::new()).unwrap();
        let pkce = PkcePair::from_verifier(VERIFIER).unwrap();
        client.authorization_request(&assertion, STATE, &pkce)
    }

    fn approved_code(stack: &ServiceStack, client: &mut ReferenceClient) -> String {
        let pushed = stack.authz.pushed_authorize(&request(client)).unwrap();
        let directive = stack.authz.grant_consent(&pushed.handle, ConsentDecision::Approve).unwrap();
        crate::client::handle_redirect(&directive.location, STATE).unwrap()
    }

    fn token_proof(client: &mut ReferenceClient) -> String {
        client
            .request_dpop_proof(&mut FlowRecorder::new(), Step::D, "POST", "https://server.example.org/token")
            .unwrap()
            .to_compact()
    }

    #[test]
    fn pushed_request_keeps_state_and_challenge() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let req = request(&mut client);
        assert_eq!(req.code_challenge, CHALLENGE);
        let pushed = stack.authz.pushed_authorize(&req).unwrap();
        let directive = stack.authz.grant_consent(&pushed.handle, ConsentDecision::Approve).unwrap();
        assert!(directive.location.starts_with("https://client.example.org/cb?code="));
        assert!(directive.location.ends_with("&state=af0fijsdlkj"));
        let code = crate::client::handle_redirect(&directive.location, STATE).unwrap();
        let record = stack.authz.code_record(&code).unwrap();
        assert_eq!(record.client_id, "UFO_s6Bk8dRkqt3");
        assert_eq!(record.code_challenge, CHALLENGE);
        assert!(!record.consumed);
        let ops: Vec<_> = stack.authz.audit().records().into_iter().map(|r| r.operation).collect();
        let verified = ops.iter().position(|o| o == "assertion_verified").unwrap();
        let pending = ops.iter().position(|o| o == "consent_pending").unwrap();
        assert!(verified < pending);
    }

    #[test]
    fn consent_handles_are_single_use() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let pushed = stack.authz.pushed_authorize(&request(&mut client)).unwrap();
        stack.authz.grant_consent(&pushed.handle, ConsentDecision::Approve).unwrap();
        assert_eq!(
            stack.authz.grant_consent(&pushed.handle, ConsentDecision::Approve).unwrap_err(),
            AuthzError::UnknownHandle
        );
    }

    #[test]
    fn deny_redirects_with_access_denied() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let pushed = stack.authz.pushed_authorize(&request(&mut client)).unwrap();
        let directive = stack.authz.grant_consent(&pushed.handle, ConsentDecision::Deny).unwrap();
        assert_eq!(
            directive.location,
            "https://client.example.org/cb?error=access_denied&state=af0fijsdlkj"
        );
    }

    #[test]
    fn consent_expires() {
        let (stack, clock) = stack();
        let mut client = stack.client().unwrap();
        let pushed = stack.authz.pushed_authorize(&request(&mut client)).unwrap();
        clock.advance(stack.authz.config().consent_ttl);
        assert_eq!(
            stack.authz.grant_consent(&pushed.handle, ConsentDecision::Approve).unwrap_err(),
            AuthzError::ConsentExpired
        );
    }

    #[test]
    fn request_shape_errors() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let base = request(&mut client);
        let mut plain = base.clone();
        plain.code_challenge_method = "plain".into();
        assert_eq!(stack.authz.pushed_authorize(&plain).unwrap_err(), AuthzError::UnsupportedChallengeMethod);
        let mut token = base.clone();
        token.response_type = "token".into();
        assert_eq!(stack.authz.pushed_authorize(&token).unwrap_err(), AuthzError::UnsupportedResponseType);
        let mut unknown = base.clone();
        unknown.client_id = "UFO_missing".into();
        assert_eq!(
            stack.authz.pushed_authorize(&unknown).unwrap_err(),
            AuthzError::UnknownClient("UFO_missing".into())
        );
        // None of the rejected requests consumed the assertion's jti.
        assert!(stack.authz.pushed_authorize(&base).is_ok());
    }

    #[test]
    fn secret_authentication_is_refused() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let req = request(&mut client);
        let mut fields = req.form_fields();
        fields.push(("client_secret", "hunter2"));
        let response = stack.authz.handle(&HttpRequest::post_form("https://server.example.org/as/ufo", fields));
        assert_eq!(response.error_code().as_deref(), Some("InvalidRequest"));
        let basic = HttpRequest::post_form("https://server.example.org/as/ufo", req.form_fields())
            .with_header("authorization", "Basic dXNlcjpwYXNz");
        assert_eq!(stack.authz.handle(&basic).status, 400);
        let mut form = HashMap::new();
        form.insert("grant_type".to_string(), "authorization_code".to_string());
        form.insert("client_secret".to_string(), "x".to_string());
        assert!(matches!(TokenRequest::from_form(&form), Err(AuthzError::InvalidRequest(_))));
    }

    #[test]
    fn certificate_sources_in_order() {
        let (stack, clock) = stack();
        let client_id = "UFO_s6Bk8dRkqt3";
        let sources = |stack: &ServiceStack| -> Vec<Option<String>> {
            stack
                .authz
                .audit()
                .records()
                .into_iter()
                .filter(|r| r.operation == "fetch_client_certificate")
                .map(|r| r.jti)
                .collect()
        };
        // Endpoint down, nothing cached: backup keys.
        stack.set_cert_endpoint_online(false);
        let backup = stack.authz.fetch_client_certificate(client_id).unwrap();
        assert_eq!(sources(&stack), vec![Some("backup".to_string())]);
        // Endpoint back: live fetch, then served from cache.
        stack.set_cert_endpoint_online(true);
        let live = stack.authz.fetch_client_certificate(client_id).unwrap();
        stack.set_cert_endpoint_online(false);
        let cached = stack.authz.fetch_client_certificate(client_id).unwrap();
        assert_eq!(live, cached);
        assert_eq!(sources(&stack).len(), 2);
        assert_eq!(
            backup.public_keys(Algorithm::RS256),
            live.public_keys(Algorithm::RS256)
        );
        // Cache expiry with the endpoint down falls back again.
        clock.advance(stack.authz.config().cert_cache_ttl);
        stack.authz.fetch_client_certificate(client_id).unwrap();
        assert_eq!(sources(&stack).last().unwrap().as_deref(), Some("backup"));
    }

    #[test]
    fn no_certificate_source_left() {
        let (stack, _) = stack_with(StackOptions {
            keep_backup_jwks: false,
            ..StackOptions::default()
        });
        stack.set_cert_endpoint_online(false);
        assert_eq!(
            stack.authz.fetch_client_certificate("UFO_s6Bk8dRkqt3").unwrap_err(),
            AuthzError::CertificateUnavailable
        );
    }

    #[test]
    fn token_exchange_rules() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let code = approved_code(&stack, &mut client);
        let good = TokenRequest::authorization_code(&code, "UFO_s6Bk8dRkqt3", "https://client.example.org/cb", VERIFIER);
        assert_eq!(
            stack.authz.token(&good, None).unwrap_err(),
            AuthzError::Dpop(DpopRejection::Missing)
        );
        let mut wrong_redirect = good.clone();
        wrong_redirect.redirect_uri = Some("https://client.example.org/other".into());
        assert_eq!(
            stack.authz.token(&wrong_redirect, None).unwrap_err(),
            AuthzError::RedirectMismatch
        );
        let proof = token_proof(&mut client);
        let tokens = stack.authz.token(&good, Some(&proof)).unwrap();
        assert_eq!(tokens.token_type, "DPoP");
        assert_eq!(tokens.expires_in, stack.authz.config().access_token_ttl);
        assert!(stack.authz.code_record(&code).unwrap().consumed);
        // A replayed proof is caught even on a fresh code.
        let code2 = approved_code(&stack, &mut client);
        let again = TokenRequest::authorization_code(&code2, "UFO_s6Bk8dRkqt3", "https://client.example.org/cb", VERIFIER);
        assert_eq!(
            stack.authz.token(&again, Some(&proof)).unwrap_err(),
            AuthzError::Dpop(DpopRejection::DpopReplayed)
        );
    }

    #[test]
    fn refresh_tokens_rotate() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let code = approved_code(&stack, &mut client);
        let good = TokenRequest::authorization_code(&code, "UFO_s6Bk8dRkqt3", "https://client.example.org/cb", VERIFIER);
        let first = stack.authz.token(&good, Some(&token_proof(&mut client))).unwrap();
        let second = stack
            .authz
            .token(&TokenRequest::refresh(&first.refresh_token), Some(&token_proof(&mut client)))
            .unwrap();
        assert_ne!(first.refresh_token, second.refresh_token);
        assert_eq!(
            stack
                .authz
                .token(&TokenRequest::refresh(&first.refresh_token), Some(&token_proof(&mut client)))
                .unwrap_err(),
            AuthzError::InvalidRefreshToken
        );
    }

    #[test]
    fn issued_access_tokens_bind_the_proof_key() {
        let (stack, _) = stack();
        let mut client = stack.client().unwrap();
        let code = approved_code(&stack, &mut client);
        let proof = token_proof(&mut client);
        let jkt = SignedEnvelope::parse(&proof).unwrap().header().jwk.clone().unwrap().thumbprint().unwrap();
        let good = TokenRequest::authorization_code(&code, "UFO_s6Bk8dRkqt3", "https://client.example.org/cb", VERIFIER);
        let tokens = stack.authz.token(&good, Some(&proof)).unwrap();
        let envelope = SignedEnvelope::parse(&tokens.access_token).unwrap();
        let key = stack.authz.signing_jwks().public_keys(Algorithm::ES256)[0].clone();
        let claims = decode_access_token(&envelope, &key).unwrap();
        assert_eq!(claims.cnf.jkt, jkt);
        assert_eq!(claims.client_id, "UFO_s6Bk8dRkqt3");
        assert_eq!(claims.exp - claims.iat, 2677);
    }
}
