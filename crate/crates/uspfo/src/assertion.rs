//! Remote assertion server.
//!
//! Holds each provisioned client's RS256 assertion key and ES256 DPoP key,
//! authenticates the client application with a challenge/response over the
//! hash of its source, and signs assertions and DPoP proofs for it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;
use uspfo_core::b64::{b64url_decode, b64url_encode};
use uspfo_core::claims::{
    from_object, is_uuid_v4, random_jti, AuthTokenClaims, ClientAssertionClaims, DpopPayload, DPOP_JWT_TYPE, JWT_TYPE,
};
use uspfo_core::jws::{jws_sign, jws_sign_with_header, jws_verify};
use uspfo_core::session_key::{derive_session_key, SourceDigest, CHALLENGE_BYTES};
use uspfo_core::{Algorithm, JoseHeader, JsonObject, JwkSet, SessionKey, SignedEnvelope, SigningKeyPair};

use crate::audit::AuditLog;
use crate::clock::Clock;
use crate::http::{HttpRequest, HttpResponse, Service, WireError};
use crate::keys::{self_signed_certificate, KeyError};
use crate::metering::{metered, record_verification};
use crate::ratelimit::{RateLimit, RateLimiter};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssertionConfig {
    pub issuer: String,
    pub challenge_ttl: i64,
    pub auth_token_ttl: i64,
    pub assertion_ttl: i64,
    pub rate_limit: RateLimit,
}

impl Default for AssertionConfig {
    fn default() -> Self {
        AssertionConfig {
            issuer: "https://assertion.example.org".to_string(),
            challenge_ttl: 120,
            auth_token_ttl: 60,
            assertion_ttl: 60,
            rate_limit: RateLimit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AssertionError {
    #[error("client `{0}` is not provisioned at this assertion server")]
    UnknownClient(String),
    #[error("too many authentication attempts")]
    RateLimited,
    #[error("no such authentication session")]
    UnknownSession,
    #[error("authentication session expired")]
    SessionExpired,
    #[error("session key does not match")]
    KeyMismatch,
    #[error("authentication session already used")]
    SessionReused,
    #[error("auth token rejected: {0}")]
    AuthTokenInvalid(&'static str),
    #[error("claims name a different client than the authenticated one")]
    ClientMismatch,
    #[error("jti is not a version-4 UUID")]
    JtiNotUuid,
    #[error("missing claim `{0}`")]
    MissingClaim(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl WireError for AssertionError {
    fn code(&self) -> &'static str {
        match self {
            AssertionError::UnknownClient(_) => "UnknownClient",
            AssertionError::RateLimited => "RateLimited",
            AssertionError::UnknownSession => "UnknownSession",
            AssertionError::SessionExpired => "SessionExpired",
            AssertionError::KeyMismatch => "KeyMismatch",
            AssertionError::SessionReused => "SessionReused",
            AssertionError::AuthTokenInvalid(_) => "AuthTokenInvalid",
            AssertionError::ClientMismatch => "ClientMismatch",
            AssertionError::JtiNotUuid => "JtiNotUuid",
            AssertionError::MissingClaim(_) => "MissingClaim",
            AssertionError::InvalidRequest(_) => "InvalidRequest",
        }
    }

    fn status(&self) -> u16 {
        match self {
            AssertionError::UnknownClient(_) | AssertionError::UnknownSession => 404,
            AssertionError::RateLimited => 429,
            AssertionError::SessionExpired
            | AssertionError::KeyMismatch
            | AssertionError::SessionReused
            | AssertionError::AuthTokenInvalid(_) => 401,
            AssertionError::ClientMismatch => 403,
            _ => 400,
        }
    }
}

/// Everything the assertion server holds for one client application.
#[derive(Clone, Debug)]
pub struct ClientProvision {
    pub client_id: String,
    pub assertion_key: SigningKeyPair,
    pub dpop_key: SigningKeyPair,
    pub source_digest: SourceDigest,
    pub certificate_pem: String,
}

impl ClientProvision {
    pub fn new(
        client_id: &str,
        assertion_key: SigningKeyPair,
        dpop_key: SigningKeyPair,
        source_digest: SourceDigest,
    ) -> Result<Self, KeyError> {
        if assertion_key.algorithm() != Algorithm::RS256 || dpop_key.algorithm() != Algorithm::ES256 {
            return Err(KeyError::InvalidKey {
                kid: client_id.to_string(),
                reason: "expected an RS256 assertion key and an ES256 DPoP key".into(),
            });
        }
        let certificate_pem = self_signed_certificate(&assertion_key, client_id)?;
        Ok(ClientProvision {
            client_id: client_id.to_string(),
            assertion_key,
            dpop_key,
            source_digest,
            certificate_pem,
        })
    }

    pub fn public_jwks(&self) -> JwkSet {
        JwkSet::new(vec![self.assertion_key.public_jwk(), self.dpop_key.public_jwk()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Challenged,
    Verified,
    /// Consumed by a failed key comparison.
    Rejected,
    Expired,
}

#[derive(Clone, Debug)]
pub struct AuthSession {
    pub session_id: String,
    pub client_id: String,
    pub rand_num: [u8; CHALLENGE_BYTES],
    pub issued_at: i64,
    pub state: SessionState,
}

/// Response to `POST /auth/begin`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub session_id: String,
    /// Base64URL of the 32 challenge bytes.
    pub rand_num: String,
}

impl Challenge {
    pub fn rand_bytes(&self) -> Option<Vec<u8>> {
        b64url_decode(&self.rand_num).ok()
    }
}

/// Response to `POST /auth/verify`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub auth_token: String,
    pub expires_in: i64,
}

/// Response to `POST /cert`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateDocument {
    pub x509_pem: String,
    pub jwks: JwkSet,
}

#[derive(Deserialize)]
struct BeginBody {
    client_id: String,
}

#[derive(Deserialize)]
struct VerifyBody {
    session_id: String,
    session_key: String,
}

#[derive(Default)]
struct AuditNote {
    client_id: Option<String>,
    jti: Option<String>,
}

pub struct AssertionServer {
    config: AssertionConfig,
    clock: Arc<dyn Clock>,
    token_key: SigningKeyPair,
    clients: RwLock<HashMap<String, Arc<ClientProvision>>>,
    sessions: Mutex<HashMap<String, AuthSession>>,
    limiter: RateLimiter,
    audit: AuditLog,
    server_derivations: AtomicU64,
}

impl AssertionServer {
    pub fn new(config: AssertionConfig, clock: Arc<dyn Clock>) -> Self {
        let token_key = SigningKeyPair::generate(Algorithm::ES256, "assertion-server", &mut OsRng)
            .expect("P-256 key generation does not fail");
        Self::with_audit(config, clock.clone(), AuditLog::new(clock), token_key)
    }

    pub fn with_audit(config: AssertionConfig, clock: Arc<dyn Clock>, audit: AuditLog, token_key: SigningKeyPair) -> Self {
        AssertionServer {
            limiter: RateLimiter::new(config.rate_limit),
            config,
            clock,
            token_key,
            clients: RwLock::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            audit,
            server_derivations: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &AssertionConfig {
        &self.config
    }

    pub fn provision(&self, provision: ClientProvision) {
        self.clients
            .write()
            .expect("clients lock")
            .insert(provision.client_id.clone(), Arc::new(provision));
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// Public half of the key that signs auth tokens.
    pub fn token_public_key(&self) -> &uspfo_core::PublicKey {
        self.token_key.public_key()
    }

    /// Server-side session-key derivations; mirrors the client's count and is
    /// kept out of the flow metrics.
    pub fn server_derivations(&self) -> u64 {
        self.server_derivations.load(Ordering::SeqCst)
    }

    pub fn session_state(&self, session_id: &str) -> Option<SessionState> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(session_id)
            .map(|s| s.state)
    }

    fn client(&self, client_id: &str) -> Result<Arc<ClientProvision>, AssertionError> {
        self.clients
            .read()
            .expect("clients lock")
            .get(client_id)
            .cloned()
            .ok_or_else(|| AssertionError::UnknownClient(client_id.to_string()))
    }

    fn audited<T>(
        &self,
        operation: &str,
        f: impl FnOnce(&mut AuditNote) -> Result<T, AssertionError>,
    ) -> Result<T, AssertionError> {
        let mut note = AuditNote::default();
        let result = f(&mut note);
        let outcome = match &result {
            Ok(_) => "ok",
            Err(e) => e.code(),
        };
        self.audit
            .append(note.client_id.as_deref(), operation, outcome, note.jti.as_deref());
        result
    }

    pub fn begin_client_auth(&self, client_id: &str) -> Result<Challenge, AssertionError> {
        self.audited("begin_client_auth", |note| {
            note.client_id = Some(client_id.to_string());
            self.client(client_id)?;
            let now = self.clock.now();
            if !self.limiter.check(client_id, now) {
                return Err(AssertionError::RateLimited);
            }
            let mut rand_num = [0u8; CHALLENGE_BYTES];
            OsRng.fill_bytes(&mut rand_num);
            let mut sid = [0u8; 16];
            OsRng.fill_bytes(&mut sid);
            let session_id = b64url_encode(sid);
            let mut sessions = self.sessions.lock().expect("sessions lock");
            let horizon = now - 10 * self.config.challenge_ttl;
            sessions.retain(|_, s| s.issued_at > horizon);
            sessions.insert(
                session_id.clone(),
                AuthSession {
                    session_id: session_id.clone(),
                    client_id: client_id.to_string(),
                    rand_num,
                    issued_at: now,
                    state: SessionState::Challenged,
                },
            );
            Ok(Challenge {
                session_id,
                rand_num: b64url_encode(rand_num),
            })
        })
    }

    /// Compares `presented` with the key derived from the session challenge
    /// and the registered source digest. The session is consumed either way.
    pub fn verify_session_key(&self, session_id: &str, presented: &SessionKey) -> Result<AuthToken, AssertionError> {
        self.audited("verify_session_key", |note| {
            let now = self.clock.now();
            let client_id = {
                let mut sessions = self.sessions.lock().expect("sessions lock");
                let session = sessions.get_mut(session_id).ok_or(AssertionError::UnknownSession)?;
                note.client_id = Some(session.client_id.clone());
                match session.state {
                    SessionState::Verified | SessionState::Rejected => return Err(AssertionError::SessionReused),
                    SessionState::Expired => return Err(AssertionError::SessionExpired),
                    SessionState::Challenged => {}
                }
                if now >= session.issued_at + self.config.challenge_ttl {
                    session.state = SessionState::Expired;
                    return Err(AssertionError::SessionExpired);
                }
                let provision = self.client(&session.client_id)?;
                let expected = derive_session_key(&session.rand_num, &provision.source_digest);
                self.server_derivations.fetch_add(1, Ordering::SeqCst);
                if !expected.ct_eq(presented) {
                    session.state = SessionState::Rejected;
                    return Err(AssertionError::KeyMismatch);
                }
                session.state = SessionState::Verified;
                session.client_id.clone()
            };
            let claims = AuthTokenClaims {
                iss: self.config.issuer.clone(),
                sub: client_id,
                aud: self.config.issuer.clone(),
                sid: session_id.to_string(),
                iat: now,
                exp: now + self.config.auth_token_ttl,
                jti: random_jti(&mut OsRng),
            };
            let token = jws_sign(&claims.to_object(), &self.token_key, JWT_TYPE)
                .expect("token key algorithm is supported");
            Ok(AuthToken {
                auth_token: token.to_compact(),
                expires_in: self.config.auth_token_ttl,
            })
        })
    }

    fn authenticate(&self, auth_token: &str) -> Result<AuthTokenClaims, AssertionError> {
        let envelope =
            SignedEnvelope::parse(auth_token).map_err(|_| AssertionError::AuthTokenInvalid("malformed auth token"))?;
        record_verification();
        let claims = jws_verify(&envelope, self.token_key.public_key())
            .map_err(|_| AssertionError::AuthTokenInvalid("signature check failed"))?;
        let claims: AuthTokenClaims =
            from_object(&claims).ok_or(AssertionError::AuthTokenInvalid("unexpected claims"))?;
        if claims.iss != self.config.issuer || claims.aud != self.config.issuer {
            return Err(AssertionError::AuthTokenInvalid("issued for another audience"));
        }
        if self.clock.now() >= claims.exp {
            return Err(AssertionError::AuthTokenInvalid("expired"));
        }
        Ok(claims)
    }

    /// Signs a client assertion for the authenticated client with its RS256
    /// key. The payload is the requested claims plus `iss`, `sub`, `iat` and
    /// `exp`.
    pub fn issue_client_assertion(
        &self,
        auth_token: &str,
        requested: &ClientAssertionClaims,
    ) -> Result<SignedEnvelope, AssertionError> {
        self.audited("issue_client_assertion", |note| {
            note.jti = Some(requested.jti.clone());
            let session = self.authenticate(auth_token)?;
            note.client_id = Some(session.sub.clone());
            if requested.client_id != session.sub {
                return Err(AssertionError::ClientMismatch);
            }
            if !is_uuid_v4(&requested.jti) {
                return Err(AssertionError::JtiNotUuid);
            }
            if requested.alg != Algorithm::RS256.as_str() {
                return Err(AssertionError::InvalidRequest(format!("alg `{}` is not RS256", requested.alg)));
            }
            if requested.typ != JWT_TYPE {
                return Err(AssertionError::InvalidRequest(format!("typ `{}` is not JWT", requested.typ)));
            }
            if Url::parse(&requested.aud).map_or(true, |u| u.cannot_be_a_base()) {
                return Err(AssertionError::InvalidRequest("aud is not an absolute URI".into()));
            }
            let provision = self.client(&session.sub)?;
            let now = self.clock.now();
            let mut payload = requested.to_object();
            payload.insert("iss".into(), Value::from(session.sub.clone()));
            payload.insert("sub".into(), Value::from(session.sub));
            payload.insert("iat".into(), Value::from(now));
            payload.insert("exp".into(), Value::from(now + self.config.assertion_ttl));
            Ok(jws_sign(&payload, &provision.assertion_key, JWT_TYPE).expect("RS256 is supported"))
        })
    }

    /// Signs a DPoP proof with the client's ES256 key. `body` must carry
    /// string claims `jti`, `htm`, `htu` and `client_id`.
    pub fn sign_dpop_proof(&self, auth_token: &str, body: &JsonObject) -> Result<SignedEnvelope, AssertionError> {
        self.audited("sign_dpop_proof", |note| {
            let session = self.authenticate(auth_token)?;
            note.client_id = Some(session.sub.clone());
            let claim = |name: &str| -> Result<String, AssertionError> {
                match body.get(name).and_then(Value::as_str) {
                    Some(v) if !v.is_empty() => Ok(v.to_string()),
                    _ => Err(AssertionError::MissingClaim(name.to_string())),
                }
            };
            let jti = claim("jti")?;
            note.jti = Some(jti.clone());
            let htm = claim("htm")?;
            let htu = claim("htu")?;
            let client_id = claim("client_id")?;
            if client_id != session.sub {
                return Err(AssertionError::ClientMismatch);
            }
            if !is_uuid_v4(&jti) {
                return Err(AssertionError::JtiNotUuid);
            }
            if body.get("typ").is_some_and(|t| t != DPOP_JWT_TYPE) {
                return Err(AssertionError::InvalidRequest("typ must be dpop+jwt".into()));
            }
            if body.get("alg").is_some_and(|a| a != Algorithm::ES256.as_str()) {
                return Err(AssertionError::InvalidRequest("alg must be ES256".into()));
            }
            if htm.is_empty() || !htm.bytes().all(|b| b.is_ascii_uppercase()) {
                return Err(AssertionError::InvalidRequest("htm is not an HTTP method".into()));
            }
            if Url::parse(&htu).map_or(true, |u| u.cannot_be_a_base()) {
                return Err(AssertionError::InvalidRequest("htu is not an absolute URI".into()));
            }
            let provision = self.client(&session.sub)?;
            let payload = DpopPayload {
                jti,
                htm,
                htu,
                iat: self.clock.now(),
            };
            let mut jwk = provision.dpop_key.public_jwk();
            jwk.kid = None;
            let header = JoseHeader::new(Algorithm::ES256, DPOP_JWT_TYPE).with_jwk(jwk);
            Ok(jws_sign_with_header(&payload.to_object(), &provision.dpop_key, header).expect("ES256 is supported"))
        })
    }

    pub fn serve_certificate(&self, client_id: &str) -> Result<CertificateDocument, AssertionError> {
        self.audited("serve_certificate", |note| {
            note.client_id = Some(client_id.to_string());
            let provision = self.client(client_id)?;
            Ok(CertificateDocument {
                x509_pem: provision.certificate_pem.clone(),
                jwks: provision.public_jwks(),
            })
        })
    }

    fn reject(&self, operation: &str, err: AssertionError) -> HttpResponse {
        self.audit.append(None, operation, err.code(), None);
        err.to_response()
    }

    fn route(&self, req: &HttpRequest) -> HttpResponse {
        if req.method != "POST" {
            return HttpResponse::error(405, "MethodNotAllowed", "use POST");
        }
        match req.path().as_str() {
            "/auth/begin" => match req.json::<BeginBody>() {
                Ok(body) => respond_json(self.begin_client_auth(&body.client_id)),
                Err(e) => self.reject("begin_client_auth", AssertionError::InvalidRequest(e)),
            },
            "/auth/verify" => match req.json::<VerifyBody>() {
                Ok(body) => respond_json(self.verify_session_key(&body.session_id, &SessionKey::new(body.session_key))),
                Err(e) => self.reject("verify_session_key", AssertionError::InvalidRequest(e)),
            },
            "/assertion/issue" => {
                let token = bearer(req);
                match req.json::<ClientAssertionClaims>() {
                    Ok(claims) => respond_jws(self.issue_client_assertion(token, &claims)),
                    Err(e) => self.reject("issue_client_assertion", AssertionError::InvalidRequest(e)),
                }
            }
            "/assertion/dpop" => {
                let token = bearer(req);
                match req.json::<JsonObject>() {
                    Ok(body) => respond_jws(self.sign_dpop_proof(token, &body)),
                    Err(e) => self.reject("sign_dpop_proof", AssertionError::InvalidRequest(e)),
                }
            }
            "/cert" => match req.form() {
                Ok(form) => match form.get("client_id") {
                    Some(id) => respond_json(self.serve_certificate(id)),
                    None => self.reject("serve_certificate", AssertionError::MissingClaim("client_id".into())),
                },
                Err(e) => self.reject("serve_certificate", AssertionError::InvalidRequest(e)),
            },
            other => HttpResponse::error(404, "NotFound", format!("no route for {other}")),
        }
    }
}

fn bearer(req: &HttpRequest) -> &str {
    req.header("authorization")
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("")
}

fn respond_json<T: Serialize>(result: Result<T, AssertionError>) -> HttpResponse {
    match result {
        Ok(body) => HttpResponse::json(200, &body).with_header("cache-control", "no-store"),
        Err(e) => e.to_response(),
    }
}

fn respond_jws(result: Result<SignedEnvelope, AssertionError>) -> HttpResponse {
    match result {
        Ok(jws) => HttpResponse::text(200, "application/jwt", jws.to_compact()).with_header("cache-control", "no-store"),
        Err(e) => e.to_response(),
    }
}

impl Service for AssertionServer {
    fn handle(&self, request: &HttpRequest) -> HttpResponse {
        metered(|| self.route(request))
    }
}
