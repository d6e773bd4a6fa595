//! Headless reference client driving the whole flow.
//!
//! The client holds no private keys: it proves itself to the assertion
//! server with a session key derived from the hash of its own source, and
//! asks that server to sign everything else.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;
use uspfo_core::b64::b64url_encode;
use uspfo_core::claims::{random_jti, ClientAssertionClaims, DPoPProofClaims, JWT_BEARER_ASSERTION_TYPE};
use uspfo_core::pkce::S256;
use uspfo_core::session_key::{derive_session_key, source_digest};
use uspfo_core::{PkcePair, SignedEnvelope};

use crate::assertion::{AuthToken, Challenge};
use crate::authz::{AuthorizationRequest, ConsentBody, ConsentDecision, PushedAuthorization, TokenRequest, TokenResponse};
use crate::clock::Clock;
use crate::http::{HttpRequest, HttpResponse, Transport};
use crate::report::{instrument_flow, Exchange, FlowArtifacts, FlowError, FlowReport, Step, TraceEntry};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    /// Origin of the assertion server, e.g. `https://assertion.example.org`.
    pub assertion: String,
    /// Pushed authorization endpoint.
    pub authorize: String,
    pub token: String,
    /// Full URL of the protected resource to fetch.
    pub resource: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub client_id: String,
    pub endpoints: Endpoints,
    /// The deployed client source whose digest proves integrity. Relative
    /// paths are resolved against the config file's directory.
    pub source_fixture_path: PathBuf,
    pub auto_consent: bool,
    #[serde(default = "default_redirect_uri")]
    pub redirect_uri: String,
    #[serde(default = "default_scope")]
    pub scope: String,
}

fn default_redirect_uri() -> String {
    "https://client.example.org/cb".to_string()
}

fn default_scope() -> String {
    "read".to_string()
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid client config: {0}")]
    Invalid(String),
}

impl ClientConfig {
    /// Loads a config file and resolves `source_fixture_path` against it.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let io = |p: &Path, e: std::io::Error| ConfigError::Io {
            path: p.display().to_string(),
            reason: e.to_string(),
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let mut config: ClientConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if config.source_fixture_path.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.source_fixture_path = base.join(&config.source_fixture_path);
        }
        Ok(config)
    }

    pub fn read_source(&self) -> Result<Vec<u8>, ConfigError> {
        std::fs::read(&self.source_fixture_path).map_err(|e| ConfigError::Io {
            path: self.source_fixture_path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// `POST /consent/{handle}` on the authorization server.
    pub fn consent_endpoint(&self, handle: &str) -> String {
        match Url::parse(&self.endpoints.authorize) {
            Ok(u) => format!("{}/consent/{handle}", u.origin().ascii_serialization()),
            Err(_) => format!("/consent/{handle}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RedirectError {
    #[error("redirect location does not parse")]
    Unparseable,
    #[error("state in redirect does not match the request")]
    StateMismatch,
    #[error("authorization server returned `{0}`")]
    ErrorResponse(String),
    #[error("redirect carries no code")]
    MissingCode,
}

impl RedirectError {
    pub fn code(&self) -> &'static str {
        match self {
            RedirectError::Unparseable => "InvalidRedirect",
            RedirectError::StateMismatch => "StateMismatch",
            RedirectError::ErrorResponse(_) => "ErrorResponse",
            RedirectError::MissingCode => "MissingCode",
        }
    }
}

/// Extracts the authorization code from a redirect location, provided its
/// `state` equals `expected_state` exactly.
pub fn handle_redirect(location: &str, expected_state: &str) -> Result<String, RedirectError> {
    let url = Url::parse(location).map_err(|_| RedirectError::Unparseable)?;
    let param = |name: &str| {
        url.query_pairs()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.into_owned())
    };
    if param("state").as_deref() != Some(expected_state) {
        return Err(RedirectError::StateMismatch);
    }
    if let Some(error) = param("error") {
        return Err(RedirectError::ErrorResponse(error));
    }
    param("code").ok_or(RedirectError::MissingCode)
}

pub fn generate_pkce_pair(rng: &mut (impl RngCore + rand::CryptoRng)) -> PkcePair {
    PkcePair::generate(rng)
}

pub fn build_assertion_request(client_id: &str, token_endpoint: &str) -> ClientAssertionClaims {
    ClientAssertionClaims::new(client_id, token_endpoint, random_jti(&mut OsRng))
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TargetError {
    #[error("`{0}` is not an HTTP method")]
    InvalidMethod(String),
    #[error("`{0}` is not an absolute URI")]
    InvalidTarget(String),
}

impl TargetError {
    pub fn code(&self) -> &'static str {
        "InvalidTarget"
    }
}

pub fn build_dpop_payload(client_id: &str, htm: &str, htu: &str) -> Result<DPoPProofClaims, TargetError> {
    if htm.is_empty() || !htm.bytes().all(|b| b.is_ascii_uppercase()) {
        return Err(TargetError::InvalidMethod(htm.to_string()));
    }
    match Url::parse(htu) {
        Ok(u) if !u.cannot_be_a_base() && u.host().is_some() => {}
        _ => return Err(TargetError::InvalidTarget(htu.to_string())),
    }
    Ok(DPoPProofClaims::new(client_id, htm, htu, random_jti(&mut OsRng)))
}

/// Transcript collected while a flow runs, plus the step marker.
#[derive(Debug, Default)]
pub struct FlowRecorder {
    trace: Vec<TraceEntry>,
    marker: Option<Step>,
}

impl FlowRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the step marker. Steps may repeat but never go backwards.
    pub fn enter(&mut self, step: Step) -> Result<(), FlowError> {
        if self.marker.is_some_and(|m| m > step) {
            return Err(FlowError::new(step, "OutOfOrder", format!("step {step} after {:?}", self.marker)));
        }
        self.marker = Some(step);
        Ok(())
    }

    pub fn marker(&self) -> Option<Step> {
        self.marker
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn exchanges(&self) -> impl Iterator<Item = &Exchange> {
        self.trace.iter().filter_map(|e| match e {
            TraceEntry::Exchange(x) => Some(x),
            _ => None,
        })
    }

    pub fn into_trace(self) -> Vec<TraceEntry> {
        self.trace
    }
}

/// Turns an error response into a [`FlowError`] for `step`.
pub fn error_from_response(step: Step, response: &HttpResponse) -> FlowError {
    let body: Option<crate::http::ErrorBody> = response.json_body().ok();
    let (code, message) = match body {
        Some(b) => (b.error, b.error_description),
        None => (format!("HTTP{}", response.status), response.body_text()),
    };
    FlowError::new(step, &code, message)
}

pub type ConsentDecider = Arc<dyn Fn(&PushedAuthorization) -> ConsentDecision + Send + Sync>;

/// A flow that stopped at some step, with everything recorded up to there.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct FlowFailure {
    pub error: FlowError,
    pub report: Box<FlowReport>,
}

struct CachedAuth {
    token: String,
    expires_at: i64,
}

pub struct ReferenceClient {
    config: ClientConfig,
    source: Vec<u8>,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    consent: Option<ConsentDecider>,
    auth: Option<CachedAuth>,
}

impl ReferenceClient {
    pub fn new(config: ClientConfig, source: Vec<u8>, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Self {
        ReferenceClient {
            config,
            source,
            transport,
            clock,
            consent: None,
            auth: None,
        }
    }

    pub fn from_config(config: ClientConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        let source = config.read_source()?;
        Ok(Self::new(config, source, transport, clock))
    }

    /// Decision used when `auto_consent` is off.
    pub fn with_consent(mut self, decider: ConsentDecider) -> Self {
        self.consent = Some(decider);
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Drops the cached auth token so the next call re-runs the handshake.
    pub fn forget_auth(&mut self) {
        self.auth = None;
    }

    fn send(&self, rec: &mut FlowRecorder, step: Step, label: &str, request: HttpRequest) -> Result<HttpResponse, FlowError> {
        let response = self
            .transport
            .send(request.clone())
            .map_err(|e| FlowError::new(step, "TransportError", e.to_string()))?;
        rec.trace.push(TraceEntry::Exchange(Exchange {
            step,
            label: label.to_string(),
            request,
            response: response.clone(),
        }));
        if response.is_success() || (label == "consent" && response.status == 302) {
            Ok(response)
        } else {
            Err(error_from_response(step, &response))
        }
    }

    fn parse<T: serde::de::DeserializeOwned>(step: Step, response: &HttpResponse) -> Result<T, FlowError> {
        response
            .json_body()
            .map_err(|e| FlowError::new(step, "UnexpectedResponse", e))
    }

    fn parse_jws(step: Step, response: &HttpResponse) -> Result<SignedEnvelope, FlowError> {
        SignedEnvelope::parse(response.body_text().trim())
            .map_err(|e| FlowError::new(step, "UnexpectedResponse", e.to_string()))
    }

    /// Returns a valid auth token, running the handshake if the cached one
    /// is missing or expired.
    pub fn authenticate(&mut self, rec: &mut FlowRecorder) -> Result<String, FlowError> {
        let now = self.clock.now();
        if let Some(auth) = &self.auth {
            if now < auth.expires_at {
                return Ok(auth.token.clone());
            }
        }
        let base = self.config.endpoints.assertion.trim_end_matches('/').to_string();
        let begin = HttpRequest::post_json(
            format!("{base}/auth/begin"),
            &serde_json::json!({ "client_id": self.config.client_id }),
        );
        let challenge: Challenge = Self::parse(Step::A, &self.send(rec, Step::A, "auth_begin", begin)?)?;
        let rand_num = challenge
            .rand_bytes()
            .ok_or_else(|| FlowError::new(Step::A, "UnexpectedResponse", "rand_num is not Base64URL"))?;
        let key = derive_session_key(&rand_num, &source_digest(&self.source));
        rec.trace.push(TraceEntry::DeriveSessionKey { step: Step::A });
        let verify = HttpRequest::post_json(
            format!("{base}/auth/verify"),
            &serde_json::json!({ "session_id": challenge.session_id, "session_key": key.as_str() }),
        );
        let token: AuthToken = Self::parse(Step::A, &self.send(rec, Step::A, "auth_verify", verify)?)?;
        self.auth = Some(CachedAuth {
            token: token.auth_token.clone(),
            expires_at: now + token.expires_in,
        });
        Ok(token.auth_token)
    }

    pub fn request_assertion(&mut self, rec: &mut FlowRecorder) -> Result<SignedEnvelope, FlowError> {
        let claims = build_assertion_request(&self.config.client_id, &self.config.endpoints.token);
        self.request_assertion_with(rec, &claims)
    }

    pub fn request_assertion_with(
        &mut self,
        rec: &mut FlowRecorder,
        claims: &ClientAssertionClaims,
    ) -> Result<SignedEnvelope, FlowError> {
        let token = self.authenticate(rec)?;
        let url = format!("{}/assertion/issue", self.config.endpoints.assertion.trim_end_matches('/'));
        let request = HttpRequest::post_json(url, claims).with_header("authorization", format!("Bearer {token}"));
        Self::parse_jws(Step::A, &self.send(rec, Step::A, "assertion_issue", request)?)
    }

    /// Builds the pushed authorization request for `assertion`.
    pub fn authorization_request(&self, assertion: &SignedEnvelope, state: &str, pkce: &PkcePair) -> AuthorizationRequest {
        AuthorizationRequest {
            response_type: "code".into(),
            state: state.into(),
            client_id: self.config.client_id.clone(),
            redirect_uri: self.config.redirect_uri.clone(),
            code_challenge: pkce.code_challenge().into(),
            code_challenge_method: S256.into(),
            scope: self.config.scope.clone(),
            client_assertion_type: JWT_BEARER_ASSERTION_TYPE.into(),
            client_assertion: assertion.to_compact(),
        }
    }

    pub fn push_authorization(
        &mut self,
        rec: &mut FlowRecorder,
        request: &AuthorizationRequest,
    ) -> Result<PushedAuthorization, FlowError> {
        let http = HttpRequest::post_form(self.config.endpoints.authorize.clone(), request.form_fields());
        Self::parse(Step::B, &self.send(rec, Step::B, "pushed_authorization", http)?)
    }

    /// Submits the consent decision and returns the redirect location.
    pub fn submit_consent(
        &mut self,
        rec: &mut FlowRecorder,
        handle: &str,
        decision: ConsentDecision,
    ) -> Result<String, FlowError> {
        let http = HttpRequest::post_json(self.config.consent_endpoint(handle), &ConsentBody { decision });
        let response = self.send(rec, Step::C, "consent", http)?;
        response
            .header("location")
            .map(str::to_string)
            .ok_or_else(|| FlowError::new(Step::C, "UnexpectedResponse", "consent response has no Location"))
    }

    /// Asks the assertion server for a DPoP proof over `htm`/`htu`.
    pub fn request_dpop_proof(
        &mut self,
        rec: &mut FlowRecorder,
        step: Step,
        htm: &str,
        htu: &str,
    ) -> Result<SignedEnvelope, FlowError> {
        let claims = build_dpop_payload(&self.config.client_id, htm, htu)
            .map_err(|e| FlowError::new(step, e.code(), e.to_string()))?;
        let token = self.authenticate(rec)?;
        let url = format!("{}/assertion/dpop", self.config.endpoints.assertion.trim_end_matches('/'));
        let request = HttpRequest::post_json(url, &claims).with_header("authorization", format!("Bearer {token}"));
        Self::parse_jws(step, &self.send(rec, step, "assertion_dpop", request)?)
    }

    pub fn request_token(
        &mut self,
        rec: &mut FlowRecorder,
        request: &TokenRequest,
        proof: &SignedEnvelope,
    ) -> Result<TokenResponse, FlowError> {
        let http = HttpRequest::post_form(self.config.endpoints.token.clone(), request.form_fields())
            .with_header("dpop", proof.to_compact());
        Self::parse(Step::E, &self.send(rec, Step::E, "token", http)?)
    }

    pub fn fetch_resource(
        &mut self,
        rec: &mut FlowRecorder,
        access_token: &str,
        proof: &SignedEnvelope,
    ) -> Result<String, FlowError> {
        let http = HttpRequest::get(self.config.endpoints.resource.clone())
            .with_header("authorization", format!("DPoP {access_token}"))
            .with_header("dpop", proof.to_compact());
        Ok(self.send(rec, Step::F, "resource", http)?.body_text())
    }

    /// Runs steps A to F once.
    pub fn run_flow(&mut self) -> Result<FlowReport, FlowFailure> {
        let mut rec = FlowRecorder::new();
        let mut artifacts = FlowArtifacts::default();
        let mut tokens = None;
        let result = self.drive(&mut rec, &mut artifacts, &mut tokens);
        let (content, error) = match result {
            Ok(content) => (Some(content), None),
            Err(e) => (None, Some(e)),
        };
        let mut report = FlowReport {
            client_id: self.config.client_id.clone(),
            success: error.is_none(),
            error: error.clone(),
            artifacts,
            token_response: tokens,
            resource_content: content,
            trace: rec.into_trace(),
            metrics: Default::default(),
        };
        if let Ok(m) = instrument_flow(&report) {
            report.metrics = m.metrics();
        }
        match error {
            None => Ok(report),
            Some(error) => Err(FlowFailure {
                error,
                report: Box::new(report),
            }),
        }
    }

    fn drive(
        &mut self,
        rec: &mut FlowRecorder,
        artifacts: &mut FlowArtifacts,
        tokens: &mut Option<TokenResponse>,
    ) -> Result<String, FlowError> {
        rec.enter(Step::A)?;
        let assertion = self.request_assertion(rec)?;
        artifacts.client_assertion = Some(assertion.to_compact());

        rec.enter(Step::B)?;
        let mut nonce = [0u8; 16];
        OsRng.fill_bytes(&mut nonce);
        let state = b64url_encode(nonce);
        let pkce = generate_pkce_pair(&mut OsRng);
        rec.trace.push(TraceEntry::GeneratePkce { step: Step::B });
        artifacts.state = Some(state.clone());
        artifacts.code_verifier = Some(pkce.code_verifier().to_string());
        artifacts.code_challenge = Some(pkce.code_challenge().to_string());
        let request = self.authorization_request(&assertion, &state, &pkce);
        let pushed = self.push_authorization(rec, &request)?;
        artifacts.consent_handle = Some(pushed.handle.clone());

        rec.enter(Step::C)?;
        let decision = if self.config.auto_consent {
            ConsentDecision::Approve
        } else if let Some(decider) = &self.consent {
            decider(&pushed)
        } else {
            return Err(FlowError::new(
                Step::C,
                "ConsentRequired",
                "auto_consent is off and no consent decision was supplied",
            ));
        };
        let location = self.submit_consent(rec, &pushed.handle, decision)?;
        artifacts.redirect_location = Some(location.clone());
        let code = handle_redirect(&location, &state).map_err(|e| {
            let message = e.to_string();
            match e {
                RedirectError::ErrorResponse(code) => FlowError::new(Step::C, &code, message),
                other => FlowError::new(Step::C, other.code(), message),
            }
        })?;
        artifacts.authorization_code = Some(code.clone());

        rec.enter(Step::D)?;
        let token_endpoint = self.config.endpoints.token.clone();
        let proof = self.request_dpop_proof(rec, Step::D, "POST", &token_endpoint)?;
        artifacts.token_proof = Some(proof.to_compact());

        rec.enter(Step::E)?;
        let token_request = TokenRequest::authorization_code(
            &code,
            &self.config.client_id,
            &self.config.redirect_uri,
            pkce.code_verifier(),
        );
        let response = self.request_token(rec, &token_request, &proof)?;
        *tokens = Some(response.clone());

        rec.enter(Step::F)?;
        let resource = self.config.endpoints.resource.clone();
        let proof = self.request_dpop_proof(rec, Step::F, "GET", &resource)?;
        artifacts.resource_proof = Some(proof.to_compact());
        self.fetch_resource(rec, &response.access_token, &proof)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use uspfo_core::claims::is_uuid_v4;
    use uspfo_core::pkce::s256_challenge;

    #[test]
    fn parses_the_sample_authorization_response() {
        let location = "https://client.example.org/cb?code=SplxlQBZeOOYbYSW6xSbIA&state=af0fijsdlkj";
        assert_eq!(handle_redirect(location, "af0fijsdlkj").unwrap(), "SplxlQBZeOOYbYSW6xSbIA");
        assert_eq!(handle_redirect(location, "other").unwrap_err(), RedirectError::StateMismatch);
        let denied = "https://client.example.org/cb?error=access_denied&state=af0fijsdlkj";
        assert_eq!(
            handle_redirect(denied, "af0fijsdlkj").unwrap_err(),
            RedirectError::ErrorResponse("access_denied".into())
        );
        let bare = "https://client.example.org/cb?state=af0fijsdlkj";
        assert_eq!(handle_redirect(bare, "af0fijsdlkj").unwrap_err(), RedirectError::MissingCode);
    }

    #[test]
    fn assertion_request_matches_sample_shape() {
        let claims = build_assertion_request("UFO_s6Bk8dRkqt3", "https://server.example.org/token");
        assert_eq!(claims.alg, "RS256");
        assert_eq!(claims.typ, "JWT");
        assert_eq!(claims.aud, "https://server.example.org/token");
        assert_eq!(claims.client_id, "UFO_s6Bk8dRkqt3");
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let jti = build_assertion_request("c", "https://s/t").jti;
            assert!(is_uuid_v4(&jti));
            assert!(seen.insert(jti));
        }
    }

    #[test]
    fn dpop_payload_validation() {
        let claims = build_dpop_payload("UFO_s6Bk8dRkqt3", "POST", "https://server.example.org/token").unwrap();
        assert_eq!(claims.typ, "dpop+jwt");
        assert_eq!(claims.alg, "ES256");
        assert_eq!(claims.htm, "POST");
        assert!(matches!(
            build_dpop_payload("c", "POST", "not a uri"),
            Err(TargetError::InvalidTarget(_))
        ));
        assert!(build_dpop_payload("c", "post", "https://s/t").is_err());
        let jtis: std::collections::HashSet<_> = (0..1000)
            .map(|_| build_dpop_payload("c", "GET", "https://s/t").unwrap().jti)
            .collect();
        assert_eq!(jtis.len(), 1000);
    }

    #[test]
    fn pkce_pairs_are_fresh_and_consistent() {
        let a = generate_pkce_pair(&mut OsRng);
        let b = generate_pkce_pair(&mut OsRng);
        assert_ne!(a.code_verifier(), b.code_verifier());
        assert_eq!(a.code_verifier().len(), 86);
        assert_eq!(a.code_challenge(), s256_challenge(a.code_verifier()));
    }

    #[test]
    fn recorder_refuses_to_go_backwards() {
        let mut rec = FlowRecorder::new();
        rec.enter(Step::A).unwrap();
        rec.enter(Step::C).unwrap();
        rec.enter(Step::C).unwrap();
        assert_eq!(rec.enter(Step::B).unwrap_err().code, "OutOfOrder");
    }

    #[test]
    fn config_rejects_secrets() {
        let text = r#"{"client_id":"UFO_x","client_secret":"s","endpoints":{"assertion":"https://a","authorize":"https://s/as/ufo",
            "token":"https://s/token","resource":"https://r/resource/p"},"source_fixture_path":"x","auto_consent":true}"#;
        assert!(serde_json::from_str::<ClientConfig>(text).is_err());
    }
}
