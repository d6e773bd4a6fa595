//! Protected resource server. Serves content only to a DPoP-bound access
//! token presented together with a fresh proof from the bound key.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uspfo_core::claims::{from_object, AccessTokenClaims, ACCESS_TOKEN_TYPE};
use uspfo_core::dpop::verify_proof;
use uspfo_core::jws::jws_verify;
use uspfo_core::{JwkSet, PublicKey, SignedEnvelope};

use crate::audit::AuditLog;
use crate::clock::Clock;
use crate::http::{HttpRequest, HttpResponse, Service, Transport, WireError};
use crate::metering::{metered, record_verification};
use crate::replay::JtiReplayCache;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("access token rejected: {0}")]
    TokenInvalid(&'static str),
    #[error("access token expired")]
    TokenExpired,
    #[error("token scope does not cover `{0}`")]
    InsufficientScope(String),
    #[error("DPoP proof rejected: {0}")]
    ProofInvalid(&'static str),
    #[error("proof key does not match the token's cnf.jkt")]
    KeyBindingMismatch,
    #[error("no resource `{0}`")]
    NotFound(String),
    #[error("resource fixture invalid: {0}")]
    FixtureInvalid(String),
    #[error("authorization server keys unavailable: {0}")]
    KeysUnavailable(String),
}

impl WireError for ResourceError {
    fn code(&self) -> &'static str {
        match self {
            ResourceError::TokenInvalid(_) => "TokenInvalid",
            ResourceError::TokenExpired => "TokenExpired",
            ResourceError::InsufficientScope(_) => "InsufficientScope",
            ResourceError::ProofInvalid(_) => "ProofInvalid",
            ResourceError::KeyBindingMismatch => "KeyBindingMismatch",
            ResourceError::NotFound(_) => "NotFound",
            ResourceError::FixtureInvalid(_) => "FixtureInvalid",
            ResourceError::KeysUnavailable(_) => "KeysUnavailable",
        }
    }

    fn status(&self) -> u16 {
        match self {
            ResourceError::InsufficientScope(_) => 403,
            ResourceError::NotFound(_) => 404,
            ResourceError::FixtureInvalid(_) | ResourceError::KeysUnavailable(_) => 500,
            _ => 401,
        }
    }

    fn to_response(&self) -> HttpResponse {
        let resp = crate::http::HttpResponse::error(self.status(), self.code(), self.to_string());
        match self.status() {
            401 => resp.with_header("www-authenticate", format!("DPoP error=\"{}\"", self.code())),
            _ => resp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectedResource {
    pub resource_id: String,
    pub required_scope: String,
    pub content: String,
}

pub type ResourceTable = HashMap<String, ProtectedResource>;

/// Parses a JSON array of resources into a table keyed by id.
pub fn load_resources(fixture: &str) -> Result<ResourceTable, ResourceError> {
    let list: Vec<ProtectedResource> =
        serde_json::from_str(fixture).map_err(|e| ResourceError::FixtureInvalid(e.to_string()))?;
    let mut table = HashMap::new();
    for resource in list {
        if resource.resource_id.is_empty() {
            return Err(ResourceError::FixtureInvalid("empty resource_id".into()));
        }
        let id = resource.resource_id.clone();
        if table.insert(id.clone(), resource).is_some() {
            return Err(ResourceError::FixtureInvalid(format!("duplicate resource_id `{id}`")));
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceRequest {
    pub method: String,
    pub resource_uri: String,
    pub access_token: Option<String>,
    pub dpop_proof: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceConfig {
    pub origin: String,
    pub dpop_skew: i64,
    pub jti_window: i64,
}

impl Default for ResourceConfig {
    fn default() -> Self {
        ResourceConfig {
            origin: "https://resource.example.org".to_string(),
            dpop_skew: 60,
            jti_window: 300,
        }
    }
}

pub struct ResourceServer {
    config: ResourceConfig,
    clock: Arc<dyn Clock>,
    issuer_keys: Vec<(Option<String>, PublicKey)>,
    resources: ResourceTable,
    proof_jtis: JtiReplayCache,
    audit: AuditLog,
}

impl ResourceServer {
    pub fn new(config: ResourceConfig, clock: Arc<dyn Clock>, issuer_jwks: &JwkSet, resources: ResourceTable) -> Self {
        let issuer_keys = issuer_jwks
            .keys
            .iter()
            .filter_map(|k| k.to_public_key().ok().map(|pk| (k.kid.clone(), pk)))
            .collect();
        ResourceServer {
            proof_jtis: JtiReplayCache::new(config.jti_window),
            audit: AuditLog::new(clock.clone()),
            config,
            clock,
            issuer_keys,
            resources,
        }
    }

    /// Fetches the authorization server's signing keys from `jwks_url` once
    /// and builds the server around them.
    pub fn bootstrap(
        config: ResourceConfig,
        clock: Arc<dyn Clock>,
        transport: &dyn Transport,
        jwks_url: &str,
        resources: ResourceTable,
    ) -> Result<Self, ResourceError> {
        let response = transport
            .send(HttpRequest::get(jwks_url))
            .map_err(|e| ResourceError::KeysUnavailable(e.to_string()))?;
        if response.status != 200 {
            return Err(ResourceError::KeysUnavailable(format!("status {}", response.status)));
        }
        let jwks: JwkSet = response.json_body().map_err(ResourceError::KeysUnavailable)?;
        Ok(Self::new(config, clock, &jwks, resources))
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = audit;
        self
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn resource_uri(&self, resource_id: &str) -> String {
        format!("{}/resource/{resource_id}", self.config.origin)
    }

    pub fn serve_resource(&self, request: &ResourceRequest) -> Result<String, ResourceError> {
        let result = self.check(request);
        let (client, outcome) = match &result {
            Ok((client, _)) => (Some(client.as_str()), "ok"),
            Err(e) => (None, e.code()),
        };
        self.audit.append(client, "serve_resource", outcome, None);
        result.map(|(_, content)| content)
    }

    fn check(&self, request: &ResourceRequest) -> Result<(String, String), ResourceError> {
        let token = request
            .access_token
            .as_deref()
            .ok_or(ResourceError::TokenInvalid("no access token"))?;
        let token = SignedEnvelope::parse(token).map_err(|_| ResourceError::TokenInvalid("malformed token"))?;
        if token.header().typ != ACCESS_TOKEN_TYPE {
            return Err(ResourceError::TokenInvalid("not an access token"));
        }
        let claims = self.verify_token(&token)?;
        let now = self.clock.now();
        if now >= claims.exp {
            return Err(ResourceError::TokenExpired);
        }
        let resource_id = resource_id_from_uri(&request.resource_uri)
            .ok_or_else(|| ResourceError::NotFound(request.resource_uri.clone()))?;
        let resource = self
            .resources
            .get(resource_id)
            .ok_or_else(|| ResourceError::NotFound(resource_id.to_string()))?;
        if !claims.has_scope(&resource.required_scope) {
            return Err(ResourceError::InsufficientScope(resource.required_scope.clone()));
        }
        let proof = request
            .dpop_proof
            .as_deref()
            .ok_or(ResourceError::ProofInvalid("no DPoP proof"))?;
        let proof = SignedEnvelope::parse(proof).map_err(|_| ResourceError::ProofInvalid("malformed proof"))?;
        record_verification();
        let verified = verify_proof(&proof, &request.method, &request.resource_uri, now, self.config.dpop_skew)
            .map_err(|e| ResourceError::ProofInvalid(e.code()))?;
        if verified.jkt != claims.cnf.jkt {
            return Err(ResourceError::KeyBindingMismatch);
        }
        if !self.proof_jtis.insert_if_absent(
            &verified.claims.jti,
            now,
            verified.claims.iat + self.config.dpop_skew,
        ) {
            return Err(ResourceError::ProofInvalid("replayed"));
        }
        Ok((claims.client_id, resource.content.clone()))
    }

    fn verify_token(&self, token: &SignedEnvelope) -> Result<AccessTokenClaims, ResourceError> {
        let kid = token.header().kid.as_deref();
        let key = self
            .issuer_keys
            .iter()
            .find(|(k, _)| kid.is_none() || k.as_deref() == kid)
            .map(|(_, key)| key)
            .ok_or(ResourceError::TokenInvalid("unknown signing key"))?;
        record_verification();
        let claims = jws_verify(token, key).map_err(|_| ResourceError::TokenInvalid("signature check failed"))?;
        from_object(&claims).ok_or(ResourceError::TokenInvalid("unexpected claims"))
    }

    fn route(&self, req: &HttpRequest) -> HttpResponse {
        if req.method != "GET" || !req.path().starts_with("/resource/") {
            return HttpResponse::error(404, "NotFound", "no such route");
        }
        let request = ResourceRequest {
            method: req.method.clone(),
            resource_uri: req.url.clone(),
            access_token: req
                .header("authorization")
                .and_then(|v| v.strip_prefix("DPoP "))
                .map(str::to_string),
            dpop_proof: req.header("dpop").map(str::to_string),
        };
        match self.serve_resource(&request) {
            Ok(content) => HttpResponse::text(200, "text/plain", content).with_header("cache-control", "no-store"),
            Err(e) => e.to_response(),
        }
    }
}

fn resource_id_from_uri(uri: &str) -> Option<&str> {
    let path = uspfo_core::dpop::normalize_htu(uri);
    let idx = path.find("/resource/")?;
    let id = &path[idx + "/resource/".len()..];
    (!id.is_empty() && !id.contains('/')).then_some(id)
}

impl Service for ResourceServer {
    fn handle(&self, request: &HttpRequest) -> HttpResponse {
        metered(|| self.route(request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_resources_rules() {
        let one = r#"[{"resource_id":"profile","required_scope":"read","content":"hi"}]"#;
        assert_eq!(load_resources(one).unwrap().len(), 1);
        assert!(load_resources("[]").unwrap().is_empty());
        let dup = r#"[{"resource_id":"a","required_scope":"read","content":""},
                      {"resource_id":"a","required_scope":"read","content":""}]"#;
        assert!(matches!(load_resources(dup), Err(ResourceError::FixtureInvalid(_))));
        assert!(matches!(load_resources("{"), Err(ResourceError::FixtureInvalid(_))));
    }

    #[test]
    fn resource_ids_from_uris() {
        assert_eq!(resource_id_from_uri("https://r.example/resource/profile"), Some("profile"));
        assert_eq!(resource_id_from_uri("https://r.example/resource/profile?x=1"), Some("profile"));
        assert_eq!(resource_id_from_uri("https://r.example/resource/"), None);
        assert_eq!(resource_id_from_uri("https://r.example/other"), None);
    }

    #[test]
    fn unauthorized_responses_carry_challenge() {
        let resp = ResourceError::KeyBindingMismatch.to_response();
        assert_eq!(resp.status, 401);
        assert_eq!(resp.error_code().as_deref(), Some("KeyBindingMismatch"));
        assert!(resp.header("www-authenticate").unwrap().starts_with("DPoP"));
        assert_eq!(ResourceError::InsufficientScope("read".into()).to_response().status, 403);
    }
}
