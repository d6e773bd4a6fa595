//! Adversary scenarios. Each one runs against a freshly built stack, takes
//! what an honest flow exposes on the wire, perturbs one artifact and
//! checks which error comes back and at which step.
//!
//! Interception is modelled as reading an honest client's transcript; no
//! network-level machinery is involved.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uspfo_core::b64::{b64url_decode, b64url_encode};
use uspfo_core::claims::{random_jti, DpopPayload, DPOP_JWT_TYPE, JWT_TYPE};
use uspfo_core::jws::{jws_sign, jws_sign_with_header, JoseHeader};
use uspfo_core::{Algorithm, PkcePair, SignedEnvelope, SigningKeyPair};

use crate::authz::{ConsentDecision, TokenRequest, TokenResponse};
use crate::client::{error_from_response, generate_pkce_pair, handle_redirect, FlowRecorder, ReferenceClient};
use crate::clock::{Clock, ManualClock};
use crate::http::{HttpRequest, HttpResponse, Transport};
use crate::keys::KeyRing;
use crate::report::{Exchange, FlowError, FlowReport, Step};
use crate::stack::{ServiceStack, StackOptions, TOKEN_ENDPOINT};

const ATTACKER_RS256_KID: &str = "attacker#rs256";
const ATTACKER_ES256_KID: &str = "attacker#es256";
const REDACTED: &str = "[redacted]";

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("environment setup failed: {0}")]
    EnvironmentSetupFailed(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

impl AttackError {
    pub fn code(&self) -> &'static str {
        match self {
            AttackError::EnvironmentSetupFailed(_) => "EnvironmentSetupFailed",
            AttackError::UnknownScenario(_) => "UnknownScenario",
        }
    }
}

/// What an attack step ended with, short of success.
enum Halt {
    Rejected(FlowError),
    Setup(String),
}

impl From<FlowError> for Halt {
    fn from(e: FlowError) -> Self {
        Halt::Rejected(e)
    }
}

trait SetupExt<T> {
    fn setup(self) -> Result<T, Halt>;
}

impl<T, E: std::fmt::Display> SetupExt<T> for Result<T, E> {
    fn setup(self) -> Result<T, Halt> {
        self.map_err(|e| Halt::Setup(e.to_string()))
    }
}

type ScenarioFn = fn(&mut AttackContext) -> Result<(), Halt>;

#[derive(Clone, Debug, Serialize)]
pub struct AttackScenario {
    pub name: &'static str,
    /// The threat this scenario exercises.
    pub threat: &'static str,
    pub perturbation: &'static str,
    /// `None` for the control scenario, which is expected to succeed.
    pub expected_rejection: Option<&'static str>,
    pub expected_stage: Step,
    #[serde(skip)]
    run: ScenarioFn,
}

impl AttackScenario {
    pub fn is_control(&self) -> bool {
        self.expected_rejection.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    RejectedAsExpected,
    WronglyAccepted,
    WrongError,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub outcome: Outcome,
    pub expected_code: Option<String>,
    pub expected_stage: Step,
    pub observed_code: Option<String>,
    pub observed_stage: Option<Step>,
    /// The attacker's own exchanges, with captured credentials redacted.
    pub transcript: Vec<Exchange>,
    pub passed: bool,
}

/// Sends requests on the attacker's behalf and keeps its transcript.
struct Attacker {
    transport: Arc<dyn Transport>,
    transcript: Vec<Exchange>,
    secrets: Vec<String>,
}

impl Attacker {
    fn send(&mut self, step: Step, label: &str, request: HttpRequest) -> Result<HttpResponse, Halt> {
        let response = self
            .transport
            .send(request.clone())
            .map_err(|e| Halt::Rejected(FlowError::new(step, "TransportError", e.to_string())))?;
        self.transcript.push(Exchange {
            step,
            label: label.to_string(),
            request,
            response: response.clone(),
        });
        if response.is_success() || response.status == 302 {
            Ok(response)
        } else {
            Err(Halt::Rejected(error_from_response(step, &response)))
        }
    }

    fn redact(&self, text: &str) -> String {
        self.secrets
            .iter()
            .filter(|s| !s.is_empty())
            .fold(text.to_string(), |acc, s| acc.replace(s.as_str(), REDACTED))
    }

    fn redacted_transcript(&self) -> Vec<Exchange> {
        let headers = |hs: &[(String, String)]| -> Vec<(String, String)> {
            hs.iter().map(|(k, v)| (k.clone(), self.redact(v))).collect()
        };
        self.transcript
            .iter()
            .map(|x| {
                let mut x = x.clone();
                x.request.headers = headers(&x.request.headers);
                x.request.body = self.redact(&String::from_utf8_lossy(&x.request.body)).into_bytes();
                x.response.headers = headers(&x.response.headers);
                x.response.body = self.redact(&x.response.body_text()).into_bytes();
                x
            })
            .collect()
    }
}

/// An honest client that has been through consent.
struct AuthorizedClient {
    client: ReferenceClient,
    state: String,
    pkce: PkcePair,
    code: String,
}

struct AttackContext {
    stack: ServiceStack,
    clock: Arc<ManualClock>,
    keys: KeyRing,
    attacker: Attacker,
}

impl AttackContext {
    fn new(fixtures: &Path) -> Result<Self, AttackError> {
        let setup = |e: String| AttackError::EnvironmentSetupFailed(e);
        let clock = Arc::new(ManualClock::starting_now());
        let stack = ServiceStack::from_fixtures(fixtures, StackOptions::default().with_clock(clock.clone()))
            .map_err(|e| setup(e.to_string()))?;
        let keys = KeyRing::load(&stack.fixtures().keys()).map_err(|e| setup(e.to_string()))?;
        for kid in [ATTACKER_RS256_KID, ATTACKER_ES256_KID] {
            keys.get(kid).map_err(|e| setup(e.to_string()))?;
        }
        let attacker = Attacker {
            transport: stack.transport(),
            transcript: Vec::new(),
            secrets: Vec::new(),
        };
        Ok(AttackContext {
            stack,
            clock,
            keys,
            attacker,
        })
    }

    fn key(&self, kid: &str) -> SigningKeyPair {
        self.keys.get(kid).expect("checked at setup").clone()
    }

    fn client(&self) -> Result<ReferenceClient, Halt> {
        self.stack.client().setup()
    }

    fn keep_secret(&mut self, value: &str) {
        self.attacker.secrets.push(value.to_string());
    }

    fn keep_tokens(&mut self, tokens: &TokenResponse) {
        self.keep_secret(&tokens.access_token);
        self.keep_secret(&tokens.refresh_token);
    }

    /// Runs a complete honest flow; the result is what an eavesdropper saw.
    fn honest_flow(&mut self) -> Result<FlowReport, Halt> {
        let report = self.client()?.run_flow().map_err(|f| Halt::Setup(f.error.to_string()))?;
        if let Some(tokens) = &report.token_response {
            self.keep_tokens(tokens);
        }
        if let Some(content) = &report.resource_content {
            self.keep_secret(content);
        }
        Ok(report)
    }

    /// Runs an honest client up to and including consent.
    fn honest_code(&mut self) -> Result<AuthorizedClient, Halt> {
        let mut client = self.client()?;
        let mut rec = FlowRecorder::new();
        let assertion = client.request_assertion(&mut rec).setup()?;
        let state = b64url_encode(uuid_bytes());
        let pkce = generate_pkce_pair(&mut OsRng);
        let request = client.authorization_request(&assertion, &state, &pkce);
        let pushed = client.push_authorization(&mut rec, &request).setup()?;
        let location = client
            .submit_consent(&mut rec, &pushed.handle, ConsentDecision::Approve)
            .setup()?;
        let code = handle_redirect(&location, &state).setup()?;
        Ok(AuthorizedClient {
            client,
            state,
            pkce,
            code,
        })
    }

    fn honest_assertion(&mut self) -> Result<(ReferenceClient, SignedEnvelope), Halt> {
        let mut client = self.client()?;
        let assertion = client.request_assertion(&mut FlowRecorder::new()).setup()?;
        Ok((client, assertion))
    }

    fn push(&mut self, client: &ReferenceClient, assertion: &str, redirect_uri: Option<&str>) -> Result<HttpResponse, Halt> {
        let envelope = SignedEnvelope::parse(assertion).setup()?;
        let pkce = generate_pkce_pair(&mut OsRng);
        let mut request = client.authorization_request(&envelope, "af0fijsdlkj", &pkce);
        if let Some(uri) = redirect_uri {
            request.redirect_uri = uri.to_string();
        }
        let http = HttpRequest::post_form(client.config().endpoints.authorize.clone(), request.form_fields());
        self.attacker.send(Step::B, "pushed_authorization", http)
    }

    fn attacker_proof(&self, htm: &str, htu: &str) -> String {
        let key = self.key(ATTACKER_ES256_KID);
        let payload = DpopPayload {
            jti: random_jti(&mut OsRng),
            htm: htm.into(),
            htu: htu.into(),
            iat: self.clock.now(),
        };
        let header = JoseHeader::new(Algorithm::ES256, DPOP_JWT_TYPE).with_jwk(key.public_key().to_jwk());
        jws_sign_with_header(&payload.to_object(), &key, header)
            .expect("ES256 signs")
            .to_compact()
    }

    fn token_request(&mut self, request: &TokenRequest, proof: &str) -> Result<HttpResponse, Halt> {
        let http = HttpRequest::post_form(TOKEN_ENDPOINT, request.form_fields()).with_header("dpop", proof);
        self.attacker.send(Step::E, "token", http)
    }
}

fn uuid_bytes() -> [u8; 16] {
    let mut b = [0u8; 16];
    rand::RngCore::fill_bytes(&mut OsRng, &mut b);
    b
}

fn exchange_request(report: &FlowReport, label: &str) -> Result<HttpRequest, Halt> {
    report
        .exchange(label)
        .map(|x| x.request.clone())
        .ok_or_else(|| Halt::Setup(format!("honest transcript has no `{label}` exchange")))
}

fn redirect_uri_manipulation(ctx: &mut AttackContext) -> Result<(), Halt> {
    let (client, assertion) = ctx.honest_assertion()?;
    ctx.push(&client, &assertion.to_compact(), Some("https://attacker.example.net/cb"))?;
    Ok(())
}

fn csrf_state_swap(ctx: &mut AttackContext) -> Result<(), Halt> {
    // The attacker completes consent in its own session and plants the
    // resulting redirect on the victim, whose state differs.
    let attacker_session = ctx.honest_code()?;
    let victim = ctx.honest_code()?;
    let planted = format!(
        "https://client.example.org/cb?code={}&state={}",
        attacker_session.code, attacker_session.state
    );
    handle_redirect(&planted, &victim.state).map_err(|e| FlowError::new(Step::C, e.code(), e.to_string()))?;
    Ok(())
}

fn assertion_replay(ctx: &mut AttackContext) -> Result<(), Halt> {
    let report = ctx.honest_flow()?;
    let captured = exchange_request(&report, "pushed_authorization")?;
    ctx.attacker.send(Step::B, "pushed_authorization", captured)?;
    Ok(())
}

fn assertion_tamper(ctx: &mut AttackContext) -> Result<(), Halt> {
    let (client, assertion) = ctx.honest_assertion()?;
    let mut payload = b64url_decode(assertion.payload_segment()).setup()?;
    // Flip one bit inside the jti value, keeping the JSON well formed.
    let at = payload
        .windows(6)
        .position(|w| w == b"\"jti\":")
        .ok_or_else(|| Halt::Setup("assertion payload has no jti".into()))?
        + 8;
    payload[at] ^= 0x01;
    let tampered = format!(
        "{}.{}.{}",
        assertion.header_segment(),
        b64url_encode(&payload),
        assertion.signature_segment()
    );
    ctx.push(&client, &tampered, None)?;
    Ok(())
}

fn expired_assertion(ctx: &mut AttackContext) -> Result<(), Halt> {
    let (client, assertion) = ctx.honest_assertion()?;
    let ttl = ctx.stack.assertion.config().assertion_ttl;
    ctx.clock.advance(ttl + 1);
    ctx.push(&client, &assertion.to_compact(), None)?;
    Ok(())
}

fn impersonation_wrong_key(ctx: &mut AttackContext) -> Result<(), Halt> {
    let (client, captured) = ctx.honest_assertion()?;
    let mut claims = captured.unverified_claims().setup()?;
    claims.insert("jti".into(), random_jti(&mut OsRng).into());
    let forged = jws_sign(&claims, &ctx.key(ATTACKER_RS256_KID), JWT_TYPE).setup()?;
    ctx.push(&client, &forged.to_compact(), None)?;
    Ok(())
}

fn code_replay(ctx: &mut AttackContext) -> Result<(), Halt> {
    let report = ctx.honest_flow()?;
    let captured = exchange_request(&report, "token")?;
    ctx.attacker.send(Step::E, "token", captured)?;
    Ok(())
}

fn pkce_wrong_verifier(ctx: &mut AttackContext) -> Result<(), Halt> {
    let mut victim = ctx.honest_code()?;
    let proof = victim
        .client
        .request_dpop_proof(&mut FlowRecorder::new(), Step::D, "POST", TOKEN_ENDPOINT)
        .setup()?;
    // The intercepted code alone: the attacker supplies a verifier of its own.
    let guess = generate_pkce_pair(&mut OsRng);
    let config = victim.client.config().clone();
    let request = TokenRequest::authorization_code(&victim.code, &config.client_id, &config.redirect_uri, guess.code_verifier());
    ctx.token_request(&request, &proof.to_compact())?;
    Ok(())
}

fn stolen_access_token(ctx: &mut AttackContext) -> Result<(), Halt> {
    let report = ctx.honest_flow()?;
    let tokens = report.token_response.clone().ok_or_else(|| Halt::Setup("no tokens".into()))?;
    let resource = ctx.stack.default_client_config().setup()?.endpoints.resource;
    let proof = ctx.attacker_proof("GET", &resource);
    let http = HttpRequest::get(resource)
        .with_header("authorization", format!("DPoP {}", tokens.access_token))
        .with_header("dpop", proof);
    ctx.attacker.send(Step::F, "resource", http)?;
    Ok(())
}

fn stolen_refresh_token(ctx: &mut AttackContext) -> Result<(), Halt> {
    let report = ctx.honest_flow()?;
    let tokens = report.token_response.clone().ok_or_else(|| Halt::Setup("no tokens".into()))?;
    let proof = ctx.attacker_proof("POST", TOKEN_ENDPOINT);
    ctx.token_request(&TokenRequest::refresh(&tokens.refresh_token), &proof)?;
    Ok(())
}

fn dpop_htu_swap(ctx: &mut AttackContext) -> Result<(), Halt> {
    let mut victim = ctx.honest_code()?;
    let config = victim.client.config().clone();
    // A genuine proof, but minted for the resource request.
    let proof = victim
        .client
        .request_dpop_proof(&mut FlowRecorder::new(), Step::F, "GET", &config.endpoints.resource)
        .setup()?;
    let request =
        TokenRequest::authorization_code(&victim.code, &config.client_id, &config.redirect_uri, victim.pkce.code_verifier());
    ctx.token_request(&request, &proof.to_compact())?;
    Ok(())
}

fn unauthenticated_assertion_endpoint(ctx: &mut AttackContext) -> Result<(), Halt> {
    let config = ctx.stack.default_client_config().setup()?;
    let base = config.endpoints.assertion.clone();
    // Start a handshake, skip the session-key step, and present the session
    // id where an auth token belongs.
    let begin = HttpRequest::post_json(
        format!("{base}/auth/begin"),
        &serde_json::json!({ "client_id": config.client_id }),
    );
    let challenge: serde_json::Value = ctx.attacker.send(Step::A, "auth_begin", begin)?.json_body().setup()?;
    let session_id = challenge["session_id"].as_str().unwrap_or_default().to_string();
    let claims = crate::client::build_assertion_request(&config.client_id, &config.endpoints.token);
    let issue = HttpRequest::post_json(format!("{base}/assertion/issue"), &claims)
        .with_header("authorization", format!("Bearer {session_id}"));
    ctx.attacker.send(Step::A, "assertion_issue", issue)?;
    Ok(())
}

fn rate_limit_flood(ctx: &mut AttackContext) -> Result<(), Halt> {
    let config = ctx.stack.default_client_config().setup()?;
    let url = format!("{}/auth/begin", config.endpoints.assertion);
    let body = serde_json::json!({ "client_id": config.client_id });
    let limit = ctx.stack.assertion.config().rate_limit.limit;
    for _ in 0..=limit {
        ctx.attacker.send(Step::A, "auth_begin", HttpRequest::post_json(url.clone(), &body))?;
    }
    Ok(())
}

fn modified_client_app(ctx: &mut AttackContext) -> Result<(), Halt> {
    let config = ctx.stack.default_client_config().setup()?;
    let mut source = config.read_source().setup()?;
    source.extend_from_slice(b"\n// injected\n");
    let mut repackaged = ctx.stack.client_with_source(config, source);
    repackaged.authenticate(&mut FlowRecorder::new())?;
    Ok(())
}

fn attacker_dpop_key(ctx: &mut AttackContext) -> Result<(), Halt> {
    let victim = ctx.honest_code()?;
    let config = victim.client.config().clone();
    let proof = ctx.attacker_proof("POST", TOKEN_ENDPOINT);
    let request =
        TokenRequest::authorization_code(&victim.code, &config.client_id, &config.redirect_uri, victim.pkce.code_verifier());
    ctx.token_request(&request, &proof)?;
    Ok(())
}

fn noop(ctx: &mut AttackContext) -> Result<(), Halt> {
    ctx.honest_flow()?;
    Ok(())
}

pub fn builtin_scenarios() -> Vec<AttackScenario> {
    let s = |name, threat, perturbation, expected, stage, run| AttackScenario {
        name,
        threat,
        perturbation,
        expected_rejection: expected,
        expected_stage: stage,
        run,
    };
    vec![
        s("redirect-uri-manipulation", "maliciously crafted redirect URI",
          "redirect_uri in the pushed request points at an attacker host",
          Some("RedirectMismatch"), Step::B, redirect_uri_manipulation as ScenarioFn),
        s("csrf-state-swap", "improper use of the state parameter",
          "victim receives a redirect carrying the attacker's code and state",
          Some("StateMismatch"), Step::C, csrf_state_swap),
        s("assertion-replay", "stolen signed client assertion",
          "captured pushed authorization request resent verbatim",
          Some("JtiReplayed"), Step::B, assertion_replay),
        s("assertion-tamper", "data tampered in transit",
          "one bit of the assertion payload flipped, signature kept",
          Some("AssertionInvalid"), Step::B, assertion_tamper),
        s("expired-assertion", "stolen assertion used after its lifespan",
          "valid assertion presented after its exp",
          Some("AssertionExpired"), Step::B, expired_assertion),
        s("impersonation-wrong-key", "client impersonation",
          "assertion claims re-signed under an attacker RS256 key",
          Some("AssertionInvalid"), Step::B, impersonation_wrong_key),
        s("code-replay", "authorization code leakage",
          "captured token request resent after the honest exchange",
          Some("CodeConsumed"), Step::E, code_replay),
        s("pkce-wrong-verifier", "intercepted authorization code",
          "token request with the stolen code and a different code_verifier",
          Some("PkceMismatch"), Step::E, pkce_wrong_verifier),
        s("stolen-access-token", "access token theft and replay",
          "valid access token presented with a proof under an attacker key",
          Some("KeyBindingMismatch"), Step::F, stolen_access_token),
        s("stolen-refresh-token", "refresh token theft",
          "refresh grant with the stolen token and an attacker-keyed proof",
          Some("JktMismatch"), Step::E, stolen_refresh_token),
        s("dpop-htu-swap", "proof reuse across endpoints",
          "genuine proof minted for the resource URI presented at /token",
          Some("HtmHtuMismatch"), Step::E, dpop_htu_swap),
        s("unauthenticated-assertion-endpoint", "unauthorized access to the assertion endpoint",
          "assertion requested with a session id in place of an auth token",
          Some("AuthTokenInvalid"), Step::A, unauthenticated_assertion_endpoint),
        s("rate-limit-flood", "denial of service against the assertion server",
          "one more handshake start than the window allows",
          Some("RateLimited"), Step::A, rate_limit_flood),
        s("modified-client-app", "repackaged client application",
          "client source altered after provisioning",
          Some("KeyMismatch"), Step::A, modified_client_app),
        s("attacker-dpop-key", "token request with an unregistered key",
          "honest code exchanged with a proof under an attacker ES256 key",
          Some("DpopInvalid"), Step::E, attacker_dpop_key),
        s("noop", "none (control)",
          "no perturbation; the flow must succeed",
          None, Step::F, noop),
    ]
}

pub fn find_scenario(name: &str) -> Result<AttackScenario, AttackError> {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| AttackError::UnknownScenario(name.to_string()))
}

/// Runs one scenario on a fresh stack built from `fixtures`.
pub fn run_scenario(scenario: &AttackScenario, fixtures: &Path) -> Result<ScenarioResult, AttackError> {
    let mut ctx = AttackContext::new(fixtures)?;
    let halt = (scenario.run)(&mut ctx);
    let transcript = ctx.attacker.redacted_transcript();
    let expected_code = scenario.expected_rejection.map(str::to_string);
    let (outcome, observed) = match halt {
        Err(Halt::Setup(reason)) => return Err(AttackError::EnvironmentSetupFailed(reason)),
        Ok(()) => (Outcome::WronglyAccepted, None),
        Err(Halt::Rejected(e)) => {
            let matches = Some(e.code.as_str()) == scenario.expected_rejection && e.step <= scenario.expected_stage;
            let outcome = if matches {
                Outcome::RejectedAsExpected
            } else {
                Outcome::WrongError
            };
            (outcome, Some(e))
        }
    };
    let passed = if scenario.is_control() {
        outcome == Outcome::WronglyAccepted
    } else {
        outcome == Outcome::RejectedAsExpected
    };
    Ok(ScenarioResult {
        scenario: scenario.name.to_string(),
        outcome,
        expected_code,
        expected_stage: scenario.expected_stage,
        observed_code: observed.as_ref().map(|e| e.code.clone()),
        observed_stage: observed.map(|e| e.step),
        transcript,
        passed,
    })
}

/// Runs `scenarios` in order, or all at once on separate threads.
pub fn run_catalog(
    scenarios: &[AttackScenario],
    fixtures: &Path,
    concurrent: bool,
) -> Vec<Result<ScenarioResult, AttackError>> {
    if !concurrent {
        return scenarios.iter().map(|s| run_scenario(s, fixtures)).collect();
    }
    let fixtures: PathBuf = fixtures.to_path_buf();
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|s| {
                let fixtures = &fixtures;
                scope.spawn(move || run_scenario(s, fixtures))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    })
}
