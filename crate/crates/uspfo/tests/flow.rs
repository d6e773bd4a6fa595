use std::path::{Path, PathBuf};
use std::sync::Arc;

use uspfo::authz::ConsentDecision;
use uspfo::clock::ManualClock;
use uspfo::report::{instrument_flow, Step};
use uspfo::stack::{ServiceStack, StackOptions};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn stack() -> (ServiceStack, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::starting_now());
    let stack = ServiceStack::from_fixtures(&fixtures(), StackOptions::default().with_clock(clock.clone())).unwrap();
    (stack, clock)
}

#[test]
fn happy_path_counts() {
    let (stack, _) = stack();
    let report = stack.client().unwrap().run_flow().unwrap();
    let m = instrument_flow(&report).unwrap();
    assert_eq!((m.theta, m.phi, m.zeta, m.po), (9, 1, 7, 36));
    assert_eq!(m.backchannel, 1);
    let labels: Vec<_> = report.exchanges().map(|x| x.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "auth_begin",
            "auth_verify",
            "assertion_issue",
            "pushed_authorization",
            "consent",
            "assertion_dpop",
            "token",
            "assertion_dpop",
            "resource"
        ]
    );
}

#[test]
fn token_response_is_not_cacheable() {
    let (stack, _) = stack();
    let report = stack.client().unwrap().run_flow().unwrap();
    let token = report.exchange("token").unwrap();
    assert_eq!(token.response.header("cache-control"), Some("no-store"));
    assert!(token.request.header("dpop").is_some());
}

#[test]
fn cached_auth_token_skips_the_handshake() {
    let (stack, _) = stack();
    let mut client = stack.client().unwrap();
    client.run_flow().unwrap();
    let second = client.run_flow().unwrap();
    let m = instrument_flow(&second).unwrap();
    assert_eq!((m.theta, m.phi), (7, 0));
    assert_eq!(stack.assertion.server_derivations(), 1);
}

#[test]
fn expired_auth_token_triggers_new_handshake() {
    let (stack, clock) = stack();
    let mut client = stack.client().unwrap();
    client.run_flow().unwrap();
    clock.advance(stack.assertion.config().auth_token_ttl);
    let second = client.run_flow().unwrap();
    assert_eq!(instrument_flow(&second).unwrap().phi, 1);
}

#[test]
fn denied_consent_stops_at_c() {
    let (stack, _) = stack();
    let mut config = stack.default_client_config().unwrap();
    config.auto_consent = false;
    let mut client = stack
        .client_for(config)
        .unwrap()
        .with_consent(Arc::new(|_| ConsentDecision::Deny));
    let failure = client.run_flow().unwrap_err();
    assert_eq!(failure.error.step, Step::C);
    assert_eq!(failure.error.code, "access_denied");
    assert!(failure.report.token_response.is_none());
}

#[test]
fn consent_required_without_decider() {
    let (stack, _) = stack();
    let mut config = stack.default_client_config().unwrap();
    config.auto_consent = false;
    let failure = stack.client_for(config).unwrap().run_flow().unwrap_err();
    assert_eq!(failure.error.code, "ConsentRequired");
    // Metrics cover only the exchanges that happened.
    let m = instrument_flow(&failure.report).unwrap();
    assert_eq!(m.theta, 4);
}

#[test]
fn flow_aborted_at_b_reports_partial_metrics() {
    let (stack, _) = stack();
    let mut config = stack.default_client_config().unwrap();
    config.redirect_uri = "https://client.example.org/other".into();
    let failure = stack.client_for(config).unwrap().run_flow().unwrap_err();
    assert_eq!((failure.error.step, failure.error.code.as_str()), (Step::B, "RedirectMismatch"));
    let m = instrument_flow(&failure.report).unwrap();
    assert_eq!((m.theta, m.phi), (4, 1));
    assert_eq!(m.po, 3 * m.theta + 2 * m.phi + m.zeta);
}

#[test]
fn every_assertion_follows_a_verified_session() {
    let (stack, _) = stack();
    let mut client = stack.client().unwrap();
    for _ in 0..3 {
        client.run_flow().unwrap();
    }
    let records = stack.assertion.audit().records();
    let first_verified = records
        .iter()
        .position(|r| r.operation == "verify_session_key" && r.is_ok())
        .expect("a verified session");
    for (i, r) in records.iter().enumerate() {
        if r.is_ok() && (r.operation == "issue_client_assertion" || r.operation == "sign_dpop_proof") {
            assert!(i > first_verified, "{r:?}");
        }
    }
}

#[test]
fn wrong_scope_is_forbidden() {
    let (stack, _) = stack();
    let mut config = stack.default_client_config().unwrap();
    config.endpoints.resource = "https://resource.example.org/resource/admin".into();
    let failure = stack.client_for(config).unwrap().run_flow().unwrap_err();
    assert_eq!((failure.error.step, failure.error.code.as_str()), (Step::F, "InsufficientScope"));
}

#[test]
fn steps_run_in_order() {
    let (stack, _) = stack();
    let report = stack.client().unwrap().run_flow().unwrap();
    let position = |label: &str| report.exchanges().position(|x| x.label == label).unwrap();
    assert!(position("assertion_issue") < position("pushed_authorization"));
    assert!(position("assertion_dpop") < position("token"));
    let steps: Vec<Step> = report.exchanges().map(|x| x.step).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn resource_requires_a_fresh_proof() {
    use uspfo::client::FlowRecorder;
    use uspfo::http::{HttpRequest, Transport};

    let (stack, _) = stack();
    let mut client = stack.client().unwrap();
    let report = client.run_flow().unwrap();
    let token = report.token_response.unwrap().access_token;
    let resource = client.config().endpoints.resource.clone();
    let get = |proof: Option<&str>| {
        let mut req = HttpRequest::get(resource.clone()).with_header("authorization", format!("DPoP {token}"));
        if let Some(p) = proof {
            req = req.with_header("dpop", p);
        }
        stack.network.send(req).unwrap()
    };
    // No bearer fallback.
    assert_eq!(get(None).status, 401);
    let bearer = stack
        .network
        .send(HttpRequest::get(resource.clone()).with_header("authorization", format!("Bearer {token}")))
        .unwrap();
    assert_eq!(bearer.status, 401);
    // The proof used by the flow cannot be replayed.
    let used = report.artifacts.resource_proof.unwrap();
    assert_eq!(get(Some(&used)).error_code().as_deref(), Some("ProofInvalid"));
    let fresh = client
        .request_dpop_proof(&mut FlowRecorder::new(), Step::F, "GET", &resource)
        .unwrap()
        .to_compact();
    assert_eq!(get(Some(&fresh)).status, 200);
}
