use std::path::{Path, PathBuf};
use std::sync::Arc;

use uspfo::client::ReferenceClient;
use uspfo::clock::SystemClock;
use uspfo::http::{HttpRequest, HttpTransport, Transport};
use uspfo::report::instrument_flow;
use uspfo::server;
use uspfo::stack::{ServiceStack, StackOptions};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn flow_over_http_matches_in_process() {
    let stack = ServiceStack::from_fixtures(&fixtures(), StackOptions::default()).unwrap();
    let handle = server::spawn(stack.network.clone(), "127.0.0.1:0").unwrap();
    let transport = Arc::new(HttpTransport::new(&handle.addr.to_string()));
    let config = stack.default_client_config().unwrap();
    let mut client = ReferenceClient::from_config(config, transport.clone(), Arc::new(SystemClock)).unwrap();
    let report = client.run_flow().unwrap();
    let m = instrument_flow(&report).unwrap();
    assert_eq!((m.theta, m.phi, m.zeta), (9, 1, 7));
    let consent = report.exchange("consent").unwrap();
    assert_eq!(consent.response.status, 302);
    assert!(consent.response.header("location").unwrap().contains("code="));

    let missing = transport.send(HttpRequest::get("https://x.example/nowhere")).unwrap();
    assert_eq!(missing.status, 404);
    let unauth = transport
        .send(HttpRequest::get("https://resource.example.org/resource/profile"))
        .unwrap();
    assert_eq!(unauth.status, 401);
    assert!(unauth.header("www-authenticate").unwrap().starts_with("DPoP"));
}
