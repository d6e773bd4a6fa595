//! Minimal HTTP message model shared by every service, plus the transports
//! that carry messages between them.
//!
//! Services implement [`Service`] and never see sockets. [`InProcessNetwork`]
//! routes requests by host inside one process; [`HttpTransport`] sends them
//! over real HTTP to a `uspfo serve` instance.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::sync::{Arc, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

pub const VERIFICATIONS_HEADER: &str = "x-uspfo-verifications";
pub const BACKCHANNEL_HEADER: &str = "x-uspfo-backchannel";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: String,
    pub url: String,
    pub headers: Vec<(String, String)>,
    #[serde(with = "body_text")]
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn new(method: &str, url: impl Into<String>) -> Self {
        HttpRequest {
            method: method.to_string(),
            url: url.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn get(url: impl Into<String>) -> Self {
        Self::new("GET", url)
    }

    pub fn post_json<T: Serialize>(url: impl Into<String>, body: &T) -> Self {
        let mut req = Self::new("POST", url);
        req.body = serde_json::to_vec(body).expect("request bodies serialize");
        req.with_header("content-type", "application/json")
    }

    pub fn post_form<'a>(url: impl Into<String>, fields: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut req = Self::new("POST", url);
        req.body = encode_form(fields).into_bytes();
        req.with_header("content-type", "application/x-www-form-urlencoded")
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_ascii_lowercase(), value.into()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn path(&self) -> String {
        Url::parse(&self.url)
            .map(|u| u.path().to_string())
            .unwrap_or_default()
    }

    pub fn json<T: DeserializeOwned>(&self) -> Result<T, String> {
        serde_json::from_slice(&self.body).map_err(|e| e.to_string())
    }

    /// Decodes an `application/x-www-form-urlencoded` body. Repeated names are
    /// rejected.
    pub fn form(&self) -> Result<HashMap<String, String>, String> {
        let mut out = HashMap::new();
        for (k, v) in url::form_urlencoded::parse(&self.body) {
            if out.insert(k.to_string(), v.to_string()).is_some() {
                return Err(format!("parameter `{k}` repeated"));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    #[serde(with = "body_text")]
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn new(status: u16) -> Self {
        HttpResponse {
            status,
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn json<T: Serialize>(status: u16, body: &T) -> Self {
        let mut resp = Self::new(status).with_header("content-type", "application/json");
        resp.body = serde_json::to_vec(body).expect("response bodies serialize");
        resp
    }

    pub fn text(status: u16, content_type: &str, body: impl Into<String>) -> Self {
        let mut resp = Self::new(status).with_header("content-type", content_type);
        resp.body = body.into().into_bytes();
        resp
    }

    pub fn error(status: u16, code: &str, description: impl Into<String>) -> Self {
        Self::json(
            status,
            &ErrorBody {
                error: code.to_string(),
                error_description: description.into(),
            },
        )
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        let name = name.to_ascii_lowercase();
        self.headers.retain(|(n, _)| *n != name);
        self.headers.push((name, value.into()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn json_body<T: DeserializeOwned>(&self) -> Result<T, String> {
        serde_json::from_slice(&self.body).map_err(|e| e.to_string())
    }

    /// Error code of a JSON error body, if there is one.
    pub fn error_code(&self) -> Option<String> {
        self.json_body::<ErrorBody>().ok().map(|e| e.error)
    }
}

/// Machine-readable error body used by every service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub error_description: String,
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

pub fn encode_form<'a>(fields: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut ser = url::form_urlencoded::Serializer::new(String::new());
    for (k, v) in fields {
        ser.append_pair(k, v);
    }
    ser.finish()
}

mod body_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(body: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(body))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

/// Errors a service can turn into a JSON error response.
pub trait WireError: std::error::Error {
    fn code(&self) -> &'static str;
    fn status(&self) -> u16;

    fn to_response(&self) -> HttpResponse {
        HttpResponse::error(self.status(), self.code(), self.to_string())
    }
}

pub trait Service: Send + Sync {
    fn handle(&self, request: &HttpRequest) -> HttpResponse;
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("invalid request URL `{0}`")]
    InvalidUrl(String),
    #[error("{0} is unreachable")]
    Unreachable(String),
    #[error("transport I/O failure: {0}")]
    Io(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: HttpRequest) -> Result<HttpResponse, TransportError>;
}

fn authority(url: &str) -> Result<(String, String), TransportError> {
    let parsed = Url::parse(url).map_err(|_| TransportError::InvalidUrl(url.to_string()))?;
    let host = parsed
        .host_str()
        .ok_or_else(|| TransportError::InvalidUrl(url.to_string()))?;
    let authority = match parsed.port() {
        Some(port) => format!("{host}:{port}"),
        None => host.to_string(),
    };
    Ok((authority, parsed.path().to_string()))
}

/// Host-routed, in-memory network. Hosts and individual routes can be taken
/// offline to simulate outages.
#[derive(Default)]
pub struct InProcessNetwork {
    hosts: RwLock<HashMap<String, Arc<dyn Service>>>,
    offline_hosts: RwLock<HashSet<String>>,
    offline_routes: RwLock<HashSet<(String, String)>>,
}

impl InProcessNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attaches `service` at the authority of `origin` (e.g.
    /// `https://server.example.org`).
    pub fn attach(&self, origin: &str, service: Arc<dyn Service>) -> Result<(), TransportError> {
        let (authority, _) = authority(origin)?;
        self.hosts.write().expect("hosts lock").insert(authority, service);
        Ok(())
    }

    pub fn set_host_online(&self, origin: &str, online: bool) -> Result<(), TransportError> {
        let (authority, _) = authority(origin)?;
        let mut offline = self.offline_hosts.write().expect("offline lock");
        if online {
            offline.remove(&authority);
        } else {
            offline.insert(authority);
        }
        Ok(())
    }

    /// Enables or disables a single endpoint, e.g. `https://assertion.example.org/cert`.
    pub fn set_route_online(&self, url: &str, online: bool) -> Result<(), TransportError> {
        let key = authority(url)?;
        let mut offline = self.offline_routes.write().expect("offline lock");
        if online {
            offline.remove(&key);
        } else {
            offline.insert(key);
        }
        Ok(())
    }
}

impl Transport for InProcessNetwork {
    fn send(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        let (host, path) = authority(&request.url)?;
        if self.offline_hosts.read().expect("offline lock").contains(&host)
            || self
                .offline_routes
                .read()
                .expect("offline lock")
                .contains(&(host.clone(), path))
        {
            return Err(TransportError::Unreachable(request.url));
        }
        let service = self
            .hosts
            .read()
            .expect("hosts lock")
            .get(&host)
            .cloned()
            .ok_or(TransportError::Unreachable(host))?;
        Ok(service.handle(&request))
    }
}

/// Sends every request to a single `uspfo serve` address over plain HTTP,
/// keeping the original path and query. Logical hosts are recovered by the
/// server from the path.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(addr: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .max_redirects(0)
            .build()
            .into();
        HttpTransport {
            base: format!("http://{addr}"),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        let parsed = Url::parse(&request.url).map_err(|_| TransportError::InvalidUrl(request.url.clone()))?;
        let mut target = format!("{}{}", self.base, parsed.path());
        if let Some(q) = parsed.query() {
            target.push('?');
            target.push_str(q);
        }
        let mut builder = ureq::http::Request::builder()
            .method(request.method.as_str())
            .uri(&target);
        for (name, value) in &request.headers {
            builder = builder.header(name.as_str(), value.as_str());
        }
        let http_request = builder
            .body(request.body.clone())
            .map_err(|e| TransportError::InvalidUrl(e.to_string()))?;
        let mut response = self.agent.run(http_request).map_err(|e| match e {
            ureq::Error::Io(io) => TransportError::Unreachable(format!("{target}: {io}")),
            other => TransportError::Io(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let headers = response
            .headers()
            .iter()
            .map(|(n, v)| (n.as_str().to_string(), v.to_str().unwrap_or_default().to_string()))
            .collect();
        let mut body = Vec::new();
        response
            .body_mut()
            .as_reader()
            .read_to_end(&mut body)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(HttpResponse { status, headers, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl Service for Echo {
        fn handle(&self, request: &HttpRequest) -> HttpResponse {
            HttpResponse::text(200, "text/plain", request.path())
        }
    }

    #[test]
    fn routes_by_host_and_takes_routes_offline() {
        let net = InProcessNetwork::new();
        net.attach("https://a.example.org", Arc::new(Echo)).unwrap();
        let resp = net.send(HttpRequest::get("https://a.example.org/x")).unwrap();
        assert_eq!(resp.body_text(), "/x");
        assert!(matches!(
            net.send(HttpRequest::get("https://b.example.org/x")),
            Err(TransportError::Unreachable(_))
        ));
        net.set_route_online("https://a.example.org/x", false).unwrap();
        assert!(net.send(HttpRequest::get("https://a.example.org/x")).is_err());
        assert!(net.send(HttpRequest::get("https://a.example.org/y")).is_ok());
        net.set_route_online("https://a.example.org/x", true).unwrap();
        net.set_host_online("https://a.example.org", false).unwrap();
        assert!(net.send(HttpRequest::get("https://a.example.org/y")).is_err());
    }

    #[test]
    fn form_round_trip_and_duplicates() {
        let req = HttpRequest::post_form("https://a/", [("state", "a b&c"), ("x", "=")]);
        let form = req.form().unwrap();
        assert_eq!(form["state"], "a b&c");
        assert_eq!(form["x"], "=");
        let dup = HttpRequest::post_form("https://a/", [("a", "1"), ("a", "2")]);
        assert!(dup.form().is_err());
    }

    #[test]
    fn headers_case_insensitive() {
        let req = HttpRequest::get("https://a/").with_header("DPoP", "x");
        assert_eq!(req.header("dpop"), Some("x"));
        let resp = HttpResponse::new(200).with_header("Cache-Control", "no-store");
        assert_eq!(resp.header("cache-control"), Some("no-store"));
    }
}
