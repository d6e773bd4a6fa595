//! Serves an in-process network on one TCP listener. The logical host of a
//! request is recovered from its path.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::Response;
use axum::Router;
use tokio::sync::oneshot;

use crate::http::{HttpRequest, InProcessNetwork, Transport};
use crate::stack::{ASSERTION_ORIGIN, AUTHZ_ORIGIN, RESOURCE_ORIGIN};

const MAX_BODY: usize = 1 << 20;

/// Origin that owns `path`, if any.
pub fn origin_for_path(path: &str) -> Option<&'static str> {
    let first = path.trim_start_matches('/').split('/').next().unwrap_or("");
    match first {
        "auth" | "assertion" | "cert" => Some(ASSERTION_ORIGIN),
        "as" | "consent" | "token" | "jwks" => Some(AUTHZ_ORIGIN),
        "resource" => Some(RESOURCE_ORIGIN),
        _ => None,
    }
}

fn plain(status: StatusCode, text: &str) -> Response {
    let mut r = Response::new(Body::from(text.to_string()));
    *r.status_mut() = status;
    r
}

async fn bridge(State(network): State<Arc<InProcessNetwork>>, request: Request) -> Response {
    let (parts, body) = request.into_parts();
    let path_and_query = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/").to_string();
    let Some(origin) = origin_for_path(parts.uri.path()) else {
        return plain(StatusCode::NOT_FOUND, "no service owns this path");
    };
    let Ok(body) = to_bytes(body, MAX_BODY).await else {
        return plain(StatusCode::PAYLOAD_TOO_LARGE, "request body too large");
    };
    let mut forwarded = HttpRequest::new(parts.method.as_str(), format!("{origin}{path_and_query}"));
    for (name, value) in &parts.headers {
        if let Ok(v) = value.to_str() {
            forwarded = forwarded.with_header(name.as_str(), v);
        }
    }
    forwarded.body = body.to_vec();
    let result = tokio::task::spawn_blocking(move || network.send(forwarded)).await;
    let response = match result {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => return plain(StatusCode::BAD_GATEWAY, &e.to_string()),
        Err(_) => return plain(StatusCode::INTERNAL_SERVER_ERROR, "handler panicked"),
    };
    let mut out = Response::new(Body::from(response.body));
    *out.status_mut() = StatusCode::from_u16(response.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    for (name, value) in response.headers {
        if let (Ok(n), Ok(v)) = (HeaderName::try_from(name), HeaderValue::try_from(value)) {
            out.headers_mut().insert(n, v);
        }
    }
    out
}

pub fn router(network: Arc<InProcessNetwork>) -> Router {
    Router::new().fallback(bridge).with_state(network)
}

/// A server running on its own thread. Dropping the handle stops it.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

/// Binds `addr` and serves in the background.
pub fn spawn(network: Arc<InProcessNetwork>, addr: &str) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let rt = runtime()?;
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let Ok(listener) = tokio::net::TcpListener::from_std(listener) else {
                return;
            };
            let _ = axum::serve(listener, router(network))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Binds `addr` and serves until the process is killed.
pub fn serve_forever(network: Arc<InProcessNetwork>, addr: &str, on_ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_ready(listener.local_addr()?);
        axum::serve(listener, router(network)).await
    })
}
