//! axum binding for [`Gateway`].
//!
//! Gateway calls block (cold starts sleep, queued requests wait), so every
//! handler hops onto the blocking pool.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::Router;
use tokio::sync::oneshot;

use super::{registry_error_reply, Gateway, Reply, VERSION_HEADER};
use crate::model::ManifestFile;

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut res = (status, self.body).into_response();
        let headers = res.headers_mut();
        headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(self.content_type));
        for (name, value) in self.headers {
            if let Ok(v) = HeaderValue::from_str(&value) {
                headers.insert(name, v);
            }
        }
        res
    }
}

async fn blocking<F>(gw: Arc<Gateway>, f: F) -> Reply
where
    F: FnOnce(&Gateway) -> Reply + Send + 'static,
{
    // Queue waits are bounded by request_timeout inside the gateway; this
    // outer bound also covers slow handlers and pipelines.
    let limit = gw.config().request_timeout + Duration::from_millis(250);
    let task = tokio::task::spawn_blocking(move || f(&gw));
    match tokio::time::timeout(limit, task).await {
        Ok(Ok(reply)) => reply,
        Ok(Err(e)) => Reply::outcome(500, "exception", format!("request task failed: {e}")),
        Err(_) => Reply::outcome(504, "timeout", "request exceeded the gateway timeout"),
    }
}

async fn read_body(gw: &Gateway, body: Body) -> Result<Vec<u8>, Reply> {
    let limit = gw.config().max_body_bytes;
    to_bytes(body, limit).await.map(|b| b.to_vec()).map_err(|_| {
        Reply::outcome(413, "too-costly", format!("body exceeds the {limit}-byte limit"))
    })
}

fn header_str(headers: &HeaderMap, name: &str) -> Option<String> {
    headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_owned)
}

async fn get_function(State(gw): State<Arc<Gateway>>, Path(name): Path<String>) -> Reply {
    gw.handle_get(&name)
}

async fn post_function(
    State(gw): State<Arc<Gateway>>,
    Path(name): Path<String>,
    headers: HeaderMap,
    body: Body,
) -> Reply {
    let content_type = header_str(&headers, header::CONTENT_TYPE.as_str());
    let pin = header_str(&headers, VERSION_HEADER);
    if !super::is_fhir_json(content_type.as_deref()) {
        return gw.handle_post(&name, pin.as_deref(), content_type.as_deref(), &[]);
    }
    let body = match read_body(&gw, body).await {
        Ok(b) => b,
        Err(reply) => return reply,
    };
    blocking(gw, move |g| g.handle_post(&name, pin.as_deref(), content_type.as_deref(), &body)).await
}

async fn list_functions(State(gw): State<Arc<Gateway>>) -> Reply {
    gw.list_functions()
}

async fn healthz() -> Reply {
    Reply::info(200, "informational", "ok")
}

async fn metrics(State(gw): State<Arc<Gateway>>) -> Reply {
    Reply::text(200, "text/plain; version=0.0.4", gw.metrics_text())
}

async fn deliveries(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> Reply {
    gw.handle_deliveries(&id)
}

fn manifest_from(bytes: &[u8]) -> Result<ManifestFile, Reply> {
    let text = std::str::from_utf8(bytes).map_err(|_| Reply::outcome(400, "structure", "manifest is not UTF-8"))?;
    ManifestFile::from_json(text).map_err(|e| Reply::outcome(400, "structure", e.to_string()))
}

async fn register(State(gw): State<Arc<Gateway>>, body: Body) -> Reply {
    let bytes = match read_body(&gw, body).await {
        Ok(b) => b,
        Err(reply) => return reply,
    };
    let file = match manifest_from(&bytes) {
        Ok(f) => f,
        Err(reply) => return reply,
    };
    blocking(gw, move |g| match g.register_file(&file) {
        Ok(endpoint) => Reply::resource(201, endpoint),
        Err(e) => registry_error_reply(&e),
    })
    .await
}

async fn deregister(State(gw): State<Arc<Gateway>>, Path((name, version)): Path<(String, String)>) -> Reply {
    blocking(gw, move |g| match g.deregister(&name, &version) {
        Ok(state) => Reply::info(200, "informational", format!("{name}@{version} is {}", state_name(state))),
        Err(e) => registry_error_reply(&e),
    })
    .await
}

fn state_name(state: crate::registry::EntryState) -> &'static str {
    match state {
        crate::registry::EntryState::Active => "active",
        crate::registry::EntryState::Draining => "draining",
        crate::registry::EntryState::Retired => "retired",
    }
}

async fn validate_pipeline(State(gw): State<Arc<Gateway>>, body: Body) -> Reply {
    let bytes = match read_body(&gw, body).await {
        Ok(b) => b,
        Err(reply) => return reply,
    };
    match manifest_from(&bytes) {
        Ok(file) => gw.validate_pipeline_file(&file),
        Err(reply) => reply,
    }
}

async fn fallback() -> Reply {
    Reply::outcome(404, "not-found", "no such route")
}

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/function/{name}", get(get_function).post(post_function))
        .route("/functions", get(list_functions))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .route("/deliveries/{id}", get(deliveries))
        .route("/registry", post(register))
        .route("/registry/{name}/{version}", delete(deregister))
        .route("/pipelines/validate", post(validate_pipeline))
        .fallback(fallback)
        .layer(DefaultBodyLimit::disable())
        .with_state(gw)
}

/// Calls [`Gateway::tick`] every tick interval until dropped.
fn spawn_ticker(gw: Arc<Gateway>) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut every = tokio::time::interval(gw.tick_interval());
        every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            every.tick().await;
            let g = Arc::clone(&gw);
            let _ = tokio::task::spawn_blocking(move || g.tick()).await;
        }
    })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    gw: Arc<Gateway>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "gateway listening");
    }
    let ticker = spawn_ticker(Arc::clone(&gw));
    let result = axum::serve(listener, router(gw)).with_graceful_shutdown(shutdown).await;
    ticker.abort();
    result
}

/// A server running on its own runtime thread; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free one) and serves in the background.
pub fn spawn(gw: Arc<Gateway>, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("fhirfn-http".into()).spawn(move || {
        runtime.block_on(serve(gw, listener, async {
            let _ = stopped.await;
        }))
    })?;
    Ok(ServerHandle { addr, stop: Some(stop), thread: Some(thread) })
}
