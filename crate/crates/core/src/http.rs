//! HTTP front ends for the map server and the log stub.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::oneshot;

use crate::api::{
    ApiError, B64Bytes, ConsistencyResponse, EntriesResponse, ErrorBody, InclusionResponse, QueryRequest, SubmitCertRequest,
    SubmitCertResponse, SubmitRevocationResponse,
};
use crate::cert::{GeoCert, RevocationRecord};
use crate::crypto::Hash32;
use crate::log::{LogError, LogStub};
use crate::server::MapServer;

/// Largest accepted request body.
const BODY_LIMIT: usize = 1 << 20;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

fn log_err(e: LogError) -> ApiError {
    match e {
        LogError::IndexOutOfRange { .. } | LogError::InvalidSizes { .. } => ApiError::BadRequest(e.to_string()),
        LogError::Rejected(_) | LogError::Codec(_) | LogError::Cert(_) | LogError::BadSignature { .. } => ApiError::BadRequest(e.to_string()),
        _ => ApiError::Server(e.to_string()),
    }
}

#[derive(Deserialize)]
struct IndexParam {
    index: Option<u64>,
}

#[derive(Deserialize)]
struct RangeParams {
    from: u64,
    to: u64,
}

#[derive(Deserialize)]
struct EntriesParams {
    start: u64,
    end: u64,
}

#[derive(Deserialize)]
struct InclusionParams {
    index: u64,
    size: u64,
}

async fn query(State(s): State<Arc<MapServer>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let binary = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/octet-stream"));
    let req = if binary {
        QueryRequest::decode_binary(&body)?
    } else {
        serde_json::from_slice::<QueryRequest>(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?
    };
    Ok(Json(s.handle_query(&req)?).into_response())
}

async fn smh(State(s): State<Arc<MapServer>>, Query(p): Query<IndexParam>) -> Result<Response, ApiError> {
    Ok(Json(s.get_smh(p.index)?).into_response())
}

async fn consistency(State(s): State<Arc<MapServer>>, Query(p): Query<RangeParams>) -> Result<Response, ApiError> {
    Ok(Json(s.get_consistency(p.from, p.to)?).into_response())
}

async fn consistency_head(State(s): State<Arc<MapServer>>) -> Response {
    Json(s.consistency_head()).into_response()
}

async fn cert(State(s): State<Arc<MapServer>>, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let h = Hash32::from_hex(&hash).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(Json(B64Bytes(s.get_cert(&h)?)).into_response())
}

async fn health() -> &'static str {
    "ok"
}

pub fn map_router(server: Arc<MapServer>) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/smh", get(smh))
        .route("/v1/consistency", get(consistency))
        .route("/v1/consistency-head", get(consistency_head))
        .route("/v1/cert/{hash}", get(cert))
        .route("/health", get(health))
        .layer(axum::extract::DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(server)
}

async fn submit_cert(State(l): State<Arc<LogStub>>, Json(req): Json<SubmitCertRequest>) -> Result<Response, ApiError> {
    let cert = GeoCert::decode(&req.cert.0).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let sct = l.submit_cert(&cert).map_err(log_err)?;
    Ok(Json(SubmitCertResponse { sct }).into_response())
}

async fn submit_revocation(State(l): State<Arc<LogStub>>, Json(rev): Json<RevocationRecord>) -> Result<Response, ApiError> {
    let index = l.submit_revocation(&rev).map_err(log_err)?;
    Ok(Json(SubmitRevocationResponse { index }).into_response())
}

async fn entries(State(l): State<Arc<LogStub>>, Query(p): Query<EntriesParams>) -> Result<Response, ApiError> {
    let es = l.entries(p.start, p.end).map_err(log_err)?;
    Ok(Json(EntriesResponse { entries: es.into_iter().map(B64Bytes).collect() }).into_response())
}

async fn sth(State(l): State<Arc<LogStub>>) -> Response {
    Json(l.sth()).into_response()
}

async fn inclusion(State(l): State<Arc<LogStub>>, Query(p): Query<InclusionParams>) -> Result<Response, ApiError> {
    let proof = l.inclusion_proof(p.index, p.size).map_err(log_err)?;
    Ok(Json(InclusionResponse { index: p.index, size: p.size, proof }).into_response())
}

async fn log_consistency(State(l): State<Arc<LogStub>>, Query(p): Query<RangeParams>) -> Result<Response, ApiError> {
    let proof = l.consistency_proof(p.from, p.to).map_err(log_err)?;
    Ok(Json(ConsistencyResponse { from: p.from, to: p.to, proof }).into_response())
}

pub fn log_router(log: Arc<LogStub>) -> Router {
    Router::new()
        .route("/v1/log/submit-cert", post(submit_cert))
        .route("/v1/log/submit-revocation", post(submit_revocation))
        .route("/v1/log/entries", get(entries))
        .route("/v1/log/sth", get(sth))
        .route("/v1/log/inclusion", get(inclusion))
        .route("/v1/log/consistency", get(log_consistency))
        .route("/health", get(health))
        .layer(axum::extract::DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(log)
}

/// A router served on its own runtime thread.
pub struct HttpHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<std::io::Result<()>>>,
}

impl HttpHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn join(mut self) -> std::io::Result<()> {
        self.thread.take().map_or(Ok(()), |t| t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))))
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Binds `addr` and serves `router` with `workers` runtime threads.
pub fn spawn(router: Router, addr: &str, workers: usize) -> std::io::Result<HttpHandle> {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(workers.max(1)).enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = thread::spawn(move || {
        rt.block_on(async move {
            axum::serve(listener, router)
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(HttpHandle { addr: local, shutdown: Some(tx), thread: Some(thread) })
}
