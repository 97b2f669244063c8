//! HTTP server exposing a backend over the wire protocol.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use dore_core::backend::wire::{
    Context, DetokenizeRequest, DetokenizeResponse, ErrorBody, InfoResponse, NextRequest,
    NextResponse, TokenizeRequest, TokenizeResponse, DETOKENIZE_PATH, INFO_PATH, NEXT_PATH,
    TOKENIZE_PATH,
};
use dore_core::backend::{token_ids, BackendError, LanguageModel};

type Shared = Arc<dyn LanguageModel>;

struct ApiError(BackendError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0 {
            BackendError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(ErrorBody::from(&self.0))).into_response()
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        Self(e)
    }
}

async fn next(
    State(lm): State<Shared>,
    Json(req): Json<NextRequest>,
) -> Result<Json<NextResponse>, ApiError> {
    let ids = match req.context {
        Context::Ids(ids) => ids,
        Context::Text { text } => token_ids(&lm.tokenize(&text)?),
    };
    let dist = lm.next_distribution(&ids, req.top_m)?;
    Ok(Json(NextResponse::from(&dist)))
}

async fn tokenize(
    State(lm): State<Shared>,
    Json(req): Json<TokenizeRequest>,
) -> Result<Json<TokenizeResponse>, ApiError> {
    let tokens = lm.tokenize(&req.text)?;
    Ok(Json(TokenizeResponse {
        tokens: tokens.into_iter().map(|t| (t.id, t.surface)).collect(),
    }))
}

async fn detokenize(
    State(lm): State<Shared>,
    Json(req): Json<DetokenizeRequest>,
) -> Result<Json<DetokenizeResponse>, ApiError> {
    let (text, offsets) = lm.detokenize_with_offsets(&req.tokens)?;
    Ok(Json(DetokenizeResponse {
        text,
        offsets: offsets.into_iter().map(|r| (r.start, r.end)).collect(),
    }))
}

async fn info(State(lm): State<Shared>) -> Json<InfoResponse> {
    Json(InfoResponse::from(&lm.capabilities()))
}

pub fn router(backend: Shared) -> Router {
    Router::new()
        .route(NEXT_PATH, post(next))
        .route(TOKENIZE_PATH, post(tokenize))
        .route(DETOKENIZE_PATH, post(detokenize))
        .route(INFO_PATH, get(info))
        .with_state(backend)
}

/// Serves until the process is stopped.
pub fn serve_blocking(backend: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("serving {} on {}", backend.describe(), listener.local_addr()?);
        axum::serve(listener, router(backend)).await
    })
}

/// A server running on its own thread, stopped on drop.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Starts a server on an ephemeral local port.
pub fn spawn_background(backend: Shared) -> std::io::Result<BackgroundServer> {
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            axum::serve(listener, router(backend))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(BackgroundServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
