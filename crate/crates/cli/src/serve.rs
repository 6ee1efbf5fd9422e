//! Read-only JSON search service.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use phrasal::encoder::{load_checkpoint, PhraseEncoder};
use phrasal::index::PhraseIndex;
use phrasal::pipeline::SpanSelection;

use crate::search::{search_text, SearchRequest};

struct Inner {
    encoder: PhraseEncoder,
    index: PhraseIndex,
    selection: SpanSelection,
    lang: String,
    ready: AtomicBool,
}

/// Shared, immutable service state plus the readiness flag.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Refuses an index whose dimension or source model does not match the
    /// checkpoint.
    pub fn new(encoder: PhraseEncoder, index: PhraseIndex, selection: SpanSelection, lang: &str) -> anyhow::Result<Self> {
        if index.dim() != encoder.out_dim() {
            anyhow::bail!(
                "index dimension {} does not match model output dimension {}",
                index.dim(),
                encoder.out_dim()
            );
        }
        Ok(AppState(Arc::new(Inner {
            encoder,
            index,
            selection,
            lang: lang.to_string(),
            ready: AtomicBool::new(false),
        })))
    }

    pub fn load(model: &Path, index: &Path, selection: SpanSelection, lang: &str) -> anyhow::Result<Self> {
        let encoder = load_checkpoint(model)?;
        let index_data = PhraseIndex::load(index)?;
        crate::commands::check_index_model(index, model)?;
        Self::new(encoder, index_data, selection, lang)
    }

    pub fn is_ready(&self) -> bool {
        self.0.ready.load(Ordering::Acquire)
    }

    /// Touches every index row and runs one query, then marks the service
    /// ready.
    pub fn warm_up(&self) -> anyhow::Result<()> {
        let inner = &self.0;
        if inner.index.len() > 0 {
            let probe = vec![0.0f32; inner.index.dim()];
            inner.index.search(&[probe], 1)?;
        }
        search_text(&inner.encoder, &inner.index, "warm up", &inner.lang, inner.selection, 1)?;
        inner.ready.store(true, Ordering::Release);
        Ok(())
    }
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

async fn healthz(State(state): State<AppState>) -> Response {
    if state.is_ready() {
        (StatusCode::OK, Json(json!({ "status": "ok" }))).into_response()
    } else {
        error(StatusCode::SERVICE_UNAVAILABLE, "warming up")
    }
}

async fn search(State(state): State<AppState>, body: Result<Json<SearchRequest>, JsonRejection>) -> Response {
    if !state.is_ready() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "warming up");
    }
    let Json(req) = match body {
        Ok(b) => b,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    if req.k == 0 {
        return error(StatusCode::BAD_REQUEST, "k must be >= 1");
    }
    let result = tokio::task::spawn_blocking(move || {
        let inner = &state.0;
        search_text(&inner.encoder, &inner.index, &req.text, &inner.lang, inner.selection, req.k)
    })
    .await;
    match result {
        Ok(Ok(resp)) => (StatusCode::OK, Json(resp)).into_response(),
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/search", post(search))
        .with_state(state)
}

/// Serves on `listener`, warming up in the background, until `shutdown`
/// resolves.
pub async fn run(listener: TcpListener, state: AppState, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
    let warm = state.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = warm.warm_up() {
            log::error!("warm-up failed: {e:#}");
        }
    });
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

pub async fn bind(addr: SocketAddr) -> anyhow::Result<TcpListener> {
    Ok(TcpListener::bind(addr).await?)
}
