//! HTTP service and command-line front end for the soundscape engines.

pub mod api;
pub mod cli;
pub mod error;
pub mod jobs;
pub mod state;

pub use api::router;
pub use error::{ApiError, ApiResult, ErrorBody};
pub use state::{AppState, ServeConfig};

/// Binds `host:port` and serves until interrupted.
pub async fn serve(config: ServeConfig) -> ApiResult<()> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ApiError::Internal(format!("cannot bind {addr}: {e}")))?;
    serve_on(listener, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> ApiResult<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}
