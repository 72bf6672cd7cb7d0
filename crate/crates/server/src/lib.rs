//! HTTP/JSON front end for adaptrial experiments.
//!
//! Every mutating request runs under its experiment's write lock, appends its
//! events to the store and then publishes them on the experiment's feed, which
//! backs the `/events` server-sent event stream.

pub mod app;
pub mod config;
pub mod error;
pub mod routes;
pub mod views;

use std::sync::Arc;

pub use app::App;
pub use config::ServerConfig;
pub use error::{ApiError, ErrorBody};
pub use routes::router;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] adaptrial_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Build the shared state described by `config`.
pub fn build_app(config: &ServerConfig) -> Result<Arc<App>, ServerError> {
    Ok(match &config.data_dir {
        Some(dir) => App::with_file_store(adaptrial_core::FileStore::open(dir)?, config.token.clone(), config.seed)?,
        None => App::in_memory(config.token.clone(), config.seed),
    })
}

/// Serve until `shutdown` resolves, then snapshot every experiment.
pub async fn serve(
    config: ServerConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let app = build_app(&config)?;
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    tracing::info!(
        addr = %listener.local_addr()?,
        data_dir = ?config.data_dir,
        auth = config.token.is_some(),
        "listening"
    );
    axum::serve(listener, router(app.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    app.snapshot_all().await?;
    Ok(())
}
