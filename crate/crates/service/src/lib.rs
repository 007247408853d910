//! HTTP service for latentsteer jobs: create and control runs, stream
//! their progress as server-sent events, and serve frames from disk.

pub mod api;
pub mod error;
pub mod manager;
pub mod settings;

use std::future::Future;
use std::io;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::router;
pub use error::ApiError;
pub use manager::{Control, CreateJob, JobSummary, Manager};
pub use settings::Settings;

/// Installs a `RUST_LOG`-driven log subscriber; later calls are no-ops.
pub fn init_tracing() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .try_init();
}

/// Binds `settings.listen_addr` and serves until `shutdown` resolves.
pub async fn serve(settings: Settings, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    let listener = TcpListener::bind(settings.listen_addr)
        .await
        .map_err(|e| io::Error::new(e.kind(), format!("cannot listen on {}: {e}", settings.listen_addr)))?;
    serve_on(listener, settings, shutdown).await
}

/// Serves on an already bound listener. On shutdown every live job is
/// checkpointed before this returns.
pub async fn serve_on(
    listener: TcpListener,
    settings: Settings,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    let manager = Manager::open(settings).await.map_err(io::Error::other)?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let m = Arc::clone(&manager);
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(async move {
            shutdown.await;
            tracing::info!("shutting down");
            m.shutdown().await;
        })
        .await
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
