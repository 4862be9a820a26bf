//! Read-only static file server for a bundle and, optionally, viewer assets.
//!
//! Bundle files are served from the root (`/manifest.json`, `/atlas_rgb.png`,
//! ...), viewer assets under `/viewer/`. Only GET and HEAD are answered;
//! range requests and content types come from `tower_http::services::ServeDir`.

use std::future::Future;
use std::path::PathBuf;

use axum::Router;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub fn router(bundle: PathBuf, viewer: Option<PathBuf>) -> Router {
    let mut app = Router::new();
    if let Some(dir) = viewer {
        app = app.nest_service("/viewer", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app.fallback_service(ServeDir::new(bundle))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    bundle: PathBuf,
    viewer: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(bundle, viewer))
        .with_graceful_shutdown(shutdown)
        .await
}
