//! HTTP+JSON front end for active-learning sessions.
//!
//! A human oracle fetches the pending query, posts a label, and watches the
//! predictions update. Sessions live in directories under a root path and are
//! replayed from their journals on startup.

mod api;
mod error;
mod store;

use std::future::Future;
use std::sync::Arc;

pub use api::router;
pub use error::ApiError;
pub use store::{CreateRequest, SeedLabel, SessionMeta, SessionSlot, SessionStore};

/// Serve `store` on `listener` until `shutdown` resolves, then finish in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<SessionStore>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await
}
