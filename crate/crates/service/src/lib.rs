//! Refinement sessions for human users: upload a scan pair, get an initial
//! segmentation, submit brush strokes, get the refined segmentation back.

pub mod error;
pub mod http;
pub mod rle;
pub mod session;
pub mod stroke;

pub use error::{Result, ServiceError};
pub use http::{router, AppState, SubmitRequest};
pub use rle::RleMask;
pub use session::{Engine, ReplayReport, RoundMetrics, RoundRecord, ServiceConfig, SessionInputs, SessionManifest};
pub use stroke::{rasterize_strokes, Stroke};

use std::net::SocketAddr;

/// Serves until the process is stopped.
pub async fn serve(engine: Engine, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(AppState::new(engine))).await
}
