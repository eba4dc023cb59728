//! HTTP and WebSocket facade over a live or completed exploration run.
//!
//! | route | |
//! |---|---|
//! | `GET /status` | stage, runs done, pause state, pending leaves |
//! | `GET /tree` | node table of the latest committed stage |
//! | `GET /leaves/{id}/representatives?n=6` | most diverse members of a leaf |
//! | `POST /leaves/{id}/score` | `{"score": s}` with `s ≥ 0`, applied at the next pause |
//! | `POST /control/resume` | ends a feedback pause |
//! | `GET /patterns/{run}.png` | final pattern as grayscale PNG |
//! | `GET /diversity?bc=&bins=&class=` | cumulative binning diversity |
//! | `GET /rsa` | leaf-pairwise CKA |
//! | `WS /events` | snapshot, then engine events |

mod error;
mod routes;
mod snapshot;
mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use error::ServiceError;
pub use routes::router;
pub use snapshot::{NodeSummary, Snapshot};
pub use state::{attach_live, LiveEngine, Publisher, ServiceState, Status, EVENT_BUFFER};

/// Serves `state` on `addr` until the process ends.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
