//! HTTP surface of the pipeline.
//!
//! | Method | Path | Body / query | Response |
//! |---|---|---|---|
//! | POST | `/consents` | `{user_token, policy_version}` | consent record |
//! | DELETE | `/users/{p}/consent` | | erasure receipt |
//! | POST | `/traces` | upload envelope | `{trip_id, points_accepted, points_dropped, job_id?}` |
//! | POST | `/jobs/run` | | stage tally |
//! | GET | `/jobs/{id}` | | job record |
//! | GET | `/trips/{id}` | | trip with segments |
//! | GET | `/users/{p}/stats` | | mode share |
//! | GET | `/users/{p}/export` | | JSON lines |
//! | DELETE | `/users/{p}` | | erasure receipt |
//! | GET | `/stats` | | dataset stats |
//! | GET | `/stops/{id}/queries` | `date`, `bucket` | query time series |
//! | GET | `/segments/congestion` | `at` | congestion levels |
//! | GET | `/events/impact` | `lat`, `lon`, `time`, `radius`, `horizon?`, `bucket?` | impact report |
//! | GET | `/export/trips.geojson` | `pseudonym?`, `from?`, `to?`, `mode?` | FeatureCollection |
//!
//! Errors are `{code, message, detail}` with a matching HTTP status.

mod error;
mod handlers;

use std::sync::Arc;

use axum::routing::{delete, get, post};
use axum::Router;
use mobility_core::ingest::IngestService;

pub use error::{ApiError, ErrorBody};
pub use handlers::{ConsentRequest, TripView};

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<IngestService>,
    /// Run a trip's processing job in the background as soon as its Stop
    /// envelope is accepted.
    pub auto_process: bool,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(handlers::health))
        .route("/consents", post(handlers::grant_consent))
        .route("/users/{pseudonym}/consent", delete(handlers::withdraw_consent))
        .route("/traces", post(handlers::submit_traces))
        .route("/jobs/run", post(handlers::run_jobs))
        .route("/jobs/{id}", get(handlers::job))
        .route("/trips/{id}", get(handlers::trip))
        .route("/users/{pseudonym}/stats", get(handlers::user_stats))
        .route("/users/{pseudonym}/export", get(handlers::export_user))
        .route("/users/{pseudonym}", delete(handlers::erase_user))
        .route("/stats", get(handlers::dataset_stats))
        .route("/stops/{id}/queries", get(handlers::stop_queries))
        .route("/segments/congestion", get(handlers::congestion))
        .route("/events/impact", get(handlers::event_impact))
        .route("/export/trips.geojson", get(handlers::export_geojson))
        .fallback(handlers::no_route)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
