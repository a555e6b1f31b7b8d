use std::str::FromStr;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::{DateTime, NaiveDate, Utc};
use mobility_core::analytics::{
    congestion_snapshot, dataset_stats as stats_of, event_impact_report, mode_share, stop_query_timeseries,
    EventImpactReport, EventImpactRequest, DEFAULT_BUCKET_WIDTH_S,
};
use mobility_core::geo::GeoPoint;
use mobility_core::geojson::{export_trips_geojson, TripFilter};
use mobility_core::inference::TravelMode;
use mobility_core::ingest::TraceUploadEnvelope;
use mobility_core::privacy::Pseudonym;
use mobility_core::store::{JobRecord, SegmentRecord};
use mobility_core::trace::{Trip, TripId};
use serde::{Deserialize, Serialize};

use crate::{ApiError, AppState};

type ApiResult<T> = Result<T, ApiError>;

fn body<T>(r: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    r.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query<T>(r: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    r.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn pseudonym(raw: &str) -> ApiResult<Pseudonym> {
    Ok(Pseudonym::from_str(raw)?)
}

/// Blocking store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

pub async fn health() -> &'static str {
    "ok"
}

pub async fn no_route() -> ApiError {
    ApiError::not_found("no such endpoint")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentRequest {
    pub user_token: String,
    pub policy_version: String,
}

pub async fn grant_consent(State(s): State<AppState>, req: Result<Json<ConsentRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(req)?;
    blocking(move || Ok(Json(s.service.grant_consent(&req.user_token, &req.policy_version)?).into_response())).await
}

pub async fn withdraw_consent(State(s): State<AppState>, Path(p): Path<String>) -> ApiResult<Response> {
    let p = pseudonym(&p)?;
    blocking(move || Ok(Json(s.service.withdraw_consent(&p)?).into_response())).await
}

pub async fn submit_traces(
    State(s): State<AppState>,
    env: Result<Json<TraceUploadEnvelope>, JsonRejection>,
) -> ApiResult<Response> {
    let env = body(env)?;
    let svc = s.service.clone();
    let response = blocking(move || Ok(svc.submit_trace_batch(&env)?)).await?;
    if s.auto_process {
        if let Some(job_id) = response.job_id.clone() {
            let svc = s.service.clone();
            tokio::task::spawn_blocking(move || {
                if let Err(e) = svc.run_processing_job(&job_id) {
                    tracing::warn!(%job_id, error = %e, "processing job did not finish");
                }
            });
        }
    }
    Ok(Json(response).into_response())
}

pub async fn run_jobs(State(s): State<AppState>) -> ApiResult<Response> {
    blocking(move || Ok(Json(s.service.run_pending_jobs()).into_response())).await
}

pub async fn job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    let snap = s.service.snapshot();
    snap.jobs().get(&id).cloned().map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripView {
    #[serde(flatten)]
    pub trip: Trip,
    pub segments: Vec<SegmentRecord>,
}

pub async fn trip(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TripView>> {
    let snap = s.service.snapshot();
    let id = TripId(id);
    let trip = snap.trip(&id).ok_or_else(|| ApiError::not_found(format!("unknown trip {id}")))?;
    Ok(Json(TripView {
        trip: trip.clone(),
        segments: snap.segments_of(&id).to_vec(),
    }))
}

fn known_user(s: &AppState, raw: &str) -> ApiResult<Pseudonym> {
    let p = pseudonym(raw)?;
    if !s.service.snapshot().vault().contains_key(&p) {
        return Err(ApiError::not_found(format!("unknown pseudonym {p}")));
    }
    Ok(p)
}

pub async fn user_stats(State(s): State<AppState>, Path(p): Path<String>) -> ApiResult<Response> {
    let p = known_user(&s, &p)?;
    Ok(Json(mode_share(&s.service.snapshot().mode_samples_of(&p))).into_response())
}

pub async fn export_user(State(s): State<AppState>, Path(p): Path<String>) -> ApiResult<Response> {
    let p = pseudonym(&p)?;
    let dump = s.service.export_user(&p)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], dump).into_response())
}

pub async fn erase_user(State(s): State<AppState>, Path(p): Path<String>) -> ApiResult<Response> {
    let p = pseudonym(&p)?;
    blocking(move || Ok(Json(s.service.erase_user(&p)?).into_response())).await
}

pub async fn dataset_stats(State(s): State<AppState>) -> Response {
    Json(stats_of(s.service.snapshot().trips().values())).into_response()
}

#[derive(Debug, Deserialize)]
pub struct StopQueriesParams {
    date: NaiveDate,
    #[serde(default)]
    bucket: Option<u32>,
}

pub async fn stop_queries(
    State(s): State<AppState>,
    Path(stop): Path<String>,
    q: Result<Query<StopQueriesParams>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    if let Some(feed) = s.service.feed() {
        if feed.stop(&stop).is_none() {
            return Err(ApiError::not_found(format!("unknown stop {stop}")));
        }
    }
    let snap = s.service.snapshot();
    let series = stop_query_timeseries(snap.queries(), &stop, q.date, q.bucket.unwrap_or(DEFAULT_BUCKET_WIDTH_S))?;
    Ok(Json(series).into_response())
}

#[derive(Debug, Deserialize)]
pub struct CongestionParams {
    at: DateTime<Utc>,
}

pub async fn congestion(State(s): State<AppState>, q: Result<Query<CongestionParams>, QueryRejection>) -> ApiResult<Response> {
    let q = query(q)?;
    let snap = s.service.snapshot();
    Ok(Json(congestion_snapshot(snap.fcd(), q.at, &s.service.config().congestion)).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ImpactParams {
    lat: f64,
    lon: f64,
    time: DateTime<Utc>,
    radius: f64,
    /// History lookback in seconds.
    #[serde(default)]
    horizon: Option<i64>,
    #[serde(default)]
    bucket: Option<u32>,
}

pub async fn event_impact(State(s): State<AppState>, q: Result<Query<ImpactParams>, QueryRejection>) -> ApiResult<Json<EventImpactReport>> {
    let q = query(q)?;
    let venue = GeoPoint::new(q.lat, q.lon).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if !(q.radius.is_finite() && q.radius >= 0.0) {
        return Err(ApiError::bad_request("radius must be a non-negative number of metres"));
    }
    let feed = s
        .service
        .feed()
        .ok_or_else(|| ApiError::new(axum::http::StatusCode::SERVICE_UNAVAILABLE, "feed_unavailable", "no transit feed loaded"))?;
    let mut req = EventImpactRequest::new(venue, q.time, q.radius);
    if let Some(h) = q.horizon {
        req.history_horizon_s = h;
    }
    if let Some(b) = q.bucket {
        req.bucket_width_s = b;
    }
    let snap = s.service.snapshot();
    let streets: Vec<_> = snap.streets().values().cloned().collect();
    let report = event_impact_report(&req, snap.fcd(), &streets, snap.queries(), &feed, &s.service.config().congestion)?;
    Ok(Json(report))
}

#[derive(Debug, Deserialize)]
pub struct GeojsonParams {
    #[serde(default)]
    pseudonym: Option<String>,
    #[serde(default)]
    from: Option<NaiveDate>,
    #[serde(default)]
    to: Option<NaiveDate>,
    #[serde(default)]
    mode: Option<String>,
}

pub async fn export_geojson(State(s): State<AppState>, q: Result<Query<GeojsonParams>, QueryRejection>) -> ApiResult<Response> {
    let q = query(q)?;
    let filter = TripFilter {
        pseudonym: q.pseudonym.as_deref().map(pseudonym).transpose()?,
        from: q.from,
        to: q.to,
        mode: q
            .mode
            .as_deref()
            .map(|m| TravelMode::from_str(m).map_err(|_| ApiError::bad_request(format!("unknown mode {m:?}"))))
            .transpose()?,
    };
    let fc = export_trips_geojson(&s.service.snapshot(), &filter);
    Ok(([(header::CONTENT_TYPE, "application/geo+json")], fc.to_json()).into_response())
}
