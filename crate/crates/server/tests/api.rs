use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use mobility_core::analytics::dataset_stats;
use mobility_core::gtfs::load_gtfs;
use mobility_core::ingest::{FixedClock, IngestService, TraceUploadEnvelope};
use mobility_core::privacy::PrivacyKey;
use mobility_core::sources::{load_street_segments, parse_fcd_csv, parse_query_log_csv};
use mobility_core::store::Store;
use mobility_server::{router, AppState, ErrorBody};
use serde_json::{json, Value};
use tower::ServiceExt;

const RIDER: &str = "fixture-rider@example.org";

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn envelopes(name: &str) -> Vec<TraceUploadEnvelope> {
    std::fs::read_to_string(fixtures().join("traces").join(name))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn service(store: Store, with_feed: bool) -> Arc<IngestService> {
    let key = PrivacyKey::from_bytes(b"server-test-key-0123456789abcdefgh".to_vec()).unwrap();
    let clock = Arc::new(FixedClock(Utc.with_ymd_and_hms(2018, 1, 1, 12, 0, 0).unwrap()));
    let svc = IngestService::new(Arc::new(store), key, Default::default()).with_clock(clock);
    let svc = if with_feed { svc.with_feed(load_gtfs(fixtures().join("gtfs")).unwrap()) } else { svc };
    Arc::new(svc)
}

fn app(svc: &Arc<IngestService>) -> Router {
    router(AppState {
        service: svc.clone(),
        auto_process: false,
    })
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json_of(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Grants consent and uploads both fixture recordings; returns the pseudonym.
async fn seeded(app: &Router) -> String {
    let (s, consent) = json_of(app, Method::POST, "/consents", Some(json!({"user_token": RIDER, "policy_version": "v1"}))).await;
    assert_eq!(s, StatusCode::OK);
    for name in ["tram.jsonl", "bicycle.jsonl"] {
        for e in envelopes(name) {
            let (s, _) = call(app, Method::POST, "/traces", Some(serde_json::to_value(&e).unwrap())).await;
            assert_eq!(s, StatusCode::OK);
        }
    }
    let (s, tally) = json_of(app, Method::POST, "/jobs/run", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(tally["processed"], 2);
    consent["pseudonym"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn upload_process_and_read_back() {
    let svc = service(Store::in_memory(), true);
    let app = app(&svc);
    let p = seeded(&app).await;

    let (s, stats) = json_of(&app, Method::GET, "/stats", None).await;
    assert_eq!(s, StatusCode::OK);
    let expected = serde_json::to_value(dataset_stats(svc.snapshot().trips().values())).unwrap();
    assert_eq!(stats, expected);
    assert_eq!((stats["user_count"].as_u64(), stats["trip_count"].as_u64()), (Some(1), Some(2)));

    let (s, share) = json_of(&app, Method::GET, &format!("/users/{p}/stats"), None).await;
    assert_eq!(s, StatusCode::OK);
    let rows = share["rows"].as_array().unwrap();
    let count = |m: &str| rows.iter().find(|r| r["mode"] == m).unwrap()["trip_count"].as_u64().unwrap();
    assert_eq!((count("Tram"), count("Bicycle"), count("Car")), (1, 1, 0));

    let tram_trip = svc.snapshot().trips().keys().find(|id| svc.snapshot().segments_of(id)[0].label.mode == mobility_core::inference::TravelMode::Tram).unwrap().clone();
    let (s, trip) = json_of(&app, Method::GET, &format!("/trips/{tram_trip}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(trip["owner"], p.as_str());
    assert_eq!(trip["segments"][0]["enrichment"]["route_id"], "L10");
    assert_eq!(trip["segments"][0]["enrichment"]["entry_stop_id"], "S1");

    let (s, fc) = call(&app, Method::GET, "/export/trips.geojson?mode=Tram", None).await;
    assert_eq!(s, StatusCode::OK);
    let fc: Value = serde_json::from_slice(&fc).unwrap();
    assert_eq!(fc["type"], "FeatureCollection");
    assert_eq!(fc["features"].as_array().unwrap().len(), 1);
    assert_eq!(fc["features"][0]["properties"]["route"], "L10");
    let (_, all) = json_of(&app, Method::GET, &format!("/export/trips.geojson?pseudonym={p}&from=2017-01-01&to=2030-01-01"), None).await;
    assert_eq!(all["features"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn empty_store_exports_empty_collection() {
    let app = app(&service(Store::in_memory(), false));
    let (s, body) = call(&app, Method::GET, "/export/trips.geojson", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, br#"{"type":"FeatureCollection","features":[]}"#);
}

#[tokio::test]
async fn delete_then_stats_is_not_found() {
    let app = app(&service(Store::in_memory(), true));
    let p = seeded(&app).await;
    let (s, receipt) = json_of(&app, Method::DELETE, &format!("/users/{p}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(receipt["trips_deleted"], 2);
    let (s, err) = json_of(&app, Method::GET, &format!("/users/{p}/stats"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "not_found");
    let (s, err) = json_of(&app, Method::GET, &format!("/users/{p}/export"), None).await;
    assert_eq!((s, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
}

#[tokio::test]
async fn upload_without_consent_is_refused() {
    let app = app(&service(Store::in_memory(), true));
    let env = serde_json::to_value(&envelopes("bicycle.jsonl")[0]).unwrap();
    let (s, b) = call(&app, Method::POST, "/traces", Some(env)).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let err: ErrorBody = serde_json::from_slice(&b).unwrap();
    assert_eq!(err.code, "no_consent");
    assert!(!err.message.is_empty());
}

#[tokio::test]
async fn error_bodies_are_uniform() {
    let app = app(&service(Store::in_memory(), false));
    for (method, uri, body, status, code) in [
        (Method::GET, "/trips/nope", None, StatusCode::NOT_FOUND, "not_found"),
        (Method::GET, "/no/such/path", None, StatusCode::NOT_FOUND, "not_found"),
        (Method::GET, "/users/not-a-pseudonym/stats", None, StatusCode::BAD_REQUEST, "bad_request"),
        (Method::GET, "/segments/congestion", None, StatusCode::BAD_REQUEST, "bad_request"),
        (Method::GET, "/stops/S1/queries?date=2017-12-17&bucket=7", None, StatusCode::BAD_REQUEST, "bad_request"),
        (Method::GET, "/events/impact?lat=52.36&lon=9.73&time=2017-12-17T15:30:00Z&radius=600", None, StatusCode::SERVICE_UNAVAILABLE, "feed_unavailable"),
        (Method::GET, "/export/trips.geojson?mode=Hovercraft", None, StatusCode::BAD_REQUEST, "bad_request"),
        (Method::POST, "/traces", Some(json!({"nonsense": true})), StatusCode::BAD_REQUEST, "bad_request"),
        (
            Method::POST,
            "/traces",
            Some(json!({"client_message_id": "", "user_token": RIDER, "recording_action": "Start", "points": []})),
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_envelope",
        ),
    ] {
        let (s, b) = call(&app, method, uri, body).await;
        let err: ErrorBody = serde_json::from_slice(&b).unwrap_or_else(|_| panic!("{uri}: {}", String::from_utf8_lossy(&b)));
        assert_eq!((s, err.code.as_str()), (status, code), "{uri}");
    }
}

#[tokio::test]
async fn analytics_endpoints_delegate() {
    let svc = service(Store::in_memory(), true);
    let read = |n: &str| std::fs::read(fixtures().join(n)).unwrap();
    svc.ingest_fcd(parse_fcd_csv(read("fcd.csv").as_slice()).unwrap().records).unwrap();
    svc.ingest_queries(parse_query_log_csv(read("queries.csv").as_slice()).unwrap().records).unwrap();
    svc.ingest_streets(load_street_segments(read("streets.geojson").as_slice()).unwrap()).unwrap();
    let app = app(&svc);

    let (s, levels) = json_of(&app, Method::GET, "/segments/congestion?at=2017-12-17T14:40:00Z", None).await;
    assert_eq!(s, StatusCode::OK);
    let levels: Vec<(String, String)> = levels
        .as_array()
        .unwrap()
        .iter()
        .map(|l| (l["segment_id"].as_str().unwrap().into(), l["level"].as_str().unwrap().into()))
        .collect();
    assert_eq!(levels, [("seg1".into(), "Heavy".into()), ("seg2".into(), "Low".into()), ("seg3".into(), "Heavy".into())]);

    let (s, series) = json_of(&app, Method::GET, "/stops/S1/queries?date=2017-12-17&bucket=3600", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(series["counts"].as_array().unwrap().len(), 24);
    let (s, _) = json_of(&app, Method::GET, "/stops/NOPE/queries?date=2017-12-17", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // the fixture query log covers a single day: no baseline
    let (s, err) = json_of(&app, Method::GET, "/events/impact?lat=52.3601&lon=9.7312&time=2017-12-17T15:30:00Z&radius=600", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "insufficient_history");
    assert_eq!(err["detail"]["required"], 4);
}

#[tokio::test]
async fn responses_and_store_never_carry_the_raw_token() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(Store::open(dir.path()).unwrap(), true);
    let app = app(&svc);
    let mut bodies: Vec<Vec<u8>> = Vec::new();
    let (_, b) = call(&app, Method::POST, "/consents", Some(json!({"user_token": RIDER, "policy_version": "v1"}))).await;
    let p = serde_json::from_slice::<Value>(&b).unwrap()["pseudonym"].as_str().unwrap().to_string();
    bodies.push(b);
    for name in ["tram.jsonl", "bicycle.jsonl"] {
        for e in envelopes(name) {
            let v = serde_json::to_value(&e).unwrap();
            bodies.push(call(&app, Method::POST, "/traces", Some(v.clone())).await.1);
            bodies.push(call(&app, Method::POST, "/traces", Some(v)).await.1);
        }
    }
    bodies.push(call(&app, Method::POST, "/jobs/run", None).await.1);
    for uri in [
        format!("/users/{p}/stats"),
        format!("/users/{p}/export"),
        "/stats".to_string(),
        "/export/trips.geojson".to_string(),
        format!("/users/{RIDER}/stats"),
        format!("/users/{RIDER}/export"),
    ] {
        bodies.push(call(&app, Method::GET, &uri, None).await.1);
    }
    for id in svc.snapshot().trips().keys() {
        bodies.push(call(&app, Method::GET, &format!("/trips/{id}"), None).await.1);
    }
    let mut stored = Vec::new();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        stored.extend(std::fs::read(entry.unwrap().path()).unwrap());
    }
    bodies.push(stored);
    for b in &bodies {
        let text = String::from_utf8_lossy(b);
        for needle in [RIDER, "fixture-rider", "example.org"] {
            assert!(!text.contains(needle), "{needle:?} leaked in {text}");
        }
    }
}

#[tokio::test]
async fn consent_withdrawal_blocks_uploads() {
    let app = app(&service(Store::in_memory(), true));
    let p = seeded(&app).await;
    let (s, receipt) = json_of(&app, Method::DELETE, &format!("/users/{p}/consent"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(receipt["trips_deleted"], 2);
    let env = serde_json::to_value(&envelopes("bicycle.jsonl")[0]).unwrap();
    let (s, err) = json_of(&app, Method::POST, "/traces", Some(env)).await;
    assert_eq!((s, err["code"].as_str()), (StatusCode::FORBIDDEN, Some("no_consent")));
}

#[tokio::test]
async fn auto_processing_enriches_after_stop() {
    let svc = service(Store::in_memory(), true);
    let app = router(AppState {
        service: svc.clone(),
        auto_process: true,
    });
    json_of(&app, Method::POST, "/consents", Some(json!({"user_token": RIDER, "policy_version": "v1"}))).await;
    let mut job = None;
    for e in envelopes("tram.jsonl") {
        let (_, r) = json_of(&app, Method::POST, "/traces", Some(serde_json::to_value(&e).unwrap())).await;
        job = r["job_id"].as_str().map(String::from).or(job);
    }
    let job = job.unwrap();
    for _ in 0..200 {
        let (_, rec) = json_of(&app, Method::GET, &format!("/jobs/{job}"), None).await;
        if rec["stage"] == "Enriched" {
            return;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    panic!("job {job} never reached Enriched");
}
